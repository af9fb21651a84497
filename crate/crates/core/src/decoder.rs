//! GRU decoder with coverage attention over one or two annotation grids.
//!
//! Each step runs a first GRU on the previous symbol embedding, attends to the
//! low- and high-resolution grids with that prediction, concatenates the two
//! contexts, and refines the state with a second GRU on the context. Symbol
//! scores come from a maxout layer over embedding, state and context.

use rand_chacha::ChaCha8Rng;

use crate::encoder::Annotations;
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::param::{glorot_uniform, he_uniform, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// GRU state size `n`.
    pub hidden: usize,
    /// Embedding and output-layer size `m`; must be even for maxout.
    pub embedding: usize,
    /// Attention size `n'`.
    pub attention: usize,
    /// Coverage convolution filters `q`.
    pub coverage_filters: usize,
    pub kernel_low: usize,
    pub kernel_high: usize,
    /// Both heads use one state projection `U_s`. Disabling it exists only as a
    /// negative control.
    pub shared_state_projection: bool,
}

impl DecoderConfig {
    pub fn full() -> Self {
        DecoderConfig {
            hidden: 256,
            embedding: 256,
            attention: 512,
            coverage_filters: 256,
            kernel_low: 11,
            kernel_high: 7,
            shared_state_projection: true,
        }
    }

    pub fn toy() -> Self {
        DecoderConfig {
            hidden: 16,
            embedding: 16,
            attention: 32,
            coverage_filters: 8,
            kernel_low: 11,
            kernel_high: 7,
            shared_state_projection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.embedding, self.attention, self.coverage_filters];
        if dims.contains(&0) {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if !self.embedding.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embedding size {} must be even for maxout",
                self.embedding
            )));
        }
        for k in [self.kernel_low, self.kernel_high] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("coverage kernel {k} must be odd")));
            }
        }
        Ok(())
    }
}

fn matrix(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    Ok(store.add(name, glorot_uniform(&[rows, cols], cols, rows, rng))?)
}

fn bias(store: &mut ParamStore, name: &str, len: usize) -> Result<ParamId> {
    Ok(store.add(name, Tensor::zeros([len]))?)
}

/// `z = σ(W_xz x + U_hz h + b_z)`, `r = σ(W_xr x + U_hr h + b_r)`,
/// `h̃ = tanh(W_xh x + U_rh (r ⊙ h) + b_h)`, `h' = h + z ⊙ (h̃ − h)`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_xz: ParamId,
    pub w_xr: ParamId,
    pub w_xh: ParamId,
    pub u_hz: ParamId,
    pub u_hr: ParamId,
    pub u_rh: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(GruCell {
            w_xz: matrix(store, &format!("{name}.w_xz"), hidden, input, rng)?,
            w_xr: matrix(store, &format!("{name}.w_xr"), hidden, input, rng)?,
            w_xh: matrix(store, &format!("{name}.w_xh"), hidden, input, rng)?,
            u_hz: matrix(store, &format!("{name}.u_hz"), hidden, hidden, rng)?,
            u_hr: matrix(store, &format!("{name}.u_hr"), hidden, hidden, rng)?,
            u_rh: matrix(store, &format!("{name}.u_rh"), hidden, hidden, rng)?,
            b_z: bias(store, &format!("{name}.b_z"), hidden)?,
            b_r: bias(store, &format!("{name}.b_r"), hidden)?,
            b_h: bias(store, &format!("{name}.b_h"), hidden)?,
        })
    }

    /// One update of `h[N, n]` from input `x[N, in]`.
    pub fn forward(&self, f: &mut Forward<'_>, x: Var, h: Var) -> Result<Var> {
        let gate = |f: &mut Forward<'_>, w, u, b, hin: Var| -> Result<Var> {
            let (w, u, b) = (f.param(w), f.param(u), f.param(b));
            let a = f.tape.linear(x, w, Some(b))?;
            let c = f.tape.linear(hin, u, None)?;
            Ok(f.tape.add(a, c)?)
        };
        let z = gate(f, self.w_xz, self.u_hz, self.b_z, h)?;
        let z = f.tape.sigmoid(z);
        let r = gate(f, self.w_xr, self.u_hr, self.b_r, h)?;
        let r = f.tape.sigmoid(r);
        let rh = f.tape.mul(r, h)?;
        let cand = gate(f, self.w_xh, self.u_rh, self.b_h, rh)?;
        let cand = f.tape.tanh(cand);
        let delta = f.tape.sub(cand, h)?;
        let step = f.tape.mul(z, delta)?;
        Ok(f.tape.add(h, step)?)
    }
}

/// An annotation grid prepared for attention.
#[derive(Debug, Clone)]
pub struct Grid {
    /// Annotations `[N, C, H, W]`.
    pub annot: Var,
    /// `U_a · a_i + b` for every cell, `[N, n', H, W]`.
    pub proj: Var,
    /// Validity `[N, H·W]`.
    pub mask: Tensor,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// `[N, C]`
    pub context: Var,
    /// `[N, H·W]`, exactly 0 on masked cells.
    pub alpha: Var,
    /// Pre-softmax energies `[N, H·W]`.
    pub energy: Var,
    /// Coverage after adding `alpha`, `[N, 1, H, W]`.
    pub coverage: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub u_a: ParamId,
    pub b_a: ParamId,
    pub q: ParamId,
    pub u_f: ParamId,
    pub nu: ParamId,
    pub u_s: ParamId,
}

impl AttentionHead {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &DecoderConfig,
        kernel: usize,
        u_s: ParamId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (na, q) = (cfg.attention, cfg.coverage_filters);
        Ok(AttentionHead {
            u_a: store.add(
                format!("{name}.u_a"),
                glorot_uniform(&[na, channels, 1, 1], channels, na, rng),
            )?,
            b_a: bias(store, &format!("{name}.b_a"), na)?,
            q: store.add(format!("{name}.q"), he_uniform(&[q, 1, kernel, kernel], kernel * kernel, rng))?,
            u_f: store.add(format!("{name}.u_f"), glorot_uniform(&[na, q, 1, 1], q, na, rng))?,
            nu: store.add(format!("{name}.nu"), glorot_uniform(&[1, na, 1, 1], na, 1, rng))?,
            u_s,
        })
    }

    pub fn kernel(&self, store: &ParamStore) -> usize {
        store.value(self.q).dim(2)
    }

    /// Prepares annotations `[N, C, H, W]` with a cell mask `[N, H, W]`.
    pub fn grid(&self, f: &mut Forward<'_>, annot: Var, mask: &Tensor) -> Result<Grid> {
        let shape = f.tape.shape(annot).to_vec();
        let [n, _, h, w] = shape[..] else {
            return Err(Error::Input(format!("annotations must be [N, C, H, W], got {shape:?}")));
        };
        if mask.shape() != [n, h, w] {
            return Err(Error::Input(format!(
                "attention mask {:?} does not match annotations {shape:?}",
                mask.shape()
            )));
        }
        let (ua, ba) = (f.param(self.u_a), f.param(self.b_a));
        let proj = f.tape.conv2d(annot, ua, (1, 1), (0, 0))?;
        let proj = f.tape.add_channel(proj, ba)?;
        Ok(Grid {
            annot,
            proj,
            mask: mask.clone().reshape([n, h * w])?,
            height: h,
            width: w,
        })
    }

    /// Coverage attention with prediction `s_hat[N, n]` and coverage `[N, 1, H, W]`.
    pub fn attend(&self, f: &mut Forward<'_>, grid: &Grid, s_hat: Var, coverage: Var) -> Result<Attention> {
        let n = f.tape.shape(grid.annot)[0];
        let (h, w) = (grid.height, grid.width);
        let q = f.param(self.q);
        let pad = f.tape.shape(q)[2] / 2;
        let feats = f.tape.conv2d(coverage, q, (1, 1), (pad, pad))?;
        let uf = f.param(self.u_f);
        let cov = f.tape.conv2d(feats, uf, (1, 1), (0, 0))?;
        let us = f.param(self.u_s);
        let state = f.tape.linear(s_hat, us, None)?;
        let pre = f.tape.add(grid.proj, cov)?;
        let pre = f.tape.add_spatial(pre, state)?;
        let act = f.tape.tanh(pre);
        let nu = f.param(self.nu);
        let energy = f.tape.conv2d(act, nu, (1, 1), (0, 0))?;
        let energy = f.tape.reshape(energy, &[n, h * w])?;
        let alpha = f.tape.masked_softmax(energy, &grid.mask)?;
        let context = f.tape.weighted_sum(grid.annot, alpha)?;
        let a4 = f.tape.reshape(alpha, &[n, 1, h, w])?;
        let coverage = f.tape.add(coverage, a4)?;
        Ok(Attention {
            context,
            alpha,
            energy,
            coverage,
        })
    }
}

/// Prepared grids for one batch of images.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub low: Grid,
    pub high: Option<Grid>,
}

impl Prepared {
    pub fn batch(&self, tape: &crate::tape::Tape) -> usize {
        tape.shape(self.low.annot)[0]
    }
}

/// Recurrent state: `s[N, n]` and one coverage map `[N, 1, H, W]` per grid.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub s: Var,
    pub coverage_low: Var,
    pub coverage_high: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Unnormalized symbol scores `[N, K]`.
    pub logits: Var,
    pub state: DecoderState,
    pub low: Attention,
    pub high: Option<Attention>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    vocab_size: usize,
    pub embedding: ParamId,
    pub gru1: GruCell,
    pub gru2: GruCell,
    pub head_low: AttentionHead,
    pub head_high: Option<AttentionHead>,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_c: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

impl Decoder {
    /// `channels_high` is `None` for a single-scale encoder.
    pub fn new(
        config: &DecoderConfig,
        vocab_size: usize,
        channels_low: usize,
        channels_high: Option<usize>,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (n, m, na) = (config.hidden, config.embedding, config.attention);
        let embedding = store.add("dec.embed", glorot_uniform(&[vocab_size, m], m, vocab_size, rng))?;
        let gru1 = GruCell::new(store, "dec.gru1", m, n, rng)?;
        let context = channels_low + channels_high.unwrap_or(0);
        let gru2 = GruCell::new(store, "dec.gru2", context, n, rng)?;
        let u_s = matrix(store, "dec.u_s", na, n, rng)?;
        let head_low = AttentionHead::new(store, "dec.att_low", channels_low, config, config.kernel_low, u_s, rng)?;
        let head_high = match channels_high {
            Some(c) => {
                let u_s = if config.shared_state_projection {
                    u_s
                } else {
                    matrix(store, "dec.att_high.u_s", na, n, rng)?
                };
                Some(AttentionHead::new(store, "dec.att_high", c, config, config.kernel_high, u_s, rng)?)
            }
            None => None,
        };
        Ok(Decoder {
            config: config.clone(),
            vocab_size,
            embedding,
            gru1,
            gru2,
            head_low,
            head_high,
            w_s: matrix(store, "dec.out.w_s", m, n, rng)?,
            b_s: bias(store, "dec.out.b_s", m)?,
            w_c: matrix(store, "dec.out.w_c", m, context, rng)?,
            w_o: matrix(store, "dec.out.w_o", vocab_size, m / 2, rng)?,
            b_o: bias(store, "dec.out.b_o", vocab_size)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prepare(&self, f: &mut Forward<'_>, ann: &Annotations) -> Result<Prepared> {
        let low = self.head_low.grid(f, ann.low, &ann.mask_low)?;
        let high = match (&self.head_high, ann.high, &ann.mask_high) {
            (Some(head), Some(b), Some(mask)) => Some(head.grid(f, b, mask)?),
            (None, None, None) => None,
            _ => {
                return Err(Error::Input(
                    "annotation scales do not match the decoder's attention heads".into(),
                ))
            }
        };
        Ok(Prepared { low, high })
    }

    /// Zero state and zero coverage.
    pub fn initial_state(&self, f: &mut Forward<'_>, p: &Prepared) -> DecoderState {
        let n = p.batch(f.tape);
        let s = f.tape.constant(Tensor::zeros([n, self.config.hidden]));
        let coverage_low = f.tape.constant(Tensor::zeros([n, 1, p.low.height, p.low.width]));
        let coverage_high = p
            .high
            .as_ref()
            .map(|g| f.tape.constant(Tensor::zeros([n, 1, g.height, g.width])));
        DecoderState {
            s,
            coverage_low,
            coverage_high,
        }
    }

    /// One decoding step for every row, given each row's previous symbol.
    pub fn step(&self, f: &mut Forward<'_>, p: &Prepared, prev: &[usize], state: &DecoderState) -> Result<StepOutput> {
        if let Some(&bad) = prev.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = f.param(self.embedding);
        let emb = f.tape.embedding(table, prev)?;
        let s_hat = self.gru1.forward(f, emb, state.s)?;
        let low = self.head_low.attend(f, &p.low, s_hat, state.coverage_low)?;
        let high = match (&self.head_high, &p.high, state.coverage_high) {
            (Some(head), Some(grid), Some(cov)) => Some(head.attend(f, grid, s_hat, cov)?),
            _ => None,
        };
        let context = match high {
            Some(h) => f.tape.concat(&[low.context, h.context], 1)?,
            None => low.context,
        };
        let s = self.gru2.forward(f, context, s_hat)?;
        let (ws, bs, wc) = (f.param(self.w_s), f.param(self.b_s), f.param(self.w_c));
        let from_state = f.tape.linear(s, ws, Some(bs))?;
        let from_context = f.tape.linear(context, wc, None)?;
        let pre = f.tape.add(emb, from_state)?;
        let pre = f.tape.add(pre, from_context)?;
        let hidden = f.tape.maxout2(pre)?;
        let (wo, bo) = (f.param(self.w_o), f.param(self.b_o));
        let logits = f.tape.linear(hidden, wo, Some(bo))?;
        Ok(StepOutput {
            logits,
            state: DecoderState {
                s,
                coverage_low: low.coverage,
                coverage_high: high.map(|h| h.coverage),
            },
            low,
            high,
        })
    }

    /// Runs the decoder on ground-truth inputs. `inputs[i]` is row `i`'s
    /// `[<s>, w1, ..., wT]` (padded); returns one `[N, K]` logit matrix per step.
    pub fn teacher_forced(&self, f: &mut Forward<'_>, p: &Prepared, inputs: &[Vec<usize>]) -> Result<Vec<Var>> {
        let steps = inputs.first().map_or(0, Vec::len);
        if steps == 0 {
            return Err(Error::Input("empty target".into()));
        }
        if inputs.len() != p.batch(f.tape) || inputs.iter().any(|r| r.len() != steps) {
            return Err(Error::Input("input rows must match the batch and share one length".into()));
        }
        let mut state = self.initial_state(f, p);
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = inputs.iter().map(|r| r[t]).collect();
            let o = self.step(f, p, &prev, &state)?;
            out.push(o.logits);
            state = o.state;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::uniform;
    use crate::tape::{Mode, Tape};
    use rand::SeedableRng;

    struct Fixture {
        store: ParamStore,
        dec: Decoder,
        rng: ChaCha8Rng,
    }

    fn fixture(high: Option<usize>) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&DecoderConfig::toy(), 7, 5, high, &mut store, &mut rng).unwrap();
        Fixture { store, dec, rng }
    }

    fn annotations(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, mask_low: Tensor, high: bool) -> Annotations {
        let (h, w) = (mask_low.dim(1), mask_low.dim(2));
        let low = tape.constant(uniform(&[n, 5, h, w], 1.0, rng));
        let (hi, mask_high) = if high {
            let b = tape.constant(uniform(&[n, 3, 2 * h, 2 * w], 1.0, rng));
            let mut m = Tensor::zeros([n, 2 * h, 2 * w]);
            for i in 0..n {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        m.data_mut()[(i * 2 * h + y) * 2 * w + x] = mask_low.data()[(i * h + y / 2) * w + x / 2];
                    }
                }
            }
            (Some(b), Some(m))
        } else {
            (None, None)
        };
        Annotations {
            low,
            high: hi,
            mask_low,
            mask_high,
        }
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&[2, 3], 1.0, &mut rng));
        let h0 = uniform(&[2, 4], 1.0, &mut rng);
        let h = tape.constant(h0.clone());
        let mut f = Forward {
            tape: &mut tape,
            store: &store,
            mode: Mode::Train,
            dropout: 0.0,
            rng: &mut rng,
        };
        let h1 = cell.forward(&mut f, x, h).unwrap();
        let h2 = cell.forward(&mut f, x, h1).unwrap();
        for (a, b) in tape.value(h2).data().iter().zip(h0.data()) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_attention_on_symmetric_input() {
        let mut fx = fixture(None);
        let mut tape = Tape::new();
        let mut mask = Tensor::ones([1, 3, 4]);
        mask.data_mut()[11] = 0.0;
        mask.data_mut()[7] = 0.0;
        let low = tape.constant(Tensor::full([1, 5, 3, 4], 0.3));
        let ann = Annotations {
            low,
            high: None,
            mask_low: mask,
            mask_high: None,
        };
        let mut f = Forward {
            tape: &mut tape,
            store: &fx.store,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut fx.rng,
        };
        let p = fx.dec.prepare(&mut f, &ann).unwrap();
        let s = f.tape.constant(Tensor::zeros([1, 16]));
        let cov = f.tape.constant(Tensor::zeros([1, 1, 3, 4]));
        let a = fx.dec.head_low.attend(&mut f, &p.low, s, cov).unwrap();
        let alpha = tape.value(a.alpha).data().to_vec();
        for (i, v) in alpha.iter().enumerate() {
            let want = if i == 7 || i == 11 { 0.0 } else { 0.1 };
            assert!((v - want).abs() < 1e-12, "{i}: {v}");
        }
        assert_eq!(tape.shape(a.context), &[1, 5]);
    }

    #[test]
    fn single_cell_attention_copies_annotation() {
        let mut fx = fixture(None);
        let mut tape = Tape::new();
        let mut mask = Tensor::zeros([1, 2, 2]);
        mask.data_mut()[2] = 1.0;
        let ann = annotations(&mut tape, &mut fx.rng, 1, mask, false);
        let annot = tape.value(ann.low).clone();
        let mut f = Forward {
            tape: &mut tape,
            store: &fx.store,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut fx.rng,
        };
        let p = fx.dec.prepare(&mut f, &ann).unwrap();
        let st = fx.dec.initial_state(&mut f, &p);
        let o = fx.dec.step(&mut f, &p, &[1], &st).unwrap();
        assert_eq!(tape.value(o.low.alpha).data(), &[0.0, 0.0, 1.0, 0.0]);
        let ctx = tape.value(o.low.context).data();
        for (c, &v) in ctx.iter().enumerate().take(5) {
            assert_eq!(v, annot.data()[c * 4 + 2]);
        }
    }

    #[test]
    fn fully_masked_grid_is_rejected() {
        let mut fx = fixture(None);
        let mut tape = Tape::new();
        let ann = annotations(&mut tape, &mut fx.rng, 1, Tensor::zeros([1, 2, 2]), false);
        let mut f = Forward {
            tape: &mut tape,
            store: &fx.store,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut fx.rng,
        };
        let p = fx.dec.prepare(&mut f, &ann).unwrap();
        let st = fx.dec.initial_state(&mut f, &p);
        assert!(fx.dec.step(&mut f, &p, &[1], &st).is_err());
    }

    #[test]
    fn step_contracts() {
        let mut fx = fixture(Some(3));
        let mut tape = Tape::new();
        let mut mask = Tensor::ones([2, 2, 3]);
        mask.data_mut()[6 + 2] = 0.0;
        mask.data_mut()[6 + 5] = 0.0;
        let ann = annotations(&mut tape, &mut fx.rng, 2, mask, true);
        let mut f = Forward {
            tape: &mut tape,
            store: &fx.store,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut fx.rng,
        };
        let p = fx.dec.prepare(&mut f, &ann).unwrap();
        let mut st = fx.dec.initial_state(&mut f, &p);
        let mut prev_cov: Option<(Tensor, Tensor)> = None;
        for t in 0..6 {
            let o = fx.dec.step(&mut f, &p, &[1, 3 + t % 4], &st).unwrap();
            assert_eq!(f.tape.shape(o.logits), &[2, 7]);
            let probs = f.tape.softmax(o.logits);
            for row in f.tape.value(probs).data().chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let hi = o.high.unwrap();
            for (alpha, cells) in [(o.low.alpha, 6), (hi.alpha, 24)] {
                for row in f.tape.value(alpha).data().chunks(cells) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
            assert_eq!(f.tape.value(o.low.alpha).data()[6 + 2], 0.0);
            assert_eq!(f.tape.value(hi.alpha).data()[24 + 4], 0.0);
            let cov = (
                f.tape.value(o.state.coverage_low).clone(),
                f.tape.value(o.state.coverage_high.unwrap()).clone(),
            );
            if let Some((a, b)) = &prev_cov {
                assert!(a.data().iter().zip(cov.0.data()).all(|(x, y)| y >= x));
                assert!(b.data().iter().zip(cov.1.data()).all(|(x, y)| y >= x));
            }
            prev_cov = Some(cov);
            st = o.state;
        }
        assert!(fx.dec.step(&mut f, &p, &[1, 7], &st).is_err());
    }

    #[test]
    fn teacher_forcing_row_counts() {
        let mut fx = fixture(Some(3));
        let mut tape = Tape::new();
        let ann = annotations(&mut tape, &mut fx.rng, 1, Tensor::ones([1, 2, 2]), true);
        let mut f = Forward {
            tape: &mut tape,
            store: &fx.store,
            mode: Mode::Train,
            dropout: 0.0,
            rng: &mut fx.rng,
        };
        let p = fx.dec.prepare(&mut f, &ann).unwrap();
        assert_eq!(fx.dec.teacher_forced(&mut f, &p, &[vec![1]]).unwrap().len(), 1);
        assert_eq!(fx.dec.teacher_forced(&mut f, &p, &[vec![1, 4, 5, 6]]).unwrap().len(), 4);
        assert!(fx.dec.teacher_forced(&mut f, &p, &[vec![]]).is_err());
    }

    #[test]
    fn heads_share_state_projection() {
        let fx = fixture(Some(3));
        assert_eq!(fx.dec.head_low.u_s, fx.dec.head_high.as_ref().unwrap().u_s);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            shared_state_projection: false,
            ..DecoderConfig::toy()
        };
        let dec = Decoder::new(&cfg, 7, 5, Some(3), &mut store, &mut rng).unwrap();
        assert_ne!(dec.head_low.u_s, dec.head_high.unwrap().u_s);
        assert_eq!(fx.dec.head_low.kernel(&fx.store), 11);
        assert_eq!(fx.dec.head_high.as_ref().unwrap().kernel(&fx.store), 7);
    }
}
