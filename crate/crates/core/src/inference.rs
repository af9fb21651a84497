//! Beam search over an ensemble of models with averaged symbol probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PreparedImage, TokenSequence, EOS, PAD, SOS};
use crate::decoder::{DecoderState, Grid, Prepared};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Forward;
use crate::tape::{Mode, Tape, PROB_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Cap on emitted tokens, end sentinel included.
    pub max_len: usize,
    /// Rank finished hypotheses by mean rather than summed log probability.
    pub length_normalize: bool,
    /// Keep per-step attention maps of the first ensemble member.
    pub capture_attention: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 10,
            max_len: crate::model::DEFAULT_MAX_LEN,
            length_normalize: false,
            capture_attention: false,
        }
    }
}

/// Attention of one decoding step, on the annotation grids.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    /// `[H, W]`
    pub low: Tensor,
    /// `[2H, 2W]` for multi-scale models.
    pub high: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    /// Summed log probability, end sentinel included once emitted.
    pub log_prob: f64,
    pub finished: bool,
    pub attention: Vec<StepAttention>,
}

impl Hypothesis {
    fn rank(&self, normalize: bool) -> f64 {
        if normalize {
            let steps = self.tokens.len() + usize::from(self.finished);
            self.log_prob / steps.max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Arithmetic mean of probability rows.
pub fn ensemble_probs(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let first = rows.first().ok_or_else(|| Error::Input("no probability rows to average".into()))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Input("probability rows differ in length".into()));
    }
    let n = rows.len() as f64;
    Ok((0..first.len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect())
}

/// Checks that every member shares the first member's vocabulary.
pub fn check_ensemble(models: &[&Model]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Input("ensemble has no members".into()))?;
    for (i, m) in models.iter().enumerate().skip(1) {
        if m.vocab() != first.vocab() {
            return Err(Error::Input(format!(
                "ensemble member {} has a different vocabulary from member 1",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Detached recurrent state of one hypothesis in one member model.
#[derive(Debug, Clone)]
struct RowState {
    s: Vec<f64>,
    coverage_low: Vec<f64>,
    coverage_high: Option<Vec<f64>>,
}

/// Per-row probabilities, successor states and optional attention maps.
type StepResult = (Vec<Vec<f64>>, Vec<RowState>, Vec<Option<StepAttention>>);

/// A prepared grid for a single image, detached from its tape.
struct GridValues {
    annot: Tensor,
    proj: Tensor,
    mask: Tensor,
    height: usize,
    width: usize,
}

impl GridValues {
    fn new(tape: &Tape, g: &Grid) -> Self {
        GridValues {
            annot: tape.value(g.annot).clone(),
            proj: tape.value(g.proj).clone(),
            mask: g.mask.clone(),
            height: g.height,
            width: g.width,
        }
    }

    fn cells(&self) -> usize {
        self.height * self.width
    }

    /// The grid repeated for `rows` hypotheses.
    fn tiled(&self, f: &mut Forward<'_>, rows: usize) -> Grid {
        Grid {
            annot: f.tape.constant(tile(&self.annot, rows)),
            proj: f.tape.constant(tile(&self.proj, rows)),
            mask: tile(&self.mask, rows),
            height: self.height,
            width: self.width,
        }
    }
}

/// Per-member encoder output for a single image.
struct Session<'m> {
    model: &'m Model,
    low: GridValues,
    high: Option<GridValues>,
    tape: Tape,
    rng: ChaCha8Rng,
}

/// Stacks `rows` copies of a batch-1 tensor along the leading axis.
fn tile(t: &Tensor, rows: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, t.data().repeat(rows)).expect("tiled length matches")
}

fn stack(rows: &[&[f64]], tail: &[usize]) -> Tensor {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(tail);
    Tensor::new(shape, rows.concat()).expect("stacked length matches")
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, image: &PreparedImage) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        let images = image.pixels.clone().reshape([1, 1, h, w])?;
        let mut mask = Tensor::zeros([1, h, w]);
        for y in 0..image.content.0 {
            for x in 0..image.content.1 {
                mask.data_mut()[y * w + x] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = {
            let mut f = Forward {
                tape: &mut tape,
                store: &model.params,
                mode: Mode::Infer,
                dropout: 0.0,
                rng: &mut rng,
            };
            model.prepare(&mut f, &images, &mask)?
        };
        let low = GridValues::new(&tape, &p.low);
        let high = p.high.as_ref().map(|g| GridValues::new(&tape, g));
        tape.truncate(0);
        Ok(Session {
            model,
            low,
            high,
            tape,
            rng,
        })
    }

    fn initial(&self) -> RowState {
        RowState {
            s: vec![0.0; self.model.decoder().config().hidden],
            coverage_low: vec![0.0; self.low.cells()],
            coverage_high: self.high.as_ref().map(|g| vec![0.0; g.cells()]),
        }
    }

    /// Advances every row one step; returns probabilities `[rows][K]`, new
    /// states, and attention maps when requested.
    fn step(
        &mut self,
        prev: &[usize],
        states: &[&RowState],
        capture: bool,
    ) -> Result<StepResult> {
        let rows = prev.len();
        self.tape.truncate(0);
        let mut f = Forward {
            tape: &mut self.tape,
            store: &self.model.params,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut self.rng,
        };
        let p = Prepared {
            low: self.low.tiled(&mut f, rows),
            high: self.high.as_ref().map(|g| g.tiled(&mut f, rows)),
        };
        let hidden = self.model.decoder().config().hidden;
        let s: Vec<&[f64]> = states.iter().map(|r| r.s.as_slice()).collect();
        let cl: Vec<&[f64]> = states.iter().map(|r| r.coverage_low.as_slice()).collect();
        let state = DecoderState {
            s: f.tape.constant(stack(&s, &[hidden])),
            coverage_low: f.tape.constant(stack(&cl, &[1, self.low.height, self.low.width])),
            coverage_high: match &self.high {
                Some(g) => {
                    let ch: Vec<&[f64]> = states
                        .iter()
                        .map(|r| r.coverage_high.as_deref().expect("multi-scale state"))
                        .collect();
                    Some(f.tape.constant(stack(&ch, &[1, g.height, g.width])))
                }
                None => None,
            },
        };
        let o = self.model.decoder().step(&mut f, &p, prev, &state)?;
        let probs = f.tape.softmax(o.logits);
        let k = self.model.vocab().len();
        let split = |t: &Tensor, width: usize| -> Vec<Vec<f64>> { t.data().chunks(width).map(<[f64]>::to_vec).collect() };
        let tape = &self.tape;
        let prob_rows = split(tape.value(probs), k);
        let s_rows = split(tape.value(o.state.s), hidden);
        let cl_rows = split(tape.value(o.state.coverage_low), self.low.cells());
        let ch_rows = match (&self.high, o.state.coverage_high) {
            (Some(g), Some(v)) => split(tape.value(v), g.cells()).into_iter().map(Some).collect(),
            _ => vec![None; rows],
        };
        let new_states = s_rows
            .into_iter()
            .zip(cl_rows)
            .zip(ch_rows)
            .map(|((s, coverage_low), coverage_high)| RowState {
                s,
                coverage_low,
                coverage_high,
            })
            .collect();
        let attention = if capture {
            let lo = split(tape.value(o.low.alpha), self.low.cells());
            let hi = match (&self.high, o.high) {
                (Some(g), Some(a)) => split(tape.value(a.alpha), g.cells()).into_iter().map(Some).collect(),
                _ => vec![None; rows],
            };
            lo.into_iter()
                .zip(hi)
                .map(|(l, h)| {
                    Some(StepAttention {
                        low: Tensor::new([self.low.height, self.low.width], l).expect("grid extents"),
                        high: h.map(|h| {
                            let g = self.high.as_ref().expect("multi-scale");
                            Tensor::new([g.height, g.width], h).expect("grid extents")
                        }),
                    })
                })
                .collect()
        } else {
            vec![None; rows]
        };
        Ok((prob_rows, new_states, attention))
    }
}

struct Live {
    hyp: Hypothesis,
    prev: usize,
    states: Vec<RowState>,
}

/// Left-to-right beam search for one image.
///
/// Each step expands every live hypothesis by every emittable symbol using the
/// ensemble-averaged probabilities, keeps the `beam` best unfinished candidates
/// and retires candidates ending in the end sentinel. Search stops when no live
/// hypothesis could still beat the best finished one, or at `max_len` tokens.
/// If nothing finished, the best unfinished hypothesis is returned with
/// `finished == false`.
pub fn beam_search(models: &[&Model], image: &PreparedImage, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam width and max length must be at least 1".into()));
    }
    check_ensemble(models)?;
    let mut sessions: Vec<Session<'_>> = models.iter().map(|m| Session::new(m, image)).collect::<Result<_>>()?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: TokenSequence::default(),
            log_prob: 0.0,
            finished: false,
            attention: Vec::new(),
        },
        prev: SOS,
        states: sessions.iter().map(Session::initial).collect(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let k = models[0].vocab().len();
    for t in 0..cfg.max_len {
        let prev: Vec<usize> = live.iter().map(|l| l.prev).collect();
        let mut member_probs = Vec::with_capacity(sessions.len());
        let mut member_states = Vec::with_capacity(sessions.len());
        let mut attention = Vec::new();
        for (m, session) in sessions.iter_mut().enumerate() {
            let states: Vec<&RowState> = live.iter().map(|l| &l.states[m]).collect();
            let (p, s, a) = session.step(&prev, &states, cfg.capture_attention && m == 0)?;
            member_probs.push(p);
            member_states.push(s);
            if m == 0 {
                attention = a;
            }
        }
        let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * k);
        for (i, l) in live.iter().enumerate() {
            let rows: Vec<&[f64]> = member_probs.iter().map(|p| p[i].as_slice()).collect();
            let avg = ensemble_probs(&rows)?;
            for (tok, p) in avg.iter().enumerate() {
                if tok != PAD && tok != SOS {
                    candidates.push((l.hyp.log_prob + p.max(PROB_FLOOR).ln(), i, tok));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let last_step = t + 1 == cfg.max_len;
        let mut next: Vec<Live> = Vec::with_capacity(cfg.beam);
        let mut unfinished: Vec<Hypothesis> = Vec::new();
        let mut kept = 0;
        for (score, i, tok) in candidates {
            if kept == cfg.beam {
                break;
            }
            let parent = &live[i];
            let mut hyp = Hypothesis {
                tokens: parent.hyp.tokens.clone(),
                log_prob: score,
                finished: tok == EOS,
                attention: parent.hyp.attention.clone(),
            };
            if let Some(a) = &attention[i] {
                hyp.attention.push(a.clone());
            }
            if tok == EOS {
                finished.push(hyp);
                continue;
            }
            hyp.tokens.0.push(tok);
            kept += 1;
            if last_step {
                unfinished.push(hyp);
            } else {
                next.push(Live {
                    hyp,
                    prev: tok,
                    states: member_states.iter().map(|s| s[i].clone()).collect(),
                });
            }
        }
        if last_step {
            if finished.is_empty() {
                return Ok(best_of(unfinished, cfg.length_normalize).expect("beam keeps a candidate"));
            }
            break;
        }
        live = next;
        let best_live = live.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!cfg.length_normalize && best_done >= best_live) {
            break;
        }
    }
    Ok(best_of(finished, cfg.length_normalize).expect("search ends with a finished hypothesis"))
}

fn best_of(hyps: Vec<Hypothesis>, normalize: bool) -> Option<Hypothesis> {
    hyps.into_iter().fold(None, |best, h| match best {
        Some(b) if b.rank(normalize) >= h.rank(normalize) => Some(b),
        _ => Some(h),
    })
}

/// Summed log probability of emitting `tokens` then the end sentinel, under the
/// ensemble-averaged distribution.
pub fn sequence_log_prob(models: &[&Model], image: &PreparedImage, tokens: &[usize]) -> Result<f64> {
    check_ensemble(models)?;
    let mut sessions: Vec<Session<'_>> = models.iter().map(|m| Session::new(m, image)).collect::<Result<_>>()?;
    let mut states: Vec<RowState> = sessions.iter().map(Session::initial).collect();
    let mut prev = SOS;
    let mut total = 0.0;
    for &tok in tokens.iter().chain(std::iter::once(&EOS)) {
        let mut rows = Vec::with_capacity(sessions.len());
        for (m, session) in sessions.iter_mut().enumerate() {
            let (p, mut s, _) = session.step(&[prev], &[&states[m]], false)?;
            rows.push(p.into_iter().next().expect("one row"));
            states[m] = s.remove(0);
        }
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let avg = ensemble_probs(&refs)?;
        total += avg[tok].max(PROB_FLOOR).ln();
        prev = tok;
    }
    Ok(total)
}

/// Greedy decoding of one image; the same as a beam of width 1.
pub fn greedy(model: &Model, image: &PreparedImage, max_len: usize) -> Result<TokenSequence> {
    let cfg = BeamConfig {
        beam: 1,
        max_len,
        ..Default::default()
    };
    Ok(beam_search(&[model], image, &cfg)?.tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{builtin_vocabulary, synth_corpus, Tier};
    use crate::data::Batch;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> Model {
        Model::new(ModelConfig::toy(), builtin_vocabulary(), seed).unwrap()
    }

    #[test]
    fn mean_of_rows() {
        assert_eq!(ensemble_probs(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(ensemble_probs(&[&[0.2, 0.8], &[0.2, 0.8]]).unwrap(), vec![0.2, 0.8]);
        assert!(ensemble_probs(&[]).is_err());
        assert!(ensemble_probs(&[&[1.0], &[0.5, 0.5]]).is_err());
    }

    #[test]
    fn beam_one_matches_batched_greedy() {
        let m = model(5);
        for s in synth_corpus(4, 8, Tier::Decimal).unwrap() {
            let batch = Batch::new(&[&s]).unwrap();
            let g = m.greedy_batch(&batch, 8).unwrap().remove(0);
            assert_eq!(greedy(&m, &s.image, 8).unwrap(), g);
        }
    }

    #[test]
    fn scores_match_rescoring() {
        let m = model(6);
        let s = &synth_corpus(1, 3, Tier::Basic).unwrap()[0];
        let cfg = BeamConfig {
            beam: 3,
            max_len: 6,
            ..Default::default()
        };
        let h = beam_search(&[&m], &s.image, &cfg).unwrap();
        if h.finished {
            let rescored = sequence_log_prob(&[&m], &s.image, h.tokens.ids()).unwrap();
            assert!((rescored - h.log_prob).abs() < 1e-9);
        }
        assert!(h.tokens.len() <= 6);
    }

    #[test]
    fn unfinished_search_is_flagged() {
        let mut m = model(7);
        let b_o = m.decoder().b_o;
        m.params.get_mut(b_o).value.data_mut()[EOS] = -50.0;
        let s = &synth_corpus(1, 3, Tier::Basic).unwrap()[0];
        let cfg = BeamConfig {
            beam: 2,
            max_len: 3,
            ..Default::default()
        };
        let h = beam_search(&[&m], &s.image, &cfg).unwrap();
        assert!(!h.finished);
        assert_eq!(h.tokens.len(), 3);
    }

    #[test]
    fn attention_is_captured_per_step() {
        let m = model(8);
        let s = &synth_corpus(1, 4, Tier::Basic).unwrap()[0];
        let cfg = BeamConfig {
            beam: 2,
            max_len: 5,
            capture_attention: true,
            ..Default::default()
        };
        let h = beam_search(&[&m], &s.image, &cfg).unwrap();
        assert_eq!(h.attention.len(), h.tokens.len() + usize::from(h.finished));
        for a in &h.attention {
            assert!((a.low.sum() - 1.0).abs() < 1e-9);
            let hi = a.high.as_ref().unwrap();
            assert_eq!(hi.dim(0), 2 * a.low.dim(0));
        }
    }

    #[test]
    fn mismatched_vocabularies_are_rejected() {
        let a = model(1);
        let b = Model::new(ModelConfig::toy(), crate::data::Vocabulary::parse("x\ny\n").unwrap(), 1).unwrap();
        let s = &synth_corpus(1, 3, Tier::Basic).unwrap()[0];
        assert!(beam_search(&[&a, &b], &s.image, &BeamConfig::default()).is_err());
        assert!(beam_search(&[], &s.image, &BeamConfig::default()).is_err());
    }
}
