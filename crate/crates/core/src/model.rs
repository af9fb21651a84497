//! The full recognizer: encoder, decoder, vocabulary and parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, TokenSequence, Vocabulary, EOS, PAD, SOS};
use crate::decoder::{Decoder, DecoderConfig, Prepared};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::param::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Default cap on emitted tokens, end sentinel included.
pub const DEFAULT_MAX_LEN: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig::full(),
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut params, &mut rng)?;
        let plan = config.encoder.channel_plan();
        let high = config.encoder.multi_scale.then_some(plan.high);
        let decoder = Decoder::new(&config.decoder, vocab.len(), plan.low, high, &mut params, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            params,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model and overwrites every parameter and buffer from `values`.
    /// Names must match the architecture exactly.
    pub fn from_values(config: ModelConfig, vocab: Vocabulary, values: Vec<(String, Tensor)>) -> Result<Model> {
        let mut model = Model::new(config, vocab, 0)?;
        if values.len() != model.params.len() {
            return Err(Error::Input(format!(
                "{} parameter blobs supplied but the architecture has {}",
                values.len(),
                model.params.len()
            )));
        }
        for (name, value) in values {
            model.params.set_value(&name, value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Encodes images and prepares the attention grids.
    pub fn prepare(&self, f: &mut Forward<'_>, images: &Tensor, mask: &Tensor) -> Result<Prepared> {
        let x = f.tape.constant(images.clone());
        let ann = self.encoder.forward(f, x, mask)?;
        self.decoder.prepare(f, &ann)
    }

    /// Cross-entropy summed over each row's target positions (end sentinel
    /// included, padding excluded) and averaged over rows.
    pub fn loss(&self, f: &mut Forward<'_>, batch: &Batch) -> Result<Var> {
        let p = self.prepare(f, &batch.images, &batch.mask)?;
        let logits = self.decoder.teacher_forced(f, &p, &batch.inputs)?;
        let n = batch.len() as f64;
        let mut total: Option<Var> = None;
        for (t, l) in logits.into_iter().enumerate() {
            let logp = f.tape.log_softmax(l);
            let targets: Vec<usize> = batch.targets.iter().map(|r| r[t]).collect();
            let weights: Vec<f64> = batch
                .lengths
                .iter()
                .map(|&len| if t < len { 1.0 / n } else { 0.0 })
                .collect();
            let step = f.tape.nll(logp, &targets, &weights)?;
            total = Some(match total {
                Some(acc) => f.tape.add(acc, step)?,
                None => step,
            });
        }
        total.ok_or_else(|| Error::Input("empty target".into()))
    }

    /// Greedy decoding of a whole batch, stopping each row at its end sentinel.
    pub fn greedy_batch(&self, batch: &Batch, max_len: usize) -> Result<Vec<TokenSequence>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Forward {
            tape: &mut tape,
            store: &self.params,
            mode: Mode::Infer,
            dropout: 0.0,
            rng: &mut rng,
        };
        let p = self.prepare(&mut f, &batch.images, &batch.mask)?;
        let n = batch.len();
        let mut state = self.decoder.initial_state(&mut f, &p);
        let mut prev = vec![SOS; n];
        let mut out = vec![Vec::new(); n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let o = self.decoder.step(&mut f, &p, &prev, &state)?;
            let k = self.vocab.len();
            let logits = f.tape.value(o.logits).data();
            for i in 0..n {
                let row = &logits[i * k..(i + 1) * k];
                let best = argmax_symbol(row);
                prev[i] = best;
                if done[i] {
                    continue;
                }
                if best == EOS {
                    done[i] = true;
                } else {
                    out[i].push(best);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            state = o.state;
        }
        Ok(out.into_iter().map(TokenSequence).collect())
    }
}

/// Highest-scoring emittable id (never the padding or begin sentinel).
pub fn argmax_symbol(row: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate() {
        if i != PAD && i != SOS && v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_corpus, Tier};

    #[test]
    fn toy_model_loss_is_finite_and_positive() {
        let samples = synth_corpus(3, 1, Tier::Decimal).unwrap();
        let vocab = crate::data::synth::builtin_vocabulary();
        let model = Model::new(ModelConfig::toy(), vocab, 4).unwrap();
        let batch = Batch::new(&samples.iter().collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Forward {
            tape: &mut tape,
            store: &model.params,
            mode: Mode::Train,
            dropout: 0.2,
            rng: &mut rng,
        };
        let loss = model.loss(&mut f, &batch).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v > 0.0);
        let decoded = model.greedy_batch(&batch, 5).unwrap();
        assert_eq!(decoded.len(), 3);
        assert!(decoded.iter().all(|d| d.len() <= 5));
    }

    #[test]
    fn from_values_restores_parameters() {
        let vocab = crate::data::synth::builtin_vocabulary();
        let a = Model::new(ModelConfig::toy(), vocab.clone(), 1).unwrap();
        let values = a.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let b = Model::from_values(ModelConfig::toy(), vocab.clone(), values).unwrap();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value, y.value);
        }
        assert!(Model::from_values(ModelConfig::toy(), vocab, vec![]).is_err());
    }

    #[test]
    fn argmax_skips_reserved_inputs() {
        assert_eq!(argmax_symbol(&[9.0, 9.0, 0.0, 1.0]), 3);
        assert_eq!(argmax_symbol(&[9.0, 9.0, 2.0, 1.0]), EOS);
    }
}
