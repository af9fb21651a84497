//! Cross-entropy training with adadelta, global-norm clipping, L2 weight decay
//! and validation-WER model selection.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_plan, Batch, Sample, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::Model;
use crate::nn::{apply_stat_updates, Forward};
use crate::param::ParamStore;
use crate::tape::{Mode, Tape, PROB_FLOOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub rho: f64,
    pub epsilon: f64,
    /// Global L2 norm above which gradients are rescaled.
    pub clip: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Validate after every this many epochs (and after the last one).
    pub validate_every: usize,
    /// Token cap for greedy validation decoding.
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            max_epochs: 100,
            rho: 0.95,
            epsilon: 1e-6,
            clip: 100.0,
            weight_decay: 1e-4,
            dropout: 0.2,
            seed: 0,
            validate_every: 1,
            max_len: crate::model::DEFAULT_MAX_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.max_epochs == 0 || self.validate_every == 0 || self.max_len == 0 {
            return bad("batch_size, max_epochs, validate_every and max_len must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight decay {} must be nonnegative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad(format!("clip threshold {} must be positive", self.clip));
        }
        if !(0.0..1.0).contains(&self.rho) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("adadelta rho {} / epsilon {} out of range", self.rho, self.epsilon));
        }
        Ok(())
    }
}

/// `-Σ_t log p_t(w_t)` over probability rows aligned with `[w1, ..., wT, </s>]`.
pub fn ce_loss(rows: &[Vec<f64>], target: &TokenSequence) -> Result<f64> {
    let targets = target.targets();
    if rows.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} probability rows for {} target positions",
            rows.len(),
            targets.len()
        )));
    }
    rows.iter()
        .zip(&targets)
        .map(|(row, &t)| {
            row.get(t)
                .map(|p| -p.max(PROB_FLOOR).ln())
                .ok_or_else(|| Error::Input(format!("target id {t} outside row of {}", row.len())))
        })
        .sum()
}

/// Rescales all trainable gradients so their global L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, threshold: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > threshold {
        let scale = threshold / norm;
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Running averages `E[g²]` and `E[Δx²]` for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaSlot {
    pub sq_grad: Tensor,
    pub sq_update: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    slots: Vec<Option<AdadeltaSlot>>,
}

impl Adadelta {
    pub fn new(store: &ParamStore, rho: f64, epsilon: f64, weight_decay: f64) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| AdadeltaSlot {
                    sq_grad: Tensor::zeros(p.value.shape().to_vec()),
                    sq_update: Tensor::zeros(p.value.shape().to_vec()),
                })
            })
            .collect();
        Adadelta {
            rho,
            epsilon,
            weight_decay,
            slots,
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = &AdadeltaSlot> {
        self.slots.iter().flatten()
    }

    /// Adds `weight_decay · value` to each gradient, then applies one update.
    pub fn step(&mut self, store: &mut ParamStore) {
        let (rho, eps, wd) = (self.rho, self.epsilon, self.weight_decay);
        for (p, slot) in store.iter_mut().zip(&mut self.slots) {
            let Some(slot) = slot else { continue };
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let eg = slot.sq_grad.data_mut();
            let ex = slot.sq_update.data_mut();
            for i in 0..value.len() {
                let g = grad[i] + wd * value[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * g * g;
                let dx = -((ex[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
                ex[i] = rho * ex[i] + (1.0 - rho) * dx * dx;
                value[i] += dx;
            }
        }
    }
}

/// One validation point of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean batch loss since the previous validation point.
    pub train_loss: f64,
    pub valid_wer: f64,
}

pub const LOG_HEADER: &str = "step\tepoch\ttrain_loss\tvalid_wer";

impl LogRecord {
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{:.6}\t{:.6}", self.step, self.epoch, self.train_loss, self.valid_wer)
    }
}

pub fn log_text(records: &[LogRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.tsv());
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the lowest validation WER (earliest on ties).
    pub best: Model,
    pub best_wer: f64,
    pub best_step: usize,
    pub steps: usize,
    pub log: Vec<LogRecord>,
    /// Loss of every batch in order.
    pub losses: Vec<f64>,
}

fn batches_of(samples: &[Sample], plan: &[Vec<usize>]) -> Result<Vec<Batch>> {
    plan.iter()
        .map(|idx| Batch::new(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}

/// Greedy decoding WER over a sample set.
pub fn greedy_wer(model: &Model, samples: &[Sample], batch_size: usize, max_len: usize) -> Result<f64> {
    let plan: Vec<Vec<usize>> = (0..samples.len())
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let mut pairs = Vec::with_capacity(samples.len());
    for batch in batches_of(samples, &plan)? {
        let decoded = model.greedy_batch(&batch, max_len)?;
        for (label, hyp) in batch.labels.into_iter().zip(decoded) {
            pairs.push((label.0, hyp.0));
        }
    }
    metrics::wer(&pairs)
}

/// Trains `model` in place; `on_record` sees each validation point as it is made.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    let mut opt = Adadelta::new(&model.params, cfg.rho, cfg.epsilon, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tape = Tape::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::new();
    let mut losses = Vec::new();
    let mut window = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let plan = batch_plan(train_set, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        for (b, idx) in plan.iter().enumerate() {
            let batch = Batch::new(&idx.iter().map(|&i| &train_set[i]).collect::<Vec<_>>())?;
            tape.truncate(0);
            let mut f = Forward {
                tape: &mut tape,
                store: &model.params,
                mode: Mode::Train,
                dropout: cfg.dropout,
                rng: &mut rng,
            };
            let loss = model.loss(&mut f, &batch)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b + 1 });
            }
            tape.backward(loss, &mut model.params)?;
            apply_stat_updates(&mut model.params, &tape.take_stat_updates());
            clip_gradients(&mut model.params, cfg.clip);
            opt.step(&mut model.params);
            step += 1;
            losses.push(value);
            window.push(value);
        }
        if epoch % cfg.validate_every == 0 || epoch == cfg.max_epochs {
            let wer = greedy_wer(model, valid_set, cfg.batch_size, cfg.max_len)?;
            let record = LogRecord {
                step,
                epoch,
                train_loss: window.iter().sum::<f64>() / window.len().max(1) as f64,
                valid_wer: wer,
            };
            window.clear();
            on_record(&record);
            log.push(record);
            if best.as_ref().is_none_or(|(w, _, _)| wer < *w) {
                best = Some((wer, step, model.clone()));
            }
        }
    }
    let (best_wer, best_step, best) = best.expect("the last epoch always validates");
    Ok(TrainOutcome {
        best,
        best_wer,
        best_step,
        steps: step,
        log,
        losses,
    })
}
