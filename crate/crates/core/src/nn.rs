//! Layer building blocks shared by the encoder and decoder.

use rand_chacha::ChaCha8Rng;

use crate::param::{he_uniform, ParamId, ParamStore};
use crate::tape::{Mode, StatUpdate, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by running statistics at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Everything a forward pass threads through the layers.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// Dropout rate after each convolution; ignored in infer mode.
    pub dropout: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Forward<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Convolution (no bias) followed by batch normalization, ReLU and dropout.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvUnit, crate::param::ParamError> {
        let w = he_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        Ok(ConvUnit {
            weight: store.add(format!("{name}.w"), w)?,
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones([cout]))?,
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros([cout]))?,
            running_mean: store.add_buffer(format!("{name}.bn.mean"), Tensor::zeros([cout]))?,
            running_var: store.add_buffer(format!("{name}.bn.var"), Tensor::ones([cout]))?,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).dim(0)
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var, TensorError> {
        let w = f.param(self.weight);
        let y = f
            .tape
            .conv2d(x, w, (self.stride, self.stride), (self.pad, self.pad))?;
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let y = match f.mode {
            Mode::Train => {
                let (y, batch_mean, batch_var) = f.tape.batch_norm_train(y, g, b, BN_EPS)?;
                f.tape.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                y
            }
            Mode::Infer => f.tape.batch_norm_infer(
                y,
                g,
                b,
                f.store.value(self.running_mean),
                f.store.value(self.running_var),
                BN_EPS,
            )?,
        };
        let y = f.tape.relu(y);
        f.tape.dropout(y, f.dropout, f.mode, f.rng)
    }
}

/// Folds observed batch statistics into the running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            let running = store.get_mut(id).value.data_mut();
            for (r, b) in running.iter_mut().zip(batch) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}
