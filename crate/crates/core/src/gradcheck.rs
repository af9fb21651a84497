//! Central finite-difference verification of taped gradients.
//!
//! Each check builds a scalar loss from a set of input tensors, differentiates it on
//! the tape and compares selected coordinates against `(L(x+h) - L(x-h)) / 2h`.
//! The error measure is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps near-zero gradients from being judged on rounding noise alone.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::model::Model;
use crate::nn::Forward;
use crate::param::ParamStore;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const DENOMINATOR_FLOOR: f64 = 1e-3;
/// Steps for whole-model checks, tried in order until one agrees. Batch-normalized
/// ReLU and max-pool stacks put kinks within a step of 1e-3 routinely and within
/// 1e-5 occasionally; a wrong gradient disagrees at every step.
pub const MODEL_STEPS: [f64; 2] = [1e-5, 1e-6];

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_error: f64,
    pub failures: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{} coords\tmax rel err {:.2e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.coordinates,
            self.max_error
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares taped and finite-difference gradients of `loss_fn` with respect to the
/// first `differentiable` inputs, sampling at most `per_input` coordinates of each.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor],
    differentiable: usize,
    per_input: usize,
    rng: &mut impl Rng,
    loss_fn: F,
) -> Result<CheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.gradients(loss)?;
    let mut report = CheckReport {
        name: name.to_string(),
        coordinates: 0,
        max_error: 0.0,
        failures: 0,
    };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate().take(differentiable) {
        let len = inputs[k].len();
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for idx in sample(rng, len, per_input.min(len)) {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + DEFAULT_STEP;
            let (t_plus, _, l_plus) = eval(&work)?;
            work[k].data_mut()[idx] = orig - DEFAULT_STEP;
            let (t_minus, _, l_minus) = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric =
                (t_plus.value(l_plus).item() - t_minus.value(l_minus).item()) / (2.0 * DEFAULT_STEP);
            let err = relative_error(analytic.data()[idx], numeric);
            report.coordinates += 1;
            report.max_error = report.max_error.max(err);
            if err > DEFAULT_TOLERANCE {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of a full model loss against its taped parameter
/// gradients. Every trainable tensor contributes at least one coordinate and the
/// remainder of `coordinates` is drawn uniformly over all trainable scalars.
/// Each coordinate is scored at the first of `steps` within tolerance, or at the
/// best of them if none is.
pub fn model_check(
    model: &Model,
    batch: &Batch,
    coordinates: usize,
    steps: &[f64],
    seed: u64,
) -> crate::error::Result<CheckReport> {
    if steps.is_empty() {
        return Err(crate::error::Error::Config("at least one finite-difference step is required".into()));
    }
    let eval = |store: &ParamStore| -> crate::error::Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Forward {
            tape: &mut tape,
            store,
            mode: Mode::Train,
            dropout: 0.0,
            rng: &mut rng,
        };
        let loss = model.loss(&mut f, batch)?;
        Ok((tape, loss))
    };
    let mut store = model.params.clone();
    let (tape, loss) = eval(&store)?;
    tape.backward(loss, &mut store)?;
    let ids = store.trainable_ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(k, &n)| (k, rng.random_range(0..n))).collect();
    let extra = coordinates.saturating_sub(picks.len()).min(total);
    for flat in sample(&mut rng, total, extra) {
        let mut rest = flat;
        let k = sizes
            .iter()
            .position(|&n| {
                if rest < n {
                    true
                } else {
                    rest -= n;
                    false
                }
            })
            .expect("index within total");
        picks.push((k, rest));
    }
    let analytic: Vec<Tensor> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    let mut report = CheckReport {
        name: "model".into(),
        coordinates: 0,
        max_error: 0.0,
        failures: 0,
    };
    for (k, idx) in picks {
        let id = ids[k];
        let orig = store.value(id).data()[idx];
        let mut err = f64::INFINITY;
        for &step in steps {
            store.get_mut(id).value.data_mut()[idx] = orig + step;
            let (t, l) = eval(&store)?;
            let plus = t.value(l).item();
            store.get_mut(id).value.data_mut()[idx] = orig - step;
            let (t, l) = eval(&store)?;
            let minus = t.value(l).item();
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            err = err.min(relative_error(analytic[k].data()[idx], numeric));
            if err <= DEFAULT_TOLERANCE {
                break;
            }
        }
        report.coordinates += 1;
        report.max_error = report.max_error.max(err);
        if err > DEFAULT_TOLERANCE {
            report.failures += 1;
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    crate::param::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero, for inputs to kinked functions.
fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Distinct values spaced at least 0.05 apart, so max-type selections are stable
/// under the finite-difference step.
fn well_separated(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..len).map(|i| i as f64 * 0.05 - len as f64 * 0.025).collect();
    rand::seq::SliceRandom::shuffle(data.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Projects an output onto fixed random weights so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs the finite-difference check over every differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let per = 12;
    let mut out = Vec::new();

    let (a, b) = (random(&[2, 3], r), random(&[2, 3], r));
    out.push(check("add", &[a.clone(), b.clone()], 2, per, r, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 1)
    })?);
    out.push(check("sub", &[a.clone(), b.clone()], 2, per, r, |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 2)
    })?);
    out.push(check("mul", &[a.clone(), b.clone()], 2, per, r, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 3)
    })?);
    out.push(check("scale", std::slice::from_ref(&a), 1, per, r, |t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, 4)
    })?);
    out.push(check("add_row", &[a.clone(), random(&[3], r)], 2, per, r, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, 5)
    })?);
    let img = random(&[2, 3, 4, 5], r);
    out.push(check("add_channel", &[img.clone(), random(&[3], r)], 2, per, r, |t, v| {
        let y = t.add_channel(v[0], v[1])?;
        project(t, y, 6)
    })?);
    out.push(check("add_spatial", &[img.clone(), random(&[2, 3], r)], 2, per, r, |t, v| {
        let y = t.add_spatial(v[0], v[1])?;
        project(t, y, 7)
    })?);
    out.push(check(
        "affine",
        &[random(&[4, 5], r), random(&[3, 5], r), random(&[3], r)],
        3,
        per,
        r,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 8)
        },
    )?);
    out.push(check("affine_vector", &[random(&[5], r), random(&[2, 5], r)], 2, per, r, |t, v| {
        let y = t.linear(v[0], v[1], None)?;
        project(t, y, 9)
    })?);
    out.push(check(
        "conv2d_3x3_pad1",
        &[random(&[2, 3, 5, 6], r), random(&[4, 3, 3, 3], r)],
        2,
        per,
        r,
        |t, v| {
            let y = t.conv2d(v[0], v[1], (1, 1), (1, 1))?;
            project(t, y, 10)
        },
    )?);
    out.push(check(
        "conv2d_7x7_stride2",
        &[random(&[1, 1, 9, 10], r), random(&[2, 1, 7, 7], r)],
        2,
        per,
        r,
        |t, v| {
            let y = t.conv2d(v[0], v[1], (2, 2), (3, 3))?;
            project(t, y, 11)
        },
    )?);
    out.push(check(
        "conv2d_1x1",
        &[random(&[2, 4, 3, 3], r), random(&[3, 4, 1, 1], r)],
        2,
        per,
        r,
        |t, v| {
            let y = t.conv2d(v[0], v[1], (1, 1), (0, 0))?;
            project(t, y, 12)
        },
    )?);
    out.push(check("max_pool2d", &[well_separated(&[1, 2, 4, 6], r)], 1, per, r, |t, v| {
        let y = t.max_pool2d(v[0], (2, 2), (2, 2))?;
        project(t, y, 13)
    })?);
    out.push(check("avg_pool2d", &[random(&[1, 2, 4, 6], r)], 1, per, r, |t, v| {
        let y = t.avg_pool2d(v[0], (2, 2), (2, 2))?;
        project(t, y, 14)
    })?);
    out.push(check(
        "batch_norm_train",
        &[random(&[2, 3, 2, 3], r), random(&[3], r), random(&[3], r)],
        3,
        per,
        r,
        |t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 15)
        },
    )?);
    let (rm, rv) = (random(&[3], r), away_from_zero(&[3], r));
    let rv = Tensor::new([3], rv.data().iter().map(|v| v.abs()).collect())?;
    out.push(check(
        "batch_norm_infer",
        &[random(&[2, 3, 2, 3], r), random(&[3], r), random(&[3], r)],
        3,
        per,
        r,
        move |t, v| {
            let y = t.batch_norm_infer(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
            project(t, y, 16)
        },
    )?);
    out.push(check("relu", &[away_from_zero(&[3, 4], r)], 1, per, r, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 17)
    })?);
    out.push(check("sigmoid", &[random(&[3, 4], r)], 1, per, r, |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, 18)
    })?);
    out.push(check("tanh", &[random(&[3, 4], r)], 1, per, r, |t, v| {
        let y = t.tanh(v[0]);
        project(t, y, 19)
    })?);
    out.push(check("softmax", &[random(&[3, 5], r)], 1, per, r, |t, v| {
        let y = t.softmax(v[0]);
        project(t, y, 20)
    })?);
    let mask = Tensor::new([2, 4], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0])?;
    out.push(check("masked_softmax", &[random(&[2, 4], r)], 1, per, r, move |t, v| {
        let y = t.masked_softmax(v[0], &mask)?;
        project(t, y, 21)
    })?);
    out.push(check("log_softmax", &[random(&[3, 5], r)], 1, per, r, |t, v| {
        let y = t.log_softmax(v[0]);
        project(t, y, 22)
    })?);
    out.push(check("maxout2", &[well_separated(&[3, 6], r)], 1, per, r, |t, v| {
        let y = t.maxout2(v[0])?;
        project(t, y, 23)
    })?);
    out.push(check("dropout", &[random(&[4, 5], r)], 1, per, r, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.3, Mode::Train, &mut mask_rng)?;
        project(t, y, 24)
    })?);
    out.push(check(
        "concat_channels",
        &[random(&[2, 2, 3, 3], r), random(&[2, 3, 3, 3], r)],
        2,
        per,
        r,
        |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y, 25)
        },
    )?);
    out.push(check("embedding", &[random(&[5, 3], r)], 1, per, r, |t, v| {
        let y = t.embedding(v[0], &[4, 0, 4, 2])?;
        project(t, y, 26)
    })?);
    out.push(check(
        "weighted_sum",
        &[random(&[2, 3, 2, 2], r), random(&[2, 4], r)],
        2,
        per,
        r,
        |t, v| {
            let y = t.weighted_sum(v[0], v[1])?;
            project(t, y, 27)
        },
    )?);
    out.push(check("reshape", &[random(&[2, 6], r)], 1, per, r, |t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y, 28)
    })?);
    out.push(check("nll", &[random(&[3, 4], r)], 1, per, r, |t, v| {
        let lp = t.log_softmax(v[0]);
        t.nll(lp, &[1, 3, 0], &[1.0, 0.5, 1.0])
    })?);
    Ok(out)
}
