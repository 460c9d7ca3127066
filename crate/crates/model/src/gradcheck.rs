//! Finite-difference verification of end-to-end model gradients.
//!
//! The analytic gradient from one backward pass is compared against central
//! differences of the language-model loss, probing a random sample of
//! coordinates in every trainable parameter. The error metric
//! `|a - b| / max(|a| + |b|, 1e-3)` behaves like a relative error for large
//! values and an absolute one near zero.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use cadenza_tensor::Tape;

use crate::attention::ForwardOptions;
use crate::model::Model;
use crate::seq::Row;
use crate::{ModelError, Result};

/// One probed coordinate of one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub probes: Vec<GradProbe>,
    pub max_rel_err: f64,
}

impl GradReport {
    /// The probe with the largest error, if any coordinates were checked.
    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

/// Sample up to `count` distinct indices from `0..len`.
fn sample_indices(len: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count {
        let i = rng.random_range(0..len);
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Compare analytic gradients of the LM loss on `rows` against central
/// differences with step `h`, probing `probes_per_param` random coordinates
/// of every trainable parameter.
///
/// Runs in `f64`; the model is left unchanged (perturbations are undone).
pub fn finite_difference_check(
    model: &Model<f64>,
    rows: &[Row],
    probes_per_param: usize,
    h: f64,
    seed: u64,
) -> Result<GradReport> {
    if probes_per_param == 0 {
        return Err(ModelError::Eval("probes_per_param must be positive".into()));
    }
    let eval_loss = |model: &Model<f64>| -> Result<f64> {
        let tape = Tape::new();
        let (loss, _) = model.lm_loss(&tape, rows, &mut ForwardOptions::eval())?;
        Ok(tape.value_vec(loss)?[0])
    };

    // Analytic pass.
    let tape = Tape::new();
    let (loss, _) = model.lm_loss(&tape, rows, &mut ForwardOptions::eval())?;
    let base = tape.value_vec(loss)?[0];
    if !base.is_finite() {
        return Err(ModelError::Eval(format!("non-finite loss {base}")));
    }
    model.zero_grads();
    tape.backward(loss)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    let mut max_rel_err = 0.0_f64;
    for (name, param) in model.trainable_params() {
        let analytic: Vec<f64> = param
            .grad()
            .map(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; param.numel()]);
        for index in sample_indices(param.numel(), probes_per_param, &mut rng) {
            param.data_mut()[index] += h;
            let up = eval_loss(model)?;
            param.data_mut()[index] -= 2.0 * h;
            let down = eval_loss(model)?;
            param.data_mut()[index] += h;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[index], numeric);
            max_rel_err = max_rel_err.max(err);
            probes.push(GradProbe {
                param: name.clone(),
                index,
                analytic: analytic[index],
                numeric,
                rel_err: err,
            });
        }
    }
    if probes.is_empty() {
        return Err(ModelError::Eval("no trainable parameters to probe".into()));
    }
    Ok(GradReport {
        probes,
        max_rel_err,
    })
}
