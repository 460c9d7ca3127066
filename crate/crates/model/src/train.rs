//! Training loop: Adam with per-epoch learning-rate decay, optional global
//! gradient clipping, divergence rollback, and step metrics.

use std::collections::HashMap;

use cadenza_tensor::{lit, Scalar, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::ForwardOptions;
use crate::model::Model;
use crate::seq::{Row, SeqToken};
use crate::{ModelError, Result};

/// Optimization settings. Defaults: Adam(3e-4, 0.9, 0.999, 1e-8) with the
/// learning rate decayed by 0.85 each epoch.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_rows: usize,
    /// Global-norm gradient clipping threshold, when enabled.
    pub clip_norm: Option<f64>,
    /// Shuffling (and dropout) seed.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 3e-4,
            lr_decay: 0.85,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 1,
            batch_rows: 8,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One optimizer step's log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub ppl: f64,
}

/// Header for the metric log.
pub const METRIC_HEADER: &str = "step, epoch, lr, ce, ppl";

impl StepMetrics {
    pub fn line(&self) -> String {
        format!(
            "{}, {}, {:.6e}, {:.6}, {:.6}",
            self.step, self.epoch, self.lr, self.ce, self.ppl
        )
    }
}

/// Adam state, kept per parameter name in f64 regardless of model dtype.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(opts: &TrainOptions) -> Self {
        Adam {
            beta1: opts.beta1,
            beta2: opts.beta2,
            eps: opts.eps,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update to every gradient-carrying parameter.
    pub fn step<T: Scalar>(&mut self, params: &[(String, cadenza_tensor::Tensor<T>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params {
            let Some(grad) = p.grad() else { continue };
            let g: Vec<f64> = grad.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
            drop(grad);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] = data[i] - lit::<T>(update);
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`. Returns the
/// pre-clip norm.
pub fn clip_global_norm<T: Scalar>(
    params: &[(String, cadenza_tensor::Tensor<T>)],
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            for v in g.iter() {
                let x = v.to_f64().unwrap_or(0.0);
                sq += x * x;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = lit::<T>(max_norm / norm);
        for (_, p) in params {
            if let Some(mut g) = p.grad_mut() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm
}

/// What a training run optimizes.
pub enum TrainTask<'a> {
    /// Next-event modeling over packed or padded rows.
    Lm(&'a [Row]),
    /// Window classification over labelled token sequences.
    Class(&'a [(Vec<SeqToken>, usize)]),
}

impl TrainTask<'_> {
    fn len(&self) -> usize {
        match self {
            TrainTask::Lm(rows) => rows.len(),
            TrainTask::Class(items) => items.len(),
        }
    }
}

fn grads_finite<T: Scalar>(params: &[(String, cadenza_tensor::Tensor<T>)]) -> bool {
    params.iter().all(|(_, p)| match p.grad() {
        Some(g) => g.iter().all(|v| v.is_finite()),
        None => true,
    })
}

/// Run the optimization loop. Each epoch shuffles the samples and walks
/// them in batches; one optimizer step per batch. If the loss or any
/// gradient goes non-finite, parameters roll back to the end of the last
/// finite step and the run aborts.
pub fn train<T: Scalar>(
    model: &Model<T>,
    task: TrainTask<'_>,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if task.len() == 0 {
        return Err(ModelError::Train("training set is empty".into()));
    }
    if opts.batch_rows == 0 {
        return Err(ModelError::Train("batch size must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(opts.seed.wrapping_add(0x9e37_79b9));
    let mut adam = Adam::new(opts);
    let trainable = model.trainable_params();
    if trainable.is_empty() {
        return Err(ModelError::Train("no trainable parameters".into()));
    }
    let mut metrics = Vec::new();
    let mut last_good = model.snapshot();
    let mut step = 0;
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..task.len()).collect();
        order.shuffle(&mut rng);
        let lr = opts.learning_rate(epoch);
        for batch in order.chunks(opts.batch_rows) {
            let tape = Tape::<T>::new();
            let mut fwd = ForwardOptions {
                train: true,
                rng: Some(&mut dropout_rng),
                trace: None,
            };
            let loss_result = match &task {
                TrainTask::Lm(rows) => {
                    let picked: Vec<Row> = batch.iter().map(|&i| rows[i].clone()).collect();
                    model.lm_loss(&tape, &picked, &mut fwd).map(|(l, _)| l)
                }
                TrainTask::Class(items) => {
                    let picked: Vec<(Vec<SeqToken>, usize)> =
                        batch.iter().map(|&i| items[i].clone()).collect();
                    model.class_loss(&tape, &picked, &mut fwd)
                }
            };
            let loss = match loss_result {
                Ok(l) => l,
                // A numerically invalid forward (overflowed weights driving
                // every logit to -inf or NaN) is divergence, not a caller
                // mistake: roll back like a non-finite loss. Structural
                // errors still propagate as-is.
                Err(ModelError::Tensor(cadenza_tensor::TensorError::Invalid(msg))) => {
                    model.restore(&last_good)?;
                    return Err(ModelError::Diverged {
                        step,
                        what: format!("forward pass failed ({msg}); parameters rolled back"),
                    });
                }
                Err(e) => return Err(e),
            };
            let ce = tape.value_vec(loss)?[0].to_f64().unwrap_or(f64::NAN);
            model.zero_grads();
            tape.backward(loss)?;
            if !ce.is_finite() || !grads_finite(model.params()) {
                model.restore(&last_good)?;
                return Err(ModelError::Diverged {
                    step,
                    what: "non-finite loss or gradient; parameters rolled back".into(),
                });
            }
            if let Some(c) = opts.clip_norm {
                clip_global_norm(&trainable, c);
            }
            adam.step(&trainable, lr);
            let record = StepMetrics {
                step,
                epoch,
                lr,
                ce,
                ppl: ce.exp(),
            };
            on_step(&record);
            metrics.push(record);
            last_good = model.snapshot();
            step += 1;
        }
    }
    Ok(metrics)
}
