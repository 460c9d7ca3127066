//! Optimizer behavior: the learning-rate schedule, metric logging, Adam
//! updates, gradient clipping, determinism, divergence rollback, and an
//! end-to-end finite-difference check of the analytic gradients.

use cadenza_midi::CompoundToken;
use cadenza_model::{
    clip_global_norm, finite_difference_check, train, wrap_lm, Adam, Model, ModelConfig,
    ModelError, Row, StepMetrics, TrainOptions, TrainTask, METRIC_HEADER,
};
use cadenza_tensor::{Tape, Tensor};

fn ev(onset: u32, pitch: u8, velocity: u8) -> CompoundToken {
    CompoundToken {
        onset,
        duration: 12,
        octave: pitch / 12,
        pitch_class: pitch % 12,
        instrument: 0,
        velocity,
    }
}

fn tiny_rows() -> Vec<Row> {
    [
        vec![ev(0, 60, 64), ev(5, 64, 70), ev(9, 67, 75)],
        vec![ev(0, 48, 90), ev(20, 50, 85)],
        vec![ev(0, 72, 40), ev(3, 74, 45), ev(6, 76, 50), ev(12, 77, 55)],
        vec![ev(0, 55, 100)],
    ]
    .iter()
    .map(|events| Row::single(wrap_lm(events)).unwrap())
    .collect()
}

// ---------------------------------------------------------------------------
// Schedule and logging
// ---------------------------------------------------------------------------

#[test]
fn learning_rate_decays_per_epoch() {
    let opts = TrainOptions::default();
    assert_eq!(opts.lr, 3e-4);
    assert_eq!(opts.lr_decay, 0.85);
    assert_eq!(opts.learning_rate(0), 3e-4);
    let e3 = opts.learning_rate(3);
    assert!((e3 - 3e-4 * 0.85f64.powi(3)).abs() < 1e-18);
    assert!((e3 - 1.842375e-4).abs() < 1e-10);
}

#[test]
fn metric_lines_follow_the_header_format() {
    assert_eq!(METRIC_HEADER, "step, epoch, lr, ce, ppl");
    let m = StepMetrics {
        step: 12,
        epoch: 3,
        lr: 1.842375e-4,
        ce: 1.5,
        ppl: 1.5f64.exp(),
    };
    assert_eq!(m.line(), "12, 3, 1.842375e-4, 1.500000, 4.481689");
}

#[test]
fn step_and_epoch_counters_cover_every_batch() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 11, false).unwrap();
    let rows = tiny_rows(); // 4 rows
    let opts = TrainOptions {
        epochs: 3,
        batch_rows: 3, // ceil(4 / 3) = 2 batches per epoch
        seed: 5,
        ..TrainOptions::default()
    };
    let mut seen = Vec::new();
    let metrics = train(&model, TrainTask::Lm(&rows), &opts, |m| seen.push(*m)).unwrap();
    assert_eq!(metrics.len(), 6);
    assert_eq!(seen, metrics);
    for (i, m) in metrics.iter().enumerate() {
        assert_eq!(m.step, i);
        assert_eq!(m.epoch, i / 2);
        assert!((m.lr - opts.learning_rate(m.epoch)).abs() < 1e-18);
        assert!(m.ce.is_finite() && m.ce > 0.0);
        assert!((m.ppl - m.ce.exp()).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Optimizer mechanics
// ---------------------------------------------------------------------------

#[test]
fn adam_minimizes_a_quadratic() {
    let x: Tensor<f64> = Tensor::from_vec(vec![2], vec![5.0, -3.0]).unwrap();
    x.enable_grad();
    let params = vec![("x".to_string(), x.clone())];
    let opts = TrainOptions::default();
    let mut adam = Adam::new(&opts);
    for _ in 0..800 {
        let tape = Tape::new();
        let v = tape.leaf(&x);
        let shifted = tape.affine(v, 1.0, -2.0).unwrap(); // x - 2
        let loss = tape.sum(tape.mul(shifted, shifted).unwrap()).unwrap();
        x.zero_grad();
        tape.backward(loss).unwrap();
        adam.step(&params, 0.05);
    }
    for &v in x.data().iter() {
        assert!((v - 2.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn gradient_clipping_rescales_to_the_threshold() {
    let x: Tensor<f64> = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
    x.enable_grad();
    let tape = Tape::new();
    let v = tape.leaf(&x);
    let loss = tape.sum(tape.mul(v, v).unwrap()).unwrap();
    x.zero_grad();
    tape.backward(loss).unwrap(); // grad = 2x = [6, 8], norm 10
    let params = vec![("x".to_string(), x.clone())];
    let before = clip_global_norm(&params, 5.0);
    assert!((before - 10.0).abs() < 1e-12);
    assert_eq!(x.grad().unwrap().clone(), vec![3.0, 4.0]);
    // Already under the threshold: untouched, and the new norm is reported.
    let second = clip_global_norm(&params, 100.0);
    assert!((second - 5.0).abs() < 1e-12);
    assert_eq!(x.grad().unwrap().clone(), vec![3.0, 4.0]);
}

#[test]
fn training_reduces_the_loss() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 3, false).unwrap();
    let rows = vec![tiny_rows()[0].clone(); 8];
    let opts = TrainOptions {
        epochs: 5,
        batch_rows: 1,
        lr: 3e-3,
        seed: 1,
        ..TrainOptions::default()
    };
    let metrics = train(&model, TrainTask::Lm(&rows), &opts, |_| {}).unwrap();
    let first = metrics.first().unwrap().ce;
    let last = metrics.last().unwrap().ce;
    assert!(last < first * 0.5, "ce {first} -> {last}");
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let rows = tiny_rows();
    let opts = TrainOptions {
        epochs: 2,
        batch_rows: 2,
        seed: 42,
        ..TrainOptions::default()
    };
    let run = || {
        let model: Model<f64> = Model::new(ModelConfig::desk(), 7, false).unwrap();
        let metrics = train(&model, TrainTask::Lm(&rows), &opts, |_| {}).unwrap();
        (metrics, model.snapshot())
    };
    let (ma, pa) = run();
    let (mb, pb) = run();
    assert_eq!(ma, mb);
    for ((na, va), (nb, vb)) in pa.iter().zip(&pb) {
        assert_eq!(na, nb);
        assert_eq!(va, vb, "{na}");
    }
}

// ---------------------------------------------------------------------------
// Failure handling
// ---------------------------------------------------------------------------

#[test]
fn divergence_rolls_back_to_the_last_finite_step() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 2, false).unwrap();
    let rows = tiny_rows();
    let opts = TrainOptions {
        epochs: 10,
        batch_rows: 4,
        lr: 1e30, // first update launches the weights into overflow
        seed: 9,
        ..TrainOptions::default()
    };
    let mut steps_seen = 0;
    let err = train(&model, TrainTask::Lm(&rows), &opts, |_| steps_seen += 1).unwrap_err();
    match err {
        ModelError::Diverged { step, .. } => {
            assert!(step >= 1, "step 0 itself was finite");
            assert_eq!(steps_seen, step, "every step before the failure was logged");
        }
        other => panic!("expected divergence, got {other}"),
    }
    for (name, p) in model.params() {
        assert!(
            p.data().iter().all(|v| v.is_finite()),
            "{name} left non-finite after rollback"
        );
    }
}

#[test]
fn degenerate_training_setups_are_rejected() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 2, false).unwrap();
    let rows = tiny_rows();
    let empty: Vec<Row> = Vec::new();
    assert!(train(&model, TrainTask::Lm(&empty), &TrainOptions::default(), |_| {}).is_err());
    let opts = TrainOptions {
        batch_rows: 0,
        ..TrainOptions::default()
    };
    assert!(train(&model, TrainTask::Lm(&rows), &opts, |_| {}).is_err());
    model.set_trainable(|_| false);
    let err = train(&model, TrainTask::Lm(&rows), &TrainOptions::default(), |_| {}).unwrap_err();
    assert!(err.to_string().contains("no trainable parameters"), "{err}");
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

#[test]
fn analytic_gradients_match_finite_differences_end_to_end() {
    let model: Model<f64> = Model::new(ModelConfig::desk(), 17, false).unwrap();
    let rows = vec![tiny_rows()[0].clone()];
    let report = finite_difference_check(&model, &rows, 1, 1e-5, 4242).unwrap();
    let worst = report.worst().expect("at least one probe");
    assert!(
        report.max_rel_err < 1e-3,
        "max relative error {} at {}[{}] (analytic {}, numeric {})",
        report.max_rel_err,
        worst.param,
        worst.index,
        worst.analytic,
        worst.numeric
    );
}
