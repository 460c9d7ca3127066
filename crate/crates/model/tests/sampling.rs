//! Sampling behavior: masked softmax, nucleus selection, draw mechanics,
//! and autoregressive generation on a fresh model.

use std::collections::BTreeSet;

use cadenza_midi::CompoundToken;
use cadenza_model::{
    generate, masked_softmax, nucleus, sample_index, Model, ModelConfig, SamplerSettings,
    Strategy,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

// ---------------------------------------------------------------------------
// Softmax and nucleus
// ---------------------------------------------------------------------------

#[test]
fn masked_lanes_get_zero_probability() {
    let probs = masked_softmax(&[f64::NEG_INFINITY, 0.0, 3.0f64.ln()]).unwrap();
    assert_eq!(probs[0], 0.0);
    assert!((probs[1] - 0.25).abs() < 1e-12);
    assert!((probs[2] - 0.75).abs() < 1e-12);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(masked_softmax(&[f64::NEG_INFINITY; 3]).is_err());
}

#[test]
fn nucleus_takes_the_smallest_sufficient_prefix() {
    assert_eq!(nucleus(&[0.5, 0.3, 0.2], 0.6), vec![0, 1]);
    assert_eq!(nucleus(&[0.5, 0.3, 0.2], 0.5), vec![0]);
    assert_eq!(nucleus(&[0.5, 0.3, 0.2], 1.0), vec![0, 1, 2]);
    assert_eq!(nucleus(&[0.2, 0.3, 0.5], 0.6), vec![2, 1]);
    // Equal probabilities break ties by index.
    assert_eq!(nucleus(&[0.25, 0.5, 0.25], 0.75), vec![1, 0]);
    // A tiny target still keeps the top entry.
    assert_eq!(nucleus(&[0.9, 0.1], 1e-9), vec![0]);
}

// ---------------------------------------------------------------------------
// Drawing
// ---------------------------------------------------------------------------

#[test]
fn greedy_picks_the_best_unmasked_logit() {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let logits = [f64::NEG_INFINITY, 1.5, -0.5, 7.25, f64::NEG_INFINITY];
    assert_eq!(sample_index(&logits, Strategy::Greedy, &mut rng).unwrap(), 3);
    assert!(sample_index(&[f64::NEG_INFINITY; 4], Strategy::Greedy, &mut rng).is_err());
}

#[test]
fn corrupt_logits_abort_sampling() {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    for bad in [f64::NAN, f64::INFINITY] {
        let logits = [0.0, bad, 1.0];
        assert!(sample_index(&logits, Strategy::Greedy, &mut rng).is_err());
        assert!(
            sample_index(&logits, Strategy::standard_top_p(), &mut rng).is_err()
        );
    }
}

#[test]
fn ten_thousand_draws_stay_inside_the_nucleus() {
    let logits = [0.3, 0.2, 0.1, 0.0, -2.0];
    let (p, temperature) = (0.6, 0.7);

    // Independent recomputation of the candidate set with plain arithmetic.
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut expected = BTreeSet::new();
    let mut mass = 0.0;
    for i in order {
        expected.insert(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    assert_eq!(expected, BTreeSet::from([0, 1, 2]));

    let mut rng = ChaCha12Rng::seed_from_u64(99);
    let strategy = Strategy::TopP { p, temperature };
    let mut seen = BTreeSet::new();
    for _ in 0..10_000 {
        let idx = sample_index(&logits, strategy, &mut rng).unwrap();
        assert!(expected.contains(&idx), "drew {idx} outside the nucleus");
        seen.insert(idx);
    }
    // Every nucleus member has enough renormalized mass to show up.
    assert_eq!(seen, expected);
}

#[test]
fn vanishing_temperature_approaches_greedy() {
    let logits = [0.4, 0.1, 0.39, -1.0];
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let greedy = sample_index(&logits, Strategy::Greedy, &mut rng).unwrap();
    let cold = Strategy::TopP { p: 0.95, temperature: 1e-3 };
    for _ in 0..200 {
        assert_eq!(sample_index(&logits, cold, &mut rng).unwrap(), greedy);
    }
}

#[test]
fn draws_are_reproducible_per_seed() {
    let logits = [0.3, 0.25, 0.2, 0.15, 0.1];
    let strategy = Strategy::TopP { p: 0.99, temperature: 1.0 };
    let run = |seed: u64| -> Vec<usize> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..100)
            .map(|_| sample_index(&logits, strategy, &mut rng).unwrap())
            .collect()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}

#[test]
fn sampler_settings_are_validated() {
    let ok = |strategy| SamplerSettings {
        strategy,
        seed: 0,
        max_events: 4,
        stop_on_eos: true,
    };
    ok(Strategy::Greedy).validate().unwrap();
    ok(Strategy::TopP { p: 1.0, temperature: 0.7 }).validate().unwrap();
    ok(Strategy::standard_top_p()).validate().unwrap();
    for bad in [
        Strategy::TopP { p: 0.0, temperature: 0.7 },
        Strategy::TopP { p: 1.5, temperature: 0.7 },
        Strategy::TopP { p: -0.1, temperature: 0.7 },
        Strategy::TopP { p: 0.6, temperature: 0.0 },
        Strategy::TopP { p: 0.6, temperature: -1.0 },
        Strategy::TopP { p: 0.6, temperature: f64::INFINITY },
        Strategy::TopP { p: 0.6, temperature: f64::NAN },
    ] {
        assert!(ok(bad).validate().is_err(), "{bad:?}");
    }
    assert_eq!(
        Strategy::standard_top_p(),
        Strategy::TopP { p: 0.6, temperature: 0.7 }
    );
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

#[test]
fn generated_events_are_well_formed_and_time_ordered() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 31, false).unwrap();
    let settings = SamplerSettings {
        strategy: Strategy::standard_top_p(),
        seed: 11,
        max_events: 6,
        stop_on_eos: true,
    };
    let out = generate(&model, &settings, &[], &[]).unwrap();
    assert!(out.events.len() <= 6);
    let mut prev = 0u32;
    for e in &out.events {
        assert!(e.onset >= prev, "onsets must not decrease");
        prev = e.onset;
        assert!(e.duration <= 1023);
        assert!(e.octave <= 10);
        assert!(e.pitch_class <= 11);
        assert!(u32::from(e.instrument) <= 128);
        assert!(e.velocity <= 127);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 31, false).unwrap();
    let settings = SamplerSettings {
        strategy: Strategy::standard_top_p(),
        seed: 123,
        max_events: 5,
        stop_on_eos: true,
    };
    let a = generate(&model, &settings, &[], &[]).unwrap();
    let b = generate(&model, &settings, &[], &[]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn an_event_budget_caps_generation() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 31, false).unwrap();
    let out = generate(&model, &SamplerSettings::greedy(3), &[], &[]).unwrap();
    assert!(out.events.len() <= 3);
    if !out.ended {
        assert_eq!(out.events.len(), 3);
    }
}

#[test]
fn the_context_window_caps_generation() {
    let mut config = ModelConfig::desk();
    config.context_length = 8;
    let model: Model<f32> = Model::new(config, 31, false).unwrap();
    let out = generate(&model, &SamplerSettings::greedy(100), &[], &[]).unwrap();
    // The prompt starts at one token (<sos>) and grows by one per event.
    assert!(out.events.len() <= 7);
}

#[test]
fn a_dominant_end_logit_stops_generation_immediately() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 31, false).unwrap();
    for name in ["gru.out.w"] {
        model.param(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let bias = model.param("gru.out.b").unwrap();
    let eos = model.dict.eos_event();
    {
        let mut b = bias.data_mut();
        b.iter_mut().for_each(|v| *v = 0.0);
        b[eos] = 10.0;
    }
    let out = generate(&model, &SamplerSettings::greedy(10), &[], &[]).unwrap();
    assert!(out.ended);
    assert!(out.events.is_empty());

    // With early stopping disabled the end lane is suppressed and the run
    // fills the whole event budget.
    let forced = SamplerSettings {
        stop_on_eos: false,
        ..SamplerSettings::greedy(10)
    };
    let out = generate(&model, &forced, &[], &[]).unwrap();
    assert!(!out.ended);
    assert_eq!(out.events.len(), 10);
}

#[test]
fn invalid_settings_are_rejected_before_any_work() {
    let model: Model<f32> = Model::new(ModelConfig::desk(), 31, false).unwrap();
    let settings = SamplerSettings {
        strategy: Strategy::TopP { p: 0.0, temperature: 0.7 },
        seed: 0,
        max_events: 5,
        stop_on_eos: true,
    };
    assert!(generate(&model, &settings, &[], &[]).is_err());
}

#[test]
fn conditioned_prompts_generate_without_error() {
    let mut config = ModelConfig::desk();
    config.meta_vocab = 4;
    let model: Model<f32> = Model::new(config, 31, false).unwrap();
    let condition = vec![CompoundToken {
        onset: 0,
        duration: 20,
        octave: 4,
        pitch_class: 0,
        instrument: 32,
        velocity: 80,
    }];
    let out = generate(&model, &SamplerSettings::greedy(3), &[1, 2], &condition).unwrap();
    assert!(out.events.len() <= 3);
}
