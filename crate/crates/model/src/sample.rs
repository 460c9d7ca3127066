//! Autoregressive sampling: greedy and nucleus strategies over the masked
//! sub-decoder logits, with onset accumulation and end detection.

use cadenza_midi::{CompoundToken, FlatToken};
use cadenza_tensor::{Scalar, Tape};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::attention::ForwardOptions;
use crate::model::Model;
use crate::seq::{build_conditional_input, Row, SeqToken, DECODE_STEPS};
use crate::{ModelError, Result};

/// Sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Argmax at every step.
    Greedy,
    /// Temperature-scaled nucleus sampling: softmax of `logits / temperature`
    /// restricted to the smallest probability-sorted prefix with mass >= p.
    TopP { p: f64, temperature: f64 },
}

impl Strategy {
    /// The defaults used for evaluation: p = 0.6, temperature = 0.7.
    pub fn standard_top_p() -> Self {
        Strategy::TopP { p: 0.6, temperature: 0.7 }
    }
}

/// Sampler settings.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSettings {
    pub strategy: Strategy,
    pub seed: u64,
    pub max_events: usize,
    /// Stop when the model draws the end-of-sequence event (on by
    /// default). When off, the end lane is masked out and the draw is
    /// retried, so generation always runs to the event budget.
    pub stop_on_eos: bool,
}

impl SamplerSettings {
    pub fn greedy(max_events: usize) -> Self {
        SamplerSettings {
            strategy: Strategy::Greedy,
            seed: 0,
            max_events,
            stop_on_eos: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::TopP { p, temperature } = self.strategy {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ModelError::Eval(format!("top-p mass {p} must be in (0, 1]")));
            }
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ModelError::Eval(format!(
                    "temperature {temperature} must be positive and finite"
                )));
            }
        }
        Ok(())
    }
}

/// Softmax over finite lanes; -inf lanes get probability zero.
pub fn masked_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(ModelError::Eval("all logits are masked".into()));
    }
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Indices of the smallest probability-sorted prefix whose mass reaches
/// `p` (ties broken by index for determinism).
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mass = 0.0;
    let mut picked = Vec::new();
    for idx in order {
        picked.push(idx);
        mass += probs[idx];
        if mass >= p {
            break;
        }
    }
    picked
}

/// Draw one index from masked logits under a strategy. All candidate
/// logits must be finite or -inf; anything else aborts.
pub fn sample_index(logits: &[f64], strategy: Strategy, rng: &mut ChaCha12Rng) -> Result<usize> {
    if logits.iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
        return Err(ModelError::Eval("non-finite logit during sampling".into()));
    }
    match strategy {
        Strategy::Greedy => {
            let mut best = None;
            for (i, &z) in logits.iter().enumerate() {
                if z.is_finite() && best.map_or(true, |(_, bz)| z > bz) {
                    best = Some((i, z));
                }
            }
            best.map(|(i, _)| i)
                .ok_or_else(|| ModelError::Eval("all logits are masked".into()))
        }
        Strategy::TopP { p, temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
            let probs = masked_softmax(&scaled)?;
            let keep = nucleus(&probs, p);
            let total: f64 = keep.iter().map(|&i| probs[i]).sum();
            let mut draw = rng.random_range(0.0..1.0) * total;
            for &i in &keep {
                draw -= probs[i];
                if draw <= 0.0 {
                    return Ok(i);
                }
            }
            Ok(*keep.last().expect("nucleus is nonempty"))
        }
    }
}

/// What one sampled event decodes to.
enum Decoded {
    Event(CompoundToken),
    End,
}

/// Result of a generation run.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub events: Vec<CompoundToken>,
    /// True when generation stopped because the model emitted the
    /// end-of-sequence event (rather than hitting a budget).
    pub ended: bool,
}

/// Generate autoregressively. `metadata` and `condition` may be empty; a
/// nonempty condition keeps its absolute onsets, and generated onsets
/// accumulate timeshifts starting from zero.
pub fn generate<T: Scalar>(
    model: &Model<T>,
    settings: &SamplerSettings,
    metadata: &[u32],
    condition: &[CompoundToken],
) -> Result<Generated> {
    settings.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(settings.seed);
    let mut tokens = build_conditional_input(metadata, condition, &[]);
    // Drop the trailing <eos>: generation continues from <sos>.
    assert_eq!(tokens.pop(), Some(SeqToken::Eos));
    let mut events = Vec::new();
    let mut ended = false;
    let mut onset = 0u32;
    while events.len() < settings.max_events && tokens.len() < model.config.context_length {
        match decode_next(model, &tokens, onset, settings, &mut rng)? {
            Decoded::End => {
                ended = true;
                break;
            }
            Decoded::Event(e) => {
                onset = e.onset;
                events.push(e);
                tokens.push(SeqToken::Event(e));
            }
        }
    }
    Ok(Generated { events, ended })
}

/// One backbone forward over the prefix plus six sampling steps.
fn decode_next<T: Scalar>(
    model: &Model<T>,
    tokens: &[SeqToken],
    onset: u32,
    settings: &SamplerSettings,
    rng: &mut ChaCha12Rng,
) -> Result<Decoded> {
    let tape = Tape::<T>::new();
    let row = Row::single(tokens.to_vec())?;
    let states = model.forward_states(&tape, &row, &mut ForwardOptions::eval())?;
    let mut last = tape.narrow(states, 0, row.len() - 1, 1)?;
    // The decoder seed gets the same metadata feature that teacher forcing
    // adds, so conditional sampling sees the distribution it was trained on.
    let meta_ids: Vec<usize> = tokens
        .iter()
        .filter_map(|t| match t {
            SeqToken::Meta(id) => Some(*id as usize),
            _ => None,
        })
        .collect();
    if !meta_ids.is_empty() {
        let cond = model.meta_cond.as_ref().ok_or_else(|| {
            ModelError::Eval("metadata in input but the model has no metadata module".into())
        })?;
        last = tape.add(last, cond.feature(&tape, &meta_ids)?)?;
    }
    let mut state = model.decoder.begin(&tape, last)?;
    let mut input = model.dict.sos_gru();
    let mut values = [0usize; DECODE_STEPS];
    for step in 0..DECODE_STEPS {
        let logits = model.decoder.step_sample(&tape, &mut state, input, step)?;
        let mut row_logits: Vec<f64> = tape
            .value_vec(logits)?
            .iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let mut picked = sample_index(&row_logits, settings.strategy, rng)?;
        if step == 0 && picked == model.dict.eos_event() {
            if settings.stop_on_eos {
                return Ok(Decoded::End);
            }
            // Forced continuation: drop the end lane and draw again.
            row_logits[picked] = f64::NEG_INFINITY;
            picked = sample_index(&row_logits, settings.strategy, rng)?;
        }
        match model.dict.unflatten(picked)? {
            FlatToken::Value { attribute, value } => {
                debug_assert_eq!(attribute, crate::seq::STEP_ATTRIBUTES[step]);
                values[step] = value as usize;
            }
            other => {
                return Err(ModelError::Eval(format!(
                    "sampler produced a non-attribute token {other:?} at step {step}"
                )));
            }
        }
        input = picked;
    }
    let event = CompoundToken {
        onset: onset + values[0] as u32,
        duration: values[1] as u32,
        octave: values[2] as u8,
        pitch_class: values[3] as u8,
        instrument: values[4] as u8,
        velocity: values[5] as u8,
    };
    Ok(Decoded::Event(event))
}
