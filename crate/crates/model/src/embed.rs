//! Input embedding: continuous sinusoidal attribute features fused into one
//! hidden vector per event, plus dedicated vectors for control tokens.

use cadenza_midi::CompoundToken;
use cadenza_tensor::{lit, Scalar, Tape, Tensor, Var};

use crate::config::{EmbeddingKind, ModelConfig, NUM_GROUPS};
use crate::params::ParamBuilder;
use crate::seq::SeqToken;
use crate::{ModelError, Result};

/// Sinusoidal featurization of one scalar: interleaved
/// `sin(v * w_j), cos(v * w_j)` with `w_j = base^(-2j / k)`. Accepts any
/// real value, so fractional (microtonal) attributes embed smoothly.
pub fn sinusoid_features(value: f64, base: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    for j in 0..k / 2 {
        let w = base.powf(-2.0 * j as f64 / k as f64);
        out.push((value * w).sin());
        out.push((value * w).cos());
    }
    out
}

/// Feature matrix `[n, k]` for a batch of values.
pub fn sinusoid_matrix<T: Scalar>(values: &[f64], base: f64, k: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(values.len() * k);
    for &v in values {
        data.extend(sinusoid_features(v, base, k).into_iter().map(lit::<T>));
    }
    Tensor::from_vec(vec![values.len(), k], data).expect("feature shape")
}

/// The numeric attributes in embedding order; instruments sit between pitch
/// class and velocity and always use a lookup table.
const NUMERIC_ATTRS: usize = 5;

enum AttrEmbed<T: Scalar> {
    /// Trainable linear map over sinusoidal features.
    Fourier { w: Tensor<T>, b: Tensor<T>, base: f64 },
    /// Plain lookup table (ablation); requires integral attribute values.
    Table { table: Tensor<T> },
}

/// Index of each control token in the stacked special table.
fn special_index(token: &SeqToken) -> Option<usize> {
    match token {
        SeqToken::Sos => Some(0),
        SeqToken::Eos => Some(1),
        SeqToken::Cls => Some(2),
        SeqToken::Soc => Some(3),
        SeqToken::Eoc => Some(4),
        SeqToken::Pad => Some(5),
        _ => None,
    }
}

const SPECIAL_NAMES: [&str; 6] = ["sos", "eos", "cls", "soc", "eoc", "pad"];

pub struct Embedder<T: Scalar> {
    attrs: Vec<AttrEmbed<T>>,
    instrument: Tensor<T>,
    fusion_w: Tensor<T>,
    fusion_b: Tensor<T>,
    specials: Vec<Tensor<T>>,
    meta: Option<Tensor<T>>,
    k: usize,
}

impl<T: Scalar> Embedder<T> {
    pub fn new(config: &ModelConfig, params: &mut ParamBuilder<T>) -> Self {
        let k = config.fme_dim();
        let hidden = config.hidden_size;
        let bases = [
            config.bases.onset,
            config.bases.duration,
            config.bases.octave,
            config.bases.pitch_class,
            config.bases.velocity,
        ];
        let names = ["onset", "duration", "octave", "pitch_class", "velocity"];
        let vocabs: [usize; NUMERIC_ATTRS] = [
            0, // onset never uses a table
            config.layout.max_time_bin() as usize + 1,
            11,
            12,
            128,
        ];
        let mut attrs = Vec::with_capacity(NUMERIC_ATTRS);
        for i in 0..NUMERIC_ATTRS {
            // Onset keeps the sinusoidal form in both modes so absolute time
            // stays continuous; the lookup ablation only swaps the rest.
            let fourier = i == 0 || config.embedding == EmbeddingKind::Fourier;
            if fourier {
                attrs.push(AttrEmbed::Fourier {
                    w: params.uniform(&format!("embed.fme.{}.w", names[i]), &[k, k], k),
                    b: params.zeros(&format!("embed.fme.{}.b", names[i]), &[k]),
                    base: bases[i],
                });
            } else {
                attrs.push(AttrEmbed::Table {
                    table: params.uniform(
                        &format!("embed.lookup.{}.table", names[i]),
                        &[vocabs[i], k],
                        k,
                    ),
                });
            }
        }
        let instrument = params.uniform("embed.instrument.table", &[129, k], k);
        let fusion_w = params.uniform("embed.fusion.w", &[NUM_GROUPS * k, hidden], NUM_GROUPS * k);
        let fusion_b = params.zeros("embed.fusion.b", &[hidden]);
        let specials = SPECIAL_NAMES
            .iter()
            .map(|n| params.uniform_scaled(&format!("embed.special.{n}"), &[hidden], 0.02))
            .collect();
        let meta = (config.meta_vocab > 0).then(|| {
            params.uniform_scaled("embed.meta.table", &[config.meta_vocab, hidden], 0.02)
        });
        Embedder { attrs, instrument, fusion_w, fusion_b, specials, meta, k }
    }

    pub fn fme_dim(&self) -> usize {
        self.k
    }

    /// Embed one numeric attribute (0 = onset, 1 = duration, 2 = octave,
    /// 3 = pitch class, 4 = velocity) for a batch of values: `[n, k]`.
    pub fn embed_attribute(&self, tape: &Tape<T>, attr: usize, values: &[f64]) -> Result<Var> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(ModelError::Sequence(format!(
                "attribute {attr} value {v} is not finite"
            )));
        }
        match &self.attrs[attr] {
            AttrEmbed::Fourier { w, b, base } => {
                let pe = sinusoid_matrix::<T>(values, *base, self.k);
                let proj = tape.matmul(tape.constant(&pe), tape.leaf(w))?;
                Ok(tape.add(proj, tape.leaf(b))?)
            }
            AttrEmbed::Table { table } => {
                let vocab = table.shape()[0];
                let mut ids = Vec::with_capacity(values.len());
                for &v in values {
                    if v.fract() != 0.0 || v < 0.0 || (v as usize) >= vocab {
                        return Err(ModelError::Sequence(format!(
                            "lookup embedding needs an integer in [0, {vocab}), got {v}"
                        )));
                    }
                    ids.push(v as usize);
                }
                Ok(tape.gather(tape.leaf(table), &ids)?)
            }
        }
    }

    /// Per-attribute embeddings of events, concatenated but not yet fused:
    /// `[n, 6k]` in attribute order (onset, duration, octave, pitch class,
    /// instrument, velocity).
    pub fn embed_events_prefused(&self, tape: &Tape<T>, events: &[CompoundToken]) -> Result<Var> {
        let pull = |f: fn(&CompoundToken) -> f64| -> Vec<f64> { events.iter().map(f).collect() };
        let onset = self.embed_attribute(tape, 0, &pull(|e| e.onset as f64))?;
        let duration = self.embed_attribute(tape, 1, &pull(|e| e.duration as f64))?;
        let octave = self.embed_attribute(tape, 2, &pull(|e| e.octave as f64))?;
        let pitch_class = self.embed_attribute(tape, 3, &pull(|e| e.pitch_class as f64))?;
        let velocity = self.embed_attribute(tape, 4, &pull(|e| e.velocity as f64))?;
        let inst_ids: Vec<usize> = events.iter().map(|e| e.instrument as usize).collect();
        let instrument = tape.gather(tape.leaf(&self.instrument), &inst_ids)?;
        Ok(tape.concat(1, &[onset, duration, octave, pitch_class, instrument, velocity])?)
    }

    /// Fully fused event embeddings `[n, hidden]`.
    pub fn embed_events(&self, tape: &Tape<T>, events: &[CompoundToken]) -> Result<Var> {
        let pre = self.embed_events_prefused(tape, events)?;
        let fused = tape.matmul(pre, tape.leaf(&self.fusion_w))?;
        Ok(tape.add(fused, tape.leaf(&self.fusion_b))?)
    }

    /// Stacked control-token table `[6, hidden]` as a tape node.
    fn specials_var(&self, tape: &Tape<T>) -> Result<Var> {
        let hidden = self.specials[0].shape()[0];
        let rows: Vec<Var> = self
            .specials
            .iter()
            .map(|t| tape.reshape(tape.leaf(t), &[1, hidden]))
            .collect::<std::result::Result<_, _>>()?;
        Ok(tape.concat(0, &rows)?)
    }

    /// Embed a whole token sequence: `[len, hidden]`.
    pub fn embed_tokens(&self, tape: &Tape<T>, tokens: &[SeqToken]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(ModelError::Sequence("cannot embed an empty sequence".into()));
        }
        enum Run {
            Events(Vec<CompoundToken>),
            Specials(Vec<usize>),
            Metas(Vec<usize>),
        }
        let mut runs: Vec<Run> = Vec::new();
        for tok in tokens {
            match tok {
                SeqToken::Event(e) => {
                    if let Some(Run::Events(v)) = runs.last_mut() {
                        v.push(*e);
                    } else {
                        runs.push(Run::Events(vec![*e]));
                    }
                }
                SeqToken::Meta(id) => {
                    let meta = self.meta.as_ref().ok_or_else(|| {
                        ModelError::Sequence(
                            "metadata token in input but the model has meta_vocab = 0".into(),
                        )
                    })?;
                    let vocab = meta.shape()[0];
                    if *id as usize >= vocab {
                        return Err(ModelError::Sequence(format!(
                            "metadata id {id} out of range (meta_vocab = {vocab})"
                        )));
                    }
                    if let Some(Run::Metas(v)) = runs.last_mut() {
                        v.push(*id as usize);
                    } else {
                        runs.push(Run::Metas(vec![*id as usize]));
                    }
                }
                other => {
                    let idx = special_index(other).expect("non-event, non-meta token");
                    if let Some(Run::Specials(v)) = runs.last_mut() {
                        v.push(idx);
                    } else {
                        runs.push(Run::Specials(vec![idx]));
                    }
                }
            }
        }
        let mut specials_var = None;
        let mut parts = Vec::with_capacity(runs.len());
        for run in &runs {
            parts.push(match run {
                Run::Events(events) => self.embed_events(tape, events)?,
                Run::Specials(ids) => {
                    if specials_var.is_none() {
                        specials_var = Some(self.specials_var(tape)?);
                    }
                    tape.gather(specials_var.unwrap(), ids)?
                }
                Run::Metas(ids) => {
                    tape.gather(tape.leaf(self.meta.as_ref().expect("checked above")), ids)?
                }
            });
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat(0, &parts)?)
    }
}
