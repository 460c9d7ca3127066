//! Evaluation: piece-level classification with logit averaging, objective
//! controllability metrics, and test perplexity.

use cadenza_midi::CompoundToken;
use cadenza_tensor::{Scalar, Tape};

use crate::attention::ForwardOptions;
use crate::model::Model;
use crate::seq::{Row, SeqToken};
use crate::{ModelError, Result};

/// Classify one window of wrapped tokens; returns raw class logits.
pub fn window_logits<T: Scalar>(model: &Model<T>, tokens: &[SeqToken]) -> Result<Vec<f64>> {
    let tape = Tape::<T>::new();
    let logits = model.classify_logits(&tape, tokens, &mut ForwardOptions::eval())?;
    Ok(tape
        .value_vec(logits)?
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect())
}

/// Average per-window class logits and take the argmax (ties go to the
/// lowest class index). Returns the class and the averaged logits.
pub fn mean_logits_argmax(windows: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let first = windows
        .first()
        .ok_or_else(|| ModelError::Eval("no windows to average".into()))?;
    let mut sum = vec![0.0; first.len()];
    for w in windows {
        if w.len() != sum.len() {
            return Err(ModelError::Eval(format!(
                "window logit lengths differ: {} vs {}",
                w.len(),
                sum.len()
            )));
        }
        for (s, l) in sum.iter_mut().zip(w) {
            *s += l;
        }
    }
    for s in &mut sum {
        *s /= windows.len() as f64;
    }
    let mut best = 0usize;
    for (i, &v) in sum.iter().enumerate() {
        if v > sum[best] {
            best = i;
        }
    }
    Ok((best, sum))
}

/// Piece-level classification: split the piece into non-overlapping windows
/// of at most `max_len` events, classify each, average the logits, and take
/// the argmax. Returns the class and the averaged logits.
pub fn classify_piece<T: Scalar>(
    model: &Model<T>,
    events: &[CompoundToken],
    max_len: usize,
) -> Result<(usize, Vec<f64>)> {
    if events.is_empty() {
        return Err(ModelError::Eval("cannot classify an empty piece".into()));
    }
    if max_len == 0 {
        return Err(ModelError::Eval("window length must be positive".into()));
    }
    let mut windows = Vec::new();
    for chunk in events.chunks(max_len) {
        let mut tokens = Vec::with_capacity(chunk.len() + 3);
        tokens.push(SeqToken::Sos);
        tokens.extend(chunk.iter().map(|&e| SeqToken::Event(e)));
        tokens.push(SeqToken::Eos);
        tokens.push(SeqToken::Cls);
        windows.push(window_logits(model, &tokens)?);
    }
    mean_logits_argmax(&windows)
}

/// Inclusive attribute range in tokenizer bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeSpec {
    pub min: u32,
    pub max: u32,
}

impl RangeSpec {
    pub fn contains_with_tolerance(&self, value: u32, tol: u32) -> bool {
        let lo = self.min.saturating_sub(tol);
        let hi = self.max.saturating_add(tol);
        value >= lo && value <= hi
    }
}

/// Tolerances (in bins) at which range accuracies are reported.
pub const CONTROL_TOLERANCES: [u32; 4] = [0, 1, 3, 5];

/// End time of a note set in seconds: the largest onset + duration, at
/// ten milliseconds per bin. Empty sets end at zero.
pub fn end_time_seconds(events: &[CompoundToken]) -> f64 {
    events
        .iter()
        .map(|e| (e.onset + e.duration) as f64 * 0.01)
        .fold(0.0, f64::max)
}

/// Controllability of one generated piece against its prescribed ranges
/// and accompaniment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PieceControl {
    /// Fraction of notes whose velocity is within the range widened by
    /// each tolerance; `None` when nothing was generated.
    pub velocity_acc: [Option<f64>; CONTROL_TOLERANCES.len()],
    /// Same for pitch (MIDI number = octave * 12 + pitch class).
    pub pitch_acc: [Option<f64>; CONTROL_TOLERANCES.len()],
    /// End-time difference in seconds: generated minus accompaniment
    /// (negative means the generation stopped early).
    pub end_diff_seconds: f64,
}

/// One evaluation case.
#[derive(Debug, Clone)]
pub struct ControlCase {
    pub generated: Vec<CompoundToken>,
    pub pitch_range: RangeSpec,
    pub velocity_range: RangeSpec,
    pub accompaniment: Vec<CompoundToken>,
}

/// Aggregate over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlReport {
    pub pieces: Vec<PieceControl>,
    /// Mean accuracies over the pieces where they are defined.
    pub velocity_acc_mean: [Option<f64>; CONTROL_TOLERANCES.len()],
    pub pitch_acc_mean: [Option<f64>; CONTROL_TOLERANCES.len()],
    pub end_diff_mean: f64,
    pub end_diff_std: f64,
}

fn ratio_in_range(
    values: impl Iterator<Item = u32> + Clone,
    range: RangeSpec,
) -> [Option<f64>; CONTROL_TOLERANCES.len()] {
    let n = values.clone().count();
    if n == 0 {
        return [None; CONTROL_TOLERANCES.len()];
    }
    let mut out = [None; CONTROL_TOLERANCES.len()];
    for (i, &tol) in CONTROL_TOLERANCES.iter().enumerate() {
        let hits = values
            .clone()
            .filter(|&v| range.contains_with_tolerance(v, tol))
            .count();
        out[i] = Some(hits as f64 / n as f64);
    }
    out
}

/// Metrics for one piece.
pub fn piece_control(case: &ControlCase) -> PieceControl {
    let pitches = case.generated.iter().map(|e| e.pitch() as u32);
    let velocities = case.generated.iter().map(|e| e.velocity as u32);
    PieceControl {
        velocity_acc: ratio_in_range(velocities, case.velocity_range),
        pitch_acc: ratio_in_range(pitches, case.pitch_range),
        end_diff_seconds: end_time_seconds(&case.generated)
            - end_time_seconds(&case.accompaniment),
    }
}

fn mean_defined(
    values: impl Iterator<Item = Option<f64>>,
) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Aggregate controllability across an evaluation set.
pub fn controllability(cases: &[ControlCase]) -> Result<ControlReport> {
    if cases.is_empty() {
        return Err(ModelError::Eval("controllability over an empty set".into()));
    }
    let pieces: Vec<PieceControl> = cases.iter().map(piece_control).collect();
    let mut velocity_acc_mean = [None; CONTROL_TOLERANCES.len()];
    let mut pitch_acc_mean = [None; CONTROL_TOLERANCES.len()];
    for i in 0..CONTROL_TOLERANCES.len() {
        velocity_acc_mean[i] = mean_defined(pieces.iter().map(|p| p.velocity_acc[i]));
        pitch_acc_mean[i] = mean_defined(pieces.iter().map(|p| p.pitch_acc[i]));
    }
    let diffs: Vec<f64> = pieces.iter().map(|p| p.end_diff_seconds).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
    Ok(ControlReport {
        pieces,
        velocity_acc_mean,
        pitch_acc_mean,
        end_diff_mean: mean,
        end_diff_std: var.sqrt(),
    })
}

fn acc_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    }
}

impl PieceControl {
    /// Comma-separated record: velocity accuracies, pitch accuracies,
    /// end-time difference.
    pub fn csv_line(&self) -> String {
        let mut fields: Vec<String> = Vec::new();
        fields.extend(self.velocity_acc.iter().map(|&v| acc_field(v)));
        fields.extend(self.pitch_acc.iter().map(|&v| acc_field(v)));
        fields.push(format!("{:.4}", self.end_diff_seconds));
        fields.join(", ")
    }
}

impl ControlReport {
    pub fn csv_header() -> String {
        let mut fields: Vec<String> = Vec::new();
        for t in CONTROL_TOLERANCES {
            fields.push(format!("velocity_acc_tol{t}"));
        }
        for t in CONTROL_TOLERANCES {
            fields.push(format!("pitch_acc_tol{t}"));
        }
        fields.push("end_diff_seconds".to_string());
        fields.join(", ")
    }

    /// The aggregate record (means; the end-time field carries mean and
    /// standard deviation).
    pub fn csv_aggregate(&self) -> String {
        let mut fields: Vec<String> = Vec::new();
        fields.extend(self.velocity_acc_mean.iter().map(|&v| acc_field(v)));
        fields.extend(self.pitch_acc_mean.iter().map(|&v| acc_field(v)));
        fields.push(format!("{:.4}", self.end_diff_mean));
        fields.push(format!("{:.4}", self.end_diff_std));
        fields.join(", ")
    }
}

/// Test perplexity: the exponential of the mean cross entropy per
/// supervised sub-token over the whole set.
pub fn perplexity<T: Scalar>(model: &Model<T>, rows: &[Row]) -> Result<f64> {
    if rows.is_empty() {
        return Err(ModelError::Eval("perplexity over an empty set".into()));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for row in rows {
        let tape = Tape::<T>::new();
        let (sum, stats) = model.row_loss(&tape, row, &mut ForwardOptions::eval())?;
        total += tape.value_vec(sum)?[0].to_f64().unwrap_or(f64::NAN);
        count += stats.sub_tokens;
    }
    if count == 0 {
        return Err(ModelError::Eval("no supervised sub-tokens in the set".into()));
    }
    Ok((total / count as f64).exp())
}
