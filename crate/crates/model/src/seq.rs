//! Sequence-level token representation: compound events plus the control
//! tokens that wrap them, and the supervision targets derived from a row.

use cadenza_midi::{Attribute, CompoundToken, TokenDictionary};

use crate::ModelError;

/// One position in a model input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqToken {
    /// A musical event with absolute onset time.
    Event(CompoundToken),
    /// Start of a generated span.
    Sos,
    /// End of a generated span.
    Eos,
    /// Classification readout position.
    Cls,
    /// Start of a condition block.
    Soc,
    /// End of a condition block.
    Eoc,
    /// Metadata id used in conditional generation.
    Meta(u32),
    /// Padding.
    Pad,
}

impl SeqToken {
    pub fn is_event(self) -> bool {
        matches!(self, SeqToken::Event(_))
    }
}

/// Number of position slots fed to attention (one per head group).
pub const POSITION_SLOTS: usize = 6;

/// Position vector for one token. Events expose their attributes (the
/// instrument slot tracks onset time so timbre heads see absolute time);
/// every control token sits at the origin.
pub fn position_of(token: &SeqToken) -> [f64; POSITION_SLOTS] {
    match token {
        SeqToken::Event(e) => [
            e.onset as f64,
            e.duration as f64,
            e.octave as f64,
            e.pitch_class as f64,
            e.onset as f64,
            e.velocity as f64,
        ],
        _ => [0.0; POSITION_SLOTS],
    }
}

pub fn positions_of(tokens: &[SeqToken]) -> Vec<[f64; POSITION_SLOTS]> {
    tokens.iter().map(position_of).collect()
}

/// One packed row: a fixed-length token sequence and, per position, the
/// sample id it belongs to (`None` marks padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub tokens: Vec<SeqToken>,
    pub segments: Vec<Option<u32>>,
}

impl Row {
    pub fn new(tokens: Vec<SeqToken>, segments: Vec<Option<u32>>) -> Result<Self, ModelError> {
        if tokens.len() != segments.len() {
            return Err(ModelError::Sequence(format!(
                "row has {} tokens but {} segment ids",
                tokens.len(),
                segments.len()
            )));
        }
        for (t, (tok, seg)) in tokens.iter().zip(&segments).enumerate() {
            match (tok, seg) {
                (SeqToken::Pad, Some(_)) => {
                    return Err(ModelError::Sequence(format!(
                        "position {t}: padding must not carry a segment id"
                    )));
                }
                (tok, None) if !matches!(tok, SeqToken::Pad) => {
                    return Err(ModelError::Sequence(format!(
                        "position {t}: non-padding token {tok:?} must carry a segment id"
                    )));
                }
                _ => {}
            }
        }
        Ok(Row { tokens, segments })
    }

    /// A row holding one sample and no padding: every token belongs to
    /// segment 0.
    pub fn single(tokens: Vec<SeqToken>) -> Result<Self, ModelError> {
        let segments = vec![Some(0); tokens.len()];
        Row::new(tokens, segments)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Append padding until the row is `len` long.
    pub fn pad_to(&mut self, len: usize) -> Result<(), ModelError> {
        if self.tokens.len() > len {
            return Err(ModelError::Sequence(format!(
                "row of length {} cannot be padded down to {}",
                self.tokens.len(),
                len
            )));
        }
        while self.tokens.len() < len {
            self.tokens.push(SeqToken::Pad);
            self.segments.push(None);
        }
        Ok(())
    }
}

/// Wrap a sample's events as `<sos> events <eos>`.
pub fn wrap_lm(events: &[CompoundToken]) -> Vec<SeqToken> {
    let mut tokens = Vec::with_capacity(events.len() + 2);
    tokens.push(SeqToken::Sos);
    tokens.extend(events.iter().map(|&e| SeqToken::Event(e)));
    tokens.push(SeqToken::Eos);
    tokens
}

/// Build a conditional-generation input:
/// `<soc> metadata <eoc> <soc> condition-events <eoc> <sos> target-events <eos>`.
/// Empty metadata or condition blocks are omitted entirely, so with both
/// empty this reduces to a plain `<sos> x <eos>` sequence.
pub fn build_conditional_input(
    metadata: &[u32],
    condition: &[CompoundToken],
    target: &[CompoundToken],
) -> Vec<SeqToken> {
    let mut tokens = Vec::with_capacity(metadata.len() + condition.len() + target.len() + 6);
    if !metadata.is_empty() {
        tokens.push(SeqToken::Soc);
        tokens.extend(metadata.iter().map(|&m| SeqToken::Meta(m)));
        tokens.push(SeqToken::Eoc);
    }
    if !condition.is_empty() {
        tokens.push(SeqToken::Soc);
        tokens.extend(condition.iter().map(|&e| SeqToken::Event(e)));
        tokens.push(SeqToken::Eoc);
    }
    tokens.push(SeqToken::Sos);
    tokens.extend(target.iter().map(|&e| SeqToken::Event(e)));
    tokens.push(SeqToken::Eos);
    tokens
}

/// What the decoder should produce from the backbone state at one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTarget {
    /// Predict the next event's six attribute tokens. Sub-token order:
    /// timeshift (onset delta), duration, octave, pitch class, instrument,
    /// velocity.
    Event {
        timeshift: u32,
        duration: u32,
        octave: u8,
        pitch_class: u8,
        instrument: u8,
        velocity: u8,
    },
    /// Predict end-of-sequence (a single first-step token).
    End,
}

/// One supervised position in a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossPosition {
    /// Index into the row whose backbone state seeds the decoder.
    pub pos: usize,
    pub target: StepTarget,
}

/// Collect the supervised positions of a row.
///
/// Position `t` is supervised when the next token belongs to the same
/// segment, is an event or `<eos>`, and `t` is at or after that segment's
/// `<sos>` — so condition and metadata blocks ahead of `<sos>` provide
/// context but never loss. Timeshift targets are onset differences within
/// the generated span, with the span's first event measured from time zero.
pub fn loss_positions(row: &Row) -> Result<Vec<LossPosition>, ModelError> {
    // Segment id -> index of its <sos>, and the running previous onset.
    let mut sos_at: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    let mut prev_onset: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    for (t, (tok, seg)) in row.tokens.iter().zip(&row.segments).enumerate() {
        if matches!(tok, SeqToken::Sos) {
            let seg = seg.ok_or_else(|| {
                ModelError::Sequence(format!("position {t}: <sos> without a segment id"))
            })?;
            if sos_at.insert(seg, t).is_some() {
                return Err(ModelError::Sequence(format!(
                    "segment {seg} has more than one <sos>"
                )));
            }
        }
    }
    let mut out = Vec::new();
    for t in 0..row.len().saturating_sub(1) {
        let seg = match row.segments[t] {
            Some(s) => s,
            None => continue,
        };
        if row.segments[t + 1] != Some(seg) {
            continue;
        }
        let sos = match sos_at.get(&seg) {
            Some(&s) => s,
            None => continue,
        };
        if t < sos {
            continue;
        }
        match row.tokens[t + 1] {
            SeqToken::Event(e) => {
                let prev = *prev_onset.get(&seg).unwrap_or(&0);
                if e.onset < prev {
                    return Err(ModelError::Sequence(format!(
                        "segment {seg}: onset decreases from {prev} to {} at position {}",
                        e.onset,
                        t + 1
                    )));
                }
                prev_onset.insert(seg, e.onset);
                out.push(LossPosition {
                    pos: t,
                    target: StepTarget::Event {
                        timeshift: e.onset - prev,
                        duration: e.duration,
                        octave: e.octave,
                        pitch_class: e.pitch_class,
                        instrument: e.instrument,
                        velocity: e.velocity,
                    },
                });
            }
            SeqToken::Eos => {
                out.push(LossPosition {
                    pos: t,
                    target: StepTarget::End,
                });
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Number of sub-decoder steps per event.
pub const DECODE_STEPS: usize = 6;

/// Attribute decoded at each sub-decoder step.
pub const STEP_ATTRIBUTES: [Attribute; DECODE_STEPS] = [
    Attribute::Timeshift,
    Attribute::Duration,
    Attribute::Octave,
    Attribute::PitchClass,
    Attribute::Instrument,
    Attribute::Velocity,
];

/// Flat-dictionary target ids for all six steps of one supervised position,
/// plus a mask of which steps carry loss (end-of-sequence targets supervise
/// only the first step).
pub fn step_targets(
    dict: &TokenDictionary,
    target: &StepTarget,
) -> Result<([usize; DECODE_STEPS], [bool; DECODE_STEPS]), ModelError> {
    match *target {
        StepTarget::Event {
            timeshift,
            duration,
            octave,
            pitch_class,
            instrument,
            velocity,
        } => {
            let ids = [
                dict.flatten(Attribute::Timeshift, timeshift)?,
                dict.flatten(Attribute::Duration, duration)?,
                dict.flatten(Attribute::Octave, octave as u32)?,
                dict.flatten(Attribute::PitchClass, pitch_class as u32)?,
                dict.flatten(Attribute::Instrument, instrument as u32)?,
                dict.flatten(Attribute::Velocity, velocity as u32)?,
            ];
            Ok((ids, [true; DECODE_STEPS]))
        }
        StepTarget::End => {
            let mut ids = [0usize; DECODE_STEPS];
            ids[0] = dict.eos_event();
            let mut mask = [false; DECODE_STEPS];
            mask[0] = true;
            // Later steps are never scored; park their ids on each
            // attribute's first value so cross entropy stays finite under
            // the slice masks (the loss mask zeroes their contribution).
            for (k, attr) in STEP_ATTRIBUTES.iter().enumerate().skip(1) {
                ids[k] = dict.flatten(*attr, 0)?;
            }
            Ok((ids, mask))
        }
    }
}

/// Teacher-forced input ids for the six decoder steps: the start marker,
/// then the first five target sub-tokens.
pub fn step_inputs(
    dict: &TokenDictionary,
    target_ids: &[usize; DECODE_STEPS],
) -> [usize; DECODE_STEPS] {
    [
        dict.sos_gru(),
        target_ids[0],
        target_ids[1],
        target_ids[2],
        target_ids[3],
        target_ids[4],
    ]
}
