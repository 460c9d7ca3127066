//! 10 ms quantization between note events and compound tokens.
//!
//! A compound token is one note as six small integers
//! `(onset, duration, octave, pitch_class, instrument, velocity)`; onsets are
//! absolute bin counts. The decoder-side variant replaces the absolute onset
//! with the timeshift from the previous token.

use crate::dict::LayoutKind;
use crate::events::{sort_events, MidiDocument, NoteEvent, TempoEvent};
use crate::{MidiError, Result};

/// Width of one quantization bin in milliseconds.
pub const BIN_MS: f64 = 10.0;

/// One note as attribute bins. `onset` is absolute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompoundToken {
    pub onset: u32,
    pub duration: u32,
    /// `pitch / 12`, 0..=10.
    pub octave: u8,
    /// `pitch % 12`, 0..=11.
    pub pitch_class: u8,
    /// 0..=128 (128 = percussion).
    pub instrument: u8,
    /// 1..=127.
    pub velocity: u8,
}

impl CompoundToken {
    pub fn pitch(&self) -> u8 {
        self.octave * 12 + self.pitch_class
    }
}

/// One note as the model predicts it: timeshift relative to the previous
/// event instead of an absolute onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TargetToken {
    pub timeshift: u32,
    pub duration: u32,
    pub octave: u8,
    pub pitch_class: u8,
    pub instrument: u8,
    pub velocity: u8,
}

/// Round to the nearest bin, halves away from zero (the only case here is
/// upward: inputs are non-negative).
fn to_bin(ms: f64) -> u64 {
    (ms / BIN_MS).round() as u64
}

/// Quantize a document onto the 10 ms grid.
///
/// Events are binned, re-sorted by `(onset, instrument, octave, pitch_class,
/// velocity)`, and the whole file is rejected if any duration bin or any
/// between-event timeshift (including the implicit shift from 0 to the first
/// onset) exceeds the layout maximum. Durations clamp upward to one bin so no
/// note vanishes.
pub fn quantize(doc: &MidiDocument, layout: LayoutKind) -> Result<Vec<CompoundToken>> {
    let max_bin = layout.max_time_bin();
    let mut tokens = Vec::with_capacity(doc.events.len());
    for (i, ev) in doc.events.iter().enumerate() {
        ev.validate()
            .map_err(|e| MidiError::InvalidEvents(format!("event {i}: {e}")))?;
        let onset = to_bin(ev.onset_ms);
        if onset > u32::MAX as u64 {
            return Err(MidiError::InvalidEvents(format!(
                "event {i}: onset {} ms beyond 32-bit bin range",
                ev.onset_ms
            )));
        }
        let duration = to_bin(ev.duration_ms).max(1);
        tokens.push((onset as u32, duration, ev));
    }
    tokens.sort_by_key(|(onset, _, ev)| (*onset, ev.instrument, ev.pitch, ev.velocity));

    let mut out = Vec::with_capacity(tokens.len());
    let mut prev_onset = 0u32;
    for (i, (onset, duration, ev)) in tokens.into_iter().enumerate() {
        let shift = u64::from(onset - prev_onset);
        if shift > u64::from(max_bin) {
            return Err(MidiError::LimitExceeded {
                index: i,
                attribute: "timeshift",
                value: shift,
                max: max_bin,
            });
        }
        if duration > u64::from(max_bin) {
            return Err(MidiError::LimitExceeded {
                index: i,
                attribute: "duration",
                value: duration,
                max: max_bin,
            });
        }
        prev_onset = onset;
        out.push(CompoundToken {
            onset,
            duration: duration as u32,
            octave: ev.pitch / 12,
            pitch_class: ev.pitch % 12,
            instrument: ev.instrument,
            velocity: ev.velocity,
        });
    }
    Ok(out)
}

/// Replace absolute onsets with first differences (the onset before the first
/// token is defined as 0). Fails if onsets ever decrease.
pub fn to_targets(tokens: &[CompoundToken]) -> Result<Vec<TargetToken>> {
    let mut prev = 0u32;
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.onset < prev {
                return Err(MidiError::InvalidEvents(format!(
                    "token {i}: onset {} before previous onset {prev}",
                    t.onset
                )));
            }
            let shift = t.onset - prev;
            prev = t.onset;
            Ok(TargetToken {
                timeshift: shift,
                duration: t.duration,
                octave: t.octave,
                pitch_class: t.pitch_class,
                instrument: t.instrument,
                velocity: t.velocity,
            })
        })
        .collect()
}

/// Running-sum inverse of [`to_targets`].
pub fn from_targets(targets: &[TargetToken]) -> Vec<CompoundToken> {
    let mut onset = 0u32;
    targets
        .iter()
        .map(|t| {
            onset += t.timeshift;
            CompoundToken {
                onset,
                duration: t.duration,
                octave: t.octave,
                pitch_class: t.pitch_class,
                instrument: t.instrument,
                velocity: t.velocity,
            }
        })
        .collect()
}

/// Expand tokens back into a document at bin centers (10 ms per bin) with the
/// writer's default timing.
///
/// The dictionary admits `(octave 10, pitch_class > 7)`, which is above MIDI
/// pitch 127; a sampler can emit it, so the pitch is clamped here.
pub fn detokenize(tokens: &[CompoundToken]) -> MidiDocument {
    let mut events: Vec<NoteEvent> = tokens
        .iter()
        .map(|t| NoteEvent {
            onset_ms: f64::from(t.onset) * BIN_MS,
            duration_ms: f64::from(t.duration) * BIN_MS,
            pitch: t.pitch().min(127),
            instrument: t.instrument,
            velocity: t.velocity,
        })
        .collect();
    sort_events(&mut events);
    MidiDocument {
        events,
        tempo_map: vec![TempoEvent { tick: 0, us_per_quarter: 500_000 }],
        ppq: 480,
    }
}
