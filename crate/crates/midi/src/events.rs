//! Plain note/tempo event types shared by the parser, writer and tokenizer.

/// Instrument id used for percussion (MIDI channel 10). Melodic programs use
/// 0..=127, so percussion gets the one extra slot.
pub const PERCUSSION_INSTRUMENT: u8 = 128;

/// One note on the absolute millisecond timeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    /// Onset in milliseconds from the start of the file. Non-negative.
    pub onset_ms: f64,
    /// Duration in milliseconds. Strictly positive.
    pub duration_ms: f64,
    /// MIDI pitch 0..=127.
    pub pitch: u8,
    /// Program 0..=127, or [`PERCUSSION_INSTRUMENT`] for channel-10 notes.
    pub instrument: u8,
    /// Note-on velocity 1..=127 (velocity 0 is a note-off, never stored).
    pub velocity: u8,
}

impl NoteEvent {
    /// Check the field ranges documented on the struct.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.onset_ms >= 0.0 && self.onset_ms.is_finite()) {
            return Err(format!("onset {} must be finite and >= 0", self.onset_ms));
        }
        if !(self.duration_ms > 0.0 && self.duration_ms.is_finite()) {
            return Err(format!("duration {} must be finite and > 0", self.duration_ms));
        }
        if self.pitch > 127 {
            return Err(format!("pitch {} out of range", self.pitch));
        }
        if self.instrument > PERCUSSION_INSTRUMENT {
            return Err(format!("instrument {} out of range", self.instrument));
        }
        if self.velocity == 0 || self.velocity > 127 {
            return Err(format!("velocity {} out of range", self.velocity));
        }
        Ok(())
    }
}

/// A tempo change anchored to an absolute tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TempoEvent {
    pub tick: u64,
    /// Microseconds per quarter note.
    pub us_per_quarter: u32,
}

/// A parsed piece: notes on one merged timeline plus the tempo map that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiDocument {
    /// Sorted by `(onset_ms, instrument, pitch)`.
    pub events: Vec<NoteEvent>,
    /// Tempo changes with strictly increasing ticks. May be empty, in which
    /// case 500000 us per quarter (120 bpm) is implied.
    pub tempo_map: Vec<TempoEvent>,
    /// Ticks per quarter note. Strictly positive.
    pub ppq: u16,
}

impl MidiDocument {
    /// A document with the writer's default timing and no events.
    pub fn empty() -> Self {
        MidiDocument {
            events: Vec::new(),
            tempo_map: vec![TempoEvent { tick: 0, us_per_quarter: 500_000 }],
            ppq: 480,
        }
    }

    /// Check every structural invariant: event ranges, event ordering and the
    /// tempo map's strictly increasing ticks.
    pub fn validate(&self) -> Result<(), String> {
        if self.ppq == 0 {
            return Err("ppq must be positive".into());
        }
        for pair in self.tempo_map.windows(2) {
            if pair[1].tick <= pair[0].tick {
                return Err(format!(
                    "tempo ticks not strictly increasing: {} then {}",
                    pair[0].tick, pair[1].tick
                ));
            }
        }
        for (i, ev) in self.events.iter().enumerate() {
            ev.validate().map_err(|e| format!("event {i}: {e}"))?;
        }
        for (i, pair) in self.events.windows(2).enumerate() {
            if sort_key(&pair[1]) < sort_key(&pair[0]) {
                return Err(format!("events {i} and {} out of order", i + 1));
            }
        }
        Ok(())
    }

    /// End of the piece: the largest note end time, or 0 with no notes.
    pub fn end_ms(&self) -> f64 {
        self.events
            .iter()
            .map(|e| e.onset_ms + e.duration_ms)
            .fold(0.0, f64::max)
    }
}

/// Canonical event ordering: onset, then instrument, then pitch. Onsets are
/// compared exactly; ties between the float keys fall back to the id fields.
pub(crate) fn sort_key(e: &NoteEvent) -> (u64, u8, u8) {
    // Onsets are non-negative finite, so their bit patterns order like the
    // values themselves.
    (e.onset_ms.to_bits(), e.instrument, e.pitch)
}

/// Sort events into the canonical `(onset, instrument, pitch)` order.
pub(crate) fn sort_events(events: &mut [NoteEvent]) {
    events.sort_by_key(sort_key);
}
