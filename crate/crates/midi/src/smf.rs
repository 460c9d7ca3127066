//! Byte-level Standard MIDI File reader and writer.
//!
//! The reader accepts formats 0 and 1, honors running status, merges all
//! tracks onto one tick timeline and converts ticks to milliseconds through
//! the tempo map. The writer emits a single-track format 0 file at 480 ppq
//! and 500000 us per quarter.

use crate::events::{sort_events, MidiDocument, NoteEvent, TempoEvent, PERCUSSION_INSTRUMENT};
use crate::{MidiError, Result};
use std::collections::HashMap;

/// Non-fatal repairs performed while reading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Note-ons never matched by a note-off; closed at the final tick.
    pub dangling_note_ons: usize,
    /// Note-offs with no sounding note; dropped.
    pub unmatched_note_offs: usize,
}

/// Result of [`parse_midi`]: the document plus repair counts.
#[derive(Debug, Clone)]
pub struct ParsedMidi {
    pub document: MidiDocument,
    pub warnings: ParseWarnings,
}

// ---------------------------------------------------------------------------
// Tick -> millisecond conversion
// ---------------------------------------------------------------------------

/// Piecewise-linear tick-to-millisecond map built from a tempo map.
///
/// Each tempo segment contributes `us_per_quarter / ppq` microseconds per
/// tick; the map accumulates exact segment boundaries so lookups are a single
/// segment scan plus one multiplication.
pub struct TickTimeline {
    /// `(start_tick, start_ms, ms_per_tick)` per segment, tick-sorted.
    segments: Vec<(u64, f64, f64)>,
}

impl TickTimeline {
    /// Build from a tick-sorted tempo map. Ticks before the first entry (or
    /// an empty map) use the 500000 us default.
    pub fn new(tempo_map: &[TempoEvent], ppq: u16) -> Self {
        let ppq = ppq.max(1) as f64;
        let mut segments = Vec::with_capacity(tempo_map.len() + 1);
        let mut start_tick = 0u64;
        let mut start_ms = 0.0f64;
        let mut ms_per_tick = 500_000.0 / (ppq * 1000.0);
        if tempo_map.first().map(|t| t.tick) != Some(0) {
            segments.push((0, 0.0, ms_per_tick));
        }
        for tempo in tempo_map {
            let elapsed = (tempo.tick - start_tick) as f64 * ms_per_tick;
            start_ms += elapsed;
            start_tick = tempo.tick;
            ms_per_tick = tempo.us_per_quarter as f64 / (ppq * 1000.0);
            segments.push((start_tick, start_ms, ms_per_tick));
        }
        TickTimeline { segments }
    }

    /// Absolute milliseconds for an absolute tick.
    pub fn ms_at(&self, tick: u64) -> f64 {
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|(start, _, _)| *start <= tick)
            .expect("segment list always covers tick 0");
        seg.1 + (tick - seg.0) as f64 * seg.2
    }
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn err(&self, what: impl Into<String>) -> MidiError {
        MidiError::Malformed { offset: self.pos, what: what.into() }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes([self.u8()?, self.u8()?]))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes([self.u8()?, self.u8()?, self.u8()?, self.u8()?]))
    }

    fn skip(&mut self, n: usize) -> Result<()> {
        if self.remaining() < n {
            return Err(self.err(format!("chunk claims {n} bytes but file ends early")));
        }
        self.pos += n;
        Ok(())
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for i in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                break;
            }
        }
        Err(self.err("variable-length quantity longer than 4 bytes"))
    }
}

/// Everything the tokenizer cares about, tagged for merge ordering.
#[derive(Debug, Clone, Copy)]
enum RawKind {
    Tempo { us_per_quarter: u32 },
    Program { channel: u8, program: u8 },
    NoteOff { channel: u8, pitch: u8 },
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
}

impl RawKind {
    /// Within one tick: tempo first, then program changes, then note on/off
    /// messages in stream order. Keeping stream order for the note messages
    /// lets a same-tick on/off pair read as a (one-tick) zero-length note
    /// while an off-then-on pair reads as a clean retrigger.
    fn priority(&self) -> u8 {
        match self {
            RawKind::Tempo { .. } => 0,
            RawKind::Program { .. } => 1,
            RawKind::NoteOff { .. } | RawKind::NoteOn { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: u16,
    /// Position within the track; keeps the merge sort stable.
    seq: u32,
    kind: RawKind,
}

/// Parse one MTrk chunk body appending into `out`; returns the track length in
/// ticks (the end-of-track position).
fn parse_track(r: &mut Reader, track: u16, len: usize, out: &mut Vec<RawEvent>) -> Result<u64> {
    let end = r.pos + len;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut seq = 0u32;
    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let status = match r.peek() {
            Some(b) if b >= 0x80 => {
                r.pos += 1;
                if b < 0xf0 {
                    running = Some(b);
                } else {
                    // Meta and sysex cancel running status.
                    running = None;
                }
                b
            }
            Some(_) => running.ok_or_else(|| r.err("data byte with no running status"))?,
            None => return Err(r.err("track ends inside an event")),
        };
        match status {
            0xff => {
                let meta_type = r.u8()?;
                let len = r.vlq()? as usize;
                if meta_type == 0x51 {
                    if len != 3 {
                        return Err(r.err(format!("tempo meta of length {len}, expected 3")));
                    }
                    let us = u32::from_be_bytes([0, r.u8()?, r.u8()?, r.u8()?]);
                    if us == 0 {
                        return Err(r.err("tempo of 0 us per quarter"));
                    }
                    out.push(RawEvent { tick, track, seq, kind: RawKind::Tempo { us_per_quarter: us } });
                    seq += 1;
                } else {
                    r.skip(len)?;
                    if meta_type == 0x2f {
                        // End of track; trailing bytes inside the declared
                        // chunk length are ignored.
                        r.pos = end;
                        return Ok(tick);
                    }
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.skip(len)?;
            }
            0xf1..=0xf6 | 0xf8..=0xfe => {
                return Err(r.err(format!("system message {status:#04x} inside a track")));
            }
            _ => {
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 => {
                        let pitch = r.u8()? & 0x7f;
                        let _release = r.u8()?;
                        out.push(RawEvent { tick, track, seq, kind: RawKind::NoteOff { channel, pitch } });
                        seq += 1;
                    }
                    0x90 => {
                        let pitch = r.u8()? & 0x7f;
                        let velocity = r.u8()? & 0x7f;
                        let kind = if velocity == 0 {
                            RawKind::NoteOff { channel, pitch }
                        } else {
                            RawKind::NoteOn { channel, pitch, velocity }
                        };
                        out.push(RawEvent { tick, track, seq, kind });
                        seq += 1;
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        r.u8()?;
                        r.u8()?;
                    }
                    0xc0 => {
                        let program = r.u8()? & 0x7f;
                        out.push(RawEvent { tick, track, seq, kind: RawKind::Program { channel, program } });
                        seq += 1;
                    }
                    0xd0 => {
                        r.u8()?;
                    }
                    _ => return Err(r.err(format!("unexpected status byte {status:#04x}"))),
                }
            }
        }
    }
    Ok(tick)
}

/// Decode SMF bytes into a [`MidiDocument`].
///
/// Formats 0 and 1 are accepted; format 2 and SMPTE timing are rejected as
/// unsupported. All tracks are merged onto one timeline; within a tick, tempo
/// changes apply before program changes, note-offs before note-ons. Note
/// pairing is global across tracks per `(channel, pitch)`; a second note-on on
/// a sounding key truncates the first (last-on wins). Zero-length notes are
/// stretched to one tick. Note-ons still sounding at the end of the file are
/// closed at the final tick and counted in the warnings.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader::new(bytes);

    // Header chunk.
    let start = r.pos;
    if r.remaining() < 4 || &bytes[start..start + 4] != b"MThd" {
        return Err(r.err("missing MThd header"));
    }
    r.pos += 4;
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(format!("MThd length {header_len}, expected at least 6")));
    }
    let format = r.u16()?;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("SMF format {format}")));
    }
    let declared_tracks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(r.err("time division of 0 ticks per quarter"));
    }
    let ppq = division;
    r.skip(header_len - 6)?;

    // Track chunks. Foreign chunk types are skipped.
    let mut raw = Vec::new();
    let mut tracks_seen: u16 = 0;
    let mut final_tick = 0u64;
    while r.remaining() > 0 && tracks_seen < declared_tracks {
        if r.remaining() < 8 {
            return Err(r.err("trailing bytes too short for a chunk header"));
        }
        let tag_at = r.pos;
        let tag: [u8; 4] = bytes[tag_at..tag_at + 4].try_into().unwrap();
        r.pos += 4;
        let chunk_len = r.u32()? as usize;
        if &tag == b"MTrk" {
            let end_tick = parse_track(&mut r, tracks_seen, chunk_len, &mut raw)?;
            final_tick = final_tick.max(end_tick);
            tracks_seen += 1;
        } else {
            r.skip(chunk_len)?;
        }
    }
    if tracks_seen == 0 {
        return Err(r.err("file contains no MTrk chunk"));
    }

    raw.sort_by_key(|e| (e.tick, e.kind.priority(), e.track, e.seq));
    final_tick = final_tick.max(raw.last().map_or(0, |e| e.tick));

    // Tempo map: duplicates on one tick collapse to the last one seen.
    let mut tempo_map: Vec<TempoEvent> = Vec::new();
    for ev in &raw {
        if let RawKind::Tempo { us_per_quarter } = ev.kind {
            match tempo_map.last_mut() {
                Some(last) if last.tick == ev.tick => last.us_per_quarter = us_per_quarter,
                _ => tempo_map.push(TempoEvent { tick: ev.tick, us_per_quarter }),
            }
        }
    }
    if tempo_map.is_empty() {
        tempo_map.push(TempoEvent { tick: 0, us_per_quarter: 500_000 });
    }
    let timeline = TickTimeline::new(&tempo_map, ppq);

    // Replay the merged stream into notes.
    let mut warnings = ParseWarnings::default();
    let mut programs = [0u8; 16];
    let mut sounding: HashMap<(u8, u8), (u64, u8, u8)> = HashMap::new();
    let mut events = Vec::new();
    let close = |onset: u64, off_tick: u64, pitch: u8, instrument: u8, velocity: u8,
                 events: &mut Vec<NoteEvent>| {
        let end = off_tick.max(onset + 1);
        events.push(NoteEvent {
            onset_ms: timeline.ms_at(onset),
            duration_ms: timeline.ms_at(end) - timeline.ms_at(onset),
            pitch,
            instrument,
            velocity,
        });
    };
    for ev in &raw {
        match ev.kind {
            RawKind::Tempo { .. } => {}
            RawKind::Program { channel, program } => programs[channel as usize] = program,
            RawKind::NoteOn { channel, pitch, velocity } => {
                let instrument = if channel == 9 {
                    PERCUSSION_INSTRUMENT
                } else {
                    programs[channel as usize]
                };
                if let Some((onset, inst, vel)) = sounding.insert((channel, pitch), (ev.tick, instrument, velocity)) {
                    close(onset, ev.tick, pitch, inst, vel, &mut events);
                }
            }
            RawKind::NoteOff { channel, pitch } => {
                match sounding.remove(&(channel, pitch)) {
                    Some((onset, inst, vel)) => close(onset, ev.tick, pitch, inst, vel, &mut events),
                    None => warnings.unmatched_note_offs += 1,
                }
            }
        }
    }
    let mut leftovers: Vec<_> = sounding.into_iter().collect();
    leftovers.sort_by_key(|((ch, pitch), (onset, _, _))| (*onset, *ch, *pitch));
    for ((_, pitch), (onset, inst, vel)) in leftovers {
        warnings.dangling_note_ons += 1;
        close(onset, final_tick, pitch, inst, vel, &mut events);
    }

    sort_events(&mut events);
    let document = MidiDocument { events, tempo_map, ppq };
    debug_assert!(document.validate().is_ok(), "{:?}", document.validate());
    Ok(ParsedMidi { document, warnings })
}

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

const WRITE_PPQ: u16 = 480;
const WRITE_US_PER_QUARTER: u32 = 500_000;

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut b = stack[i];
        if i > 0 {
            b |= 0x80;
        }
        out.push(b);
    }
}

#[derive(Debug, Clone, Copy)]
enum OutKind {
    NoteOff { channel: u8, pitch: u8 },
    Program { channel: u8, program: u8 },
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
}

impl OutKind {
    /// Offs close sounding notes before same-tick re-attacks; programs land
    /// before the note-ons they configure.
    fn priority(&self) -> u8 {
        match self {
            OutKind::NoteOff { .. } => 0,
            OutKind::Program { .. } => 1,
            OutKind::NoteOn { .. } => 2,
        }
    }
}

/// Encode a document as a single-track format 0 file at 480 ppq, 500000 us
/// per quarter (the document's own tempo map is not preserved; times are).
///
/// Channels: percussion notes go to channel 10; melodic instruments are
/// assigned the remaining channels in order of first appearance. When more
/// than 15 melodic programs occur, the overflow shares the last channel with
/// a program change re-issued before each note-on. Velocity 0 is clamped to 1
/// so no note silently becomes a note-off.
pub fn write_midi(doc: &MidiDocument) -> Result<Vec<u8>> {
    let ms_to_tick = |ms: f64| -> Result<u32> {
        let tick = (ms * (WRITE_PPQ as f64) * 1000.0 / WRITE_US_PER_QUARTER as f64).round();
        if !(0.0..=u32::MAX as f64).contains(&tick) {
            return Err(MidiError::TickOverflow { ms });
        }
        Ok(tick as u32)
    };

    let mut melodic_channel: HashMap<u8, u8> = HashMap::new();
    // Channel 10 (index 9) is reserved for percussion.
    let free_channels: Vec<u8> = (0u8..16).filter(|&c| c != 9).collect();
    let mut out_events: Vec<(u32, u32, OutKind)> = Vec::new();
    let mut seq = 0u32;
    let mut channel_program = [u8::MAX; 16];

    for ev in &doc.events {
        ev.validate_for_write()?;
        let on = ms_to_tick(ev.onset_ms)?;
        let off_raw = ms_to_tick(ev.onset_ms + ev.duration_ms)?;
        let off = off_raw.max(on.checked_add(1).ok_or(MidiError::TickOverflow {
            ms: ev.onset_ms + ev.duration_ms,
        })?);
        let channel = if ev.instrument == PERCUSSION_INSTRUMENT {
            9
        } else {
            let next = melodic_channel.len();
            *melodic_channel
                .entry(ev.instrument)
                .or_insert_with(|| free_channels[next.min(free_channels.len() - 1)])
        };
        if ev.instrument != PERCUSSION_INSTRUMENT
            && channel_program[channel as usize] != ev.instrument
        {
            channel_program[channel as usize] = ev.instrument;
            out_events.push((on, seq, OutKind::Program { channel, program: ev.instrument }));
            seq += 1;
        }
        out_events.push((
            on,
            seq,
            OutKind::NoteOn { channel, pitch: ev.pitch, velocity: ev.velocity.max(1) },
        ));
        seq += 1;
        out_events.push((off, seq, OutKind::NoteOff { channel, pitch: ev.pitch }));
        seq += 1;
    }
    out_events.sort_by_key(|(tick, seq, kind)| (*tick, kind.priority(), *seq));

    // Track body: tempo, messages, end of track.
    let mut track = Vec::new();
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&WRITE_US_PER_QUARTER.to_be_bytes()[1..]);
    let mut cursor = 0u32;
    for (tick, _, kind) in &out_events {
        push_vlq(&mut track, tick - cursor);
        cursor = *tick;
        match *kind {
            OutKind::NoteOff { channel, pitch } => {
                track.extend_from_slice(&[0x80 | channel, pitch, 0]);
            }
            OutKind::Program { channel, program } => {
                track.extend_from_slice(&[0xc0 | channel, program]);
            }
            OutKind::NoteOn { channel, pitch, velocity } => {
                track.extend_from_slice(&[0x90 | channel, pitch, velocity]);
            }
        }
    }
    push_vlq(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut bytes = Vec::with_capacity(14 + 8 + track.len());
    bytes.extend_from_slice(b"MThd");
    bytes.extend_from_slice(&6u32.to_be_bytes());
    bytes.extend_from_slice(&0u16.to_be_bytes());
    bytes.extend_from_slice(&1u16.to_be_bytes());
    bytes.extend_from_slice(&WRITE_PPQ.to_be_bytes());
    bytes.extend_from_slice(b"MTrk");
    bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&track);
    Ok(bytes)
}

impl NoteEvent {
    fn validate_for_write(&self) -> Result<()> {
        self.validate_relaxed()
            .map_err(|e| MidiError::InvalidEvents(e))
    }

    /// Like [`NoteEvent::validate`] but permits velocity 0, which the writer
    /// clamps to 1 rather than rejecting.
    fn validate_relaxed(&self) -> std::result::Result<(), String> {
        let mut probe = *self;
        probe.velocity = probe.velocity.max(1);
        probe.validate()
    }
}
