//! Flat sub-token dictionary.
//!
//! Every attribute's vocabulary is laid out in one contiguous index space:
//! `[timeshift][duration][octave][pitch_class][instrument][velocity]` followed
//! by 13 special sub-tokens (one `<sos_gru>` plus a start/end pair per
//! attribute). Timeshift and duration sizes depend on the layout; the other
//! four are fixed by MIDI itself.

use crate::{MidiError, Result};

/// Vocabulary layout. `S` caps timeshift/duration bins at 1023 (10.23 s), `M`
/// at 4096 (40.96 s).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayoutKind {
    S,
    M,
}

impl LayoutKind {
    /// Largest representable timeshift or duration bin.
    pub fn max_time_bin(self) -> u32 {
        match self {
            LayoutKind::S => 1023,
            LayoutKind::M => 4096,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::S => "S",
            LayoutKind::M => "M",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "S" => Ok(LayoutKind::S),
            "M" => Ok(LayoutKind::M),
            _ => Err(MidiError::BadTokenFile(format!("unknown layout {name:?}"))),
        }
    }
}

/// The six compound-token attributes, in decode order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Timeshift,
    Duration,
    Octave,
    PitchClass,
    Instrument,
    Velocity,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::Timeshift,
        Attribute::Duration,
        Attribute::Octave,
        Attribute::PitchClass,
        Attribute::Instrument,
        Attribute::Velocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Timeshift => "timeshift",
            Attribute::Duration => "duration",
            Attribute::Octave => "octave",
            Attribute::PitchClass => "pitch_class",
            Attribute::Instrument => "instrument",
            Attribute::Velocity => "velocity",
        }
    }

    pub fn index(self) -> usize {
        Attribute::ALL.iter().position(|a| *a == self).unwrap()
    }
}

/// Number of special sub-tokens: `<sos_gru>` plus a start/end pair per
/// attribute.
pub const SPECIAL_COUNT: usize = 1 + 2 * 6;

/// A decoded flat index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatToken {
    Value { attribute: Attribute, value: u32 },
    /// First input to the attribute decoder at every event.
    SosGru,
    /// Per-attribute start marker.
    AttrSos(Attribute),
    /// Per-attribute end marker; the timeshift one doubles as end-of-piece.
    AttrEos(Attribute),
}

/// Index arithmetic for one layout.
#[derive(Debug, Clone, Copy)]
pub struct TokenDictionary {
    layout: LayoutKind,
    /// Start offset of each attribute's slice, in [`Attribute::ALL`] order.
    offsets: [usize; 6],
    sizes: [usize; 6],
    specials_at: usize,
}

impl TokenDictionary {
    pub fn new(layout: LayoutKind) -> Self {
        let time_vocab = layout.max_time_bin() as usize + 1;
        let sizes = [time_vocab, time_vocab, 11, 12, 129, 128];
        let mut offsets = [0usize; 6];
        let mut at = 0;
        for (i, size) in sizes.iter().enumerate() {
            offsets[i] = at;
            at += size;
        }
        TokenDictionary { layout, offsets, sizes, specials_at: at }
    }

    pub fn layout(&self) -> LayoutKind {
        self.layout
    }

    /// Total number of flat indices, specials included.
    pub fn flat_size(&self) -> usize {
        self.specials_at + SPECIAL_COUNT
    }

    /// Vocabulary size of one attribute.
    pub fn vocab(&self, attribute: Attribute) -> usize {
        self.sizes[attribute.index()]
    }

    /// Half-open flat-index range holding an attribute's values.
    pub fn slice(&self, attribute: Attribute) -> std::ops::Range<usize> {
        let i = attribute.index();
        self.offsets[i]..self.offsets[i] + self.sizes[i]
    }

    /// Flat index of an attribute value.
    pub fn flatten(&self, attribute: Attribute, value: u32) -> Result<usize> {
        let i = attribute.index();
        if (value as usize) >= self.sizes[i] {
            return Err(MidiError::OutOfVocab {
                attribute: attribute.name(),
                value,
                vocab: self.sizes[i] as u32,
            });
        }
        Ok(self.offsets[i] + value as usize)
    }

    pub fn sos_gru(&self) -> usize {
        self.specials_at
    }

    pub fn attr_sos(&self, attribute: Attribute) -> usize {
        self.specials_at + 1 + 2 * attribute.index()
    }

    pub fn attr_eos(&self, attribute: Attribute) -> usize {
        self.specials_at + 2 + 2 * attribute.index()
    }

    /// End-of-piece marker: the timeshift attribute's end token, emitted in
    /// place of a timeshift at the first decode step of the final event.
    pub fn eos_event(&self) -> usize {
        self.attr_eos(Attribute::Timeshift)
    }

    /// Invert [`TokenDictionary::flatten`] / the special accessors.
    pub fn unflatten(&self, index: usize) -> Result<FlatToken> {
        if index >= self.flat_size() {
            return Err(MidiError::BadFlatIndex(index, self.flat_size()));
        }
        if index < self.specials_at {
            for attr in Attribute::ALL {
                let r = self.slice(attr);
                if r.contains(&index) {
                    return Ok(FlatToken::Value { attribute: attr, value: (index - r.start) as u32 });
                }
            }
            unreachable!("value region is fully covered by attribute slices");
        }
        let s = index - self.specials_at;
        if s == 0 {
            return Ok(FlatToken::SosGru);
        }
        let attr = Attribute::ALL[(s - 1) / 2];
        if (s - 1) % 2 == 0 {
            Ok(FlatToken::AttrSos(attr))
        } else {
            Ok(FlatToken::AttrEos(attr))
        }
    }
}
