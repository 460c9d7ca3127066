//! MIDI I/O and compound-token encoding.
//!
//! This crate owns everything between raw Standard MIDI File bytes and the
//! integer token sequences consumed by the model:
//!
//! * [`smf`] — a byte-level SMF reader/writer (formats 0 and 1) that collapses
//!   multi-track files onto a single millisecond timeline,
//! * [`tokenizer`] — 10 ms quantization of note events into compound tokens
//!   and the inverse mapping back to note events,
//! * [`dict`] — the flat sub-token dictionary shared by every attribute,
//! * [`tokfile`] — a small on-disk format for token sequences.

pub mod dict;
pub mod events;
pub mod smf;
pub mod testgen;
pub mod tokenizer;
pub mod tokfile;

pub use dict::{Attribute, FlatToken, LayoutKind, TokenDictionary};
pub use events::{MidiDocument, NoteEvent, TempoEvent, PERCUSSION_INSTRUMENT};
pub use smf::{parse_midi, write_midi, ParseWarnings, ParsedMidi};
pub use tokenizer::{detokenize, quantize, to_targets, CompoundToken, TargetToken};

/// Errors produced anywhere in this crate.
#[derive(Debug, thiserror::Error)]
pub enum MidiError {
    /// Structurally invalid SMF bytes. `offset` points at the byte where
    /// decoding failed.
    #[error("malformed MIDI at byte {offset}: {what}")]
    Malformed { offset: usize, what: String },

    /// Parseable but unsupported input (format 2 files, SMPTE timing, ...).
    #[error("unsupported MIDI feature: {0}")]
    Unsupported(String),

    /// An event landed beyond the 32-bit tick range while writing.
    #[error("event at {ms:.3} ms exceeds the 32-bit tick range")]
    TickOverflow { ms: f64 },

    /// A file whose quantized gaps or durations exceed the layout limits is
    /// rejected as a whole.
    #[error(
        "token {index}: {attribute} bin {value} exceeds layout maximum {max}; file rejected"
    )]
    LimitExceeded {
        index: usize,
        attribute: &'static str,
        value: u64,
        max: u32,
    },

    /// Input to the tokenizer violated an ordering or range precondition.
    #[error("invalid event stream: {0}")]
    InvalidEvents(String),

    /// A sub-token value fell outside its attribute's vocabulary.
    #[error("{attribute} value {value} outside vocabulary of size {vocab}")]
    OutOfVocab {
        attribute: &'static str,
        value: u32,
        vocab: u32,
    },

    /// A flat index that does not belong to the dictionary.
    #[error("flat index {0} outside dictionary of size {1}")]
    BadFlatIndex(usize, usize),

    /// Token file header or records could not be decoded.
    #[error("bad token file: {0}")]
    BadTokenFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MidiError>;
