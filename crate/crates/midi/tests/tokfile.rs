//! Token file round trips and malformed-input handling.

use cadenza_midi::dict::LayoutKind;
use cadenza_midi::testgen::TestRng;
use cadenza_midi::tokenizer::CompoundToken;
use cadenza_midi::tokfile::{read_tokens, write_tokens, TokenFileMode};
use cadenza_midi::MidiError;
use std::io::Cursor;

fn random_tokens(seed: u64, n: usize) -> Vec<CompoundToken> {
    let mut rng = TestRng::new(seed);
    let mut onset = 0u32;
    (0..n)
        .map(|_| {
            onset += rng.range(0, 500) as u32;
            CompoundToken {
                onset,
                duration: rng.range(1, 1024) as u32,
                octave: rng.range(0, 11) as u8,
                pitch_class: rng.range(0, 12) as u8,
                instrument: rng.range(0, 129) as u8,
                velocity: rng.range(1, 128) as u8,
            }
        })
        .collect()
}

#[test]
fn text_round_trip() {
    let tokens = random_tokens(1, 64);
    let mut buf = Vec::new();
    write_tokens(&mut buf, LayoutKind::S, TokenFileMode::Text, &tokens).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("S 64 text\n"), "header: {}", text.lines().next().unwrap());
    let (layout, back) = read_tokens(&mut Cursor::new(buf)).unwrap();
    assert_eq!(layout, LayoutKind::S);
    assert_eq!(back, tokens);
}

#[test]
fn binary_round_trip() {
    let tokens = random_tokens(2, 64);
    let mut buf = Vec::new();
    write_tokens(&mut buf, LayoutKind::M, TokenFileMode::Bin, &tokens).unwrap();
    // Header line + 24 bytes per record.
    let header_len = "M 64 bin\n".len();
    assert_eq!(buf.len(), header_len + 24 * 64);
    let (layout, back) = read_tokens(&mut Cursor::new(buf)).unwrap();
    assert_eq!(layout, LayoutKind::M);
    assert_eq!(back, tokens);
}

#[test]
fn empty_sequence_round_trips() {
    let mut buf = Vec::new();
    write_tokens(&mut buf, LayoutKind::S, TokenFileMode::Text, &[]).unwrap();
    let (_, back) = read_tokens(&mut Cursor::new(buf)).unwrap();
    assert!(back.is_empty());
}

#[test]
fn text_record_matches_attribute_order() {
    let tokens = vec![CompoundToken {
        onset: 123,
        duration: 50,
        octave: 5,
        pitch_class: 1,
        instrument: 24,
        velocity: 96,
    }];
    let mut buf = Vec::new();
    write_tokens(&mut buf, LayoutKind::S, TokenFileMode::Text, &tokens).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text, "S 1 text\n123 50 5 1 24 96\n");
}

fn expect_bad(bytes: &[u8]) -> MidiError {
    read_tokens(&mut Cursor::new(bytes.to_vec())).unwrap_err()
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(matches!(expect_bad(b"Q 1 text\n0 1 0 0 0 1\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S x text\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 1 blob\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 2 text\n0 1 0 0 0 1\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 1 text\n0 1 0 0 0\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 1 text\n0 1 0 0 0 1 7\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 1 text\n0 1 11 0 0 1\n"), MidiError::BadTokenFile(_)));
    assert!(matches!(expect_bad(b"S 1 bin\n\x00\x00\x00"), MidiError::BadTokenFile(_)));
}
