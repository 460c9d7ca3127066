//! Quantization, timeshift, and detokenization tests, including a naive
//! prefix-sum oracle for the timeshift transform.

use cadenza_midi::dict::LayoutKind;
use cadenza_midi::events::{MidiDocument, NoteEvent};
use cadenza_midi::testgen::{self, TestRng};
use cadenza_midi::tokenizer::{
    detokenize, from_targets, quantize, to_targets, CompoundToken,
};
use cadenza_midi::MidiError;

fn doc_with(events: Vec<NoteEvent>) -> MidiDocument {
    MidiDocument { events, ..MidiDocument::empty() }
}

fn note(onset_ms: f64, duration_ms: f64, pitch: u8, instrument: u8, velocity: u8) -> NoteEvent {
    NoteEvent { onset_ms, duration_ms, pitch, instrument, velocity }
}

#[test]
fn quantize_splits_pitch_and_bins_times() {
    let d = doc_with(vec![note(1234.0, 500.0, 61, 24, 96)]);
    let t = quantize(&d, LayoutKind::S).unwrap();
    assert_eq!(
        t,
        vec![CompoundToken {
            onset: 123,
            duration: 50,
            octave: 5,
            pitch_class: 1,
            instrument: 24,
            velocity: 96,
        }]
    );
}

#[test]
fn rounding_is_nearest_with_half_up() {
    let d = doc_with(vec![
        note(4.9, 15.0, 60, 0, 1),   // 0.49 -> 0, 1.5 -> 2
        note(5.0, 14.9, 60, 0, 2),   // 0.5  -> 1, 1.49 -> 1
        note(25.0, 24.9, 60, 0, 3),  // 2.5  -> 3 (half away from zero), 2.49 -> 2
    ]);
    let t = quantize(&d, LayoutKind::S).unwrap();
    assert_eq!((t[0].onset, t[0].duration), (0, 2));
    assert_eq!((t[1].onset, t[1].duration), (1, 1));
    assert_eq!((t[2].onset, t[2].duration), (3, 2));
}

#[test]
fn sub_bin_duration_clamps_to_one_bin() {
    let d = doc_with(vec![note(0.0, 3.0, 60, 0, 64)]);
    let t = quantize(&d, LayoutKind::S).unwrap();
    assert_eq!(t[0].duration, 1);
}

#[test]
fn pitch_127_is_octave_10_class_7() {
    let d = doc_with(vec![note(0.0, 100.0, 127, 0, 64)]);
    let t = quantize(&d, LayoutKind::S).unwrap();
    assert_eq!((t[0].octave, t[0].pitch_class), (10, 7));
    assert_eq!(t[0].pitch(), 127);
}

#[test]
fn gap_past_limit_rejects_whole_file_small_layout() {
    let d = doc_with(vec![
        note(0.0, 100.0, 60, 0, 64),
        note(10240.0, 100.0, 62, 0, 64), // timeshift bin 1024 > 1023
    ]);
    match quantize(&d, LayoutKind::S).unwrap_err() {
        MidiError::LimitExceeded { index, attribute, value, max } => {
            assert_eq!((index, attribute, value, max), (1, "timeshift", 1024, 1023));
        }
        other => panic!("expected LimitExceeded, got {other}"),
    }
    // The larger layout accepts the same file.
    assert!(quantize(&d, LayoutKind::M).is_ok());
}

#[test]
fn leading_silence_counts_as_the_first_timeshift() {
    let d = doc_with(vec![note(10240.0, 100.0, 60, 0, 64)]);
    assert!(matches!(
        quantize(&d, LayoutKind::S),
        Err(MidiError::LimitExceeded { attribute: "timeshift", .. })
    ));
}

#[test]
fn duration_past_limit_rejects_whole_file() {
    let d = doc_with(vec![note(0.0, 10240.0, 60, 0, 64)]);
    assert!(matches!(
        quantize(&d, LayoutKind::S),
        Err(MidiError::LimitExceeded { attribute: "duration", value: 1024, .. })
    ));
    assert!(quantize(&d, LayoutKind::M).is_ok());
    // Past even the large layout's limit.
    let d = doc_with(vec![note(0.0, 40970.0, 60, 0, 64)]);
    assert!(matches!(
        quantize(&d, LayoutKind::M),
        Err(MidiError::LimitExceeded { attribute: "duration", value: 4097, max: 4096, .. })
    ));
}

#[test]
fn equal_onsets_sort_by_instrument_then_pitch() {
    let d = doc_with(vec![
        note(0.0, 100.0, 72, 5, 64),
        note(0.0, 100.0, 60, 5, 64),
        note(0.0, 100.0, 90, 2, 64),
    ]);
    let t = quantize(&d, LayoutKind::S).unwrap();
    let order: Vec<(u8, u8)> = t.iter().map(|x| (x.instrument, x.pitch())).collect();
    assert_eq!(order, vec![(2, 90), (5, 60), (5, 72)]);
}

#[test]
fn targets_are_first_differences() {
    let tokens = vec![
        CompoundToken { onset: 0, duration: 5, octave: 5, pitch_class: 0, instrument: 0, velocity: 64 },
        CompoundToken { onset: 40, duration: 5, octave: 5, pitch_class: 2, instrument: 0, velocity: 64 },
        CompoundToken { onset: 40, duration: 9, octave: 5, pitch_class: 4, instrument: 0, velocity: 64 },
        CompoundToken { onset: 100, duration: 2, octave: 5, pitch_class: 5, instrument: 0, velocity: 64 },
    ];
    let targets = to_targets(&tokens).unwrap();
    let shifts: Vec<u32> = targets.iter().map(|t| t.timeshift).collect();
    assert_eq!(shifts, vec![0, 40, 0, 60]);
}

#[test]
fn nonzero_first_onset_becomes_first_timeshift() {
    let tokens = vec![CompoundToken {
        onset: 17,
        duration: 5,
        octave: 5,
        pitch_class: 0,
        instrument: 0,
        velocity: 64,
    }];
    assert_eq!(to_targets(&tokens).unwrap()[0].timeshift, 17);
}

#[test]
fn decreasing_onsets_error() {
    let tokens = vec![
        CompoundToken { onset: 50, duration: 5, octave: 5, pitch_class: 0, instrument: 0, velocity: 64 },
        CompoundToken { onset: 30, duration: 5, octave: 5, pitch_class: 0, instrument: 0, velocity: 64 },
    ];
    assert!(matches!(to_targets(&tokens), Err(MidiError::InvalidEvents(_))));
}

#[test]
fn timeshift_round_trip_matches_prefix_sum_oracle() {
    let mut rng = TestRng::new(99);
    let mut onset = 0u32;
    let tokens: Vec<CompoundToken> = (0..1000)
        .map(|_| {
            onset += rng.range(0, 400) as u32;
            CompoundToken {
                onset,
                duration: rng.range(1, 1024) as u32,
                octave: rng.range(0, 11) as u8,
                pitch_class: rng.range(0, 12) as u8,
                instrument: rng.range(0, 129) as u8,
                velocity: rng.range(1, 128) as u8,
            }
        })
        .collect();
    let targets = to_targets(&tokens).unwrap();

    // Oracle: timeshift is exactly onset[k] - onset[k-1] with onset[-1] = 0,
    // and the running sum of shifts recovers every onset.
    let mut prev = 0u32;
    let mut sum = 0u32;
    for (k, (tok, tgt)) in tokens.iter().zip(&targets).enumerate() {
        assert_eq!(tgt.timeshift, tok.onset - prev, "at {k}");
        sum += tgt.timeshift;
        assert_eq!(sum, tok.onset, "prefix sum at {k}");
        prev = tok.onset;
    }
    assert_eq!(from_targets(&targets), tokens);
}

#[test]
fn detokenize_places_bins_at_10ms_centers() {
    let tokens = vec![CompoundToken {
        onset: 123,
        duration: 50,
        octave: 5,
        pitch_class: 1,
        instrument: 24,
        velocity: 96,
    }];
    let d = detokenize(&tokens);
    let ev = d.events[0];
    assert!((ev.onset_ms - 1230.0).abs() < 1e-12);
    assert!((ev.duration_ms - 500.0).abs() < 1e-12);
    assert_eq!((ev.pitch, ev.instrument, ev.velocity), (61, 24, 96));
    d.validate().unwrap();
}

#[test]
fn tokens_survive_detokenize_quantize_round_trip() {
    let mut rng = TestRng::new(4);
    for _ in 0..50 {
        let mut onset = 0u32;
        let mut tokens: Vec<CompoundToken> = (0..60)
            .map(|_| {
                onset += rng.range(0, 300) as u32;
                // Octave 10 only reaches pitch class 7 (pitch 127).
                let octave = rng.range(0, 11) as u8;
                let pc_max = if octave == 10 { 8 } else { 12 };
                CompoundToken {
                    onset,
                    duration: rng.range(1, 1024) as u32,
                    octave,
                    pitch_class: rng.range(0, pc_max) as u8,
                    instrument: rng.range(0, 129) as u8,
                    velocity: rng.range(1, 128) as u8,
                }
            })
            .collect();
        // Canonical ordering the quantizer will produce.
        tokens.sort_by_key(|t| (t.onset, t.instrument, t.pitch(), t.velocity));
        let recovered = quantize(&detokenize(&tokens), LayoutKind::S).unwrap();
        assert_eq!(recovered, tokens);
    }
}

#[test]
fn on_grid_documents_quantize_losslessly() {
    for seed in 0..5u64 {
        let d = testgen::on_grid_document(seed, 50);
        let tokens = quantize(&d, LayoutKind::S).unwrap();
        assert_eq!(tokens.len(), d.events.len());
        let back = detokenize(&tokens);
        // Grid-aligned input means detokenization reproduces times exactly.
        for (a, b) in d.events.iter().zip(&back.events) {
            assert!((a.onset_ms - b.onset_ms).abs() < 1e-9);
            assert!((a.duration_ms - b.duration_ms).abs() < 1e-9);
            assert_eq!((a.pitch, a.instrument, a.velocity), (b.pitch, b.instrument, b.velocity));
        }
    }
}

#[test]
fn invalid_event_is_rejected_not_misfiled() {
    let d = doc_with(vec![note(0.0, 100.0, 60, 0, 0)]);
    assert!(matches!(quantize(&d, LayoutKind::S), Err(MidiError::InvalidEvents(_))));
}
