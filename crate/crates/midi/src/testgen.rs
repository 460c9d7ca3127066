//! Deterministic document generators for tests and benchmarks.
//!
//! Kept in the library (rather than each test tree) so every crate in the
//! workspace can exercise the same corpus shapes. The generators are
//! monophonic per instrument, so no `(instrument, pitch)` pair ever overlaps
//! itself and SMF round trips cannot merge or truncate notes.

use crate::events::{MidiDocument, NoteEvent, TempoEvent};

/// Tiny deterministic RNG (splitmix64); no external dependency so generated
/// fixtures never shift under dependency upgrades.
#[derive(Debug, Clone)]
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform value in `[lo, hi)`.
    pub fn range(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(hi > lo);
        lo + self.next_u64() % (hi - lo)
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn lanes_document(
    rng: &mut TestRng,
    n_events: usize,
    instruments: &[u8],
    grid_ms: Option<f64>,
) -> MidiDocument {
    // Each instrument is a monophonic lane: the next note starts at or after
    // the previous note's end.
    let mut lane_cursor = vec![0.0f64; instruments.len()];
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let lane = rng.range(0, instruments.len() as u64) as usize;
        let (gap, dur) = match grid_ms {
            Some(g) => (
                rng.range(0, 150) as f64 * g,
                rng.range(1, 200) as f64 * g,
            ),
            None => (rng.unit() * 1500.0, 8.0 + rng.unit() * 2000.0),
        };
        let onset = lane_cursor[lane] + gap;
        lane_cursor[lane] = onset + dur;
        events.push(NoteEvent {
            onset_ms: onset,
            duration_ms: dur,
            pitch: rng.range(24, 104) as u8,
            instrument: instruments[lane],
            velocity: rng.range(1, 128) as u8,
        });
    }
    crate::events::sort_events(&mut events);
    let doc = MidiDocument {
        events,
        tempo_map: vec![TempoEvent { tick: 0, us_per_quarter: 500_000 }],
        ppq: 480,
    };
    debug_assert!(doc.validate().is_ok());
    doc
}

/// Random document with every onset and duration on the 10 ms quantization
/// grid; quantizing it is lossless. Gaps stay under 1.5 s and durations under
/// 2 s, within the small layout's limits.
pub fn on_grid_document(seed: u64, n_events: usize) -> MidiDocument {
    let mut rng = TestRng::new(seed);
    let instruments = pick_instruments(&mut rng);
    lanes_document(&mut rng, n_events, &instruments, Some(10.0))
}

/// Random document with arbitrary (off-grid) millisecond times.
pub fn arbitrary_ms_document(seed: u64, n_events: usize) -> MidiDocument {
    let mut rng = TestRng::new(seed);
    let instruments = pick_instruments(&mut rng);
    lanes_document(&mut rng, n_events, &instruments, None)
}

/// 1..=3 distinct instrument ids (distinct so monophonic lanes stay
/// collision-free per `(instrument, pitch)`).
fn pick_instruments(rng: &mut TestRng) -> Vec<u8> {
    let n_inst = rng.range(1, 4) as usize;
    let mut instruments: Vec<u8> = Vec::new();
    while instruments.len() < n_inst {
        let cand = rng.range(0, 129) as u8;
        if !instruments.contains(&cand) {
            instruments.push(cand);
        }
    }
    instruments
}
