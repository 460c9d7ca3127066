//! Batch construction: greedy sequence packing for pretraining, sliding
//! windows for classification, and fixed-length padding for conditional
//! finetuning.

use cadenza_midi::CompoundToken;

use crate::seq::{Row, SeqToken};
use crate::{ModelError, Result};

/// Fixed row length used when finetuning on the conditional corpus.
pub const CONDITIONAL_PAD_LEN: usize = 848;

/// Split a piece into consecutive chunks of at most `max_events` events.
/// Chunks after the first are rebased so the chunk's first event keeps its
/// original gap from the preceding event while onsets stay small; within-
/// chunk gaps are untouched, so every timeshift the chunk produces already
/// fit the vocabulary when the piece was tokenized.
pub fn chunk_events(events: &[CompoundToken], max_events: usize) -> Result<Vec<Vec<CompoundToken>>> {
    if max_events == 0 {
        return Err(ModelError::Sequence("chunk size must be positive".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < events.len() {
        let end = (start + max_events).min(events.len());
        let mut chunk = events[start..end].to_vec();
        if start > 0 {
            let base = events[start - 1].onset;
            for e in &mut chunk {
                e.onset -= base;
            }
        }
        out.push(chunk);
        start = end;
    }
    Ok(out)
}

/// Pack wrapped samples into rows of exactly `row_len` tokens by greedy
/// first-fit: each sample goes into the first row it fits, otherwise opens
/// a new row. Pieces longer than `row_len - 2` events are chunked first.
/// Rows are padded to full length; segment ids number the samples within
/// each row.
pub fn pack_sequences(pieces: &[Vec<CompoundToken>], row_len: usize) -> Result<Vec<Row>> {
    if row_len < 4 {
        return Err(ModelError::Sequence(format!(
            "row length {row_len} is too short to hold a wrapped sample"
        )));
    }
    let mut samples: Vec<Vec<CompoundToken>> = Vec::new();
    for piece in pieces {
        if piece.is_empty() {
            return Err(ModelError::Sequence("cannot pack an empty piece".into()));
        }
        samples.extend(chunk_events(piece, row_len - 2)?);
    }
    struct OpenRow {
        tokens: Vec<SeqToken>,
        segments: Vec<Option<u32>>,
        next_segment: u32,
    }
    let mut rows: Vec<OpenRow> = Vec::new();
    for sample in &samples {
        let need = sample.len() + 2;
        let slot = rows.iter_mut().find(|r| r.tokens.len() + need <= row_len);
        let row = match slot {
            Some(r) => r,
            None => {
                rows.push(OpenRow {
                    tokens: Vec::with_capacity(row_len),
                    segments: Vec::with_capacity(row_len),
                    next_segment: 0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        let seg = row.next_segment;
        row.next_segment += 1;
        row.tokens.push(SeqToken::Sos);
        row.tokens.extend(sample.iter().map(|&e| SeqToken::Event(e)));
        row.tokens.push(SeqToken::Eos);
        row.segments.extend(std::iter::repeat(Some(seg)).take(need));
    }
    rows.into_iter()
        .map(|r| {
            let mut row = Row::new(r.tokens, r.segments)?;
            row.pad_to(row_len)?;
            Ok(row)
        })
        .collect()
}

/// Window starts for classification: stride is three quarters of the
/// window; generation stops with the first window that reaches the end of
/// the piece.
pub fn window_starts(piece_len: usize, window: usize) -> Vec<usize> {
    let stride = ((window * 3) / 4).max(1);
    let mut starts = vec![0];
    let mut s = 0;
    while s + window < piece_len {
        s += stride;
        starts.push(s);
    }
    starts
}

/// Overlapping classification windows: each window of `window` events is
/// wrapped as `<sos> events [pad...] <eos> <cls>", always `window + 3`
/// tokens long (short tails are padded up to the window size).
pub fn window_for_classification(
    events: &[CompoundToken],
    window: usize,
) -> Result<Vec<Vec<SeqToken>>> {
    if window == 0 {
        return Err(ModelError::Sequence("classification window must be positive".into()));
    }
    if events.is_empty() {
        return Err(ModelError::Sequence("cannot window an empty piece".into()));
    }
    let mut out = Vec::new();
    for start in window_starts(events.len(), window) {
        let end = (start + window).min(events.len());
        let mut tokens = Vec::with_capacity(window + 3);
        tokens.push(SeqToken::Sos);
        tokens.extend(events[start..end].iter().map(|&e| SeqToken::Event(e)));
        tokens.resize(window + 1, SeqToken::Pad);
        tokens.push(SeqToken::Eos);
        tokens.push(SeqToken::Cls);
        out.push(tokens);
    }
    Ok(out)
}

/// Pad every conditional row to exactly `target` tokens. Conditional rows
/// hold one sample each (no cross-sample packing); a row that is already
/// longer than the target is rejected with its index.
pub fn pad_rows(rows: &mut [Row], target: usize) -> Result<()> {
    for (i, row) in rows.iter_mut().enumerate() {
        if row.len() > target {
            return Err(ModelError::Sequence(format!(
                "row {i} has {} tokens, more than the padded length {target}",
                row.len()
            )));
        }
        row.pad_to(target)?;
    }
    Ok(())
}
