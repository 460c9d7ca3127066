//! On-disk token sequences.
//!
//! A token file starts with one ASCII header line `"<layout> <count> <mode>"`
//! (layout `S`|`M`, mode `text`|`bin`) followed by `count` records. Text
//! records are lines of six space-separated integers in attribute order;
//! binary records are six little-endian `u32`s each.

use crate::dict::LayoutKind;
use crate::tokenizer::CompoundToken;
use crate::{MidiError, Result};
use std::io::{BufRead, Write};

/// Record encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFileMode {
    Text,
    Bin,
}

impl TokenFileMode {
    fn name(self) -> &'static str {
        match self {
            TokenFileMode::Text => "text",
            TokenFileMode::Bin => "bin",
        }
    }
}

fn bad(what: impl Into<String>) -> MidiError {
    MidiError::BadTokenFile(what.into())
}

pub fn write_tokens(
    w: &mut impl Write,
    layout: LayoutKind,
    mode: TokenFileMode,
    tokens: &[CompoundToken],
) -> Result<()> {
    writeln!(w, "{} {} {}", layout.name(), tokens.len(), mode.name())?;
    for t in tokens {
        let fields = [
            t.onset,
            t.duration,
            u32::from(t.octave),
            u32::from(t.pitch_class),
            u32::from(t.instrument),
            u32::from(t.velocity),
        ];
        match mode {
            TokenFileMode::Text => {
                writeln!(
                    w,
                    "{} {} {} {} {} {}",
                    fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]
                )?;
            }
            TokenFileMode::Bin => {
                for f in fields {
                    w.write_all(&f.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_tokens(r: &mut impl BufRead) -> Result<(LayoutKind, Vec<CompoundToken>)> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let [layout_name, count, mode] = parts[..] else {
        return Err(bad(format!("header {header:?} is not `<layout> <count> <mode>`")));
    };
    let layout = LayoutKind::from_name(layout_name)?;
    let count: usize = count
        .parse()
        .map_err(|_| bad(format!("bad record count {count:?}")))?;
    let mode = match mode {
        "text" => TokenFileMode::Text,
        "bin" => TokenFileMode::Bin,
        _ => return Err(bad(format!("unknown mode {mode:?}"))),
    };

    let mut tokens = Vec::with_capacity(count);
    match mode {
        TokenFileMode::Text => {
            for i in 0..count {
                let mut line = String::new();
                if r.read_line(&mut line)? == 0 {
                    return Err(bad(format!("expected {count} records, file ends at {i}")));
                }
                let mut fields = [0u32; 6];
                let mut n = 0;
                for part in line.split_whitespace() {
                    if n == 6 {
                        return Err(bad(format!("record {i} has more than 6 fields")));
                    }
                    fields[n] = part
                        .parse()
                        .map_err(|_| bad(format!("record {i}: bad integer {part:?}")))?;
                    n += 1;
                }
                if n != 6 {
                    return Err(bad(format!("record {i} has {n} fields, expected 6")));
                }
                tokens.push(fields_to_token(i, fields)?);
            }
        }
        TokenFileMode::Bin => {
            for i in 0..count {
                let mut buf = [0u8; 24];
                r.read_exact(&mut buf).map_err(|_| {
                    bad(format!("expected {count} binary records, file ends at {i}"))
                })?;
                let mut fields = [0u32; 6];
                for (j, chunk) in buf.chunks_exact(4).enumerate() {
                    fields[j] = u32::from_le_bytes(chunk.try_into().unwrap());
                }
                tokens.push(fields_to_token(i, fields)?);
            }
        }
    }
    Ok((layout, tokens))
}

fn fields_to_token(i: usize, f: [u32; 6]) -> Result<CompoundToken> {
    let narrow = |name: &str, v: u32, max: u32| -> Result<u8> {
        if v > max {
            return Err(bad(format!("record {i}: {name} {v} exceeds {max}")));
        }
        Ok(v as u8)
    };
    Ok(CompoundToken {
        onset: f[0],
        duration: f[1],
        octave: narrow("octave", f[2], 10)?,
        pitch_class: narrow("pitch_class", f[3], 11)?,
        instrument: narrow("instrument", f[4], 128)?,
        velocity: narrow("velocity", f[5], 127)?,
    })
}
