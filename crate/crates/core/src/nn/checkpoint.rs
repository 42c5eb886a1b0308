//! Plain-text checkpoint format.
//!
//! ```text
//! tsasync-checkpoint 1
//! version <u64>
//! segments <count>
//! <name> <weight|bias> <rows> <cols> <offset>     (one line per segment)
//! values <count>
//! <16 hex digits>                                 (IEEE-754 bits, one per line)
//! ```
//!
//! Values are stored as raw bit patterns so a reload is exact.

use std::io::{BufRead, Write};
use std::sync::Arc;

use super::params::{Layout, ParameterVector, SegmentKind};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "tsasync-checkpoint 1";

pub fn write_checkpoint<W: Write + ?Sized>(out: &mut W, params: &ParameterVector) -> std::io::Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC}")?;
    writeln!(out, "version {}", params.version)?;
    let segs = params.layout.segments();
    writeln!(out, "segments {}", segs.len())?;
    for s in segs {
        let kind = match s.kind {
            SegmentKind::Weight => "weight",
            SegmentKind::Bias => "bias",
        };
        writeln!(out, "{} {kind} {} {} {}", s.name, s.rows, s.cols, s.offset)?;
    }
    writeln!(out, "values {}", params.values.len())?;
    for v in &params.values {
        writeln!(out, "{:016x}", v.to_bits())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<ParameterVector> {
    let mut lines = input.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Parse { line: i + 1, message: e.to_string() }),
            None => Err(Error::Parse { line: 0, message: format!("unexpected end of checkpoint, expected {what}") }),
        }
    };
    let bad = |line: usize, msg: String| Error::Parse { line, message: msg };

    let (n, magic) = next("header")?;
    if magic.trim() != CHECKPOINT_MAGIC {
        return Err(bad(n, format!("not a checkpoint header: {magic:?}")));
    }
    let (n, l) = next("version")?;
    let version = parse_keyed(n, &l, "version")?;
    let (n, l) = next("segments")?;
    let count = parse_keyed(n, &l, "segments")?;

    let mut layout = Layout::default();
    for _ in 0..count {
        let (n, l) = next("segment")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(n, format!("segment line needs 5 fields: {l:?}")));
        }
        let kind = match f[1] {
            "weight" => SegmentKind::Weight,
            "bias" => SegmentKind::Bias,
            other => return Err(bad(n, format!("unknown segment kind {other:?}"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, format!("bad number {s:?}")));
        let (rows, cols, offset) = (num(f[2])?, num(f[3])?, num(f[4])?);
        if layout.push(f[0], kind, rows, cols) != offset {
            return Err(bad(n, format!("segment {} offset {offset} is not contiguous", f[0])));
        }
    }
    let (n, l) = next("values")?;
    let len = parse_keyed(n, &l, "values")?;
    if len as usize != layout.len() {
        return Err(bad(n, format!("layout holds {} values, header says {len}", layout.len())));
    }
    let mut values = Vec::with_capacity(layout.len());
    for _ in 0..len {
        let (n, l) = next("value")?;
        let bits = u64::from_str_radix(l.trim(), 16).map_err(|_| bad(n, format!("bad value {l:?}")))?;
        values.push(f64::from_bits(bits));
    }
    ParameterVector::from_values(Arc::new(layout), values, version)
}

fn parse_keyed(line: usize, text: &str, key: &str) -> Result<u64> {
    text.strip_prefix(key)
        .and_then(|r| r.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::Parse { line, message: format!("expected `{key} <n>`, found {text:?}") })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Network, NetworkConfig};

    #[test]
    fn reload_is_exact() {
        let net = Network::new(NetworkConfig { hidden_dim: 5, ..NetworkConfig::default() }).unwrap();
        let mut p = net.init_params(11);
        p.version = 42;
        p.values[3] = -0.0;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let q = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(q.version, 42);
        assert_eq!(*q.layout, **net.layout());
        assert!(p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_truncated_and_garbled_input() {
        assert!(read_checkpoint("nope\n".as_bytes()).is_err());
        let text = format!("{CHECKPOINT_MAGIC}\nversion 1\nsegments 1\nw weight 1 2 0\nvalues 2\n3ff0000000000000\n");
        assert!(matches!(read_checkpoint(text.as_bytes()), Err(Error::Parse { .. })));
        let text = format!("{CHECKPOINT_MAGIC}\nversion 1\nsegments 1\nw weight 1 2 5\nvalues 2\n");
        assert!(read_checkpoint(text.as_bytes()).is_err());
    }
}
