//! Checkpoint files and parameter-group checksums.
//!
//! A checkpoint is a flat list of named tensors in a fixed order: one
//! `tensor <name> <rows> <cols>` header line followed by one line of
//! round-trip-precision floats per tensor. The same ordered view feeds the
//! group checksums that the staged trainer uses to enforce freezing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const CHECKPOINT_MAGIC: &str = "bundle-forge-checkpoint v1";

/// Shortest f64 representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// An ordered view over a set of named tensors. Parameter structs implement
/// this to get serialization, checksums, and optimizer support for free.
pub trait NamedTensors {
    /// Stable enumeration order; names unique within the collection.
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)>;
}

/// SHA-256 over names, shapes, and raw f64 bits, in enumeration order.
pub fn checksum<T: NamedTensors + ?Sized>(params: &T) -> String {
    let mut h = Sha256::new();
    for (name, m) in params.tensors() {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((m.rows as u64).to_le_bytes());
        h.update((m.cols as u64).to_le_bytes());
        for v in &m.data {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

pub fn write_string<T: NamedTensors + ?Sized>(params: &T) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    for (name, m) in params.tensors() {
        writeln!(out, "tensor {name} {} {}", m.rows, m.cols).unwrap();
        let mut first = true;
        for v in &m.data {
            if !first {
                out.push(' ');
            }
            out.push_str(&fmt_f64(*v));
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn save<T: NamedTensors + ?Sized>(params: &T, path: &Path) -> Result<()> {
    fs::write(path, write_string(params))?;
    Ok(())
}

/// Load tensor values into an existing parameter struct. Names and shapes
/// must match the struct's own enumeration exactly.
pub fn load_into<T: NamedTensors + ?Sized>(params: &mut T, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    load_str_into(params, &text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn load_str_into<T: NamedTensors + ?Sized>(params: &mut T, text: &str) -> Result<()> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == CHECKPOINT_MAGIC => {}
        other => {
            return Err(Error::Parse(format!(
                "line 1: expected checkpoint magic, got {:?}",
                other.map(|(_, l)| l).unwrap_or("")
            )))
        }
    }
    for (name, m) in params.tensors_mut() {
        let (hline_no, header) = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing header for tensor {name}")))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Parse(format!(
                "line {}: expected tensor header",
                hline_no + 1
            )));
        }
        let got_name = parts
            .next()
            .ok_or_else(|| Error::Parse(format!("line {}: missing name", hline_no + 1)))?;
        if got_name != name {
            return Err(Error::Parse(format!(
                "line {}: expected tensor {name}, found {got_name}",
                hline_no + 1
            )));
        }
        let rows: usize = parse_field(parts.next(), "rows", hline_no + 1)?;
        let cols: usize = parse_field(parts.next(), "cols", hline_no + 1)?;
        if rows != m.rows || cols != m.cols {
            return Err(Error::Parse(format!(
                "line {}: tensor {name} has shape {rows}x{cols}, expected {}x{}",
                hline_no + 1,
                m.rows,
                m.cols
            )));
        }
        let (dline_no, data_line) = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing data for tensor {name}")))?;
        let mut count = 0usize;
        for (i, tok) in data_line.split_whitespace().enumerate() {
            if i >= m.data.len() {
                return Err(Error::Parse(format!(
                    "line {}: too many values for tensor {name}",
                    dline_no + 1
                )));
            }
            m.data[i] = tok.parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "line {}: field {} of tensor {name}: bad float {tok:?}",
                    dline_no + 1,
                    i + 1
                ))
            })?;
            count += 1;
        }
        if count != m.data.len() {
            return Err(Error::Parse(format!(
                "line {}: tensor {name} has {count} values, expected {}",
                dline_no + 1,
                m.data.len()
            )));
        }
    }
    Ok(())
}

fn parse_field(tok: Option<&str>, what: &str, line: usize) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse(format!("line {line}: missing {what}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    struct Pair {
        a: Mat,
        b: Mat,
    }

    impl NamedTensors for Pair {
        fn tensors(&self) -> Vec<(String, &Mat)> {
            vec![("a".into(), &self.a), ("b".into(), &self.b)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
            vec![("a".into(), &mut self.a), ("b".into(), &mut self.b)]
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = substream(3, "ckpt");
        let p = Pair {
            a: Mat::randn(2, 3, 1.0, &mut rng),
            b: Mat::randn(1, 4, 1e-7, &mut rng),
        };
        let text = write_string(&p);
        let mut q = Pair {
            a: Mat::zeros(2, 3),
            b: Mat::zeros(1, 4),
        };
        load_str_into(&mut q, &text).unwrap();
        assert_eq!(p.a.data, q.a.data);
        assert_eq!(p.b.data, q.b.data);
        assert_eq!(checksum(&p), checksum(&q));
    }

    #[test]
    fn checksum_changes_with_any_entry() {
        let p = Pair {
            a: Mat::zeros(2, 2),
            b: Mat::zeros(1, 1),
        };
        let mut q = Pair {
            a: Mat::zeros(2, 2),
            b: Mat::zeros(1, 1),
        };
        q.a.data[3] = 1e-300;
        assert_ne!(checksum(&p), checksum(&q));
    }

    #[test]
    fn truncated_text_is_a_parse_error() {
        let p = Pair {
            a: Mat::zeros(2, 2),
            b: Mat::zeros(1, 1),
        };
        let text = write_string(&p);
        let cut = &text[..text.len() / 2];
        let mut q = Pair {
            a: Mat::zeros(2, 2),
            b: Mat::zeros(1, 1),
        };
        assert!(load_str_into(&mut q, cut).is_err());
    }
}
