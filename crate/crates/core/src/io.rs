//! Sample-set serialisation.
//!
//! Text form: CSV with header `sample,element,re,im`, one row per entry,
//! floats written with shortest round-trip formatting.
//!
//! Binary form (little-endian): magic `NFCS`, `u32` version, `u64` sample
//! count, `u64` element count, then `re, im` as `f64` pairs in sample-major
//! order.

use std::fmt::Write as _;
use std::io::{Read, Write};

use num_complex::Complex64;

use crate::channel::ChannelSampleSet;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "sample,element,re,im";
const MAGIC: &[u8; 4] = b"NFCS";
const VERSION: u32 = 1;

/// Shortest round-trip formatting, in scientific notation when the
/// magnitude is outside `[1e-3, 1e7)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a == 0.0 || !a.is_finite() || (1e-3..1e7).contains(&a) {
            write!(f, "{}", self.0)
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

pub fn samples_to_csv(set: &ChannelSampleSet) -> String {
    let mut out = String::with_capacity(set.as_flat().len() * 48);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (s, h) in set.iter().enumerate() {
        for (e, x) in h.iter().enumerate() {
            let _ = writeln!(out, "{s},{e},{},{}", Num(x.re), Num(x.im));
        }
    }
    out
}

/// Parses [`samples_to_csv`] output. Lines starting with `#` are skipped.
pub fn samples_from_csv(text: &str) -> Result<ChannelSampleSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("missing header `{CSV_HEADER}`"))),
    }
    let mut data = Vec::new();
    let mut n = None;
    for (idx, line) in lines {
        let fail = |what: &str| Error::Format(format!("line {}: {what}", idx + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(fail("expected 4 fields"));
        }
        let s: usize = fields[0].trim().parse().map_err(|_| fail("bad sample index"))?;
        let e: usize = fields[1].trim().parse().map_err(|_| fail("bad element index"))?;
        let re: f64 = fields[2].trim().parse().map_err(|_| fail("bad real part"))?;
        let im: f64 = fields[3].trim().parse().map_err(|_| fail("bad imaginary part"))?;
        if e == 0 && s > 0 && n.is_none() {
            n = Some(data.len());
        }
        let expect_s = n.map_or(0, |n| data.len() / n);
        let expect_e = n.map_or(data.len(), |n| data.len() % n);
        if s != expect_s || e != expect_e {
            return Err(fail("rows must be ordered by sample then element"));
        }
        data.push(Complex64::new(re, im));
    }
    let n = n.unwrap_or(data.len());
    if n == 0 || data.len() % n != 0 {
        return Err(Error::Format("incomplete sample set".into()));
    }
    ChannelSampleSet::from_flat(n, data)
}

pub fn write_samples_binary<W: Write>(set: &ChannelSampleSet, mut w: W) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(set.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(set.dim() as u64).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::with_capacity(set.as_flat().len() * 16);
    for x in set.as_flat() {
        buf.extend_from_slice(&x.re.to_le_bytes());
        buf.extend_from_slice(&x.im.to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

pub fn read_samples_binary<R: Read>(mut r: R) -> Result<ChannelSampleSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Format(e.to_string()))?;
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a binary sample file".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(Error::Format(format!("unsupported version {}", u32_at(4))));
    }
    let (s, n) = (u64_at(8) as usize, u64_at(16) as usize);
    let body = &bytes[24..];
    if s.checked_mul(n).and_then(|c| c.checked_mul(16)) != Some(body.len()) {
        return Err(Error::Format("payload length does not match header".into()));
    }
    let data = body
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    ChannelSampleSet::from_flat(n, data)
}
