//! Binary PGM (P5) reading and 16-bit writing.

use std::path::Path;

use diffract_core::pattern::Pattern;

use crate::error::{CliError, CliResult};

/// Map `[0, 1]` to `0..=65535`, rounding halves up. Values outside the range
/// are clamped first.
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

/// The pattern as the 16-bit file would store it, scaled back to `[0, 1]`.
pub fn quantized(p: &Pattern) -> Pattern {
    p.map(|v| f64::from(quantize16(v)) / 65535.0)
}

pub fn encode_pgm16(p: &Pattern) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", p.width(), p.height()).into_bytes();
    out.reserve(2 * p.len());
    for &v in p.pixels() {
        out.extend_from_slice(&quantize16(v).to_be_bytes());
    }
    out
}

pub fn write_pgm16(p: &Pattern, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode_pgm16(p)).map_err(|e| CliError::io(path, e))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

/// Decode an 8- or 16-bit P5 image into `[0, 1]` (value / maxval).
pub fn decode_pgm(bytes: &[u8]) -> Result<Pattern, String> {
    if !bytes.starts_with(b"P5") {
        return Err("not a binary PGM (P5) file".into());
    }
    let mut h = Header { bytes, pos: 2 };
    let (width, height, maxval) = match (h.number(), h.number(), h.number()) {
        (Some(w), Some(hh), Some(m)) if m > 0 && m <= 65535 => (w, hh, m),
        _ => return Err("malformed PGM header".into()),
    };
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PGM header".into());
    }
    let data = &bytes[h.pos + 1..];
    let depth = if maxval < 256 { 1 } else { 2 };
    if data.len() != width * height * depth {
        return Err(format!("expected {} bytes of pixel data, found {}", width * height * depth, data.len()));
    }
    let scale = maxval as f64;
    let pixels = if depth == 1 {
        data.iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        data.chunks_exact(2).map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / scale).collect()
    };
    Pattern::new(height, width, pixels).map_err(|e| e.to_string())
}

pub fn read_pgm(path: &Path) -> CliResult<Pattern> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| CliError::format(path, m))
}
