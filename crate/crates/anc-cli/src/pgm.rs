//! Binary greyscale PGM (P5) export.

use std::path::Path;

use anc_core::error::AncError;

/// Min-max scales `values` to 0..=255. A constant slice maps to all zeros.
pub fn scale(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(), AncError> {
    std::fs::write(path, encode(width, height, &scale(values))).map_err(|e| AncError::io(path, e))
}

/// Parses a P5 file with maxval 255 into `(width, height, pixels)`.
#[cfg(test)]
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), AncError> {
    let bad = |m: &str| AncError::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let data = &bytes[at + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_is_single_white_pixel() {
        let mut v = vec![0.0; 6];
        v[4] = 0.7;
        let bytes = encode(3, 2, &scale(&v));
        let (w, h, px) = decode(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn uniform_is_all_zero() {
        assert_eq!(scale(&[0.25; 4]), vec![0; 4]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(2, 1, &[1, 2]);
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        assert!(decode(&bytes[..12]).is_err());
    }
}
