//! Attention weight images and the diagonality score.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Half-width of the band around the ideal alignment for `positions` columns.
pub fn band_halfwidth(positions: usize) -> usize {
    (0.1 * positions as f64).ceil() as usize
}

/// Mean over rows (decoder steps) of the attention mass lying within
/// `ceil(0.1·T)` columns of the straight line from the first to the last
/// encoder position.
pub fn diagonality<T: Scalar>(weights: &Tensor<T>) -> f64 {
    let (n, t) = weights.shape();
    if n == 0 || t == 0 {
        return 0.0;
    }
    let w = band_halfwidth(t);
    let mut total = 0.0;
    for i in 0..n {
        let center = if n > 1 {
            (i as f64 * (t - 1) as f64 / (n - 1) as f64).round() as usize
        } else {
            0
        };
        let lo = center.saturating_sub(w);
        let hi = (center + w).min(t - 1);
        total += weights.row(i)[lo..=hi].iter().map(|x| x.as_f64()).sum::<f64>();
    }
    total / n as f64
}

/// Writes `weights` (values in [0, 1]) as a binary PGM image, one row per
/// decoder step, and returns the diagonality score.
pub fn attention_heatmap<T: Scalar>(weights: &Tensor<T>, path: &Path) -> Result<f64> {
    let (rows, cols) = weights.shape();
    if weights.data().iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::invalid("attention weights must lie in [0, 1]"));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(weights.data().iter().map(|v| (v.as_f64() * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(diagonality(weights))
}

/// Reads a binary PGM written by [`attention_heatmap`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format(format!("{}: not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let cols: usize = fields[1].parse().map_err(|_| bad())?;
    let rows: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos..pos + rows * cols).ok_or_else(bad)?.to_vec();
    Ok((rows, cols, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_alignment_is_fully_diagonal() {
        let w = Tensor::from_fn(7, 7, |i, j| if i == j { 1.0f64 } else { 0.0 });
        assert_eq!(diagonality(&w), 1.0);
    }

    #[test]
    fn uniform_weights_match_band_fraction() {
        // keep the band away from the edges: a single row centred in the middle
        let t = 41;
        let w = Tensor::from_fn(3, t, |_, _| 1.0 / t as f64);
        let band = band_halfwidth(t);
        // rows 0 and 2 sit at the edges, row 1 in the middle
        let edge = (band + 1) as f64 / t as f64;
        let middle = (2 * band + 1) as f64 / t as f64;
        assert!((diagonality(&w) - (2.0 * edge + middle) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let w = Tensor::from_fn(3, 5, |i, j| ((i * 5 + j) as f64 / 14.0).min(1.0));
        attention_heatmap(&w, &p).unwrap();
        let (r, c, px) = read_pgm(&p).unwrap();
        assert_eq!((r, c), (3, 5));
        let expect: Vec<u8> = w.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(px, expect);
    }
}
