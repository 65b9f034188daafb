//! `TTE1` tensor files: magic, u32 rows, u32 cols, row-major f32, all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TTE1";

pub fn encode_tensor(t: &Tensor<f32>, out: &mut Vec<u8>) -> Result<()> {
    let rows = u32::try_from(t.rows()).map_err(|_| Error::invalid("tensor has too many rows"))?;
    let cols = u32::try_from(t.cols()).map_err(|_| Error::invalid("tensor has too many columns"))?;
    out.reserve(12 + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing TTE1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("TTE1 dimensions overflow".into()))?;
    let body = bytes
        .get(12..12 + n)
        .ok_or_else(|| Error::Format(format!("TTE1 body truncated: need {n} bytes")))?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_vec(rows, cols, data), 12 + n))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(t, &mut bytes)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after tensor",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(1, 2, vec![1.0f32, -2.5]);
        let mut b = Vec::new();
        encode_tensor(&t, &mut b).unwrap();
        assert_eq!(&b[..4], b"TTE1");
        assert_eq!(&b[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
        assert_eq!(decode_tensor(&b).unwrap(), (t, 20));
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = Tensor::from_fn(3, 4, |r, c| (r as f32 - c as f32) / 7.0);
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&p), Err(Error::Format(_))));
    }
}
