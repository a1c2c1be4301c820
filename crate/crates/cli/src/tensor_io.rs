//! Binary tensor files: the 8-byte magic `GYMTENSR`, a little-endian `u32`
//! rank, `rank` little-endian `u32` dims, then the values as little-endian
//! `f64` in row-major order. Nothing follows the last value.

use std::fs;
use std::path::Path;

use hymesh_core::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"GYMTENSR";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Inverse of [`encode`]. Errors carry a plain description; callers attach
/// the path.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err("missing GYMTENSR header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let rank = word(8);
    let header = 12 + 4 * rank;
    if bytes.len() < header {
        return Err(format!("truncated header for rank {rank}"));
    }
    let shape: Vec<usize> = (0..rank).map(|k| word(12 + 4 * k)).collect();
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("dims overflow")?;
    let body = &bytes[header..];
    if Some(body.len()) != n.checked_mul(8) {
        return Err(format!("shape {shape:?} needs {n} values, file holds {} bytes of data", body.len()));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| CliError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..8], b"GYMTENSR");
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 36);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(3.25);
        assert_eq!(decode(&encode(&t)).unwrap(), t);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = encode(&Tensor::vector(vec![1.0, 2.0]));
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"NOTATENS\0\0\0\0").is_err());
        let mut big = b.clone();
        big.push(0);
        assert!(decode(&big).is_err());
    }
}
