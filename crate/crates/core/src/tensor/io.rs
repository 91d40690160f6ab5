//! `TJT1` tensor files: the 4-byte magic `TJT1`, a little-endian `u32` rank,
//! `rank` little-endian `u64` extents, then the row-major payload as
//! little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TJT1_MAGIC: &[u8; 4] = b"TJT1";

pub fn write_tensor_to<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(TJT1_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor_to(std::io::BufWriter::new(file), t).map_err(|e| Error::io(path, e))
}

/// Parses a `TJT1` stream. `origin` only labels error messages.
pub fn read_tensor_from<R: Read>(mut r: R, origin: &str) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(origin, e))?;
    let bad = |reason: &str| Error::format(origin, reason);
    if bytes.len() < 8 || &bytes[..4] != TJT1_MAGIC {
        return Err(bad("missing TJT1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| bad("extent product overflows"))?;
    if bytes.len() != header + 8 * count {
        return Err(bad("payload length does not match extents"));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let mut want = b"TJT1".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_tensor_from(&b"TJT2\0\0\0\0"[..], "x"), Err(Error::Format { .. })));
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::zeros(&[3])).unwrap();
        buf.pop();
        assert!(matches!(read_tensor_from(&buf[..], "x"), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor_to(&mut buf, &t).unwrap();
            let back = read_tensor_from(&buf[..], "mem").unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
