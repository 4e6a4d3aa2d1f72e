//! `BFK1` tensor files: the 4-byte magic `BFK1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` extents, then the row-major payload as
//! little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BFK1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut cursor, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(&mut cursor, "rank")? as usize;
    if rank == 0 {
        return Err(Error::Format("rank must be at least 1".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut cursor, "extent")? as usize);
    }
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    if cursor.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            cursor.len(),
            n * 4
        )));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write(t: &Tensor, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read(mut r: impl Read) -> Result<Tensor> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

fn read_exact(cursor: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    if cursor.len() < buf.len() {
        return Err(Error::Format(format!("truncated before {what}")));
    }
    let (head, tail) = cursor.split_at(buf.len());
    buf.copy_from_slice(head);
    *cursor = tail;
    Ok(())
}

fn read_u32(cursor: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cursor, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"BFK1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"BFK2\x01\0\0\0\x01\0\0\0\0\0\0\0").is_err());
        assert!(decode(b"BFK1\x01\0\0\0\x02\0\0\0\0\0\0\0").is_err());
        assert!(decode(b"BFK1").is_err());
        assert!(decode(b"BFK1\0\0\0\0").is_err());
        let mut nan = b"BFK1\x01\0\0\0\x01\0\0\0".to_vec();
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode(&nan).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_for_f32_values(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 2001) as f32 / 7.0 - 100.0) as f64)
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
