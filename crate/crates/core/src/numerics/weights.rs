//! `MNNSW001` tensor container.
//!
//! Layout (little-endian): 8-byte magic `MNNSW001`, `u32` tensor count, then
//! for every tensor a `u32` rank, `rank` × `u32` dims and the `f32` payload in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"MNNSW001";

/// `<weights>.json`, where structured metadata for a weight file lives.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| 4 + 4 * t.rank() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad weights magic {:?}, expected MNNSW001",
            String::from_utf8_lossy(magic)
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported tensor rank {rank} at byte {}", r.pos - 4)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    decode_tensors(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode_tensors(&[t]);
        assert_eq!(&b[..8], b"MNNSW001");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &2u32.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn truncation_and_magic_errors() {
        let b = encode_tensors(&[Tensor::vector(vec![1.0, 2.0, 3.0])]);
        match decode_tensors(&b[..b.len() - 2]) {
            Err(Error::Truncated { offset, needed }) => {
                assert_eq!(offset, 20);
                assert_eq!(needed, 2);
            }
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensors(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 0..5), seed in any::<u64>()) {
            let mut rng = crate::numerics::Rng::new(seed);
            let tensors: Vec<Tensor> = shapes.iter().map(|s| rng.normal_tensor(s, 1.0)).collect();
            let bytes = encode_tensors(&tensors);
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(&back, &tensors);
            prop_assert_eq!(encode_tensors(&back), bytes);
        }
    }
}
