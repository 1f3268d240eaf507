//! Named-tensor checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"FLG1"`, version `u32`, tensor count `u32`, then per tensor the name
//! (`u32` byte length + UTF-8), rank `u32`, extents `u64 × rank`, element
//! tag `u8` and the IEEE-754 payload. A CRC-64 of every preceding byte
//! closes the file.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{Tensor, CRC64};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FLG1";
pub const VERSION: u32 = 1;
const TAG_F64: u8 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(TAG_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 20 {
        return Err(Error::Format("file too short for a checkpoint".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic; not an FLG1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let tag = r.take(1)?[0];
        if tag != TAG_F64 {
            return Err(Error::Format(format!("tensor {name}: unknown element tag {tag}")));
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::Format(format!("tensor {name}: extents overflow")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes)
}

/// CRC-64 of a whole checkpoint file.
pub fn file_checksum(path: &Path) -> Result<u64> {
    Ok(CRC64.checksum(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("w".into(), Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap()),
            ("b".into(), Tensor::vector(vec![0.5, f64::INFINITY])),
            ("s".into(), Tensor::scalar(3.0)),
            ("ünï".into(), Tensor::zeros(&[0])),
        ]
    }

    fn bits(t: &[(String, Tensor)]) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        t.iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample();
        assert_eq!(bits(&decode(&encode(&s).unwrap()).unwrap()), bits(&s));
    }

    #[test]
    fn corruption_is_refused() {
        let mut b = encode(&sample()).unwrap();
        b[20] ^= 1;
        assert!(matches!(decode(&b), Err(Error::Checksum { .. })));
        let b = encode(&sample()).unwrap();
        assert!(decode(&b[..b.len() - 3]).is_err());
    }

    #[test]
    fn header_is_as_documented() {
        let b = encode(&sample()).unwrap();
        assert_eq!(&b[..4], b"FLG1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.flg");
        save(&p, &sample()).unwrap();
        assert_eq!(bits(&load(&p).unwrap()), bits(&sample()));
        assert!(matches!(load(&dir.path().join("nope.flg")), Err(Error::MissingFile { .. })));
    }

    proptest! {
        #[test]
        fn any_values_round_trip(v in proptest::collection::vec(any::<f64>(), 0..40), name in "[a-z.]{0,12}") {
            let t = vec![(name, Tensor::vector(v))];
            prop_assert_eq!(bits(&decode(&encode(&t).unwrap()).unwrap()), bits(&t));
        }
    }
}
