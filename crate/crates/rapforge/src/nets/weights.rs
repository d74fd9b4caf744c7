//! Binary weight-file format.
//!
//! Layout: 8-byte magic `RAPWTS01`, payload, CRC-32 (IEEE) of the payload
//! as a trailing little-endian u32. The payload is a u32 entry count
//! followed by entries of
//! `(u32 name_len, name, u8 dtype, u8 ndim, ndim*u32 dims, data)`
//! with 64-bit little-endian floats as the only dtype (tag 1). Round trips
//! are bit-exact.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RAPWTS01";
const DTYPE_F64: u8 = 1;

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightFile {
    pub entries: Vec<(String, Tensor)>,
}

impl WeightFile {
    pub fn new() -> WeightFile {
        WeightFile::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        payload.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            payload.extend_from_slice(&(name.len() as u32).to_le_bytes());
            payload.extend_from_slice(name.as_bytes());
            payload.push(DTYPE_F64);
            payload.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                payload.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        let mut out = Vec::with_capacity(8 + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<WeightFile> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::MagicMismatch);
        }
        let payload = &bytes[8..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut cur = Cursor { buf: payload, pos: 0 };
        let n_entries = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedWeightFile("entry name is not UTF-8".into()))?;
            let dtype = cur.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::MalformedWeightFile(format!("unknown dtype tag {dtype}")));
            }
            let ndim = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::from_vec(&shape, data)
                .map_err(|_| Error::MalformedWeightFile(format!("entry {name:?} is not a finite tensor")))?;
            entries.push((name, tensor));
        }
        if cur.pos != payload.len() {
            return Err(Error::MalformedWeightFile("trailing bytes after last entry".into()));
        }
        Ok(WeightFile { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<WeightFile> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightFile::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedWeightFile(format!(
                "truncated payload: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn sample() -> WeightFile {
        let mut rng = rng_from_seed(42);
        let mut wf = WeightFile::new();
        wf.push("conv0.w", Tensor::rand_uniform(&[4, 1, 3, 3], -1.0, 1.0, &mut rng));
        wf.push("conv0.b", Tensor::zeros(&[4]));
        wf.push("fc.w", Tensor::rand_uniform(&[8, 2], -1.0, 1.0, &mut rng));
        wf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let wf = sample();
        let back = WeightFile::from_bytes(&wf.to_bytes()).unwrap();
        assert_eq!(wf, back);
        // bit-exactness of every scalar
        for ((_, a), (_, b)) in wf.entries.iter().zip(&back.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupting_one_payload_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            WeightFile::from_bytes(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::MagicMismatch)));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        // cutting inside the payload corrupts the checksum first
        let cut = &bytes[..bytes.len() - 20];
        assert!(WeightFile::from_bytes(cut).is_err());
        assert!(WeightFile::from_bytes(&bytes[..6]).is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.rwt");
        let wf = sample();
        wf.save(&path).unwrap();
        assert_eq!(WeightFile::load(&path).unwrap(), wf);
    }
}
