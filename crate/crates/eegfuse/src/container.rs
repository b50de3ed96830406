//! The `.nft` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "NFTENSR1"
//! dtype     u8       0 = f32, 1 = f64
//! rank      u8
//! dims      rank × u64
//! payload   product(dims) × width, row-major
//! checksum  u32      CRC32 of the payload bytes
//! ```

use std::fs;
use std::path::Path;

use eegfuse_core::Tensor;

use crate::error::{format, io, Error, Result};

pub const MAGIC: &[u8; 8] = b"NFTENSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// A tensor as stored on disk, keeping its element type.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64(Tensor),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32 { .. } => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32 { shape, .. } => shape,
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Widens to an f64 [`Tensor`]. Lossless for both dtypes.
    pub fn to_f64(&self) -> Tensor {
        match self {
            StoredTensor::F32 { shape, data } => {
                Tensor::new(shape.clone(), data.iter().map(|&v| v as f64).collect()).expect("stored shape")
            }
            StoredTensor::F64(t) => t.clone(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            StoredTensor::F32 { data, .. } => data.iter().all(|v| v.is_finite()),
            StoredTensor::F64(t) => t.is_finite(),
        }
    }
}

impl From<Tensor> for StoredTensor {
    fn from(t: Tensor) -> Self {
        StoredTensor::F64(t)
    }
}

pub fn encode(t: &StoredTensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Parse(format!("rank {} does not fit the container header", shape.len())));
    }
    if !t.is_finite() {
        return Err(eegfuse_core::Error::Validation("refusing to store non-finite values".into()).into());
    }
    let mut payload = Vec::new();
    match t {
        StoredTensor::F32 { data, .. } => data.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        StoredTensor::F64(x) => x.data().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
    }
    let mut out = Vec::with_capacity(10 + 8 * shape.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Parses container bytes. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<StoredTensor> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(format(path, "bad magic"));
    }
    let code = r.take(1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| format(path, format!("unknown dtype code {code}")))?;
    let rank = r.take(1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| format(path, "dimension overflows usize"))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| format(path, "payload size overflows"))?;
    if r.remaining() != n + 4 {
        return Err(format(path, format!("expected {} payload bytes, found {}", n, r.remaining().saturating_sub(4))));
    }
    let payload = r.take(n)?;
    let stored = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(format(path, "checksum mismatch"));
    }
    let t = match dtype {
        DType::F32 => {
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            StoredTensor::F32 { shape, data }
        }
        DType::F64 => {
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            StoredTensor::F64(Tensor::new(shape, data)?)
        }
    };
    if !t.is_finite() {
        return Err(format(path, "payload contains NaN or infinite values"));
    }
    Ok(t)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(format(self.path, "truncated container"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn save_stored(t: &StoredTensor, path: &Path) -> Result<()> {
    fs::write(path, encode(t)?).map_err(io(path))
}

pub fn load_stored(path: &Path) -> Result<StoredTensor> {
    let bytes = fs::read(path).map_err(io(path))?;
    decode(&bytes, path)
}

/// Writes `t` as an f64 container.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode(&StoredTensor::F64(t.clone()))?).map_err(io(path))
}

/// Reads a container of either dtype as f64.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    Ok(load_stored(path)?.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t.into()).unwrap();
        assert_eq!(&b[..8], b"NFTENSR1");
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..34], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 26 + 16 + 4);
        let crc = crc32fast::hash(&b[26..42]);
        assert_eq!(&b[42..], &crc.to_le_bytes());
    }

    #[test]
    fn f32_round_trip() {
        let t = StoredTensor::F32 { shape: vec![3], data: vec![0.1, -7.5, 1e-30] };
        let b = encode(&t).unwrap();
        assert_eq!(b[8], 0);
        assert_eq!(decode(&b, p()).unwrap(), t);
    }

    #[test]
    fn empty_payload() {
        let t = Tensor::zeros(&[0]);
        let back = decode(&encode(&t.clone().into()).unwrap(), p()).unwrap();
        assert_eq!(back.to_f64(), t);
    }

    #[test]
    fn unknown_dtype() {
        let mut b = encode(&Tensor::zeros(&[1]).into()).unwrap();
        b[8] = 9;
        assert!(matches!(decode(&b, p()), Err(Error::Format { .. })));
    }

    #[test]
    fn non_finite_is_not_written() {
        let t = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(encode(&t.into()).is_err());
    }
}
