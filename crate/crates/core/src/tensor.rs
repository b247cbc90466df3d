//! Dense f32 tensors and the `ELDT` binary container.
//!
//! Layout of one record:
//!
//! ```text
//! "ELDT" | version u8 = 1 | dtype u8 = 1 (f32) | ndim u8 | ndim x u32 LE extents | f32 LE payload
//! ```
//!
//! A checkpoint is a count byte followed by `count` sections of
//! `name_len u8 | ASCII name | ELDT record`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ELDT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MAX_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::Argument(format!(
                "tensor must have 1..={MAX_DIMS} axes, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Argument(format!("zero extent in dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Argument(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Size in bytes of the encoded record.
    pub fn encoded_len(&self) -> usize {
        7 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    /// Decodes one record from the front of `bytes`, returning the tensor
    /// and the number of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Tensor, usize)> {
        if bytes.len() < 7 {
            return Err(Error::Length {
                expected: 7,
                actual: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        if bytes[5] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[5])));
        }
        let ndim = bytes[6] as usize;
        if ndim == 0 || ndim > MAX_DIMS {
            return Err(Error::Format(format!("invalid axis count {ndim}")));
        }
        let header = 7 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Length {
                expected: header,
                actual: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[7..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero extent in dims {dims:?}")));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let total = count
            .checked_mul(4)
            .and_then(|p| p.checked_add(header))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if bytes.len() < total {
            return Err(Error::Length {
                expected: total,
                actual: bytes.len(),
            });
        }
        let data = bytes[header..total]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Tensor { dims, data }, total))
    }

    /// Decodes a buffer holding exactly one record.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let (t, used) = Tensor::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor record",
                bytes.len() - used
            )));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

/// Named tensors in checkpoint order.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    if tensors.len() > u8::MAX as usize {
        return Err(Error::Argument(format!(
            "checkpoint holds at most 255 tensors, got {}",
            tensors.len()
        )));
    }
    let mut out = vec![tensors.len() as u8];
    for (name, t) in tensors {
        if !name.is_ascii() || name.is_empty() || name.len() > u8::MAX as usize {
            return Err(Error::Argument(format!("invalid tensor name {name:?}")));
        }
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
        t.write_to(&mut out);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors> {
    let Some((&count, mut rest)) = bytes.split_first() else {
        return Err(Error::Length {
            expected: 1,
            actual: 0,
        });
    };
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let Some((&name_len, tail)) = rest.split_first() else {
            return Err(Error::Format("checkpoint truncated before name".into()));
        };
        let name_len = name_len as usize;
        if tail.len() < name_len {
            return Err(Error::Length {
                expected: name_len,
                actual: tail.len(),
            });
        }
        let name = std::str::from_utf8(&tail[..name_len])
            .ok()
            .filter(|s| s.is_ascii())
            .ok_or_else(|| Error::Format("non-ASCII tensor name".into()))?
            .to_string();
        let (t, used) = Tensor::read_from(&tail[name_len..])?;
        out.push((name, t));
        rest = &tail[name_len + used..];
    }
    if !rest.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            rest.len()
        )));
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(tensors)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
