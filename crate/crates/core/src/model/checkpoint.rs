//! Binary checkpoint format.
//!
//! ```text
//! "DOE1"
//! u64 vocab_size, d_model, n_layers, n_heads, d_ffn, max_seq_len, prompt_len
//! f64 eps
//! u64 tensor_count
//! repeated: u32 path_len, path bytes (UTF-8), u32 ndim, u64 dims[ndim], f64 data[product(dims)]
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in path
//! order so encoding is canonical.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ParameterSet};
use crate::error::{DoeError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DOE1";

pub fn encode_checkpoint(params: &ParameterSet<f64>) -> Vec<u8> {
    let c = params.config();
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ffn,
        c.max_seq_len,
        c.prompt_len,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&c.eps.to_le_bytes());
    out.extend_from_slice(&(params.tensors().len() as u64).to_le_bytes());
    for (path, t) in params.tensors() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DoeError::format("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| DoeError::format("size field overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet<f64>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(DoeError::format("not a DOE1 checkpoint (bad magic)"));
    }
    let config = ModelConfig {
        vocab_size: r.u64()?,
        d_model: r.u64()?,
        n_layers: r.u64()?,
        n_heads: r.u64()?,
        d_ffn: r.u64()?,
        max_seq_len: r.u64()?,
        prompt_len: r.u64()?,
        eps: r.f64()?,
    };
    let count = r.u64()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DoeError::format("tensor path is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| DoeError::format("tensor size overflows"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| DoeError::format("tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(path.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(DoeError::format(format!("duplicate tensor `{path}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(DoeError::format("trailing bytes after tensor table"));
    }
    ParameterSet::from_tensors(config, tensors)
}

pub fn save_checkpoint(params: &ParameterSet<f64>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterSet<f64>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ParameterSet<f64> {
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 6,
            max_seq_len: 12,
            eps: 1e-5,
            prompt_len: 2,
        };
        ParameterSet::init(cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = small();
        let bytes = encode_checkpoint(&p);
        assert_eq!(&bytes[..4], b"DOE1");
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(encode_checkpoint(&q), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&small());
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
        let bytes = encode_checkpoint(&small());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.doe");
        let p = small();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().checksum(), p.checksum());
    }
}
