//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VDET" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | dtype: u8 (0 = f32, 1 = f64)
//!   rank: u32 | extents: u64 × rank | values: dtype × product(extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VDET";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TensorError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Decode every entry. Entries must match the element type `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut entries = Vec::new();
    while !r.done() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| TensorError::Checkpoint("name is not utf-8".into()))?
            .to_owned();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(TensorError::DtypeMismatch {
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let size = dtype.size_of();
        let raw = r.take(numel * size, "values")?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

pub fn save<T: Scalar>(params: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load<T: Scalar>(params: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    params.load_named(decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap());
        s.add_buffer("bn.running_var", Tensor::ones(&[3]));
        s.add("scalar", Tensor::scalar(7.0));
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = store();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"VDET");
        let mut t = store();
        for (_, p) in t.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        t.load_named(decode(&bytes).unwrap()).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(t.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_and_dtype_errors() {
        let bytes = encode(&store());
        assert!(matches!(
            decode::<f32>(&bytes[..bytes.len() - 1]),
            Err(TensorError::Checkpoint(_))
        ));
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(TensorError::DtypeMismatch { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let mut s = store();
        s.add("extra", Tensor::zeros(&[1]));
        let err = s.load_named(decode(&encode(&store())).unwrap()).unwrap_err();
        assert!(err.to_string().contains("extra"));
    }
}
