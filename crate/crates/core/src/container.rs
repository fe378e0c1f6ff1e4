//! Named-array container used for parameter checkpoints and feature grids.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "GSRA"
//! version  u32      1
//! count    u32      number of arrays
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   dtype    u8     1 = f64, 2 = f32 (IEEE-754 little-endian)
//!   ndim     u32, then ndim × u64 extents
//!   payload  product(extents) values, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GSRA";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 1,
    F32 = 2,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F64),
            2 => Ok(DType::F32),
            other => Err(Error::Container(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn encode(arrays: &[(String, Tensor)], dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
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
        if self.pos + n > self.buf.len() {
            return Err(Error::Container(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Container("array name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_code(r.take(1)?[0])?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F64 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        arrays.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Container(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(arrays)
}

pub fn write(path: &Path, arrays: &[(String, Tensor)], dtype: DType) -> Result<()> {
    fs::write(path, encode(arrays, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_fixed() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("ab".into(), t)], DType::F64);
        let mut expect = b"GSRA".to_vec();
        expect.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 1, 1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(decode(b"NOPE").is_err());
        let t = Tensor::zeros(&[3]);
        let mut bytes = encode(&[("x".into(), t)], DType::F32);
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip(values in proptest::collection::vec(-1e6..1e6f64, 1..40), name in "[a-z.]{1,12}") {
            let t = Tensor::new(&[values.len()], values).unwrap();
            let back = decode(&encode(&[(name.clone(), t.clone())], DType::F64)).unwrap();
            prop_assert_eq!(back, vec![(name, t)]);
        }
    }
}
