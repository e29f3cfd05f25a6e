//! The `SCNT` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCNT" | version: u32 | count: u32 |
//!   count x ( name_len: u16 | name: utf-8 | rank: u8 | dims: rank x u32 | payload: f32 x prod(dims) )
//! ```

use std::fs;
use std::path::Path;

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SCNT";
pub const VERSION: u32 = 1;

/// One named array in a checkpoint. Rank is free; engine tensors use rank 4.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.shape().dims().iter().map(|&d| d as u32).collect(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.dims.len() != 4 {
            return Err(Error::dim(format!(
                "array '{}' has rank {}, expected 4",
                self.name,
                self.dims.len()
            )));
        }
        let d: Vec<usize> = self.dims.iter().map(|&v| v as usize).collect();
        Tensor::from_vec(Shape::new(d[0], d[1], d[2], d[3]), self.data.clone())
    }
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let name = a.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::input(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(a.dims.len())
            .map_err(|_| Error::input(format!("rank {} too large", a.dims.len())))?;
        let numel: usize = a.dims.iter().map(|&d| d as usize).product();
        if numel != a.data.len() {
            return Err(Error::dim(format!(
                "array '{}': dims imply {numel} values, payload has {}",
                a.name,
                a.data.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for d in &a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            source_name: self.source.to_string(),
            position: format!("byte {}", self.pos),
            message,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(self.err(format!(
                "truncated {what}: expected {n} bytes, found {remaining}"
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Vec<NamedArray>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        source,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:?}, expected \"SCNT\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let raw = r.take(len, "name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| r.err(format!("tensor name is not utf-8: {e}")))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| r.err(format!("dims of '{name}' overflow")))?;
        let payload = r.take(numel * 4, &format!("payload of '{name}'"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(arrays)
}

pub fn save(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    let bytes = encode(arrays)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedArray>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedArray> {
        vec![
            NamedArray {
                name: "a".into(),
                dims: vec![1, 2, 1, 1],
                data: vec![1.5, -2.0],
            },
            NamedArray {
                name: "labels".into(),
                dims: vec![3],
                data: vec![0.0, 1.0, 2.0],
            },
        ]
    }

    #[test]
    fn exact_byte_layout() {
        let bytes = encode(&sample()[..1]).unwrap();
        let mut expected = b"SCNT".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'a');
        expected.push(4);
        for d in [1u32, 2, 1, 1] {
            expected.extend_from_slice(&d.to_le_bytes());
        }
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn roundtrip() {
        let arrays = sample();
        assert_eq!(decode(&encode(&arrays).unwrap(), "mem").unwrap(), arrays);
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = decode(&bytes, "mem").unwrap_err().to_string();
        assert!(err.contains("expected 12 bytes, found 9"), "{err}");
    }

    #[test]
    fn bad_magic() {
        assert!(decode(b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00", "mem").is_err());
    }
}
