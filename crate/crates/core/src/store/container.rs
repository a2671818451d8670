//! The `CRSP` tensor container.
//!
//! ```text
//! magic "CRSP" | version u16 | count u32 |
//!   per tensor: name_len u16, name (UTF-8), dtype u8, ndim u8, dims u64 × ndim, payload |
//! crc32 u32 over every preceding byte
//! ```
//! All integers and floats are little-endian; payloads are row-major.

use std::collections::BTreeSet;

use crate::error::StoreError;
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"CRSP";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    /// Opaque bytes, used for embedded metadata documents.
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::F32(values),
        }
    }

    pub fn bytes(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: vec![bytes.len()],
            data: TensorData::U8(bytes),
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::f32(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn vector(name: impl Into<String>, v: &[f32]) -> Self {
        Self::f32(name, vec![v.len()], v.to_vec())
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::U8(_) => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// The tensor as a matrix, if it is a 2-D f32 tensor.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::F32(v), &[r, c]) => Matrix::from_vec(r, c, v.clone()).ok(),
            _ => None,
        }
    }

    fn element_count(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

/// Serializes tensors in the given order.
pub fn encode_container(tensors: &[Tensor]) -> Result<Vec<u8>, StoreError> {
    let mut names = BTreeSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| StoreError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        if !names.insert(t.name.as_str()) {
            return Err(StoreError::DuplicateName(t.name.clone()));
        }
        let name_len = u16::try_from(t.name.len()).map_err(|_| StoreError::Malformed(format!("name too long: {}", t.name)))?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| StoreError::Malformed(format!("{}: too many dims", t.name)))?;
        if t.element_count() != Some(t.data.len()) {
            return Err(StoreError::Malformed(format!(
                "{}: dims {:?} do not match {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        match &t.data {
            TensorData::F32(_) => out.push(DTYPE_F32),
            TensorData::U8(_) => out.push(DTYPE_U8),
        }
        out.push(ndim);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| StoreError::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a container, checking magic, version, structure and checksum.
pub fn decode_container(bytes: &[u8]) -> Result<Vec<Tensor>, StoreError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(StoreError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    // the checksum occupies the last four bytes
    let body_end = bytes
        .len()
        .checked_sub(4)
        .ok_or_else(|| StoreError::Truncated("missing checksum".into()))?;
    let mut names = BTreeSet::new();
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| StoreError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64("dimension")?;
            dims.push(usize::try_from(d).map_err(|_| StoreError::Malformed(format!("{name}: dimension {d} too large")))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| StoreError::Malformed(format!("{name}: element count overflows")))?;
        let data = match dtype {
            DTYPE_F32 => {
                let nbytes = n.checked_mul(4).ok_or_else(|| StoreError::Malformed(format!("{name}: too large")))?;
                let raw = r.take(nbytes, &name)?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            }
            DTYPE_U8 => TensorData::U8(r.take(n, &name)?.to_vec()),
            other => return Err(StoreError::Malformed(format!("{name}: unknown dtype {other}"))),
        };
        if !names.insert(name.clone()) {
            return Err(StoreError::DuplicateName(name));
        }
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos > body_end {
        return Err(StoreError::Truncated("missing checksum".into()));
    }
    if r.pos < body_end {
        return Err(StoreError::Malformed(format!("{} unexpected bytes before the checksum", body_end - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(StoreError::Crc { stored, computed });
    }
    Ok(tensors)
}
