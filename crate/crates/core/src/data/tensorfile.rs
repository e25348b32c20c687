//! The `BOQT` named-tensor container.
//!
//! ```text
//! header   magic "BOQT" | version u16 | dtype u16 | entry count u16
//! entry    name length u16 | name (UTF-8) | ndim u8 | dims u32 × ndim | payload
//! ```
//!
//! Everything is little-endian. Payload elements are `f32` or `f64` for the
//! whole file. An entry with `ndim == 0` holds one scalar.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BOQT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u16 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Ordered list of named tensors sharing one element type.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorTable {
    pub dtype: DType,
    pub entries: Vec<(String, Tensor)>,
}

impl TensorTable {
    pub fn new(dtype: DType) -> Self {
        TensorTable {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn encode(table: &TensorTable) -> Result<Vec<u8>> {
    let count = u16::try_from(table.entries.len())
        .map_err(|_| Error::Contract(format!("{} entries exceed the container limit", table.entries.len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&table.dtype.code().to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in &table.entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(tensor.ndim()).map_err(|_| Error::Contract(format!("`{name}` has too many dims")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(ndim);
        for &d in tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("`{name}` dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match table.dtype {
            DType::F64 => tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => tensor
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorTable> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected BOQT"));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let code = r.u16("dtype")?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::format(6, format!("unknown dtype code {code}")))?;
    let count = r.u16("entry count")?;
    let mut table = TensorTable::new(dtype);
    for _ in 0..count {
        let name_at = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(name_at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.take(1, "ndim")?[0] as usize;
        let dims_at = r.pos as u64;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = u32::from_le_bytes(r.take(4, "dims")?.try_into().expect("4 bytes"));
            shape.push(d as usize);
        }
        if shape.contains(&0) {
            return Err(Error::format(dims_at, format!("`{name}` has a zero dimension {shape:?}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
        let (n, nbytes) = n.ok_or_else(|| Error::format(dims_at, format!("`{name}` size overflows")))?;
        let payload = r.take(nbytes, "payload")?;
        let data: Vec<f64> = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        debug_assert_eq!(data.len(), n);
        let tensor = if ndim == 0 {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(&shape, data).map_err(|e| Error::format(dims_at, e.to_string()))?
        };
        table.push(name, tensor);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes after the last entry", bytes.len() - r.pos),
        ));
    }
    Ok(table)
}

pub fn write_tensor_file(path: &Path, table: &TensorTable) -> Result<()> {
    super::write_atomic(path, &encode(table)?)
}

pub fn read_tensor_file(path: &Path) -> Result<TensorTable> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_just_the_header() {
        let bytes = encode(&TensorTable::new(DType::F64)).unwrap();
        assert_eq!(bytes.len(), 10);
        assert_eq!(&bytes, b"BOQT\x01\x00\x02\x00\x00\x00");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn two_by_two_f64_payload_is_32_bytes() {
        let mut t = TensorTable::new(DType::F64);
        t.push("w", Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap());
        let bytes = encode(&t).unwrap();
        let entry_header = 2 + 1 + 1 + 2 * 4;
        assert_eq!(bytes.len(), HEADER_LEN + entry_header + 32);
        assert_eq!(&bytes[HEADER_LEN + entry_header..][..8], &1.0f64.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn scalars_and_f32() {
        let mut t = TensorTable::new(DType::F32);
        t.push("s", Tensor::scalar(0.1f32 as f64));
        t.push("v", Tensor::from_vec(vec![1.5, -0.25]));
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get("s").unwrap().shape(), &[] as &[usize]);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut t = TensorTable::new(DType::F64);
        t.push("abc", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let bytes = encode(&t).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[6] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 6, .. })));

        let truncated = &bytes[..bytes.len() - 3];
        let payload_at = (HEADER_LEN + 2 + 3 + 1 + 4) as u64;
        match decode(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, payload_at),
            other => panic!("{other:?}"),
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));
        assert!(decode(&bytes[..5]).is_err());
    }
}
