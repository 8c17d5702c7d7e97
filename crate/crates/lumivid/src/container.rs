//! Named-tensor binary container used for datasets, checkpoints, and latents.
//!
//! Layout (all integers little-endian):
//!   magic "CLTN", u32 version = 1, u32 entry count;
//!   per entry: u32 name length, UTF-8 name bytes,
//!              u8 dtype (0 = f32, 1 = f64, 2 = i64), u8 ndim,
//!              ndim x u64 dims, raw little-endian element data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CLTN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64(_) => 2,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected f32 entry".into())),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::Format("expected f64 entry".into())),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match self {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::Format("expected i64 entry".into())),
        }
    }

    /// Lossless when the entry is f64, widening when f32.
    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        match self {
            TensorData::F32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Ok(v.clone()),
            TensorData::I64(_) => Err(Error::Format("integer entry where float expected".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Entry {
    fn check(&self) -> Result<()> {
        let n: u64 = self.dims.iter().product();
        if n as usize != self.data.len() {
            return Err(Error::Shape(format!(
                "entry dims {:?} need {} elements, got {}",
                self.dims,
                n,
                self.data.len()
            )));
        }
        Ok(())
    }
}

/// Ordered collection of named tensors. Entry order is the insertion order,
/// so writes are byte-deterministic for a deterministic producer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn insert(&mut self, name: &str, dims: &[u64], data: TensorData) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate entry name '{name}'")));
        }
        let entry = Entry { dims: dims.to_vec(), data };
        entry.check()?;
        self.entries.push((name.to_string(), entry));
        Ok(())
    }

    pub fn insert_f32(&mut self, name: &str, dims: &[u64], data: Vec<f32>) -> Result<()> {
        self.insert(name, dims, TensorData::F32(data))
    }

    pub fn insert_f64(&mut self, name: &str, dims: &[u64], data: Vec<f64>) -> Result<()> {
        self.insert(name, dims, TensorData::F64(data))
    }

    pub fn insert_i64(&mut self, name: &str, dims: &[u64], data: Vec<i64>) -> Result<()> {
        self.insert(name, dims, TensorData::I64(data))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("container missing entry '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[entry.data.dtype_code(), entry.dims.len() as u8])?;
            for d in &entry.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &entry.data {
                TensorData::F32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::I64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?} in {}", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut out = Container::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let (dtype, ndim) = (hdr[0], hdr[1] as usize);
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut r)?);
            }
            let n: u64 = dims.iter().product();
            let n = n as usize;
            let data = match dtype {
                0 => TensorData::F32(read_vec(&mut r, n, f32::from_le_bytes)?),
                1 => TensorData::F64(read_vec(&mut r, n, f64::from_le_bytes)?),
                2 => TensorData::I64(read_vec(&mut r, n, i64::from_le_bytes)?),
                other => return Err(Error::Format(format!("unknown dtype code {other}"))),
            };
            out.insert(&name, &dims, data)?;
        }
        Ok(out)
    }
}

fn read_vec<T, const N: usize>(
    r: &mut impl Read,
    n: usize,
    from_le: fn([u8; N]) -> T,
) -> Result<Vec<T>> {
    let mut bytes = vec![0u8; n * N];
    r.read_exact(&mut bytes)?;
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; N];
    for chunk in bytes.chunks_exact(N) {
        buf.copy_from_slice(chunk);
        out.push(from_le(buf));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cltn");
        let mut c = Container::new();
        c.insert_f32("a", &[2, 3], vec![1.0, -2.5, 0.0, 3.25, 4.5, -0.125]).unwrap();
        c.insert_f64("b.nested", &[4], vec![1e-300, -0.1, std::f64::consts::PI, 0.0]).unwrap();
        c.insert_i64("ids", &[3], vec![-5, 0, 99]).unwrap();
        c.write(&path).unwrap();
        let back = Container::read(&path).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b.nested", "ids"]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut c = Container::new();
        assert!(c.insert_f32("x", &[2, 2], vec![0.0; 3]).is_err());
        c.insert_f32("x", &[1], vec![0.0]).unwrap();
        assert!(c.insert_f32("x", &[1], vec![0.0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cltn");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(Container::read(&path).is_err());
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let build = || {
            let mut c = Container::new();
            c.insert_f64("poses", &[2, 4, 4], vec![0.5; 32]).unwrap();
            c.insert_i64("descriptor_ids", &[2], vec![6, 1]).unwrap();
            c
        };
        let p1 = dir.path().join("a.cltn");
        let p2 = dir.path().join("b.cltn");
        build().write(&p1).unwrap();
        build().write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
