//! Binary tensor container shared by weight files, checkpoints, patch sets
//! and embedding matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NXCH"            magic
//! u32                format version
//! u64                header length in bytes
//! [u8]               header, UTF-8 JSON object
//! u32                tensor count
//! per tensor:
//!   u32              name length
//!   [u8]             name, UTF-8
//!   u32              rank
//!   u64 * rank       dimensions
//!   f32 * prod(dims) values
//! ```
//!
//! Trailing bytes after the last tensor are rejected as corruption.

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 4] = b"NXCH";
pub const FORMAT_VERSION: u32 = 1;

// Upper bounds that guard allocations when reading damaged files.
const MAX_HEADER: u64 = 64 << 20;
const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {shape:?} ({n} values) but {} values were supplied",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: Value,
    pub tensors: Vec<Tensor>,
}

impl TensorFile {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        let pos = self
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` is missing")))?;
        Ok(self.tensors.remove(pos))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(
            header.len() + 32 + self.tensors.iter().map(|t| t.data.len() * 4 + 64).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u64()?;
        if header_len > MAX_HEADER {
            return Err(Error::Corrupt(format!("header length {header_len} is implausible")));
        }
        let header: Value = serde_json::from_slice(r.take(header_len as usize)?)
            .map_err(|e| Error::Corrupt(format!("header is not valid JSON: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            if name_len > MAX_NAME {
                return Err(Error::Corrupt("tensor name too long".into()));
            }
            let name = std::str::from_utf8(r.take(name_len as usize)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u32()?;
            if rank > MAX_RANK {
                return Err(Error::Corrupt(format!("tensor `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Corrupt("dimension overflows usize".into()))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
                shape.push(d);
            }
            let nbytes = n
                .checked_mul(4)
                .ok_or_else(|| Error::Corrupt("tensor size overflows".into()))?;
            let raw = r.take(nbytes)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads only the JSON header of a container file.
pub fn read_header(path: &Path) -> Result<Value> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut f = std::fs::File::open(path)?;
    let mut fixed = [0u8; 16];
    f.read_exact(&mut fixed)
        .map_err(|_| Error::Corrupt(format!("{} is truncated", path.display())))?;
    if &fixed[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes([fixed[4], fixed[5], fixed[6], fixed[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER {
        return Err(Error::Corrupt(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    f.read_exact(&mut header)
        .map_err(|_| Error::Corrupt(format!("{} is truncated", path.display())))?;
    serde_json::from_slice(&header).map_err(|e| Error::Corrupt(format!("header is not valid JSON: {e}")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("file is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new(json!({"kind": "test", "n": 3}));
        f.push(Tensor::new("a", vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap());
        f.push(Tensor::new("b.scalar", vec![], vec![-1.25]).unwrap());
        f
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NXCH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(header["kind"], "test");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nxch");
        sample().save(&path).unwrap();
        assert_eq!(read_header(&path).unwrap(), header);
    }

    #[test]
    fn every_truncation_is_reported_as_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match TensorFile::from_bytes(&bytes[..cut]) {
                Err(Error::Corrupt(_)) => {}
                other => panic!("cut at {cut}: expected corrupt error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_garbage_and_version_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Corrupt(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            TensorFile::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(0usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919)))
                .collect();
            let mut f = TensorFile::new(json!({"seed": seed}));
            f.push(Tensor::new("t", shape, data).unwrap());
            let back = TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let a: Vec<u32> = f.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.tensors[0].data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(&f.tensors[0].shape, &back.tensors[0].shape);
            prop_assert_eq!(f.header, back.header);
        }
    }
}
