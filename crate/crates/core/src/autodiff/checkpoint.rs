//! Binary tensor table ("VDCK"): little-endian, named, ordered.
//!
//! ```text
//! magic "VDCK" | version u32 | count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | f32 * numel
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VDCK";
pub const VERSION: u32 = 1;

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorTable {
    entries: Vec<(String, Tensor<f32>)>,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`TensorTable::get`], checking the shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> TensorTable {
        TensorTable {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Appends every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &TensorTable) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// True when both tables hold the same names, in order, with equal shapes.
    pub fn same_layout(&self, other: &TensorTable) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape == y.shape)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        for (name, t) in &self.entries {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(t.shape.len() as u32).unwrap();
            for &d in &t.shape {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in &t.values {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let eof = |_| bad("unexpected end of file".into());
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut table = TensorTable::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let mut name = vec![0u8; len.min(bytes.len())];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8".into()))?;
            let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            if rank > 8 {
                return Err(bad(format!("tensor {name:?} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(eof)?;
            let n: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if n * 4 > remaining {
                return Err(bad(format!("tensor {name:?} payload truncated")));
            }
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values).map_err(eof)?;
            table.entries.push((name, Tensor::new(shape, values)));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after last tensor".into()));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorTable {
        let mut t = TensorTable::new();
        t.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]));
        t.insert("b", Tensor::new(vec![1], vec![0.25]));
        t
    }

    #[test]
    fn byte_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"VDCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &8u32.to_le_bytes());
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(&bytes[24..28], &2u32.to_le_bytes());
        let expected = 12 + (4 + 8 + 4 + 8 + 24) + (4 + 1 + 4 + 4 + 4);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn round_trip_preserves_order() {
        let t = sample();
        let back = TensorTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.names(), vec!["a.weight", "b"]);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorTable::from_bytes(&bad).is_err());
        assert!(TensorTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(TensorTable::from_bytes(&long).is_err());
    }

    #[test]
    fn expect_checks_shape() {
        let t = sample();
        assert!(t.expect("b", &[1]).is_ok());
        assert!(matches!(t.expect("b", &[2]), Err(Error::Checkpoint(_))));
        assert!(matches!(t.expect("zzz", &[1]), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(vals in prop::collection::vec(any::<f32>(), 1..40), split in 1usize..4) {
            let mut t = TensorTable::new();
            let n = vals.len();
            t.insert("x", Tensor::new(vec![n], vals.clone()));
            t.insert("y", Tensor::new(vec![1, n.min(split)], vals[..n.min(split)].to_vec()));
            let back = TensorTable::from_bytes(&t.to_bytes()).unwrap();
            for ((_, a), (_, b)) in t.iter().zip(back.iter()) {
                prop_assert_eq!(&a.shape, &b.shape);
                let ab: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
        }
    }
}
