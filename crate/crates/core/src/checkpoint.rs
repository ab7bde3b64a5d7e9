//! `VMICK1` checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      7 bytes  "VMICK1\0"
//! tag        u32 length + UTF-8 type tag
//! blocks     u32 count
//! per block  u32 name length + UTF-8 name, u64 element count, f64 values
//! ```
//!
//! Architecture metadata (layer sizes, permutations) is stored as ordinary
//! `f64` blocks next to the weights.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"VMICK1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub data: Vec<f64>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, data: Vec<f64>) -> Self {
        ParamBlock { name: name.into(), data }
    }
}

/// Name-indexed view over decoded blocks.
#[derive(Debug)]
pub struct BlockReader {
    blocks: Vec<ParamBlock>,
    index: HashMap<String, usize>,
}

impl BlockReader {
    pub fn new(blocks: Vec<ParamBlock>) -> Self {
        let index = blocks.iter().enumerate().map(|(i, b)| (b.name.clone(), i)).collect();
        BlockReader { blocks, index }
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.index
            .get(name)
            .map(|&i| self.blocks[i].data.as_slice())
            .ok_or_else(|| Error::Corrupt(format!("missing block {name:?}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            [v] => Ok(*v),
            other => Err(Error::Corrupt(format!("block {name:?} has {} values, expected 1", other.len()))),
        }
    }

    pub fn tensor(&self, name: &str, shape: Vec<usize>) -> Result<Tensor> {
        let data = self.get(name)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Corrupt(format!("block {name:?} has {} values, expected {n}", data.len())));
        }
        Tensor::new(shape, data.to_vec())
    }

    pub fn indices(&self, name: &str) -> Result<Vec<usize>> {
        self.get(name)?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::Corrupt(format!("block {name:?} holds non-index value {v}")))
                }
            })
            .collect()
    }
}

/// Types that can be written to and read from a checkpoint.
pub trait Checkpoint: Sized {
    const TAG: &'static str;
    fn to_blocks(&self) -> Vec<ParamBlock>;
    fn from_blocks(reader: &BlockReader) -> Result<Self>;
}

pub fn encode(tag: &str, blocks: &[ParamBlock]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    out.extend_from_slice(tag.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.data.len() as u64).to_le_bytes());
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated { context: format!("{what} at byte {} needs {n} bytes", self.pos) }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<ParamBlock>)> {
    if bytes.len() < MAGIC.len() {
        if MAGIC.starts_with(bytes) {
            return Err(Error::Truncated { context: "checkpoint header".into() });
        }
        return Err(Error::BadMagic { expected: "VMICK1\\0" });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic { expected: "VMICK1\\0" });
    }
    let mut cur = Cursor { bytes, pos: MAGIC.len() };
    let tag = cur.string("type tag")?;
    let count = cur.u32("block count")?;
    let mut blocks = Vec::new();
    for i in 0..count {
        let name = cur.string(&format!("block {i} name"))?;
        let n = cur.u64(&format!("block {name:?} length"))?;
        let n = usize::try_from(n)
            .ok()
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Truncated { context: format!("block {name:?} claims {n} values") })?;
        let raw = cur.take(n * 8, &format!("block {name:?} values"))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.push(ParamBlock { name, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((tag, blocks))
}

pub fn to_bytes<T: Checkpoint>(value: &T) -> Vec<u8> {
    encode(T::TAG, &value.to_blocks())
}

pub fn from_bytes<T: Checkpoint>(bytes: &[u8]) -> Result<T> {
    let (tag, blocks) = decode(bytes)?;
    if tag != T::TAG {
        return Err(Error::TypeTag { expected: T::TAG.into(), found: tag });
    }
    T::from_blocks(&BlockReader::new(blocks))
}

pub fn save<T: Checkpoint>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(value))?;
    Ok(())
}

pub fn load<T: Checkpoint>(path: impl AsRef<Path>) -> Result<T> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let blocks = vec![ParamBlock::new("a", vec![1.0, -2.5]), ParamBlock::new("bb", vec![])];
        let bytes = encode("thing", &blocks);
        assert_eq!(&bytes[..7], b"VMICK1\0");
        let (tag, back) = decode(&bytes).unwrap();
        assert_eq!(tag, "thing");
        assert_eq!(back, blocks);
    }

    #[test]
    fn malformed_inputs() {
        let bytes = encode("thing", &[ParamBlock::new("a", vec![1.0, 2.0])]);
        for cut in [0, 3, 10, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Corrupt(_))));
    }
}
