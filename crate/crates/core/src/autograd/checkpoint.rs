//! `VFCK1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VFCK1"
//! u32 entry_count
//! entry_count × { u32 name_len, name (UTF-8), u8 dtype (0 = f32), u32 rank, rank × u64 extent }
//! payloads: each entry's f32 values, little-endian, in table order
//! ```

use std::fs;
use std::path::Path;

use super::optim::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"VFCK1";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        Tensor::new(t.shape.clone(), t.data.clone()).expect("valid"),
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry whose name exists in `params`; shapes must agree
    /// and every parameter must be present.
    pub fn load_into(&self, params: &mut ParamSet) -> Result<()> {
        for slot in 0..params.len() {
            let name = params.name(slot).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let dst = params.at_mut(slot);
            if dst.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, dst.shape
                )));
            }
            dst.data.copy_from_slice(&t.data);
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend((t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend((e as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.entries {
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected VFCK1".into()));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!(
                    "unsupported dtype {dtype} for {name}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, shape));
        }
        let mut entries = Vec::with_capacity(table.len());
        for (name, shape) in table {
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
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

    #[test]
    fn header_bytes() {
        let mut ck = Checkpoint::new();
        ck.push("a", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let b = ck.encode();
        assert_eq!(&b[..5], b"VFCK1");
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(b[13], b'a');
        assert_eq!(b[14], 0);
        assert_eq!(&b[15..19], &1u32.to_le_bytes());
        assert_eq!(&b[19..27], &2u64.to_le_bytes());
        assert_eq!(&b[27..31], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 35);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        assert!(Checkpoint::decode(b"VFCK2\0\0\0\0").is_err());
        let mut ck = Checkpoint::new();
        ck.push("x", Tensor::zeros(&[3, 2]));
        let b = ck.encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn bitwise_roundtrip(shapes in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..3), 0..4), seed in any::<u32>()) {
            let mut ck = Checkpoint::new();
            for (i, shape) in shapes.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(j as u32 * 97) & 0x7f7f_ffff)).collect();
                ck.push(format!("t{i}.w"), Tensor::new(shape, data).unwrap());
            }
            let bytes = ck.encode();
            let back = Checkpoint::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
