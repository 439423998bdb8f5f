//! Parameter snapshots on disk.
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `ASDACKPT` |
//! | 4 | format version (u32 LE) |
//! | 32 | SHA-256 of the class catalog |
//! | 4 + m | metadata length and UTF-8 JSON |
//! | 4 | tensor count |
//!
//! then per tensor: `u16` name length, name, `u8` group name length, group
//! name, `u8` rank, `u32` dims, `f32` data (all little endian).

use std::fs;
use std::path::Path;

use asda_autodiff::Tensor;

use super::params::{ParamGroup, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub catalog_hash: [u8; 32],
    /// Free-form JSON (trainer state, config).
    pub meta: String,
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.catalog_hash);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for p in self.tensors.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let g = p.group.name();
            out.push(g.len() as u8);
            out.extend_from_slice(g.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let mut catalog_hash = [0u8; 32];
        catalog_hash.copy_from_slice(r.take(32)?);
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::format(path, "metadata is not UTF-8"))?;
        let n = r.u32()? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..n {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let gl = r.take(1)?[0] as usize;
            let gname = std::str::from_utf8(r.take(gl)?).unwrap_or("");
            let group = ParamGroup::from_name(gname)
                .ok_or_else(|| Error::format(path, format!("unknown parameter group {gname:?}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let bytes = r.take(len * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.index(&name).is_some() {
                return Err(Error::format(path, format!("duplicate tensor {name}")));
            }
            tensors.push(name, group, Tensor::new(shape, data));
        }
        if r.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            catalog_hash,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks the catalog hash against `expected`.
    pub fn load(path: &Path, expected_catalog: &[u8; 32]) -> Result<Checkpoint> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Checkpoint::decode(&buf, path)?;
        if &ck.catalog_hash != expected_catalog {
            return Err(Error::format(path, "checkpoint was trained with a different class catalog"));
        }
        Ok(ck)
    }

    /// Copies stored values into `target`; every target parameter must be
    /// present with the same shape.
    pub fn restore_into(&self, target: &mut ParamSet, path: &Path) -> Result<()> {
        for p in target.iter_mut() {
            let src = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::format(
                    path,
                    format!("tensor {} has shape {:?}, expected {:?}", p.name, src.shape(), p.value.shape()),
                ));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
