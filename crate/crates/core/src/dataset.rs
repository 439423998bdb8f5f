//! On-disk scene bundles, the per-split manifest and dataset loading.
//!
//! A scene file (`scene_<id>.bin`) is a flat little-endian record:
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 8                | magic `ASDA0001`                          |
//! | 8                | scene id, `u64`                           |
//! | 1                | domain, 0 = source, 1 = target            |
//! | 1                | 1 if pixel labels follow the image        |
//! | 2 + 2            | height, width, `u16`                      |
//! | 4                | object count `n`, `u32`                   |
//! | 12·H·W           | image, `f32`, CHW                         |
//! | H·W (optional)   | pixel labels, `u8`                        |
//! | 16·n             | boxes, `f32` quads `x_min y_min x_max y_max` |
//! | n                | object classes, `u8`                      |
//!
//! Next to the scenes every split directory holds `catalog.json` and
//! `manifest.json`, the latter listing each scene with its SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{BBox, ClassCatalog, DomainTag, LabeledScene, ObjectSet};

pub const SCENE_MAGIC: &[u8; 8] = b"ASDA0001";
pub const CATALOG_FILE: &str = "catalog.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn scene_file_name(id: u64) -> String {
    format!("scene_{id:06}.bin")
}

pub fn encode_scene(s: &LabeledScene) -> Vec<u8> {
    let hw = s.height * s.width;
    let mut out = Vec::with_capacity(26 + 12 * hw + hw + 17 * s.objects.len());
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&s.scene_id.to_le_bytes());
    out.push(s.domain.to_byte());
    out.push(s.pixel_labels.is_some() as u8);
    out.extend_from_slice(&(s.height as u16).to_le_bytes());
    out.extend_from_slice(&(s.width as u16).to_le_bytes());
    out.extend_from_slice(&(s.objects.len() as u32).to_le_bytes());
    for v in &s.image {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &s.pixel_labels {
        out.extend_from_slice(labels);
    }
    for b in s.objects.boxes() {
        for v in [b.x_min, b.y_min, b.x_max, b.y_max] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(s.objects.classes().map(|c| c as u8));
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated scene record"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a scene record; `path` only labels errors.
pub fn decode_scene(buf: &[u8], path: &Path) -> Result<LabeledScene> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(8)? != SCENE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let scene_id = r.u64()?;
    let domain = DomainTag::from_byte(r.u8()?).ok_or_else(|| Error::format(path, "bad domain byte"))?;
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(Error::format(path, "bad label flag")),
    };
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let n = r.u32()? as usize;
    let image = r.f32s(3 * height * width)?;
    let pixel_labels = if has_labels {
        Some(r.take(height * width)?.to_vec())
    } else {
        None
    };
    let coords = r.f32s(4 * n)?;
    let classes: Vec<usize> = r.take(n)?.iter().map(|&c| c as usize).collect();
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after scene record"));
    }
    let boxes = coords
        .chunks_exact(4)
        .map(|c| BBox::new(c[0], c[1], c[2], c[3]))
        .collect();
    Ok(LabeledScene {
        scene_id,
        domain,
        height,
        width,
        image,
        pixel_labels,
        objects: ObjectSet::from_parts(boxes, classes)?,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub domain: DomainTag,
    pub file: String,
    pub sha256: String,
}

/// Index of one generated split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub domain: DomainTag,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub pixel_labels: bool,
    pub count: usize,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    /// Digest over every scene hash, identifying the split's content.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.scenes {
            h.update(e.sha256.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_catalog(dir: &Path) -> Result<ClassCatalog> {
    let path = dir.join(CATALOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    ClassCatalog::from_json(&text)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// A loaded split: its catalog, manifest and scenes in manifest order.
#[derive(Clone, Debug)]
pub struct Split {
    pub dir: PathBuf,
    pub catalog: ClassCatalog,
    pub manifest: Manifest,
    pub scenes: Vec<LabeledScene>,
}

impl Split {
    /// Loads every scene and verifies it against the manifest hash.
    pub fn load(dir: &Path) -> Result<Split> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let catalog = read_catalog(dir)?;
        let manifest = read_manifest(dir)?;
        let mut scenes = Vec::with_capacity(manifest.scenes.len());
        for e in &manifest.scenes {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::format(&path, "content hash differs from manifest"));
            }
            scenes.push(decode_scene(&bytes, &path)?);
        }
        Ok(Split {
            dir: dir.to_path_buf(),
            catalog,
            manifest,
            scenes,
        })
    }
}
