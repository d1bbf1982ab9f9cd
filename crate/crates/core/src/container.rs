//! Single-file container shared by datasets, provider exports and checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, JSON manifest,
//! then one little-endian `f32` blob. See `docs/format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STAMOTN\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Section {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::ShapeMismatch {
                section: name,
                detail: format!("shape {shape:?} needs {want} values, got {}", data.len()),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Result<Self> {
        Self::new(name, shape, data.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset from the start of the blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    meta: serde_json::Value,
    sections: Vec<SectionEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: String,
    pub meta: serde_json::Value,
    pub sections: Vec<Section>,
}

fn corrupt(section: &str, detail: impl Into<String>) -> Error {
    Error::CorruptSection {
        section: section.to_string(),
        detail: detail.into(),
    }
}

impl Container {
    pub fn new(version: &str, meta: serde_json::Value) -> Self {
        Self {
            version: version.to_string(),
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| corrupt(name, "section missing"))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .sections
            .iter()
            .map(|s| {
                let e = SectionEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += 4 * s.data.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            version: self.version.clone(),
            meta: self.meta.clone(),
            sections: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for s in &self.sections {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container, requiring `expected_version`.
    pub fn from_bytes(bytes: &[u8], expected_version: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("header", "bad magic or truncated header"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(corrupt("manifest", format!("needs {len} bytes, file has {}", body.len())));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| corrupt("manifest", e.to_string()))?;
        if manifest.version != expected_version {
            return Err(Error::VersionMismatch {
                expected: expected_version.to_string(),
                found: manifest.version,
            });
        }
        let blob = &body[len..];
        let mut sections = Vec::with_capacity(manifest.sections.len());
        for e in manifest.sections {
            if e.dtype != "f32" {
                return Err(corrupt(&e.name, format!("unsupported dtype `{}`", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start.checked_add(4 * count).ok_or_else(|| corrupt(&e.name, "offset overflow"))?;
            if end > blob.len() {
                return Err(corrupt(
                    &e.name,
                    format!("needs bytes {start}..{end}, blob has {}", blob.len()),
                ));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            sections.push(Section {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            version: manifest.version,
            meta: manifest.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_version: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?, expected_version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test/1", serde_json::json!({"k": 1.5}));
        c.push(Section::new("a", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]).unwrap());
        c.push(Section::new("b", vec![1], vec![42.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap(), "test/1").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn version_is_checked() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Container::from_bytes(&bytes, "test/2"),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn truncation_names_the_section() {
        let bytes = sample().to_bytes().unwrap();
        match Container::from_bytes(&bytes[..bytes.len() - 2], "test/1") {
            Err(Error::CorruptSection { section, .. }) => assert_eq!(section, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Container::from_bytes(&bytes[..5], "test/1"),
            Err(Error::CorruptSection { .. })
        ));
    }

    #[test]
    fn section_shape_is_validated() {
        assert!(Section::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }
}
