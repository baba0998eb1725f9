//! Uniform access to named parameter tensors, gradient arithmetic, and the
//! on-disk checkpoint format.
//!
//! A checkpoint directory holds `manifest.json`:
//!
//! ```json
//! {"version": 1, "dtype": "f32", "tensors": [{"name": "...", "shape": [64, 64], "file": "....bin"}]}
//! ```
//!
//! and one little-endian 32-bit float blob per tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Whether weight decay applies.
    pub decay: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub decay: bool,
}

/// A fixed, ordered collection of named tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    /// `self += scale * other`; both sides must have the same layout.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// The scalar at flat index `i` across all tensors, in order.
    fn scalar_mut(&mut self, mut i: usize) -> Option<&mut f64> {
        for t in self.tensors_mut() {
            if i < t.data.len() {
                return Some(&mut t.data[i]);
            }
            i -= t.data.len();
        }
        None
    }

    fn scalar(&self, mut i: usize) -> Option<f64> {
        for t in self.tensors() {
            if i < t.data.len() {
                return Some(t.data[i]);
            }
            i -= t.data.len();
        }
        None
    }

    /// Name of the tensor holding flat index `i`.
    fn scalar_owner(&self, mut i: usize) -> Option<String> {
        for t in self.tensors() {
            if i < t.data.len() {
                return Some(t.name);
            }
            i -= t.data.len();
        }
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

fn file_name(tensor: &str) -> String {
    format!("{tensor}.bin")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, params: &impl Parameters) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest { version: CHECKPOINT_VERSION, dtype: "f32".into(), tensors: Vec::new() };
    for t in params.tensors() {
        let file = file_name(&t.name);
        let bytes: Vec<u8> = t.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.tensors.push(ManifestEntry { name: t.name, shape: t.shape, file });
    }
    crate::schema::write_json(dir.join("manifest.json"), &manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, &text, &e))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {}", path.display(), manifest.version)));
    }
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", path.display(), manifest.dtype)));
    }
    Ok(manifest)
}

/// Loads every tensor of `params` from `dir`.
pub fn load_checkpoint(dir: impl AsRef<Path>, params: &mut impl Parameters) -> Result<()> {
    load_checkpoint_mapped(dir, params, |name| Some(name.to_string()))
}

/// Loads tensors through a name mapping: `map(ours)` gives the manifest
/// name to read, or `None` to keep the current values. This is the seam for
/// adapting externally converted checkpoints.
pub fn load_checkpoint_mapped(
    dir: impl AsRef<Path>,
    params: &mut impl Parameters,
    map: impl Fn(&str) -> Option<String>,
) -> Result<()> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    for t in params.tensors_mut() {
        let Some(source) = map(&t.name) else { continue };
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == source)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{source}` missing from manifest")))?;
        if entry.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{source}` has shape {:?}, expected {:?}",
                entry.shape, t.shape
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != t.data.len() * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                t.data.len() * 4,
                bytes.len()
            )));
        }
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Two {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl Parameters for Two {
        fn tensors(&self) -> Vec<TensorRef<'_>> {
            vec![
                TensorRef { name: "a".into(), shape: vec![2], data: &self.a, decay: true },
                TensorRef { name: "b".into(), shape: vec![1, 3], data: &self.b, decay: false },
            ]
        }
        fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
            vec![
                TensorMut { name: "a".into(), shape: vec![2], data: &mut self.a, decay: true },
                TensorMut { name: "b".into(), shape: vec![1, 3], data: &mut self.b, decay: false },
            ]
        }
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = Two { a: vec![1.0, 2.0], b: vec![3.0, 4.0, 5.0] };
        assert_eq!(p.num_scalars(), 5);
        assert_eq!(p.scalar(3), Some(4.0));
        *p.scalar_mut(4).unwrap() = 9.0;
        assert_eq!(p.b[2], 9.0);
        assert_eq!(p.scalar_owner(1).as_deref(), Some("a"));
        assert_eq!(p.scalar(5), None);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = Two { a: vec![0.5, -1.25], b: vec![3.0, 4.0, 1e-3] };
        save_checkpoint(dir.path(), &p).unwrap();
        let raw = std::fs::read(dir.path().join("a.bin")).unwrap();
        assert_eq!(raw, [0.5f32.to_le_bytes(), (-1.25f32).to_le_bytes()].concat());

        let mut q = Two { a: vec![0.0; 2], b: vec![0.0; 3] };
        load_checkpoint(dir.path(), &mut q).unwrap();
        assert_eq!(q.a, p.a);
        assert_eq!(q.b[2], f64::from(1e-3f32));

        let mut wrong = Two { a: vec![0.0; 3], b: vec![0.0; 3] };
        assert!(load_checkpoint(dir.path(), &mut wrong).is_err());
    }
}
