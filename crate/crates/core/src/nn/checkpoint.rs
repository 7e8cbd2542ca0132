//! Checkpoint format: a JSON manifest next to a raw little-endian blob.
//!
//! The manifest records the architecture, the seed, and for every tensor its
//! name, shape, byte offset and CRC32. Loading checks the architecture
//! against the caller's before touching any parameter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::ParamStore;

const FORMAT: &str = "prospectr-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
    pub bytes: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arch: serde_json::Value,
    pub seed: u64,
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn encode<T: Scalar>(v: T, out: &mut Vec<u8>) {
    match T::DTYPE {
        "f32" => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

fn decode<T: Scalar>(bytes: &[u8], dtype: &str) -> Vec<T> {
    match dtype {
        "f32" => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        _ => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    }
}

/// Writes `components` (prefix, store) to `path` (manifest) and its `.bin`
/// sibling.
pub fn save<T: Scalar>(
    path: &Path,
    arch: &serde_json::Value,
    seed: u64,
    components: &[(&str, &ParamStore<T>)],
) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (prefix, store) in components {
        for p in store.iter() {
            let offset = blob.len();
            for &v in p.value.data() {
                encode(v, &mut blob);
            }
            tensors.push(TensorEntry {
                name: format!("{prefix}/{}", p.name),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
                offset,
                bytes: blob.len() - offset,
                crc32: crc32fast::hash(&blob[offset..]),
            });
        }
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        arch: arch.clone(),
        seed,
        dtype: T::DTYPE.into(),
        blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Malformed {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(Error::BadMagic(path.into()));
    }
    Ok(m)
}

/// Loads parameters into `components`, whose names and shapes must match the
/// manifest exactly. Returns the recorded seed.
pub fn load<T: Scalar>(
    path: &Path,
    arch: &serde_json::Value,
    components: &mut [(&str, &mut ParamStore<T>)],
) -> Result<u64> {
    let m = read_manifest(path)?;
    if &m.arch != arch {
        return Err(Error::Config(format!(
            "checkpoint {} was saved for architecture {} but {} was requested",
            path.display(),
            m.arch,
            arch
        )));
    }
    let bin = path.with_file_name(&m.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let needed = m.tensors.iter().map(|e| e.offset + e.bytes).max().unwrap_or(0);
    if blob.len() < needed {
        return Err(Error::Truncated {
            path: bin,
            expected: needed,
            found: blob.len(),
        });
    }
    let width = if m.dtype == "f32" { 4 } else { 8 };
    let expected: usize = components.iter().map(|(_, s)| s.len()).sum();
    if expected != m.tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {expected}",
            m.tensors.len()
        )));
    }
    let mut entries = m.tensors.iter();
    for (prefix, store) in components.iter_mut() {
        for p in store.iter_mut() {
            let e = entries.next().expect("length checked above");
            let name = format!("{prefix}/{}", p.name);
            if e.name != name || e.shape != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            let end = e.offset + e.bytes;
            if end > blob.len() {
                return Err(Error::Truncated {
                    path: bin.clone(),
                    expected: end,
                    found: blob.len(),
                });
            }
            let bytes = &blob[e.offset..end];
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(Error::Checksum {
                    path: bin.clone(),
                    section: e.name.clone(),
                });
            }
            if e.bytes != p.value.numel() * width {
                return Err(Error::Malformed {
                    path: bin.clone(),
                    reason: format!("tensor {} has {} bytes", e.name, e.bytes),
                });
            }
            p.value.data_mut().copy_from_slice(&decode::<T>(bytes, &m.dtype));
            p.value.clear_grad();
        }
    }
    Ok(m.seed)
}
