//! Weight containers: a directory holding `manifest.json` plus raw
//! little-endian `f32` blobs, row-major, no headers.
//!
//! Conv kernels are stored `[out, in, kh, kw]`, dense weights `[out, in]`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Component, Path, PathBuf};

use cxrnet_core::model::{VggBlock, VggConfig};
use cxrnet_core::weights::WeightSet;
use cxrnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ContainerError, Error, Result};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";

/// Metadata key holding the JSON-encoded [`VggConfig`].
pub const ARCH_KEY: &str = "arch";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u64,
    pub records: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub weights: WeightSet,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    /// Architecture recorded in the metadata, or inferred from conv shapes.
    pub fn arch(&self, num_classes: usize) -> Result<VggConfig> {
        match recorded_arch(&self.metadata)? {
            Some(arch) => Ok(arch),
            None => infer_arch(&self.weights, num_classes),
        }
    }
}

/// The architecture stored under [`ARCH_KEY`], if any.
pub fn recorded_arch(metadata: &BTreeMap<String, String>) -> Result<Option<VggConfig>> {
    metadata
        .get(ARCH_KEY)
        .map(|text| {
            serde_json::from_str(text).map_err(|e| {
                Error::Dataset(format!(
                    "container metadata `{ARCH_KEY}` is not a valid architecture: {e}"
                ))
            })
        })
        .transpose()
}

fn bad_manifest(path: &Path, reason: impl Into<String>) -> ContainerError {
    ContainerError::InvalidManifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Blob references must stay inside the container directory.
fn blob_path(dir: &Path, manifest: &Path, file: &str) -> Result<PathBuf, ContainerError> {
    let rel = Path::new(file);
    if file.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(bad_manifest(
            manifest,
            format!("blob path `{file}` must be relative and inside the container"),
        ));
    }
    Ok(dir.join(rel))
}

pub fn load_container(dir: impl AsRef<Path>) -> Result<Container> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ContainerError::MissingManifest(dir.to_path_buf()).into())
        }
        Err(e) => return Err(Error::io(&manifest_path)(e)),
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(&manifest_path))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    match version {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(ContainerError::UnsupportedVersion(v).into()),
        None => return Err(bad_manifest(&manifest_path, "format_version missing or not an integer").into()),
    }
    let manifest: WeightManifest = serde_json::from_value(raw).map_err(Error::json(&manifest_path))?;

    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut weights = WeightSet::new();
    for rec in &manifest.records {
        if rec.dtype != "f32" {
            return Err(ContainerError::UnsupportedDtype {
                name: rec.name.clone(),
                dtype: rec.dtype.clone(),
            }
            .into());
        }
        if weights.contains(&rec.name) {
            return Err(ContainerError::DuplicateTensor { name: rec.name.clone() }.into());
        }
        let path = blob_path(dir, &manifest_path, &rec.file)?;
        if !blobs.contains_key(&rec.file) {
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    return Err(ContainerError::MissingBlob {
                        name: rec.name.clone(),
                        path,
                    }
                    .into())
                }
                Err(e) => return Err(Error::io(&path)(e)),
            };
            blobs.insert(rec.file.clone(), bytes);
        }
        let bytes = &blobs[&rec.file];
        let count: usize = rec.shape.iter().product();
        let needed = 4 * count as u64;
        let available = (bytes.len() as u64).saturating_sub(rec.byte_offset);
        if available < needed {
            return Err(ContainerError::TruncatedBlob {
                name: rec.name.clone(),
                path,
                offset: rec.byte_offset,
                needed,
                available,
            }
            .into());
        }
        let start = rec.byte_offset as usize;
        let data: Vec<f32> = bytes[start..start + 4 * count]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ContainerError::NonFinite {
                name: rec.name.clone(),
                index,
            }
            .into());
        }
        let tensor = Tensor::new(rec.shape.clone(), data)
            .map_err(|e| bad_manifest(&manifest_path, format!("tensor `{}`: {e}", rec.name)))?;
        weights.insert(rec.name.clone(), tensor)?;
    }
    Ok(Container {
        weights,
        metadata: manifest.metadata,
    })
}

/// Writes `set` as a container at `dir`, replacing any existing one.
///
/// The new container is assembled in a sibling directory and renamed into
/// place, so readers never see a half-written manifest.
pub fn save_container(
    set: &WeightSet,
    metadata: &BTreeMap<String, String>,
    dir: impl AsRef<Path>,
) -> Result<WeightManifest> {
    let dir = dir.as_ref();
    let mut blob = Vec::with_capacity(set.parameter_count() * 4);
    let mut records = Vec::with_capacity(set.len());
    for (name, t) in set.iter() {
        records.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            file: BLOB.into(),
            byte_offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        records,
        metadata: metadata.clone(),
    };

    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(Error::io(&parent))?;
    let leaf = dir
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} is not a usable container path", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let staging = parent.join(format!(".{leaf}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
    }
    fs::create_dir(&staging).map_err(Error::io(&staging))?;
    fs::write(staging.join(BLOB), &blob).map_err(Error::io(staging.join(BLOB)))?;
    let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::json(dir.join(MANIFEST)))?;
    text.push('\n');
    fs::write(staging.join(MANIFEST), text).map_err(Error::io(staging.join(MANIFEST)))?;

    if dir.exists() {
        let old = parent.join(format!(".{leaf}.old-{}", std::process::id()));
        fs::rename(dir, &old).map_err(Error::io(dir))?;
        fs::rename(&staging, dir).map_err(Error::io(dir))?;
        fs::remove_dir_all(&old).map_err(Error::io(&old))?;
    } else {
        fs::rename(&staging, dir).map_err(Error::io(dir))?;
    }
    Ok(manifest)
}

/// Reads VGG block structure from `blockB.convI.weight` tensors. The head
/// width comes from `head.dense1.weight` when present, else 256.
pub fn infer_arch(set: &WeightSet, num_classes: usize) -> Result<VggConfig> {
    let mut blocks: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (name, t) in set.iter() {
        let Some(rest) = name.strip_prefix("block") else {
            continue;
        };
        let Some((b, rest)) = rest.split_once(".conv") else {
            continue;
        };
        let Some(i) = rest.strip_suffix(".weight") else {
            continue;
        };
        if let (Ok(b), Ok(i)) = (b.parse(), i.parse()) {
            blocks.entry(b).or_default().insert(i, t.shape()[0]);
        }
    }
    if blocks.is_empty() {
        return Err(Error::Dataset("container has no `blockN.convM.weight` tensors".into()));
    }
    let mut out = Vec::new();
    for (n, (b, convs)) in blocks.into_iter().enumerate() {
        let contiguous = convs.keys().copied().eq(1..=convs.len());
        if b != n + 1 || !contiguous {
            return Err(Error::Dataset(format!(
                "container conv tensors skip block or conv numbers near block{b}"
            )));
        }
        out.push(VggBlock {
            convs: convs.len(),
            channels: *convs.values().last().expect("non-empty block"),
        });
    }
    let hidden = set.get("head.dense1.weight").map_or(256, |t| t.shape()[0]);
    Ok(VggConfig {
        input_side: cxrnet_core::INPUT_SIDE,
        blocks: out,
        hidden,
        num_classes,
    })
}
