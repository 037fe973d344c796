//! Class-directory datasets, image preprocessing and split manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cxrnet_core::data::{DatasetIndex, Sample, SplitAssignment, SplitRatios};
use cxrnet_core::tensor::bilinear_resize;
use cxrnet_core::train::ImageSource;
use cxrnet_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subdirectory per class, in label order.
pub const CLASS_DIRS: [&str; 3] = ["covid", "normal", "infection"];

/// Optional `<root>/sources.json` mapping relative paths to origin tags.
pub const SOURCES_FILE: &str = "sources.json";

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `(x/255 - mean) / std` with ImageNet channel statistics.
    #[default]
    Imagenet,
    /// `x/255` only.
    Unit,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "imagenet" => Ok(Self::Imagenet),
            "unit" => Ok(Self::Unit),
            other => Err(format!("unknown normalization `{other}` (expected imagenet or unit)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub index: DatasetIndex,
    /// Files that were skipped, with the reason.
    pub warnings: Vec<String>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Indexes `<root>/{covid,normal,infection}/*.{png,jpg,jpeg}`. Paths are
/// stored relative to `root` with `/` separators.
pub fn ingest(root: impl AsRef<Path>) -> Result<Ingested> {
    let root = root.as_ref();
    let sources: BTreeMap<String, String> = match fs::read_to_string(root.join(SOURCES_FILE)) {
        Ok(text) => serde_json::from_str(&text).map_err(Error::json(root.join(SOURCES_FILE)))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(Error::io(root.join(SOURCES_FILE))(e)),
    };
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (label, class) in CLASS_DIRS.iter().enumerate() {
        let dir = root.join(class);
        let entries = fs::read_dir(&dir).map_err(Error::io(&dir))?;
        let mut found = 0;
        for entry in entries {
            let path = entry.map_err(Error::io(&dir))?.path();
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            let name = path.file_name().expect("file entry").to_string_lossy();
            let rel = format!("{class}/{name}");
            if let Err(e) = load_rgb(&path) {
                warnings.push(format!("skipping {rel}: {e}"));
                continue;
            }
            let source = sources.get(&rel).cloned().unwrap_or_else(|| class.to_string());
            samples.push(Sample {
                path: rel,
                label,
                source,
            });
            found += 1;
        }
        if found == 0 {
            return Err(Error::Dataset(format!(
                "class {class}: no decodable images in {}",
                dir.display()
            )));
        }
    }
    Ok(Ingested {
        index: DatasetIndex::new(samples, CLASS_DIRS.len())?,
        warnings,
    })
}

/// Class label from the leading directory of a dataset-relative path.
pub fn label_of(rel: &str) -> Result<usize> {
    let dir = rel.split('/').next().unwrap_or_default();
    CLASS_DIRS
        .iter()
        .position(|c| *c == dir)
        .ok_or_else(|| Error::Dataset(format!("`{rel}` is not under one of {CLASS_DIRS:?}")))
}

/// Decodes any supported image to 8-bit RGB (grey replicated, alpha dropped).
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(Error::io(path))?
        .with_guessed_format()
        .map_err(Error::io(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

/// RGB8 pixels as a `[3, h, w]` tensor of raw 0..=255 values.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("non-empty decoded image")
}

/// Resizes to `side × side`, scales to `[0, 1]` and normalizes.
pub fn preprocess_rgb(img: &RgbImage, side: usize, norm: Normalization) -> Result<Tensor> {
    let mut t = bilinear_resize(&rgb_to_tensor(img), side, side)?;
    let plane = side * side;
    for (c, chan) in t.data_mut().chunks_exact_mut(plane).enumerate() {
        for v in chan {
            let unit = *v / 255.0;
            *v = match norm {
                Normalization::Imagenet => (unit - IMAGENET_MEAN[c]) / IMAGENET_STD[c],
                Normalization::Unit => unit,
            };
        }
    }
    Ok(t)
}

pub fn preprocess(path: impl AsRef<Path>, side: usize, norm: Normalization) -> Result<Tensor> {
    preprocess_rgb(&load_rgb(path)?, side, norm)
}

/// Persisted split: paths relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl From<&SplitAssignment> for SplitManifest {
    fn from(s: &SplitAssignment) -> Self {
        let paths = |part: &[Sample]| part.iter().map(|x| x.path.clone()).collect();
        Self {
            seed: s.seed,
            ratios: s.ratios,
            train: paths(&s.train),
            val: paths(&s.val),
            test: paths(&s.test),
        }
    }
}

impl SplitManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let m: Self = serde_json::from_str(&text).map_err(Error::json(path))?;
        m.ratios.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.to_json()).map_err(Error::io(path))
    }
}

/// Dataset images decoded and preprocessed on demand.
#[derive(Debug, Clone)]
pub struct FileSource {
    root: PathBuf,
    paths: Vec<String>,
    labels: Vec<usize>,
    side: usize,
    norm: Normalization,
}

impl FileSource {
    pub fn new(root: impl Into<PathBuf>, paths: &[String], side: usize, norm: Normalization) -> Result<Self> {
        let labels = paths.iter().map(|p| label_of(p)).collect::<Result<_>>()?;
        Ok(Self {
            root: root.into(),
            paths: paths.to_vec(),
            labels,
            side,
            norm,
        })
    }

    pub fn path(&self, index: usize) -> &str {
        &self.paths[index]
    }

    pub fn try_image(&self, index: usize) -> Result<Tensor> {
        preprocess(self.root.join(&self.paths[index]), self.side, self.norm)
    }
}

impl ImageSource for FileSource {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn image(&self, index: usize) -> cxrnet_core::Result<Tensor> {
        self.try_image(index)
            .map_err(|e| cxrnet_core::Error::Source(format!("{}: {e}", self.paths[index])))
    }

    fn describe(&self, index: usize) -> String {
        self.paths[index].clone()
    }
}
