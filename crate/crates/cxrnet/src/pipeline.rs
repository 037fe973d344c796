//! File-level building blocks shared by the CLI commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cxrnet_core::eval::{EvalReport, FailedSample, Prediction};
use cxrnet_core::gradcam::{blend_overlay, grad_cam, CamResult, OVERLAY_ALPHA};
use cxrnet_core::model::{forward, ModelSpec, VggConfig};
use cxrnet_core::tensor::bilinear_resize;
use cxrnet_core::weights::{validate_against, WeightSet};
use image::RgbImage;
use serde::Serialize;

use crate::container::{load_container, recorded_arch, save_container, Container, ARCH_KEY};
use crate::dataset::{load_rgb, preprocess_rgb, rgb_to_tensor, FileSource, Normalization, CLASS_DIRS};
use crate::error::{Error, Result};

/// Head-container metadata key for the preprocessing used in training.
pub const NORMALIZATION_KEY: &str = "normalization";

/// Backbone plus head, ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: VggConfig,
    pub spec: ModelSpec,
    pub weights: WeightSet,
    pub normalization: Normalization,
}

pub fn load_backbone(path: &Path) -> Result<(VggConfig, ModelSpec, WeightSet)> {
    let c = load_container(path)?;
    let arch = c.arch(CLASS_DIRS.len())?;
    let spec = arch.build()?;
    let report = validate_against(&spec, &c.weights);
    for w in &report.warnings {
        eprintln!("warning: backbone {}: {w}", path.display());
    }
    report.into_backbone_result()?;
    Ok((arch, spec, c.weights))
}

/// Loads both containers. The head's recorded architecture wins for the
/// head width; the conv stack must agree with the backbone's.
pub fn load_model(backbone: &Path, head: &Path, normalization: Option<Normalization>) -> Result<Model> {
    let (bb_arch, _, mut weights) = load_backbone(backbone)?;
    let Container {
        weights: head_weights,
        metadata,
    } = load_container(head)?;
    let arch = match recorded_arch(&metadata)? {
        Some(arch) => arch,
        None => VggConfig {
            hidden: head_weights
                .get("head.dense1.weight")
                .map_or(bb_arch.hidden, |t| t.shape()[0]),
            ..bb_arch.clone()
        },
    };
    if arch.blocks != bb_arch.blocks || arch.input_side != bb_arch.input_side {
        return Err(Error::Dataset(format!(
            "head {} was trained on a different backbone architecture",
            head.display()
        )));
    }
    let recorded = match metadata.get(NORMALIZATION_KEY) {
        Some(n) => n.parse().map_err(Error::Dataset)?,
        None => Normalization::default(),
    };
    weights.extend(head_weights);
    let spec = arch.build()?;
    validate_against(&spec, &weights).into_result()?;
    Ok(Model {
        arch,
        spec,
        weights,
        normalization: normalization.unwrap_or(recorded),
    })
}

pub fn head_metadata(arch: &VggConfig, normalization: Normalization) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert(
        ARCH_KEY.to_string(),
        serde_json::to_string(arch).expect("plain data serializes"),
    );
    m.insert(
        NORMALIZATION_KEY.to_string(),
        normalization_name(normalization).to_string(),
    );
    m.insert("kind".to_string(), "head".to_string());
    m
}

pub fn normalization_name(n: Normalization) -> &'static str {
    match n {
        Normalization::Imagenet => "imagenet",
        Normalization::Unit => "unit",
    }
}

/// Saves only the trainable tensors of `weights`.
pub fn save_head(model_spec: &ModelSpec, head: &WeightSet, meta: &BTreeMap<String, String>, dir: &Path) -> Result<()> {
    let mut only_head = WeightSet::new();
    for p in model_spec.trainable_parameters() {
        only_head.insert(p.tensor.clone(), head.require(&p.tensor)?.clone())?;
    }
    save_container(&only_head, meta, dir)?;
    Ok(())
}

/// Runs every sample of `source`; unreadable images are reported, not fatal.
pub fn predict(model: &Model, source: &FileSource) -> Result<(Vec<Prediction>, Vec<FailedSample>)> {
    let mut preds = Vec::new();
    let mut failed = Vec::new();
    for i in 0..cxrnet_core::train::ImageSource::len(source) {
        let image = match source.try_image(i) {
            Ok(t) => t,
            Err(e) => {
                failed.push(FailedSample {
                    path: source.path(i).to_string(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let trace = forward(&model.spec, &model.weights, &image, false)?;
        let label = cxrnet_core::train::ImageSource::label(source, i);
        preds.push(Prediction::from_probs(source.path(i), label, trace.probs.into_data()));
    }
    Ok((preds, failed))
}

fn parse_label(field: &str, names: &[String]) -> Option<usize> {
    let f = field.trim();
    f.parse::<usize>().ok().filter(|&i| i < names.len()).or_else(|| {
        names
            .iter()
            .map(String::as_str)
            .chain(CLASS_DIRS)
            .position(|n| n.eq_ignore_ascii_case(f))
            .map(|i| i % names.len())
    })
}

/// Reads a predictions CSV with header `path,true,predicted` (extra columns
/// ignored). Labels are class indices or class names.
pub fn read_predictions(path: &Path, names: &[String]) -> Result<Vec<Prediction>> {
    let csv_err = |reason: String| Error::Csv {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(format!("missing column `{name}`")))
    };
    let (p, t, q) = (column("path")?, column("true")?, column("predicted")?);
    let mut out = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_err(e.to_string()))?;
        let get = |i: usize| row.get(i).unwrap_or_default();
        let label = |i: usize| {
            parse_label(get(i), names).ok_or_else(|| csv_err(format!("row {}: unknown label `{}`", line + 1, get(i))))
        };
        out.push(Prediction {
            path: get(p).to_string(),
            true_label: label(t)?,
            predicted: label(q)?,
            probs: Vec::new(),
        });
    }
    Ok(out)
}

pub fn predictions_csv(preds: &[Prediction], names: &[String]) -> String {
    let mut s = String::from("path,true,predicted");
    for n in names {
        s.push_str(&format!(",p_{n}"));
    }
    s.push('\n');
    for p in preds {
        s.push_str(&format!("{},{},{}", p.path, names[p.true_label], names[p.predicted]));
        for i in 0..names.len() {
            match p.probs.get(i) {
                Some(v) => s.push_str(&format!(",{v:.8e}")),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    text.push('\n');
    write_file(path, text)
}

/// `report.json` and `report.txt` in `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_file(&dir.join("report.txt"), report.render_text())
}

/// Per-image Grad-CAM summary written next to the overlay.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CamSummary {
    pub image: String,
    pub class_index: usize,
    pub class_name: String,
    pub predicted_class: usize,
    pub predicted_probs: Vec<f32>,
    pub alpha: Vec<f32>,
    pub raw_map_shape: Vec<usize>,
    pub raw_map: Vec<f32>,
}

pub struct Explanation {
    pub cam: CamResult,
    /// Overlay at network input size.
    pub overlay: RgbImage,
}

pub fn explain(model: &Model, image: &Path, target: Option<usize>) -> Result<Explanation> {
    let rgb = load_rgb(image)?;
    let [_, h, w] = model.spec.input_shape();
    let input = preprocess_rgb(&rgb, h, model.normalization)?;
    let cam = grad_cam(&model.spec, &model.weights, &input, target)?;
    let resized = bilinear_resize(&rgb_to_tensor(&rgb), h, w)?;
    let plane = h * w;
    let mut interleaved = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            interleaved.push(resized.data()[c * plane + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    let blended = blend_overlay(&cam.heatmap, &interleaved, OVERLAY_ALPHA)?;
    let overlay = RgbImage::from_raw(w as u32, h as u32, blended).expect("blend keeps the pixel count");
    Ok(Explanation { cam, overlay })
}

/// Writes `<stem>.cam.png`, `<stem>.cam.csv` and `<stem>.json`; returns the paths.
pub fn write_explanation(out: &Path, stem: &str, image: &Path, model: &Model, e: &Explanation) -> Result<[PathBuf; 3]> {
    let png = out.join(format!("{stem}.cam.png"));
    let csv = out.join(format!("{stem}.cam.csv"));
    let json = out.join(format!("{stem}.json"));
    e.overlay.save(&png).map_err(|source| Error::Image {
        path: png.clone(),
        source,
    })?;
    let cols = e.cam.raw_map.shape()[1];
    let mut text = String::new();
    for row in e.cam.raw_map.data().chunks_exact(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    write_file(&csv, text)?;
    let summary = CamSummary {
        image: image.display().to_string(),
        class_index: e.cam.class_index,
        class_name: model.spec.class_names()[e.cam.class_index].clone(),
        predicted_class: cxrnet_core::eval::argmax(&e.cam.predicted_probs),
        predicted_probs: e.cam.predicted_probs.clone(),
        alpha: e.cam.alpha.clone(),
        raw_map_shape: e.cam.raw_map.shape().to_vec(),
        raw_map: e.cam.raw_map.data().to_vec(),
    };
    write_json(&json, &summary)?;
    Ok([png, csv, json])
}
