//! The `cxrnet` command line.
//!
//! Every subcommand accepts `--config <file.json>` whose keys are the long
//! flag names (`learning-rate`, `batch-size`, ...). Flags override the file;
//! the fully resolved settings are printed and, for commands writing into a
//! directory, saved there as `config.json`.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cxrnet_core::data::{split, SplitRatios};
use cxrnet_core::eval::EvalReport;
use cxrnet_core::model::{init_backbone, VggConfig};
use cxrnet_core::train::{train_head_observed, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::container::{save_container, ARCH_KEY};
use crate::dataset::{ingest, FileSource, Normalization, SplitManifest, CLASS_DIRS};
use crate::error::{Error, Result};
use crate::pipeline::{self, head_metadata, load_backbone, load_model, write_json};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "cxrnet", version, about = "Frozen-backbone chest X-ray classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stratified train/val/test split of a dataset directory.
    Split(SplitArgs),
    /// Train the dense head on top of a frozen backbone.
    Train(TrainArgs),
    /// Confusion matrix, accuracy and recall on one split subset.
    Eval(EvalArgs),
    /// Grad-CAM overlays for individual images.
    Explain(ExplainArgs),
    /// Write a randomly initialized backbone container.
    InitBackbone(InitBackboneArgs),
    /// Generate a procedural three-class texture dataset.
    Synth(SynthArgs),
}

/// Three comma-separated values, e.g. `0.8,0.1,0.1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Triple<T>(pub [T; 3]);

impl<T: FromStr + Copy> FromStr for Triple<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated values, got `{s}`"));
        }
        let mut out = Vec::with_capacity(3);
        for p in parts {
            out.push(p.parse::<T>().map_err(|e| format!("`{p}`: {e}"))?);
        }
        Ok(Triple([out[0], out[1], out[2]]))
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SplitArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root containing covid/, normal/ and infection/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train,val,test fractions [default: 0.8,0.1,0.1].
    #[arg(long)]
    pub ratios: Option<Triple<f64>>,
    /// Shuffle seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output split manifest (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Backbone weight container directory.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output directory (history.csv, head/, config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of epochs [default: 80].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub learning_rate: Option<f32>,
    /// Mini-batch size [default: 15].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for head initialization and batch order [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam beta1 [default: 0.9].
    #[arg(long)]
    pub adam_beta1: Option<f32>,
    /// Adam beta2 [default: 0.999].
    #[arg(long)]
    pub adam_beta2: Option<f32>,
    /// Adam epsilon [default: 1e-8].
    #[arg(long)]
    pub adam_epsilon: Option<f32>,
    /// Compute backbone features once instead of every epoch [default: true].
    #[arg(long)]
    pub cache_features: Option<bool>,
    /// Input normalization: imagenet or unit [default: imagenet].
    #[arg(long)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest written by `split`.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part of the split to evaluate: train, val or test [default: test].
    #[arg(long)]
    pub subset: Option<String>,
    /// Backbone weight container directory.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Head weight container directory written by `train`.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Input normalization override; defaults to the one the head was trained with.
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// Evaluate a CSV of `path,true,predicted` rows instead of running the model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Output directory (report.json, report.txt, config.json).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExplainArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Image files to explain.
    #[arg(long, num_args = 1..)]
    pub image: Vec<PathBuf>,
    /// Backbone weight container directory.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Head weight container directory written by `train`.
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Target class (index or name); defaults to the predicted class.
    #[arg(long)]
    pub class: Option<String>,
    /// Input normalization override; defaults to the one the head was trained with.
    #[arg(long)]
    pub normalization: Option<Normalization>,
    /// Output directory; three files per image.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct InitBackboneArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Architecture preset: vgg16 or small [default: vgg16].
    #[arg(long)]
    pub arch: Option<String>,
    /// Initialization seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output container directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// JSON file with default values for any of the flags below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Images per class: covid,normal,infection [default: 175,100,100].
    #[arg(long)]
    pub counts: Option<Triple<usize>>,
    /// Image side in pixels [default: 256].
    #[arg(long)]
    pub side: Option<usize>,
    /// Generator seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn is_unset(v: &serde_json::Value) -> bool {
    v.is_null() || v.as_array().is_some_and(Vec::is_empty)
}

/// Layers set flags over the config file.
fn merge<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let mut base = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::io(path))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(path))?;
            if !v.is_object() {
                return Err(Error::Usage(format!(
                    "{}: config must be a JSON object",
                    path.display()
                )));
            }
            v
        }
        None => serde_json::Value::Object(Default::default()),
    };
    let overrides = serde_json::to_value(flags).expect("arguments serialize");
    let obj = base.as_object_mut().expect("checked above");
    for (k, v) in overrides.as_object().expect("arguments are a struct") {
        if !is_unset(v) {
            obj.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(base).map_err(|e| Error::Usage(format!("config: {e}")))
}

fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| Error::Usage(format!("--{flag} is required (flag or config key `{flag}`)")))
}

fn echo<T: Serialize>(settings: &T, dir: Option<&Path>) -> Result<()> {
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(settings).expect("arguments serialize")
    );
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        write_json(&dir.join("config.json"), settings)?;
    }
    Ok(())
}

fn usage(e: impl fmt::Display) -> Error {
    Error::Usage(e.to_string())
}

pub fn cmd_split(args: &SplitArgs) -> Result<SplitManifest> {
    let mut a = merge(args, args.config.as_deref())?;
    a.ratios.get_or_insert(Triple(SplitRatios::DEFAULT.as_array()));
    a.seed.get_or_insert(0);
    let data = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let Triple([tr, va, te]) = a.ratios.expect("defaulted");
    let ratios = SplitRatios::new(tr, va, te).map_err(usage)?;
    echo(&a, None)?;

    let ingested = ingest(&data)?;
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    let assignment = split(&ingested.index, ratios, a.seed.expect("defaulted"))?;
    let manifest = SplitManifest::from(&assignment);
    manifest.save(&out)?;

    println!(
        "{:<10} {:>6} {:>6} {:>6} {:>6}",
        "class", "train", "val", "test", "total"
    );
    let count = |part: &[cxrnet_core::data::Sample], l: usize| part.iter().filter(|s| s.label == l).count();
    for (l, name) in CLASS_DIRS.iter().enumerate() {
        let (a, b, c) = (
            count(&assignment.train, l),
            count(&assignment.val, l),
            count(&assignment.test, l),
        );
        println!("{name:<10} {a:>6} {b:>6} {c:>6} {:>6}", a + b + c);
    }
    let (a, b, c) = (assignment.train.len(), assignment.val.len(), assignment.test.len());
    println!("{:<10} {a:>6} {b:>6} {c:>6} {:>6}", "all", a + b + c);
    println!("wrote {}", out.display());
    Ok(manifest)
}

impl TrainArgs {
    fn fill_defaults(&mut self) {
        let d = TrainConfig::default();
        self.epochs.get_or_insert(d.epochs);
        self.learning_rate.get_or_insert(d.learning_rate);
        self.batch_size.get_or_insert(d.batch_size);
        self.seed.get_or_insert(d.seed);
        self.adam_beta1.get_or_insert(d.adam_beta1);
        self.adam_beta2.get_or_insert(d.adam_beta2);
        self.adam_epsilon.get_or_insert(d.adam_epsilon);
        self.cache_features.get_or_insert(d.cache_features);
        self.normalization.get_or_insert_with(Normalization::default);
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.expect("defaulted"),
            learning_rate: self.learning_rate.expect("defaulted"),
            batch_size: self.batch_size.expect("defaulted"),
            seed: self.seed.expect("defaulted"),
            adam_beta1: self.adam_beta1.expect("defaulted"),
            adam_beta2: self.adam_beta2.expect("defaulted"),
            adam_epsilon: self.adam_epsilon.expect("defaulted"),
            cache_features: self.cache_features.expect("defaulted"),
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<cxrnet_core::train::TrainOutcome> {
    let mut a = merge(args, args.config.as_deref())?;
    a.fill_defaults();
    let data = required(&a.data, "data")?;
    let split_path = required(&a.split, "split")?;
    let backbone = required(&a.backbone, "backbone")?;
    let out = required(&a.out, "out")?;
    let config = a.train_config();
    config.validate().map_err(usage)?;
    let norm = a.normalization.expect("defaulted");
    echo(&a, Some(&out))?;

    let (arch, spec, weights) = load_backbone(&backbone)?;
    let manifest = SplitManifest::load(&split_path)?;
    let side = arch.input_side;
    let train = FileSource::new(&data, &manifest.train, side, norm)?;
    let val = FileSource::new(&data, &manifest.val, side, norm)?;
    println!(
        "training on {} images, validating on {}",
        manifest.train.len(),
        manifest.val.len()
    );
    let outcome = train_head_observed(&spec, &weights, &train, &val, &config, &mut |r| println!("{r}"))?;

    pipeline::write_file(&out.join("history.csv"), outcome.history.to_csv())?;
    pipeline::save_head(&spec, &outcome.head, &head_metadata(&arch, norm), &out.join("head"))?;
    println!("wrote {}", out.display());
    Ok(outcome)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let mut a = merge(args, args.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let names: Vec<String> = cxrnet_core::CLASS_NAMES.iter().map(|s| s.to_string()).collect();

    let (report, preds) = if let Some(pred_path) = a.predictions.clone() {
        echo(&a, Some(&out))?;
        let preds = pipeline::read_predictions(&pred_path, &names)?;
        if preds.is_empty() {
            return Err(Error::Dataset(format!("{} holds no predictions", pred_path.display())));
        }
        (EvalReport::from_predictions(&preds, Vec::new(), &names)?, preds)
    } else {
        a.subset.get_or_insert_with(|| "test".into());
        let data = required(&a.data, "data")?;
        let split_path = required(&a.split, "split")?;
        let backbone = required(&a.backbone, "backbone")?;
        let head = required(&a.head, "head")?;
        let manifest = SplitManifest::load(&split_path)?;
        let subset = a.subset.clone().expect("defaulted");
        let paths = match subset.as_str() {
            "train" => &manifest.train,
            "val" => &manifest.val,
            "test" => &manifest.test,
            other => return Err(Error::Usage(format!("unknown subset `{other}` (train, val or test)"))),
        };
        if paths.is_empty() {
            return Err(Error::Dataset(format!(
                "{subset} split in {} is empty",
                split_path.display()
            )));
        }
        let model = load_model(&backbone, &head, a.normalization)?;
        a.normalization = Some(model.normalization);
        echo(&a, Some(&out))?;
        let source = FileSource::new(&data, paths, model.arch.input_side, model.normalization)?;
        let (preds, failed) = pipeline::predict(&model, &source)?;
        for f in &failed {
            eprintln!("warning: {}: {}", f.path, f.reason);
        }
        (
            EvalReport::from_predictions(&preds, failed, model.spec.class_names())?,
            preds,
        )
    };
    pipeline::write_report(&out, &report)?;
    pipeline::write_file(
        &out.join("predictions.csv"),
        pipeline::predictions_csv(&preds, &report.class_names),
    )?;
    print!("{}", report.render_text());
    Ok(report)
}

fn parse_class(s: &str, names: &[String]) -> Result<usize> {
    if let Ok(i) = s.parse::<usize>() {
        if i < names.len() {
            return Ok(i);
        }
    }
    names
        .iter()
        .map(String::as_str)
        .chain(CLASS_DIRS)
        .position(|n| n.eq_ignore_ascii_case(s))
        .map(|i| i % names.len())
        .ok_or_else(|| {
            Error::Usage(format!(
                "unknown class `{s}` (expected 0..{} or one of {names:?})",
                names.len()
            ))
        })
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<Vec<PathBuf>> {
    let mut a = merge(args, args.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let backbone = required(&a.backbone, "backbone")?;
    let head = required(&a.head, "head")?;
    if a.image.is_empty() {
        return Err(Error::Usage("--image needs at least one file".into()));
    }
    let model = load_model(&backbone, &head, a.normalization)?;
    a.normalization = Some(model.normalization);
    let target = a
        .class
        .as_deref()
        .map(|c| parse_class(c, model.spec.class_names()))
        .transpose()?;
    echo(&a, Some(&out))?;

    let mut written = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    for (i, image) in a.image.iter().enumerate() {
        let stem = image
            .file_stem()
            .map_or_else(|| format!("image{i}"), |s| s.to_string_lossy().into_owned());
        let stem = if used.insert(stem.clone()) {
            stem
        } else {
            format!("{stem}-{i}")
        };
        used.insert(stem.clone());
        let e = pipeline::explain(&model, image, target)?;
        let files = pipeline::write_explanation(&out, &stem, image, &model, &e)?;
        let probs: Vec<String> = e.cam.predicted_probs.iter().map(|p| format!("{p:.4}")).collect();
        println!(
            "{}: class {} ({}), probs [{}]",
            image.display(),
            e.cam.class_index,
            model.spec.class_names()[e.cam.class_index],
            probs.join(", ")
        );
        written.extend(files);
    }
    Ok(written)
}

pub fn cmd_init_backbone(args: &InitBackboneArgs) -> Result<()> {
    let mut a = merge(args, args.config.as_deref())?;
    a.arch.get_or_insert_with(|| "vgg16".into());
    a.seed.get_or_insert(0);
    let out = required(&a.out, "out")?;
    let name = a.arch.clone().expect("defaulted");
    let arch = VggConfig::preset(&name, CLASS_DIRS.len())
        .ok_or_else(|| Error::Usage(format!("unknown arch `{name}` (vgg16 or small)")))?;
    echo(&a, None)?;
    let spec = arch.build()?;
    let seed = a.seed.expect("defaulted");
    let weights = init_backbone(&spec, seed);
    let mut meta = std::collections::BTreeMap::new();
    meta.insert(
        ARCH_KEY.to_string(),
        serde_json::to_string(&arch).expect("plain data serializes"),
    );
    meta.insert("kind".to_string(), "backbone".to_string());
    meta.insert("source".to_string(), format!("random he-uniform init, seed {seed}"));
    save_container(&weights, &meta, &out)?;
    println!(
        "wrote {} ({} tensors, {} parameters)",
        out.display(),
        weights.len(),
        weights.parameter_count()
    );
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<usize> {
    let mut a = merge(args, args.config.as_deref())?;
    a.counts.get_or_insert(Triple([175, 100, 100]));
    a.side.get_or_insert(256);
    a.seed.get_or_insert(0);
    let out = required(&a.out, "out")?;
    let side = a.side.expect("defaulted");
    if side == 0 {
        return Err(Error::Usage("--side must be positive".into()));
    }
    echo(&a, None)?;
    let n = synth::generate(&out, a.counts.expect("defaulted").0, side, a.seed.expect("defaulted"))?;
    println!("wrote {n} images under {}", out.display());
    Ok(n)
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Split(a) => cmd_split(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Explain(a) => cmd_explain(a).map(drop),
        Command::InitBackbone(a) => cmd_init_backbone(a),
        Command::Synth(a) => cmd_synth(a).map(drop),
    }
}

/// Parses `args` and runs the command; maps failures to exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
