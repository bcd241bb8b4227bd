//! Declarative experiment runs: a JSON config, CLI overrides, a content-hashed
//! run id, an exclusively locked output directory and a run record listing
//! every produced file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::byol::{extract_features, normalized_dimension_std, ByolSpec, ByolState, ByolTrainConfig, EmaSchedule};
use crate::checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, ModelKind};
use crate::data::color::colorize;
use crate::data::idx::{load_idx_dir, Split};
use crate::data::shapes::{synthetic_shapes_with, ShapePalette};
use crate::data::store::{load_dataset, save_dataset};
use crate::data::{build_colored_mnist, digits::synthetic_digits, ColorMode, GrayImage, LabeledImages};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, fit_probe, noise_sweep, save_grid_png, swap_outcomes, swap_recovery, traversal_class_change,
    traversal_grid, EvalReport, LatentStats, LinearProbe, ProbeConfig, TraversalConfig,
};
use crate::nn::AdamConfig;
use crate::partition::{Part, PartitionSpec};
use crate::rng;
use crate::vae::{model_from_checkpoint, ConvVae, ConvVaeSpec, VaeState, VaeTrainConfig};

pub const CODE_VERSION: &str = concat!("partrep ", env!("CARGO_PKG_VERSION"));

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PARTREP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SynthData,
    TrainVae,
    TrainByol,
    Probe,
    NoiseEval,
    Traverse,
    Swap,
    Report,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::SynthData => "synth-data",
            Task::TrainVae => "train-vae",
            Task::TrainByol => "train-byol",
            Task::Probe => "probe",
            Task::NoiseEval => "noise-eval",
            Task::Traverse => "traverse",
            Task::Swap => "swap",
            Task::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedurally drawn 28×28 digits.
    Digits { train: usize, test: usize },
    /// IDX files (`train-*` and `t10k-*`) in `dir`, optionally truncated.
    Idx {
        dir: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// Procedurally drawn shapes.
    Shapes {
        train: usize,
        test: usize,
        side: usize,
        #[serde(default)]
        palette: ShapePalette,
    },
    /// A directory written by `synth-data`, holding `train/` and `test/`.
    Stored { dir: PathBuf },
}

/// Coloring of grayscale sources.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Coloring {
    #[default]
    Biased,
    Unbiased,
    Gray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default)]
    pub color: Coloring,
}

impl DatasetConfig {
    fn default_for(task: Task) -> Self {
        let source = match task {
            Task::TrainByol => DataSource::Shapes { train: 2000, test: 1000, side: 32, palette: ShapePalette::Binary },
            _ => DataSource::Digits { train: 10_000, test: 2000 },
        };
        Self { source, color: Coloring::Biased }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub vae: Option<ConvVaeSpec>,
    #[serde(default)]
    pub byol: Option<ByolSpec>,
}

/// Partition fields that replace the model's own.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionOverride {
    #[serde(default)]
    pub content_dim: Option<usize>,
    #[serde(default)]
    pub style_dim: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl PartitionOverride {
    pub fn apply(&self, base: PartitionSpec) -> Result<PartitionSpec> {
        let p = PartitionSpec {
            content_dim: self.content_dim.unwrap_or(base.content_dim),
            style_dim: self.style_dim.unwrap_or(base.style_dim),
            alpha: self.alpha.unwrap_or(base.alpha),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub ema: Option<EmaSchedule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_noise_t")]
    pub noise_t: Vec<f64>,
    #[serde(default = "default_one")]
    pub noise_draws: usize,
    #[serde(default)]
    pub traversal: TraversalConfig,
    /// Test images whose traversals are classified.
    #[serde(default = "default_traversal_inputs")]
    pub traversal_inputs: usize,
    /// Random test pairs with distinct labels for the swap evaluation.
    #[serde(default = "default_swap_pairs")]
    pub swap_pairs: usize,
    /// Traversal grids and swap figures saved as PNG.
    #[serde(default = "default_figures")]
    pub figures: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_noise_t() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0]
}
fn default_one() -> usize {
    1
}
fn default_traversal_inputs() -> usize {
    50
}
fn default_swap_pairs() -> usize {
    200
}
fn default_figures() -> usize {
    2
}
fn default_batch() -> usize {
    500
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            noise_t: default_noise_t(),
            noise_draws: 1,
            traversal: TraversalConfig::default(),
            traversal_inputs: default_traversal_inputs(),
            swap_pairs: default_swap_pairs(),
            figures: default_figures(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    /// Output root; runs land in `<root>/<task>-<run id prefix>`. Not part
    /// of the run id.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub partition: PartitionOverride,
    #[serde(default)]
    pub optimizer: Option<AdamConfig>,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Input checkpoint for evaluation tasks, or a state to resume training from.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            output_dir: None,
            dataset: None,
            model: ModelConfig::default(),
            partition: PartitionOverride::default(),
            optimizer: None,
            training: TrainingConfig::default(),
            checkpoint: None,
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 over the canonical (key-sorted) JSON form, excluding the
    /// output root, followed by [`CODE_VERSION`].
    pub fn run_id(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v)?;
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        h.update([0u8]);
        h.update(CODE_VERSION.as_bytes());
        Ok(hex::encode(h.finalize()))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_root().join(format!("{}-{}", self.task.as_str(), &self.run_id()?[..12])))
    }

    fn dataset(&self) -> DatasetConfig {
        self.dataset.clone().unwrap_or_else(|| DatasetConfig::default_for(self.task))
    }

    fn vae_spec(&self) -> Result<ConvVaeSpec> {
        let mut spec = self.model.vae.clone().unwrap_or_default();
        spec.partition = self.partition.apply(spec.partition)?;
        Ok(spec)
    }

    fn byol_spec(&self) -> Result<ByolSpec> {
        let mut spec = self.model.byol.clone().unwrap_or_else(ByolSpec::desk);
        spec.partition = self.partition.apply(spec.partition)?;
        Ok(spec)
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("task {} needs a checkpoint", self.task.as_str())))
    }
}

/// Command-line failure: help requested, or a usage error.
#[derive(Debug)]
pub enum CliError {
    Help(String),
    Usage(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Help(s) | CliError::Usage(s) => f.write_str(s),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "partrep", version, about = "Partitioned content/style representation learning")]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    task: Task,
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (defaults to $PARTREP_OUTPUT_ROOT, then ./runs).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Style push weight.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    content_dim: Option<usize>,
    #[arg(long)]
    style_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Coloring of grayscale sources.
    #[arg(long, value_enum)]
    color: Option<Coloring>,
    /// Load a dataset written by synth-data from this directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

/// Parses `argv` (program name first) into a resolved config. File values
/// are read first and flags take precedence.
pub fn parse_cli<I, T>(argv: I) -> std::result::Result<ExperimentConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CliError::Help(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    })?;
    let mut v = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<serde_json::Value>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    let obj = v.as_object_mut().ok_or_else(|| CliError::Usage("config file must hold a JSON object".into()))?;
    obj.insert("task".into(), serde_json::to_value(cli.task).expect("task serializes"));
    let mut set = |key: &str, value: serde_json::Value| {
        obj.insert(key.into(), value);
    };
    if let Some(s) = cli.seed {
        set("seed", s.into());
    }
    if let Some(p) = &cli.output_dir {
        set("output_dir", p.to_string_lossy().into_owned().into());
    }
    if let Some(p) = &cli.checkpoint {
        set("checkpoint", p.to_string_lossy().into_owned().into());
    }
    let mut config: ExperimentConfig = serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    let p = &mut config.partition;
    p.alpha = cli.alpha.or(p.alpha);
    p.content_dim = cli.content_dim.or(p.content_dim);
    p.style_dim = cli.style_dim.or(p.style_dim);
    let t = &mut config.training;
    t.epochs = cli.epochs.or(t.epochs);
    t.batch_size = cli.batch_size.or(t.batch_size);
    if let Some(lr) = cli.lr {
        config.optimizer = Some(AdamConfig { lr, ..config.optimizer.unwrap_or(AdamConfig::with_lr(lr)) });
    }
    if cli.color.is_some() || cli.data_dir.is_some() {
        let mut d = config.dataset();
        if let Some(c) = cli.color {
            d.color = c;
        }
        if let Some(dir) = cli.data_dir {
            d.source = DataSource::Stored { dir };
        }
        config.dataset = Some(d);
    }
    Ok(config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub task: Task,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub run_dir: PathBuf,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn file(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }
}

/// Exclusive ownership of a run directory for the guard's lifetime.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Config(format!("{} is locked by another run", dir.display())))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn file_manifest(dir: &Path) -> Result<Vec<FileEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let rel = path.strip_prefix(root).expect("walk stays under root").to_string_lossy().replace('\\', "/");
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if rel != ".lock" && rel != "run.json" {
                let bytes = fs::read(&path)?;
                out.push(FileEntry { path: rel, bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Runs `config` in its run directory and writes `config.json` and
/// `run.json` next to the task's artifacts. Failures carry the run id.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let run_id = config.run_id()?;
    let dir = config.run_dir()?;
    let attach = |e: Error| Error::Run { run_id: run_id.clone(), source: Box::new(e) };
    fs::create_dir_all(&dir).map_err(|e| attach(e.into()))?;
    let _lock = RunLock::acquire(&dir).map_err(attach)?;
    let started = unix_now();
    fs::write(dir.join("config.json"), config.to_json()?).map_err(|e| attach(e.into()))?;
    log::info!("run {} ({}) in {}", &run_id[..12], config.task.as_str(), dir.display());
    let metrics = dispatch(config, &run_id, &dir).map_err(attach)?;
    let record = RunRecord {
        run_id: run_id.clone(),
        task: config.task,
        code_version: CODE_VERSION.into(),
        started_unix: started,
        finished_unix: unix_now(),
        run_dir: dir.clone(),
        config: config.clone(),
        files: file_manifest(&dir).map_err(attach)?,
        metrics,
    };
    fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?).map_err(|e| attach(e.into()))?;
    Ok(record)
}

const DATA_STREAM: u64 = 0xDA7A;
const SWAP_STREAM: u64 = 0x5A9;

/// Train and test splits of the configured dataset.
pub fn load_splits(data: &DatasetConfig, seed: u64) -> Result<(LabeledImages, LabeledImages)> {
    let s = |k: u64| rng::derive_seed(seed, &[DATA_STREAM, k]);
    let color = |gray: Vec<GrayImage>, k: u64| -> Result<LabeledImages> {
        Ok(match data.color {
            Coloring::Biased => build_colored_mnist(&gray, ColorMode::Biased, s(k))?.into(),
            Coloring::Unbiased => build_colored_mnist(&gray, ColorMode::Unbiased, s(k))?.into(),
            Coloring::Gray => LabeledImages::new(gray.iter().map(|g| colorize(g, [255, 255, 255])).collect()),
        })
    };
    match &data.source {
        DataSource::Digits { train, test } => {
            Ok((color(synthetic_digits(*train, s(0)), 2)?, color(synthetic_digits(*test, s(1)), 3)?))
        }
        DataSource::Idx { dir, limit } => {
            let mut train = load_idx_dir(dir, Split::Train)?;
            let mut test = load_idx_dir(dir, Split::Test)?;
            if let Some(n) = limit {
                train.truncate(*n);
                test.truncate(*n);
            }
            Ok((color(train, 2)?, color(test, 3)?))
        }
        DataSource::Shapes { train, test, side, palette } => Ok((
            LabeledImages::new(synthetic_shapes_with(*train, *side, *palette, s(0))),
            LabeledImages::new(synthetic_shapes_with(*test, *side, *palette, s(1))),
        )),
        DataSource::Stored { dir } => Ok((load_dataset(&dir.join("train"))?.1, load_dataset(&dir.join("test"))?.1)),
    }
}

fn dispatch(config: &ExperimentConfig, run_id: &str, dir: &Path) -> Result<BTreeMap<String, f64>> {
    match config.task {
        Task::SynthData => synth_data(config, dir),
        Task::TrainVae => train_vae_task(config, dir),
        Task::TrainByol => train_byol_task(config, dir),
        Task::Probe | Task::NoiseEval | Task::Traverse | Task::Swap | Task::Report => evaluate(config, run_id, dir),
    }
}

fn synth_data(config: &ExperimentConfig, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let data = config.dataset();
    let (train, test) = load_splits(&data, config.seed)?;
    let meta = serde_json::json!({ "dataset": data, "seed": config.seed });
    let a = save_dataset(&dir.join("train"), "train", &train, meta.clone())?;
    let b = save_dataset(&dir.join("test"), "test", &test, meta)?;
    Ok(BTreeMap::from([("train_count".into(), a.count as f64), ("test_count".into(), b.count as f64)]))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
    }
    w.flush()?;
    Ok(())
}

fn train_vae_task(config: &ExperimentConfig, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let (train, _) = load_splits(&config.dataset(), config.seed)?;
    let defaults = VaeTrainConfig::default();
    let tc = VaeTrainConfig {
        epochs: config.training.epochs.unwrap_or(defaults.epochs),
        batch_size: config.training.batch_size.unwrap_or(defaults.batch_size),
        optimizer: config.optimizer.unwrap_or(defaults.optimizer),
        grad_clip: config.training.grad_clip,
        seed: config.seed,
    };
    let mut state = match &config.checkpoint {
        Some(p) => {
            let mut s = VaeState::from_checkpoint(&load_checkpoint(p)?)?;
            s.config.epochs = tc.epochs;
            s
        }
        None => VaeState::new(config.vae_spec()?, tc.clone())?,
    };
    let remaining = tc.epochs.saturating_sub(state.epoch);
    state.train(&train, remaining)?;
    save_checkpoint(&dir.join("model.ckpt"), &state.to_checkpoint()?)?;
    write_losses(&dir.join("losses.csv"), &state.epoch_losses)?;
    let mut m = BTreeMap::from([("epochs".into(), state.epoch as f64)]);
    if let Some(l) = state.epoch_losses.last() {
        m.insert("final_epoch_loss".into(), *l);
    }
    Ok(m)
}

fn train_byol_task(config: &ExperimentConfig, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let (train, _) = load_splits(&config.dataset(), config.seed)?;
    let spec = config.byol_spec()?;
    let mut tc = ByolTrainConfig::desk(config.seed);
    tc.augmentation = crate::data::AugmentationPolicy::byol(spec.input_size);
    tc.epochs = config.training.epochs.unwrap_or(tc.epochs);
    tc.batch_size = config.training.batch_size.unwrap_or(tc.batch_size);
    tc.optimizer = config.optimizer.unwrap_or(tc.optimizer);
    tc.ema = config.training.ema.unwrap_or(tc.ema);
    let mut state = match &config.checkpoint {
        Some(p) => ByolState::from_checkpoint(&load_checkpoint(p)?)?,
        None => ByolState::new(spec, tc.clone(), train.len())?,
    };
    let remaining = tc.epochs.saturating_sub(state.epoch);
    state.train(&train, remaining)?;
    save_checkpoint(&dir.join("model.ckpt"), &state.to_checkpoint()?)?;
    write_losses(&dir.join("losses.csv"), &state.epoch_losses)?;
    let mut m = BTreeMap::from([("epochs".into(), state.epoch as f64)]);
    if let (Some(first), Some(last)) = (state.epoch_losses.first(), state.epoch_losses.last()) {
        m.insert("first_epoch_loss".into(), *first);
        m.insert("final_epoch_loss".into(), *last);
    }
    Ok(m)
}

fn part_columns(rows: &[Vec<f64>], spec: &PartitionSpec, part: Part) -> Vec<Vec<f64>> {
    let r = part.range(spec);
    rows.iter().map(|row| row[r.clone()].to_vec()).collect()
}

fn probe_accuracy(train: &[Vec<f64>], ytr: &[u8], test: &[Vec<f64>], yte: &[u8], cfg: &ProbeConfig) -> Result<(LinearProbe, f64)> {
    let p = fit_probe(train, ytr, cfg)?;
    let acc = p.accuracy(test, yte)?;
    Ok((p, acc))
}

/// Distinct-label test pairs drawn with a generator derived from `seed`.
pub fn swap_pairs(labels: &[u8], count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Sampling("swap pairs need at least two classes".into()));
    }
    let mut r = rng::derived(seed, &[SWAP_STREAM]);
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let (i, j) = (r.random_range(0..labels.len()), r.random_range(0..labels.len()));
        if labels[i] != labels[j] {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

fn evaluate(config: &ExperimentConfig, run_id: &str, dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = config.checkpoint_path()?;
    let header = inspect_checkpoint(path)?;
    let data = config.dataset();
    let (train, test) = load_splits(&data, config.seed)?;
    let mut report = EvalReport {
        run_id: run_id.into(),
        dataset: serde_json::to_value(data.color)?.as_str().unwrap_or_default().to_string(),
        config: serde_json::to_value(config)?,
        ..Default::default()
    };
    match header.kind {
        ModelKind::Vae => evaluate_vae(config, &model_from_checkpoint(&load_checkpoint(path)?)?, &train, &test, dir, &mut report)?,
        ModelKind::Byol => {
            if !matches!(config.task, Task::Probe | Task::Report) {
                return Err(Error::Config(format!("task {} needs a VAE checkpoint", config.task.as_str())));
            }
            let state = ByolState::from_checkpoint(&load_checkpoint(path)?)?;
            evaluate_byol(config, &state, &train, &test, &mut report)?;
        }
    }
    emit_report(dir, &report)?;
    let mut m: BTreeMap<String, f64> = report.metrics.clone();
    m.insert("clean_accuracy".into(), report.clean_accuracy);
    for (k, v) in &report.accuracies {
        m.insert(format!("accuracy_{k}"), *v);
    }
    for c in &report.noise {
        m.insert(format!("noise_{}_{}", c.part, c.t), c.accuracy);
    }
    Ok(m)
}

fn evaluate_vae(
    config: &ExperimentConfig,
    model: &ConvVae,
    train: &LabeledImages,
    test: &LabeledImages,
    dir: &Path,
    report: &mut EvalReport,
) -> Result<()> {
    let ev = &config.eval;
    let spec = model.partition();
    let ftr = model.encode_means(train, ev.batch_size)?;
    let fte = model.encode_means(test, ev.batch_size)?;
    let (ytr, yte) = (train.labels(), test.labels());
    let (probe, clean) = probe_accuracy(&ftr, &ytr, &fte, &yte, &ev.probe)?;
    report.clean_accuracy = clean;
    let task = config.task;
    if matches!(task, Task::Probe | Task::Report) {
        for part in [Part::Content, Part::Style] {
            let (_, a) = probe_accuracy(&part_columns(&ftr, &spec, part), &ytr, &part_columns(&fte, &spec, part), &yte, &ev.probe)?;
            report.accuracies.insert(part.as_str().into(), a);
        }
    }
    if matches!(task, Task::NoiseEval | Task::Report) {
        let table = noise_sweep(&fte, &yte, &spec, &probe, &ev.noise_t, ev.noise_draws, config.seed)?;
        report.noise = table.cells;
    }
    if matches!(task, Task::Traverse | Task::Report) {
        let stats = LatentStats::from_means(&ftr)?;
        let n = ev.traversal_inputs.min(test.len());
        let fractions = traversal_class_change(model, &probe, &test.images[..n], &stats, &ev.traversal)?;
        let dims = ev.traversal.dims.clone().unwrap_or_else(|| (0..spec.total_dim()).collect());
        let mut w = csv::Writer::from_path(dir.join("traversal.csv"))?;
        w.write_record(["dim", "part", "change_fraction"])?;
        for (&d, f) in dims.iter().zip(&fractions) {
            let part = if d < spec.content_dim { Part::Content } else { Part::Style };
            w.write_record([d.to_string(), part.as_str().into(), format!("{f:.4}")])?;
            report.metrics.insert(format!("traversal_change_dim{d}"), *f);
        }
        w.flush()?;
        let style_max = dims.iter().zip(&fractions).filter(|(&d, _)| d >= spec.content_dim).map(|(_, f)| *f).fold(0.0, f64::max);
        let content_max = dims.iter().zip(&fractions).filter(|(&d, _)| d < spec.content_dim).map(|(_, f)| *f).fold(0.0, f64::max);
        report.metrics.insert("traversal_style_max".into(), style_max);
        report.metrics.insert("traversal_content_max".into(), content_max);
        for i in 0..ev.figures.min(n) {
            let g = traversal_grid(model, &test.images[i], &stats, &ev.traversal)?;
            let name = format!("traversal_{i}.png");
            save_grid_png(&dir.join(&name), &g.images()?, g.dims.len(), g.coefficients.len(), 1)?;
            report.figures.push(name);
        }
    }
    if matches!(task, Task::Swap | Task::Report) {
        let pairs = swap_pairs(&yte, ev.swap_pairs, config.seed)?;
        let outcomes = swap_outcomes(model, &probe, &test.images, &pairs)?;
        let mut w = csv::Writer::from_path(dir.join("swap.csv"))?;
        w.write_record(["content_donor", "style_donor", "content_label", "predicted"])?;
        for o in &outcomes {
            w.write_record([o.content_donor.to_string(), o.style_donor.to_string(), o.content_label.to_string(), o.predicted.to_string()])?;
        }
        w.flush()?;
        report.metrics.insert("swap_recovery".into(), swap_recovery(&outcomes));
        for (k, &(i, j)) in pairs.iter().take(ev.figures).enumerate() {
            let fig = crate::eval::style_swap_figure(model, &test.images[i], &test.images[j])?;
            let name = format!("swap_{k}.png");
            save_grid_png(&dir.join(&name), &fig.images()?, 1, 4, 1)?;
            report.figures.push(name);
        }
    }
    Ok(())
}

fn evaluate_byol(
    config: &ExperimentConfig,
    state: &ByolState,
    train: &LabeledImages,
    test: &LabeledImages,
    report: &mut EvalReport,
) -> Result<()> {
    let ev = &config.eval;
    let ftr = extract_features(&state.online, train, ev.batch_size)?;
    let fte = extract_features(&state.online, test, ev.batch_size)?;
    let (ytr, yte) = (train.labels(), test.labels());
    let (_, content) = probe_accuracy(&ftr.content(), &ytr, &fte.content(), &yte, &ev.probe)?;
    report.clean_accuracy = content;
    let (_, style) = probe_accuracy(&ftr.style(), &ytr, &fte.style(), &yte, &ev.probe)?;
    let (_, backbone) = probe_accuracy(&ftr.backbone, &ytr, &fte.backbone, &yte, &ev.probe)?;
    report.accuracies.insert("content".into(), content);
    report.accuracies.insert("style".into(), style);
    report.accuracies.insert("backbone".into(), backbone);
    let std = normalized_dimension_std(&ftr.content())?;
    report.metrics.insert("content_min_std".into(), std.iter().copied().fold(f64::INFINITY, f64::min));
    if let (Some(first), Some(last)) = (state.epoch_losses.first(), state.epoch_losses.last()) {
        report.metrics.insert("first_epoch_loss".into(), *first);
        report.metrics.insert("final_epoch_loss".into(), *last);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_flag_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "partition": {"alpha": 1.0}}"#).unwrap();
        let c = parse_cli(["partrep", "train-vae", "--config", p.to_str().unwrap(), "--alpha", "0.5"]).unwrap();
        assert_eq!(c.partition.alpha, Some(0.5));
        assert_eq!(c.seed, 3);
        assert_eq!(c.task, Task::TrainVae);
    }

    #[test]
    fn missing_seed_and_unknown_inputs_are_usage_errors() {
        assert!(matches!(parse_cli(["partrep", "train-vae"]), Err(CliError::Usage(_))));
        assert!(matches!(parse_cli(["partrep", "train-vae", "--seed", "1", "--bogus"]), Err(CliError::Usage(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 3, "colour": "red"}"#).unwrap();
        assert!(matches!(parse_cli(["partrep", "probe", "--config", p.to_str().unwrap()]), Err(CliError::Usage(_))));
        assert!(matches!(parse_cli(["partrep", "--help"]), Err(CliError::Help(_))));
    }

    #[test]
    fn run_id_is_content_hash() {
        let a = ExperimentConfig::new(Task::TrainVae, 1);
        let reparsed = ExperimentConfig::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a.run_id().unwrap(), reparsed.run_id().unwrap());
        assert_ne!(a.run_id().unwrap(), ExperimentConfig::new(Task::TrainVae, 2).run_id().unwrap());
        let moved = ExperimentConfig { output_dir: Some("/elsewhere".into()), ..a.clone() };
        assert_eq!(a.run_id().unwrap(), moved.run_id().unwrap());
        assert_eq!(a.run_id().unwrap().len(), 64);
    }

    #[test]
    fn unknown_nested_keys_rejected() {
        let bad = r#"{"task":"synth-data","seed":1,"dataset":{"source":{"kind":"digits","train":2,"test":2,"extra":1}}}"#;
        assert!(matches!(ExperimentConfig::from_json(bad), Err(Error::Config(_))));
        let good = r#"{"task":"synth-data","seed":1,"dataset":{"source":{"kind":"digits","train":2,"test":2}}}"#;
        assert!(ExperimentConfig::from_json(good).is_ok());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Config(_))));
        drop(first);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn evaluation_without_checkpoint_reports_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig { output_dir: Some(dir.path().into()), ..ExperimentConfig::new(Task::Probe, 1) };
        match run_experiment(&c) {
            Err(Error::Run { run_id, source }) => {
                assert_eq!(run_id, c.run_id().unwrap());
                assert!(matches!(*source, Error::Config(_)));
            }
            other => panic!("expected a run error, got {other:?}"),
        }
    }

    #[test]
    fn swap_pairs_have_distinct_labels() {
        let labels = [0, 0, 1, 2, 2, 1];
        let pairs = swap_pairs(&labels, 50, 4).unwrap();
        assert_eq!(pairs.len(), 50);
        assert!(pairs.iter().all(|&(i, j)| labels[i] != labels[j]));
        assert_eq!(pairs, swap_pairs(&labels, 50, 4).unwrap());
        assert!(swap_pairs(&[1, 1], 1, 0).is_err());
    }
}
