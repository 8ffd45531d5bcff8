//! The `rcmp` command line.
//!
//! Every command resolves its options in layers: built-in defaults, then
//! `RCMP_SEED` (for commands that take a seed), then the `--config` JSON
//! file, then command-line flags. The resolved options are echoed to
//! `<output>.config.json` and embedded in the provenance of every model the
//! command writes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rcmp_core::metrics::{evaluate_logits, EvalReport};
use rcmp_core::model::{self, Model, ModelConfig, NameMapping, PRESET_DESK};
use rcmp_core::prune::{apply_prune, sparsity_report, PruneConfig};
use rcmp_core::quant::{calibrate, quantize_model, ActivationSites, QuantMode};
use rcmp_core::train::{evaluate_loss, masked_finetune, train, EpochRecord, LabeledSet, TrainConfig};
use rcmp_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::bench::{self, BenchOptions, BenchReport, WallClock};
use crate::dataset::{self, DatasetIndex, GeneratorConfig, Normalization, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::format::{self, Kind, StoredModel};

/// Name mapping for torchvision ResNet-18 checkpoints.
pub const TORCHVISION_MAPPING: &str = include_str!("../assets/torchvision_resnet18.json");

pub const SEED_ENV: &str = "RCMP_SEED";

#[derive(Parser, Debug)]
#[command(name = "rcmp", version, about = "Train, prune, quantize, evaluate and benchmark residual classifiers")]
pub struct Cli {
    /// Structured output: errors as single-line JSON on stderr, command
    /// summaries as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON object of option values (keys as printed in `.config.json`).
    /// Flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic maturity dataset.
    GenData(GenDataArgs),
    /// Build (optionally import weights into) and train a model.
    Train(TrainArgs),
    /// Magnitude-prune a dense model.
    Prune(PruneArgs),
    /// Retrain a pruned model with its masks held fixed.
    Finetune(FinetuneArgs),
    /// Calibrate and quantize a dense model to 8 bits.
    Quantize(QuantizeArgs),
    /// Classification metrics on a dataset split.
    Eval(EvalArgs),
    /// Load time and per-image latency of one or more models.
    Bench(BenchArgs),
    /// Summarise a model file or a preset.
    Inspect(InspectArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::Finetune(_) => "finetune",
            Command::Quantize(_) => "quantize",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Inspect(_) => "inspect",
        }
    }
}

const COMMANDS: [&str; 8] = ["gen-data", "train", "prune", "finetune", "quantize", "eval", "bench", "inspect"];

#[derive(Args, Debug, Default, Serialize)]
pub struct DataArgs {
    /// Dataset root (class subdirectories of PPM images).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Seed of the group split; keep it fixed across pipeline stages.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub split_train: Option<f64>,
    #[arg(long)]
    pub split_val: Option<f64>,
    #[arg(long)]
    pub split_test: Option<f64>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch JSON lines (default `<out>.history.jsonl`).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub groups_per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `resnet-desk` or `resnet18-full`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Defaults to the number of dataset classes.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Model file or tensor archive to initialise from.
    #[arg(long)]
    pub init_weights: Option<PathBuf>,
    /// Name-mapping JSON for `--init-weights` (default: torchvision).
    #[arg(long)]
    pub mapping: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct PruneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weights with magnitude below this quantile of |θ| are zeroed.
    #[arg(long)]
    pub retain_quantile: Option<f64>,
    /// `global` or `per_layer`.
    #[arg(long)]
    pub scope: Option<String>,
    /// Sparsity report JSON (default `<out>.sparsity.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct FinetuneArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct QuantizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub calibration_batches: Option<usize>,
    #[arg(long)]
    pub calibration_batch_size: Option<usize>,
    /// `all` or `boundary`.
    #[arg(long)]
    pub activation_sites: Option<String>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `train`, `val` or `test`.
    #[arg(long)]
    pub split: Option<String>,
    /// `integer` or `simulated` (quantized models).
    #[arg(long)]
    pub mode: Option<String>,
    /// Per-class ROC and PR CSVs (default `<out stem>_curves`).
    #[arg(long)]
    pub curves_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub pruned_finetuned: Option<PathBuf>,
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub load_repeats: Option<usize>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Build a fresh model from a preset instead of reading a file.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input side for the FLOP count (default: the model's).
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub data: Option<PathBuf>,
    pub split_seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        DataConfig { data: None, split_seed: s.seed, split_train: s.train, split_val: s.val, split_test: s.test }
    }
}

impl DataConfig {
    fn spec(&self) -> SplitSpec {
        SplitSpec { train: self.split_train, val: self.split_val, test: self.split_test, seed: self.split_seed }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub preset: String,
    pub num_classes: Option<usize>,
    pub init_weights: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            out: None,
            history: None,
            preset: PRESET_DESK.into(),
            num_classes: None,
            init_weights: None,
            mapping: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub prune: PruneConfig,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Training images in the fixed batch used for the before/after loss.
    pub loss_batch: usize,
}

impl Default for PruneCommandConfig {
    fn default() -> Self {
        PruneCommandConfig {
            data: DataConfig::default(),
            prune: PruneConfig::default(),
            model: None,
            out: None,
            report: None,
            loss_batch: 32,
        }
    }
}

/// Fine-tuning epochs unless configured otherwise.
pub const FINETUNE_EPOCHS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

impl Default for FinetuneCommandConfig {
    fn default() -> Self {
        FinetuneCommandConfig {
            data: DataConfig::default(),
            train: TrainConfig { epochs: FINETUNE_EPOCHS, ..TrainConfig::default() },
            model: None,
            out: None,
            history: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizeCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub calibration_batches: usize,
    pub calibration_batch_size: usize,
    pub activation_sites: ActivationSites,
}

impl Default for QuantizeCommandConfig {
    fn default() -> Self {
        QuantizeCommandConfig {
            data: DataConfig::default(),
            model: None,
            out: None,
            calibration_batches: 4,
            calibration_batch_size: 32,
            activation_sites: ActivationSites::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: String,
    pub mode: QuantMode,
    pub curves_dir: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EvalCommandConfig {
    fn default() -> Self {
        EvalCommandConfig {
            data: DataConfig::default(),
            model: None,
            out: None,
            split: "test".into(),
            mode: QuantMode::Integer,
            curves_dir: None,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCommandConfig {
    #[serde(flatten)]
    pub data: DataConfig,
    pub dense: Option<PathBuf>,
    pub pruned_finetuned: Option<PathBuf>,
    pub quantized: Option<PathBuf>,
    pub split: String,
    pub warmup: usize,
    pub repeats: usize,
    pub load_repeats: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchCommandConfig {
    fn default() -> Self {
        let o = BenchOptions::default();
        BenchCommandConfig {
            data: DataConfig::default(),
            dense: None,
            pruned_finetuned: None,
            quantized: None,
            split: "test".into(),
            warmup: o.warmup,
            repeats: o.repeats,
            load_repeats: 5,
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectCommandConfig {
    pub model: Option<PathBuf>,
    pub preset: Option<String>,
    pub num_classes: usize,
    pub seed: u64,
    pub input_size: Option<usize>,
}

impl Default for InspectCommandConfig {
    fn default() -> Self {
        InspectCommandConfig { model: None, preset: None, num_classes: dataset::CLASSES.len(), seed: 0, input_size: None }
    }
}

/// Layers `defaults ← RCMP_SEED ← file ← flags` and deserializes the result.
/// Keys that the command does not know are usage errors.
pub fn resolve<C, A>(command: &str, flags: &A, file: Option<&Value>, env_seed: Option<&str>) -> Result<(C, Value)>
where
    C: Default + Serialize + DeserializeOwned,
    A: Serialize,
{
    let Value::Object(mut merged) = to_value(&C::default())? else {
        return Err(Error::Data("configuration must serialize to an object".into()));
    };
    if let (Some(s), true) = (env_seed, merged.contains_key("seed")) {
        let seed: u64 = s.trim().parse().map_err(|_| Error::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        merged.insert("seed".into(), seed.into());
    }
    let mut overlay = |layer: &Map<String, Value>, origin: &str| -> Result<()> {
        for (k, v) in layer {
            if !merged.contains_key(k) {
                return Err(Error::Usage(format!("unknown option `{k}` for `{command}` in {origin}")));
            }
            merged.insert(k.clone(), v.clone());
        }
        Ok(())
    };
    if let Some(file) = file {
        overlay(&file_section(command, file)?, "config file")?;
    }
    let Value::Object(flags) = to_value(flags)? else {
        return Err(Error::Data("flags must serialize to an object".into()));
    };
    let flags: Map<String, Value> = flags.into_iter().filter(|(_, v)| !v.is_null()).collect();
    overlay(&flags, "flags")?;
    let merged = Value::Object(merged);
    let config: C = serde_json::from_value(merged).map_err(|e| Error::Usage(format!("invalid `{command}` configuration: {e}")))?;
    // Re-serialize so the echoed config is the canonical resolved form.
    let echoed = to_value(&config)?;
    Ok((config, echoed))
}

/// A config file is either a flat option object or an object keyed by
/// command name.
fn file_section(command: &str, file: &Value) -> Result<Map<String, Value>> {
    let Value::Object(obj) = file else {
        return Err(Error::Usage("config file must contain a JSON object".into()));
    };
    if obj.keys().any(|k| COMMANDS.contains(&k.as_str())) {
        return match obj.get(command) {
            None => Ok(Map::new()),
            Some(Value::Object(section)) => Ok(section.clone()),
            Some(_) => Err(Error::Usage(format!("config section `{command}` must be an object"))),
        };
    }
    Ok(obj.clone())
}

/// Goes through text so `f32` fields keep their shortest decimal form
/// (`0.9`, not the widened `0.8999999761581421`).
fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value> {
    let text = serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn required<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("missing required option `{key}` (flag --{} or config key)", key.replace('_', "-"))))
}

/// `<path>.<suffix>`, e.g. `model.rcmp` → `model.rcmp.config.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.components().as_path().as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(io_err(p)),
        _ => Ok(()),
    }
}

/// Wall time of a command and of the chain of commands that produced its
/// input, as written next to each model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub command: String,
    pub command_time_ms: f64,
    pub pipeline_time_ms: f64,
}

pub fn read_timing(model_path: &Path) -> Option<Timing> {
    let text = fs::read_to_string(sidecar(model_path, "timing.json")).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_timing(command: &str, out: &Path, input: Option<&Path>, started: Instant) -> Result<Timing> {
    let command_time_ms = started.elapsed().as_secs_f64() * 1e3;
    let upstream = input.and_then(read_timing).map_or(0.0, |t| t.pipeline_time_ms);
    let t = Timing { command: command.into(), command_time_ms, pipeline_time_ms: upstream + command_time_ms };
    write_json(&sidecar(out, "timing.json"), &t)?;
    Ok(t)
}

fn provenance(command: &str, config: &Value, input: Option<&StoredModel>, extra: Value) -> Value {
    let mut p = json!({
        "command": command,
        "config": config,
        "input_model_sha256": input.map(format::content_hash),
    });
    if let (Value::Object(p), Value::Object(extra)) = (&mut p, extra) {
        p.extend(extra);
    }
    p
}

fn load_splits(dc: &DataConfig) -> Result<(DatasetIndex, Splits)> {
    let root = required(&dc.data, "data")?;
    let index = dataset::load_index(root)?;
    for w in &index.warnings {
        log::warn!("{w}");
    }
    let spec = dc.spec();
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let splits = dataset::group_split(&index, &spec)?;
    log::info!("split: train {} / val {} / test {} images", splits.train.len(), splits.val.len(), splits.test.len());
    Ok((index, splits))
}

fn split_by_name<'a>(splits: &'a Splits, name: &str) -> Result<&'a DatasetIndex> {
    splits.get(name).ok_or_else(|| Error::Usage(format!("unknown split `{name}` (train, val or test)")))
}

fn load_dense(path: &Path) -> Result<Model> {
    match format::load(path)?.0 {
        StoredModel::Dense(m) => Ok(m),
        StoredModel::Quantized(_) => Err(Error::Usage(format!("{} is a quantized model; this command needs a dense one", path.display()))),
    }
}

fn history_writer(path: &Path) -> Result<File> {
    create_parent(path)?;
    File::create(path).map_err(io_err(path))
}

fn log_epoch(file: &mut File, path: &Path, r: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(file, "{line}").map_err(io_err(path))?;
    log::info!(
        "epoch {}: train loss {:.4} acc {:.4}, val loss {} acc {}",
        r.epoch,
        r.train_loss,
        r.train_accuracy,
        r.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
        r.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn validate_train(cfg: &TrainConfig) -> Result<()> {
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))
}

fn load_optional(index: &DatasetIndex, size: usize) -> Result<Option<LabeledSet>> {
    if index.is_empty() {
        return Ok(None);
    }
    Ok(Some(dataset::load_set(index, size, &Normalization::default())?))
}

/// Result of one command: a human summary and its structured form.
pub struct Outcome {
    pub text: String,
    pub summary: Value,
}

fn gen_data(cfg: &GenDataConfig, echoed: &Value) -> Result<Outcome> {
    let out = required(&cfg.out, "out")?;
    let index = dataset::generate_synthetic(out, &cfg.generator)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    Ok(Outcome {
        text: format!("wrote {index} to {}\n", out.display()),
        summary: json!({ "command": "gen-data", "out": out, "images": index.len(), "classes": index.classes }),
    })
}

fn load_init_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (manifest, _) = format::parse(&bytes)?;
    if manifest.kind == Kind::Archive {
        return format::decode_archive(&bytes);
    }
    match format::decode(&bytes)?.0 {
        StoredModel::Dense(m) => Ok(m.params.into_iter().chain(m.buffers).collect()),
        StoredModel::Quantized(_) => Err(Error::Usage("cannot initialise from a quantized model".into())),
    }
}

fn train_command(cfg: &TrainCommandConfig, echoed: &Value) -> Result<Outcome> {
    let started = Instant::now();
    let out = required(&cfg.out, "out")?;
    validate_train(&cfg.train)?;
    let (index, splits) = load_splits(&cfg.data)?;
    let num_classes = cfg.num_classes.unwrap_or(index.classes.len());
    if num_classes != index.classes.len() {
        return Err(Error::Usage(format!("num_classes {num_classes} but the dataset has {} classes", index.classes.len())));
    }
    let config = ModelConfig::preset(&cfg.preset, num_classes)
        .ok_or_else(|| Error::Usage(format!("unknown preset `{}` (resnet-desk or resnet18-full)", cfg.preset)))?;
    let mut model = Model::build(config, cfg.train.seed)?;
    let mut extra = json!({});
    if let Some(init) = &cfg.init_weights {
        let mapping: NameMapping = match &cfg.mapping {
            Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(io_err(p))?),
            None => serde_json::from_str(TORCHVISION_MAPPING),
        }
        .map_err(|e| Error::Usage(format!("invalid name mapping: {e}")))?;
        let tensors = load_init_tensors(init)?;
        let (imported, report) = model.import_weights(&tensors, &mapping)?;
        log::info!("imported {} tensors, skipped {}", report.loaded.len(), report.skipped.len());
        for s in &report.skipped {
            log::info!("skipped {}: {}", s.name, s.reason);
        }
        model = imported;
        let bytes = fs::read(init).map_err(io_err(init))?;
        extra = json!({ "init_weights_sha256": format::sha256_hex(&bytes), "import": report });
    }
    let size = model.config.input_size;
    let train_set = dataset::load_set(&splits.train, size, &Normalization::default())?;
    let val_set = load_optional(&splits.val, size)?;
    let history_path = cfg.history.clone().unwrap_or_else(|| sidecar(out, "history.jsonl"));
    let mut hist = history_writer(&history_path)?;
    let mut write_err = None;
    let (model, history) = train(&model, &train_set, val_set.as_ref(), &cfg.train, None, |r| {
        if let Err(e) = log_epoch(&mut hist, &history_path, r) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    create_parent(out)?;
    let stored = StoredModel::Dense(model);
    format::save(&stored, Some(&provenance("train", echoed, None, extra)), out)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    let timing = write_timing("train", out, None, started)?;
    let last = history.epochs.last();
    let mut text = String::new();
    if let Some(r) = last {
        let _ = writeln!(
            text,
            "epoch {}: train loss {:.4} acc {:.4}; val acc {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    let _ = writeln!(text, "wrote {}", out.display());
    Ok(Outcome {
        text,
        summary: json!({
            "command": "train",
            "out": out,
            "model_sha256": format::content_hash(&stored),
            "history": history_path,
            "epochs": history.epochs,
            "time_ms": timing.command_time_ms,
        }),
    })
}

/// Evenly spaced records, so a small sample spans every class.
fn spread(index: &DatasetIndex, n: usize) -> DatasetIndex {
    let len = index.len();
    let take = n.min(len);
    let records = (0..take).map(|i| index.records[i * len / take].clone()).collect();
    DatasetIndex { records, classes: index.classes.clone(), warnings: Vec::new() }
}

fn prune_command(cfg: &PruneCommandConfig, echoed: &Value) -> Result<Outcome> {
    let started = Instant::now();
    let input = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    cfg.prune.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let model = load_dense(input)?;
    let (pruned, _mask, mut report) = apply_prune(&model, &cfg.prune)?;
    if cfg.data.data.is_some() {
        let (_, splits) = load_splits(&cfg.data)?;
        let fixed = spread(&splits.train, cfg.loss_batch);
        if !fixed.is_empty() {
            let set = dataset::load_set(&fixed, model.config.input_size, &Normalization::default())?;
            report.loss_before = Some(evaluate_loss(&model, &set, cfg.loss_batch.max(1))?.0);
            report.loss_after = Some(evaluate_loss(&pruned, &set, cfg.loss_batch.max(1))?.0);
        }
    }
    let input_stored = StoredModel::Dense(model);
    let stored = StoredModel::Dense(pruned);
    create_parent(out)?;
    format::save(&stored, Some(&provenance("prune", echoed, Some(&input_stored), json!({}))), out)?;
    let report_path = cfg.report.clone().unwrap_or_else(|| sidecar(out, "sparsity.json"));
    write_json(&report_path, &report)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    write_timing("prune", out, Some(input), started)?;
    let mut text = report.to_table();
    if let (Some(b), Some(a)) = (report.loss_before, report.loss_after) {
        let _ = writeln!(text, "fixed-batch loss: {b:.4} before, {a:.4} after");
    }
    let _ = writeln!(text, "wrote {}", out.display());
    Ok(Outcome {
        text,
        summary: json!({
            "command": "prune",
            "out": out,
            "model_sha256": format::content_hash(&stored),
            "input_model_sha256": format::content_hash(&input_stored),
            "report": report,
        }),
    })
}

fn finetune_command(cfg: &FinetuneCommandConfig, echoed: &Value) -> Result<Outcome> {
    let started = Instant::now();
    let input = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    validate_train(&cfg.train)?;
    let model = load_dense(input)?;
    let (_, splits) = load_splits(&cfg.data)?;
    let size = model.config.input_size;
    let train_set = dataset::load_set(&splits.train, size, &Normalization::default())?;
    let val_set = load_optional(&splits.val, size)?;
    let history_path = cfg.history.clone().unwrap_or_else(|| sidecar(out, "history.jsonl"));
    let mut hist = history_writer(&history_path)?;
    let mut write_err = None;
    let on_epoch = |r: &EpochRecord| {
        if let Err(e) = log_epoch(&mut hist, &history_path, r) {
            write_err.get_or_insert(e);
        }
    };
    let (tuned, history) = match &model.masks {
        Some(masks) => masked_finetune(&model, masks, &train_set, val_set.as_ref(), &cfg.train, on_epoch)?,
        None => {
            log::warn!("{} carries no pruning masks; fine-tuning all weights", input.display());
            train(&model, &train_set, val_set.as_ref(), &cfg.train, None, on_epoch)?
        }
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    let input_stored = StoredModel::Dense(model);
    let stored = StoredModel::Dense(tuned);
    create_parent(out)?;
    format::save(&stored, Some(&provenance("finetune", echoed, Some(&input_stored), json!({}))), out)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    let timing = write_timing("finetune", out, Some(input), started)?;
    let mut text = String::new();
    if let Some(r) = history.epochs.last() {
        let _ = writeln!(
            text,
            "epoch {}: train loss {:.4} acc {:.4}; val acc {}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    let _ = writeln!(text, "wrote {}", out.display());
    Ok(Outcome {
        text,
        summary: json!({
            "command": "finetune",
            "out": out,
            "model_sha256": format::content_hash(&stored),
            "history": history_path,
            "epochs": history.epochs,
            "time_ms": timing.command_time_ms,
        }),
    })
}

fn quantize_command(cfg: &QuantizeCommandConfig, echoed: &Value) -> Result<Outcome> {
    let started = Instant::now();
    let input = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    if cfg.calibration_batches == 0 || cfg.calibration_batch_size == 0 {
        return Err(Error::Usage("calibration needs at least one non-empty batch".into()));
    }
    let model = load_dense(input)?;
    let (_, splits) = load_splits(&cfg.data)?;
    let sample = spread(&splits.train, cfg.calibration_batches * cfg.calibration_batch_size);
    let images = dataset::load_set(&sample, model.config.input_size, &Normalization::default())?.images;
    let batches = (0..sample.len())
        .step_by(cfg.calibration_batch_size)
        .map(|s| images.slice_batch(s, (s + cfg.calibration_batch_size).min(sample.len())))
        .collect::<rcmp_core::Result<Vec<_>>>()?;
    let stats = calibrate(&model, &batches)?;
    let q = quantize_model(&model, &stats, cfg.activation_sites)?;
    let input_stored = StoredModel::Dense(model);
    let stored = StoredModel::Quantized(q);
    create_parent(out)?;
    format::save(&stored, Some(&provenance("quantize", echoed, Some(&input_stored), json!({}))), out)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    write_timing("quantize", out, Some(input), started)?;
    let (dense_blob, q_blob) = (format::blob_size(&input_stored), format::blob_size(&stored));
    let text = format!(
        "calibrated on {} images in {} batches; tensor blob {} → {} bytes ({:.3}×)\nwrote {}\n",
        sample.len(),
        batches.len(),
        dense_blob,
        q_blob,
        q_blob as f64 / dense_blob as f64,
        out.display()
    );
    Ok(Outcome {
        text,
        summary: json!({
            "command": "quantize",
            "out": out,
            "model_sha256": format::content_hash(&stored),
            "calibration_images": sample.len(),
            "dense_blob_bytes": dense_blob,
            "quantized_blob_bytes": q_blob,
        }),
    })
}

/// Logits of a stored model over a full set, in batches.
pub fn stored_logits(model: &StoredModel, images: &Tensor<f32>, batch_size: usize, mode: QuantMode) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for s in (0..n).step_by(batch_size.max(1)) {
        let x = images.slice_batch(s, (s + batch_size.max(1)).min(n))?;
        parts.push(match model {
            StoredModel::Dense(m) => m.forward(&x)?,
            StoredModel::Quantized(q) => q.forward(&x, mode)?,
        });
    }
    Ok(Tensor::concat_batch(&parts)?)
}

/// Pipeline stage that produced a model, from its provenance.
pub fn variant_of(model: &StoredModel, manifest: &format::Manifest) -> &'static str {
    let command = manifest.provenance.as_ref().and_then(|p| p.get("command")).and_then(Value::as_str);
    match (model, command) {
        (StoredModel::Quantized(_), _) => "quantized",
        (_, Some("finetune")) => "pruned_finetuned",
        (_, Some("prune")) => "pruned",
        _ => "dense",
    }
}

fn csv_name(class: &str) -> String {
    class.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn eval_command(cfg: &EvalCommandConfig, echoed: &Value) -> Result<Outcome> {
    let input = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch_size must be positive".into()));
    }
    let (model, manifest) = format::load(input)?;
    let (index, splits) = load_splits(&cfg.data)?;
    let part = split_by_name(&splits, &cfg.split)?;
    let set = dataset::load_set(part, model.config().input_size, &Normalization::default())?;
    let logits = stored_logits(&model, &set.images, cfg.batch_size, cfg.mode)?;
    let report: EvalReport = evaluate_logits(&logits, &set.labels, &index.classes)?;
    create_parent(out)?;
    let doc = json!({
        "model": input,
        "model_sha256": format::content_hash(&model),
        "variant": variant_of(&model, &manifest),
        "split": cfg.split,
        "mode": matches!(model, StoredModel::Quantized(_)).then_some(cfg.mode),
        "samples": set.len(),
        "metrics": report,
        "provenance": provenance("eval", echoed, Some(&model), json!({})),
    });
    write_json(out, &doc)?;
    write_json(&sidecar(out, "config.json"), echoed)?;
    let curves = cfg.curves_dir.clone().unwrap_or_else(|| {
        let mut s = out.with_extension("").into_os_string();
        s.push("_curves");
        PathBuf::from(s)
    });
    fs::create_dir_all(&curves).map_err(io_err(&curves))?;
    for c in &report.per_class {
        for (kind, curve) in [("roc", &c.roc), ("pr", &c.pr)] {
            if let Some(curve) = curve {
                let p = curves.join(format!("{kind}_{}.csv", csv_name(&c.name)));
                fs::write(&p, curve.to_csv()).map_err(io_err(&p))?;
            }
        }
    }
    let text = format!("{}\n{}wrote {} and curves in {}\n", report.to_table(), report.confusion.to_table(), out.display(), curves.display());
    Ok(Outcome {
        text,
        summary: json!({
            "command": "eval",
            "out": out,
            "accuracy": report.accuracy,
            "macro_f1": report.macro_f1,
            "samples": set.len(),
        }),
    })
}

fn bench_command(cfg: &BenchCommandConfig, echoed: &Value) -> Result<Outcome> {
    let models: Vec<(&str, &PathBuf)> = [("dense", &cfg.dense), ("pruned_finetuned", &cfg.pruned_finetuned), ("quantized", &cfg.quantized)]
        .into_iter()
        .filter_map(|(v, p)| p.as_ref().map(|p| (v, p)))
        .collect();
    if models.is_empty() {
        return Err(Error::Usage("bench needs at least one of --dense, --pruned-finetuned, --quantized".into()));
    }
    if cfg.repeats == 0 || cfg.load_repeats == 0 {
        return Err(Error::Usage("repeats and load_repeats must be positive".into()));
    }
    let (_, splits) = load_splits(&cfg.data)?;
    let part = split_by_name(&splits, &cfg.split)?;
    if part.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", cfg.split)));
    }
    let opts = BenchOptions { warmup: cfg.warmup, repeats: cfg.repeats };
    let norm = Normalization::default();
    let mut reports = Vec::new();
    for (variant, path) in models {
        let load_ms = bench::bench_load(path, cfg.load_repeats, &mut WallClock)?;
        let (model, _) = format::load(path)?;
        let size = model.config().input_size;
        let images = part
            .records
            .iter()
            .map(|r| dataset::load_batch(std::slice::from_ref(r), size, &norm))
            .collect::<Result<Vec<_>>>()?;
        let before = format::content_hash(&model);
        let (_, stats) = bench::bench_classify(&model, &images, &opts, &mut WallClock)?;
        let with_pre = bench::bench_classify_from_files(&model, &part.records, size, &norm, &opts, &mut WallClock)?;
        debug_assert_eq!(before, format::content_hash(&model));
        let mut report = BenchReport::new(&path.display().to_string(), variant, load_ms, &opts, &stats);
        report.with_preprocessing = Some(with_pre);
        report.peak_memory_bytes = bench::peak_memory_bytes();
        report.pipeline_time_ms = read_timing(path).map(|t| t.pipeline_time_ms);
        log::info!("{variant}: {:.4} ms/image", report.avg_ms_per_image);
        reports.push(report);
    }
    let (json_text, table) = bench::emit_report(&reports)?;
    if let Some(out) = &cfg.out {
        create_parent(out)?;
        fs::write(out, format!("{json_text}\n")).map_err(io_err(out))?;
        write_json(&sidecar(out, "config.json"), echoed)?;
    }
    let reports: Value = serde_json::from_str(&json_text).map_err(|e| Error::Data(e.to_string()))?;
    Ok(Outcome { text: table, summary: json!({ "command": "bench", "reports": reports }) })
}

/// `11179590` → `11,179,590`.
pub fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn inspect_command(cfg: &InspectCommandConfig) -> Result<Outcome> {
    let (stored, manifest) = match (&cfg.model, &cfg.preset) {
        (Some(p), None) => {
            let (m, man) = format::load(p)?;
            (m, Some(man))
        }
        (None, Some(preset)) => {
            let config = ModelConfig::preset(preset, cfg.num_classes)
                .ok_or_else(|| Error::Usage(format!("unknown preset `{preset}` (resnet-desk or resnet18-full)")))?;
            (StoredModel::Dense(Model::build(config, cfg.seed)?), None)
        }
        _ => return Err(Error::Usage("inspect needs exactly one of --model or --preset".into())),
    };
    let config = stored.config().clone();
    let input_size = cfg.input_size.unwrap_or(config.input_size);
    let layers = model::build_layers(&config);
    let flops = model::count_flops(&layers, config.in_channels, input_size)?;
    let shapes = model::infer_shapes(&layers, config.in_channels, input_size)?;
    let mut text = String::new();
    let mut summary = json!({
        "config": config,
        "flops": flops,
        "input_size": input_size,
        "content_sha256": format::content_hash(&stored),
    });
    let (per_layer, total): (BTreeMap<String, u64>, u64) = match &stored {
        StoredModel::Dense(m) => {
            let pc = m.count_parameters();
            (pc.per_layer, pc.total)
        }
        StoredModel::Quantized(q) => {
            let mut per: BTreeMap<String, u64> = BTreeMap::new();
            for (k, w) in &q.weights {
                *per.entry(k.clone()).or_default() += w.data.len() as u64;
            }
            for (k, b) in &q.biases {
                *per.entry(k.clone()).or_default() += b.len() as u64;
            }
            let total = per.values().sum();
            (per, total)
        }
    };
    let _ = writeln!(text, "{:<28} {:<8} {:>16} {:>12}", "layer", "kind", "output", "params");
    for (l, &(c, h, w)) in layers.iter().zip(&shapes) {
        let n = per_layer.get(&l.name).copied().unwrap_or(0);
        let kind = serde_json::to_value(l.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let _ = writeln!(text, "{:<28} {:<8} {:>16} {:>12}", l.name, kind, format!("{c}x{h}x{w}"), if n > 0 { thousands(n) } else { String::new() });
    }
    let _ = writeln!(text, "parameters: {}", thousands(total));
    let _ = writeln!(text, "flops (multiply-accumulates at {input_size}x{input_size}): {}", thousands(flops));
    summary["parameters"] = total.into();
    match &stored {
        StoredModel::Dense(m) => {
            let sr = sparsity_report(m, m.masks.as_ref())?;
            let _ = writeln!(
                text,
                "sparsity: {} of {} parameters remain ({:.2}% reduction){}",
                thousands(sr.nonzero),
                thousands(sr.total),
                sr.reduction_percent,
                if m.masks.is_some() { ", masks stored" } else { "" }
            );
            let _ = writeln!(text, "quantization: none (f32)");
            summary["sparsity"] = to_value(&sr)?;
        }
        StoredModel::Quantized(q) => {
            let zeros: u64 = q
                .weights
                .values()
                .map(|w| w.data.data().iter().filter(|&&v| v as i32 == w.params.zero_point).count() as u64)
                .sum();
            let _ = writeln!(text, "sparsity: {} weight codes at the zero point", thousands(zeros));
            let _ = writeln!(
                text,
                "quantization: u8 affine per tensor, {} weight tensors ({} bytes), {} activation sites ({:?}), batch norm folded: {}",
                q.weights.len(),
                thousands(q.weight_bytes() as u64),
                q.activations.len(),
                q.activation_sites,
                q.folded
            );
            summary["quantization"] = json!({
                "weight_tensors": q.weights.len(),
                "weight_bytes": q.weight_bytes(),
                "activation_sites": q.activation_sites,
                "sites": q.activations.len(),
                "folded": q.folded,
            });
        }
    }
    if let Some(p) = manifest.and_then(|m| m.provenance) {
        if let Some(c) = p.get("command").and_then(Value::as_str) {
            let _ = writeln!(text, "produced by: {c}");
        }
        summary["provenance"] = p;
    }
    Ok(Outcome { text, summary })
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Usage(format!("config file {}: {e}", p.display())))?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Usage(format!("config file {}: {e}", p.display())))?)
        }
        None => None,
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let name = cli.command.name();
    macro_rules! resolved {
        ($ty:ty, $args:expr) => {{
            let (c, v): ($ty, Value) = resolve(name, $args, file.as_ref(), env_seed.as_deref())?;
            log::info!("resolved {name} config: {v}");
            (c, v)
        }};
    }
    match &cli.command {
        Command::GenData(a) => {
            let (c, v) = resolved!(GenDataConfig, a);
            gen_data(&c, &v)
        }
        Command::Train(a) => {
            let (c, v) = resolved!(TrainCommandConfig, a);
            train_command(&c, &v)
        }
        Command::Prune(a) => {
            let (c, v) = resolved!(PruneCommandConfig, a);
            prune_command(&c, &v)
        }
        Command::Finetune(a) => {
            let (c, v) = resolved!(FinetuneCommandConfig, a);
            finetune_command(&c, &v)
        }
        Command::Quantize(a) => {
            let (c, v) = resolved!(QuantizeCommandConfig, a);
            quantize_command(&c, &v)
        }
        Command::Eval(a) => {
            let (c, v) = resolved!(EvalCommandConfig, a);
            eval_command(&c, &v)
        }
        Command::Bench(a) => {
            let (c, v) = resolved!(BenchCommandConfig, a);
            bench_command(&c, &v)
        }
        Command::Inspect(a) => {
            let (c, _) = resolved!(InspectCommandConfig, a);
            inspect_command(&c)
        }
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn error_line(kind: &str, message: &str, code: i32) -> String {
    json!({ "error": { "kind": kind, "message": message, "exit_code": code } }).to_string()
}

/// Runs one command with the given arguments (program name first) and
/// returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json_mode = args.iter().skip(1).any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            if json_mode {
                let rendered = e.render().to_string();
                let first = rendered.lines().next().unwrap_or_default();
                let msg = first.strip_prefix("error: ").unwrap_or(first);
                let _ = writeln!(stderr, "{}", error_line("usage", msg, EXIT_USAGE));
            } else {
                let _ = write!(stderr, "{}", e.render());
            }
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            if cli.json {
                let _ = writeln!(stdout, "{}", outcome.summary);
            } else {
                let _ = write!(stdout, "{}", outcome.text);
            }
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            if cli.json {
                let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string(), code));
            } else {
                let _ = writeln!(stderr, "error: {e}");
            }
            code
        }
    }
}
