//! Load-time and per-image latency measurement.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rcmp_core::model::Model;
use rcmp_core::quant::{QuantMode, QuantizedModel};
use rcmp_core::stats::percentile_sorted;
use rcmp_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Normalization, SampleRecord};
use crate::error::{Error, Result};
use crate::format::{self, StoredModel};

/// Times closures. Implementations return milliseconds.
pub trait Clock {
    fn time<R>(&mut self, f: impl FnOnce() -> R) -> (R, f64);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn time<R>(&mut self, f: impl FnOnce() -> R) -> (R, f64) {
        let start = Instant::now();
        let r = f();
        (r, start.elapsed().as_secs_f64() * 1e3)
    }
}

/// Replays scripted durations (ms) in order, cycling when exhausted.
#[derive(Clone, Debug)]
pub struct ScriptedClock {
    durations: Vec<f64>,
    next: usize,
}

impl ScriptedClock {
    pub fn new(durations: Vec<f64>) -> Self {
        assert!(!durations.is_empty(), "scripted clock needs at least one duration");
        ScriptedClock { durations, next: 0 }
    }
}

impl Clock for ScriptedClock {
    fn time<R>(&mut self, f: impl FnOnce() -> R) -> (R, f64) {
        let d = self.durations[self.next % self.durations.len()];
        self.next += 1;
        (f(), d)
    }
}

/// Single-image inference.
pub trait Classifier {
    fn classify(&self, x: &Tensor<f32>) -> rcmp_core::Result<Tensor<f32>>;
}

impl Classifier for Model {
    fn classify(&self, x: &Tensor<f32>) -> rcmp_core::Result<Tensor<f32>> {
        self.forward(x)
    }
}

impl Classifier for QuantizedModel {
    fn classify(&self, x: &Tensor<f32>) -> rcmp_core::Result<Tensor<f32>> {
        self.forward(x, QuantMode::Integer)
    }
}

impl Classifier for StoredModel {
    fn classify(&self, x: &Tensor<f32>) -> rcmp_core::Result<Tensor<f32>> {
        match self {
            StoredModel::Dense(m) => m.classify(x),
            StoredModel::Quantized(q) => q.classify(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub avg_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn of(samples: &[f64]) -> Result<LatencyStats> {
        if samples.is_empty() {
            return Err(Error::Data("no latency samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(LatencyStats {
            avg_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: percentile_sorted(&s, 50.0)?,
            p95_ms: percentile_sorted(&s, 95.0)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_path: String,
    pub variant: String,
    pub load_time_ms: f64,
    pub warmup_count: usize,
    pub measured_count: usize,
    pub avg_ms_per_image: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub throughput_images_per_s: f64,
    /// Decode, resize and normalisation included.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_preprocessing: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_memory_bytes: Option<u64>,
    /// Wall time of the command that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline_time_ms: Option<f64>,
    pub environment: String,
}

/// Median load time over `repeats` loads.
pub fn bench_load<C: Clock>(path: &Path, repeats: usize, clock: &mut C) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::Usage("load repeats must be positive".into()));
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let (r, ms) = clock.time(|| format::load(path));
        r?;
        times.push(ms);
    }
    times.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&times, 50.0)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { warmup: 10, repeats: 100 }
    }
}

/// Times `repeats` single-image inferences after `warmup` untimed ones,
/// cycling through `images` (each 1×C×S×S). Only the timing fields of the
/// report are filled.
pub fn bench_classify<M: Classifier + ?Sized, C: Clock>(
    model: &M,
    images: &[Tensor<f32>],
    opts: &BenchOptions,
    clock: &mut C,
) -> Result<(Vec<f64>, LatencyStats)> {
    if images.is_empty() {
        return Err(Error::Data("no images to benchmark".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::Usage("repeats must be positive".into()));
    }
    for i in 0..opts.warmup {
        model.classify(&images[i % images.len()])?;
    }
    let mut samples = Vec::with_capacity(opts.repeats);
    for i in 0..opts.repeats {
        let x = &images[(opts.warmup + i) % images.len()];
        let (r, ms) = clock.time(|| model.classify(x));
        r?;
        samples.push(ms);
    }
    let stats = LatencyStats::of(&samples)?;
    Ok((samples, stats))
}

/// Like [`bench_classify`] but each timed inference starts from the image
/// file.
pub fn bench_classify_from_files<M: Classifier + ?Sized, C: Clock>(
    model: &M,
    records: &[SampleRecord],
    input_size: usize,
    norm: &Normalization,
    opts: &BenchOptions,
    clock: &mut C,
) -> Result<LatencyStats> {
    if records.is_empty() {
        return Err(Error::Data("no images to benchmark".into()));
    }
    let run = |r: &SampleRecord| -> Result<()> {
        let x = dataset::load_batch(std::slice::from_ref(r), input_size, norm)?;
        model.classify(&x)?;
        Ok(())
    };
    for i in 0..opts.warmup {
        run(&records[i % records.len()])?;
    }
    let mut samples = Vec::with_capacity(opts.repeats);
    for i in 0..opts.repeats {
        let (r, ms) = clock.time(|| run(&records[(opts.warmup + i) % records.len()]));
        r?;
        samples.push(ms);
    }
    LatencyStats::of(&samples)
}

impl BenchReport {
    pub fn new(model_path: &str, variant: &str, load_time_ms: f64, opts: &BenchOptions, stats: &LatencyStats) -> Self {
        BenchReport {
            model_path: model_path.to_string(),
            variant: variant.to_string(),
            load_time_ms,
            warmup_count: opts.warmup,
            measured_count: opts.repeats,
            avg_ms_per_image: stats.avg_ms,
            p50_ms: stats.p50_ms,
            p95_ms: stats.p95_ms,
            throughput_images_per_s: 1000.0 / stats.avg_ms,
            with_preprocessing: None,
            peak_memory_bytes: None,
            pipeline_time_ms: None,
            environment: environment_note(),
        }
    }
}

/// Peak resident set size of this process (Linux only).
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn environment_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}; available_parallelism={threads}; single-threaded sequential inference, batch size 1",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

pub const VARIANT_ORDER: [&str; 3] = ["dense", "pruned_finetuned", "quantized"];

fn variant_rank(v: &str) -> usize {
    VARIANT_ORDER.iter().position(|&x| x == v).unwrap_or(VARIANT_ORDER.len())
}

fn num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

/// JSON array and aligned table, rows ordered dense, pruned_finetuned,
/// quantized. Table numbers are the JSON number text.
pub fn emit_report(reports: &[BenchReport]) -> Result<(String, String)> {
    if reports.is_empty() {
        return Err(Error::Data("no reports".into()));
    }
    let mut rows: Vec<&BenchReport> = reports.iter().collect();
    rows.sort_by_key(|r| variant_rank(&r.variant));
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::Data(e.to_string()))?;
    let header = ["variant", "load_time_ms", "avg_ms_per_image", "p50_ms", "p95_ms", "throughput_images_per_s", "peak_memory_bytes", "pipeline_time_ms"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                num(r.load_time_ms),
                num(r.avg_ms_per_image),
                num(r.p50_ms),
                num(r.p95_ms),
                num(r.throughput_images_per_s),
                r.peak_memory_bytes.map_or("-".into(), |v| v.to_string()),
                r.pipeline_time_ms.map_or("-".into(), num),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| cells.iter().map(|c| c[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    for row in std::iter::once(header.iter().map(|s| s.to_string()).collect::<Vec<_>>()).chain(cells) {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(table, "{}", line.join("  ").trim_end());
    }
    Ok((json, table))
}
