//! Throughput, peak-memory and scaling measurements with CSV and JSON
//! artifacts.

mod alloc;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use alloc::{alloc_tracking_active, current_bytes, peak_bytes, reset_peak, CountingAlloc};

use crate::blocks::cost_report;
use crate::config::URank;
use crate::error::{HomaError, Result};
use crate::model::{build_model, Adam, Model, ModelConfig, Task};
use crate::tensor::{Gradients, Precision, Real, Rng, Tape};
use crate::tokenizer::{LabeledExample, Record, RESIDUES};

/// Repetition counts: every repetition runs `warmup` untimed steps followed
/// by `measured` timed steps; the median over repetitions is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub warmup: usize,
    pub measured: usize,
    pub reps: usize,
    /// Generate a fresh batch inside every timed step instead of reusing one
    /// pre-materialized batch.
    #[serde(default)]
    pub end_to_end: bool,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            warmup: 1,
            measured: 3,
            reps: 3,
            end_to_end: false,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.measured < 3 || self.reps < 3 {
            return Err(HomaError::Config(format!(
                "bench spec needs warmup >= 1, measured >= 3, reps >= 3; got {}/{}/{}",
                self.warmup, self.measured, self.reps
            )));
        }
        Ok(())
    }
}

/// Model plus workload shape for one benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// A named profile cut down to `layers` layers.
    pub fn profile(name: &str, layers: usize, batch: usize, seq_len: usize) -> Result<Self> {
        let mut model = ModelConfig::profile(name)?;
        model.layers = layers;
        Ok(BenchConfig {
            model,
            batch,
            seq_len,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(HomaError::Config("batch must be positive".into()));
        }
        if self.seq_len == 0 || self.seq_len > self.model.attention.max_len {
            return Err(HomaError::Config(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len, self.model.attention.max_len
            )));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a digest of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Random full-length sequences with targets matching the configured task.
pub fn synthetic_batch(cfg: &BenchConfig) -> Result<Vec<LabeledExample>> {
    let letters: Vec<char> = RESIDUES.chars().collect();
    let mut rng = Rng::with_stream(cfg.seed, 11);
    (0..cfg.batch)
        .map(|_| {
            let seq: String = (0..cfg.seq_len).map(|_| letters[rng.below(20)]).collect();
            let (labels, target) = match cfg.model.task {
                Task::Token => (Some((0..cfg.seq_len).map(|_| rng.below(3) as u8).collect()), None),
                Task::Regression => (None, Some(rng.normal())),
                Task::Classify => (None, Some(rng.below(cfg.model.classes) as f64)),
            };
            LabeledExample::from_record(
                Record {
                    seq,
                    labels,
                    target,
                },
                cfg.seq_len,
            )
        })
        .collect()
}

/// Model, optimizer and data for repeated training steps.
pub struct Workload<T> {
    cfg: BenchConfig,
    batches: u64,
    model: Model<T>,
    opt: Adam<T>,
    data: Vec<LabeledExample>,
    rng: Rng,
    grads: Gradients<T>,
}

impl<T: Real> Workload<T> {
    pub fn new(cfg: &BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let model = build_model::<T>(&cfg.model)?;
        Ok(Workload {
            cfg: cfg.clone(),
            batches: 0,
            opt: Adam::new(model.cfg.lr),
            model,
            data: synthetic_batch(cfg)?,
            rng: Rng::with_stream(cfg.seed, 12),
            grads: Gradients::new(),
        })
    }

    /// Replace the batch with a new synthetic one.
    pub fn refresh_data(&mut self) -> Result<()> {
        self.batches += 1;
        let cfg = BenchConfig {
            seed: self.cfg.seed.wrapping_add(self.batches),
            ..self.cfg.clone()
        };
        self.data = synthetic_batch(&cfg)?;
        Ok(())
    }

    /// Forward, backward and one optimizer update over the whole batch.
    pub fn step(&mut self) -> Result<()> {
        let refs: Vec<&LabeledExample> = self.data.iter().collect();
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape)?;
        let (loss, count) = self.model.loss_on_tape(&mut tape, &vars, &refs, Some(&mut self.rng))?;
        self.grads.clear();
        tape.backward(loss, &mut self.grads)?;
        self.grads.scale(T::c(1.0 / count.max(1) as f64));
        self.opt.update(&mut self.model.params, &self.grads)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median over repetitions.
    pub tokens_per_second: f64,
    /// One value per repetition.
    pub samples: Vec<f64>,
    pub wall_seconds: f64,
}

fn time_reps<T: Real>(workloads: &mut [(Workload<T>, f64)], spec: &BenchSpec) -> Result<Vec<Vec<f64>>> {
    let mut samples = vec![Vec::with_capacity(spec.reps); workloads.len()];
    for _ in 0..spec.reps {
        for ((w, tokens), out) in workloads.iter_mut().zip(samples.iter_mut()) {
            for _ in 0..spec.warmup {
                w.step()?;
            }
            let t = Instant::now();
            for _ in 0..spec.measured {
                if spec.end_to_end {
                    w.refresh_data()?;
                }
                w.step()?;
            }
            out.push(*tokens / t.elapsed().as_secs_f64());
        }
    }
    Ok(samples)
}

fn interleaved_typed<T: Real>(cfgs: &[BenchConfig], spec: &BenchSpec) -> Result<Vec<Throughput>> {
    spec.validate()?;
    let start = Instant::now();
    let mut workloads = cfgs
        .iter()
        .map(|c| Ok((Workload::<T>::new(c)?, (c.batch * c.seq_len * spec.measured) as f64)))
        .collect::<Result<Vec<_>>>()?;
    let samples = time_reps(&mut workloads, spec)?;
    let wall = start.elapsed().as_secs_f64();
    Ok(samples
        .into_iter()
        .map(|s| {
            let mut sorted = s.clone();
            Throughput {
                tokens_per_second: median(&mut sorted),
                samples: s,
                wall_seconds: wall,
            }
        })
        .collect())
}

/// Training tokens per second over forward, backward and update. Data is
/// generated before timing starts unless `spec.end_to_end` is set.
pub fn measure_throughput(cfg: &BenchConfig, spec: &BenchSpec) -> Result<Throughput> {
    let mut out = measure_throughput_interleaved(std::slice::from_ref(cfg), spec)?;
    Ok(out.remove(0))
}

/// Like [`measure_throughput`] for several configurations at once, with
/// repetitions taken round-robin so slow drift in machine speed affects
/// every configuration alike. All configurations must share a precision.
pub fn measure_throughput_interleaved(cfgs: &[BenchConfig], spec: &BenchSpec) -> Result<Vec<Throughput>> {
    let Some(first) = cfgs.first() else {
        return Ok(Vec::new());
    };
    let precision = first.model.attention.precision;
    if cfgs.iter().any(|c| c.model.attention.precision != precision) {
        return Err(HomaError::invalid("interleaved measurement needs a single precision"));
    }
    match precision {
        Precision::F64 => interleaved_typed::<f64>(cfgs, spec),
        Precision::F32 => interleaved_typed::<f32>(cfgs, spec),
    }
}

fn peak_typed<T: Real>(cfg: &BenchConfig) -> Result<usize> {
    let base = current_bytes();
    let mut w = Workload::<T>::new(cfg)?;
    w.step()?;
    reset_peak();
    w.step()?;
    let peak = peak_bytes().saturating_sub(base);
    drop(w);
    Ok(peak)
}

/// High-water mark of one full training step, counted from before the model
/// is built: parameters, optimizer state, the batch and every activation and
/// gradient of the step. The optimizer state is allocated by an untimed
/// first step. Needs [`CountingAlloc`] installed as the global allocator.
pub fn measure_peak_memory(cfg: &BenchConfig) -> Result<usize> {
    if !alloc_tracking_active() {
        return Err(HomaError::invalid(
            "peak memory needs CountingAlloc installed as the global allocator",
        ));
    }
    match cfg.model.attention.precision {
        Precision::F64 => peak_typed::<f64>(cfg),
        Precision::F32 => peak_typed::<f32>(cfg),
    }
}

/// Configuration knob swept by [`run_scaling_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    W,
    L,
    Ell,
    Rank,
}

impl Axis {
    pub const NAMES: [&'static str; 4] = ["w", "L", "ell", "rank"];

    /// Copy of `base` with this knob set to `value`. Sweeping `ell` sets
    /// the stride to half the block length, rounded up. A `rank` of 0
    /// selects the full `d x d` U matrix.
    pub fn apply(self, base: &BenchConfig, value: usize) -> BenchConfig {
        let mut cfg = base.clone();
        let a = &mut cfg.model.attention;
        match self {
            Axis::W => a.window = value,
            Axis::L => {
                cfg.seq_len = value;
                a.max_len = a.max_len.max(value);
            }
            Axis::Ell => {
                a.block_len = value;
                a.stride = value.div_ceil(2);
            }
            Axis::Rank if value == 0 => a.rank = URank::Full,
            Axis::Rank => a.rank = URank::Low(value),
        }
        cfg
    }
}

impl FromStr for Axis {
    type Err = HomaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" | "window" => Ok(Axis::W),
            "L" | "len" | "seq_len" => Ok(Axis::L),
            "ell" | "block_len" => Ok(Axis::Ell),
            "rank" | "r" => Ok(Axis::Rank),
            other => Err(HomaError::Config(format!(
                "unknown axis `{other}` (expected one of {})",
                Axis::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::W => "w",
            Axis::L => "L",
            Axis::Ell => "ell",
            Axis::Rank => "rank",
        })
    }
}

/// One benchmark cell. Measured fields are empty when the cell failed, in
/// which case `error` holds the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub attention: String,
    pub w: usize,
    pub rank: String,
    #[serde(rename = "L")]
    pub seq_len: usize,
    pub ell: usize,
    pub s: usize,
    pub batch: usize,
    pub tokens_per_second: Option<f64>,
    pub peak_bytes: Option<u64>,
    pub flops_pairwise: Option<u64>,
    pub flops_triadic: Option<u64>,
    pub wall_seconds: Option<f64>,
    pub params: Option<u64>,
    pub error: String,
    pub fingerprint: String,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "attention",
    "w",
    "rank",
    "L",
    "ell",
    "s",
    "batch",
    "tokens_per_second",
    "peak_bytes",
    "flops_pairwise",
    "flops_triadic",
    "wall_seconds",
    "params",
    "error",
    "fingerprint",
];

impl RunRecord {
    fn skeleton(cfg: &BenchConfig) -> Self {
        let a = &cfg.model.attention;
        RunRecord {
            attention: a.kind.to_string(),
            w: a.window,
            rank: a.rank.to_string(),
            seq_len: cfg.seq_len,
            ell: a.block_len,
            s: a.stride,
            batch: cfg.batch,
            tokens_per_second: None,
            peak_bytes: None,
            flops_pairwise: None,
            flops_triadic: None,
            wall_seconds: None,
            params: None,
            error: String::new(),
            fingerprint: cfg.fingerprint(),
        }
    }

    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }
}

fn fill(rec: &mut RunRecord, cfg: &BenchConfig, spec: &BenchSpec) -> Result<()> {
    cfg.validate()?;
    let cost = cost_report(&cfg.model.attention, cfg.seq_len)?;
    rec.flops_pairwise = Some(cost.pairwise_flops);
    rec.flops_triadic = Some(cost.triadic_flops);
    rec.params = Some(match cfg.model.attention.precision {
        Precision::F64 => build_model::<f64>(&cfg.model)?.num_params(),
        Precision::F32 => build_model::<f32>(&cfg.model)?.num_params(),
    } as u64);
    let tp = measure_throughput(cfg, spec)?;
    rec.tokens_per_second = Some(tp.tokens_per_second);
    rec.wall_seconds = Some(tp.wall_seconds);
    if alloc_tracking_active() {
        rec.peak_bytes = Some(measure_peak_memory(cfg)? as u64);
    }
    Ok(())
}

/// Measures one configuration. Failures are captured in the record.
pub fn run_cell(cfg: &BenchConfig, spec: &BenchSpec) -> RunRecord {
    let mut rec = RunRecord::skeleton(cfg);
    if let Err(e) = fill(&mut rec, cfg, spec) {
        rec.error = e.to_string();
    }
    rec
}

/// One record per value of `axis`, applied to `base`. A cell that fails
/// (for example an even window or a block longer than the sequence) keeps
/// its row with the error filled in, and the sweep continues.
pub fn run_scaling_experiment(
    axis: Axis,
    values: &[usize],
    base: &BenchConfig,
    spec: &BenchSpec,
) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    if values.is_empty() {
        return Err(HomaError::Config("scaling experiment needs at least one value".into()));
    }
    Ok(values.iter().map(|&v| run_cell(&axis.apply(base, v), spec)).collect())
}

pub fn write_records_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HomaError::io(path, e))?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HomaError::from)).collect()
}

/// Properties of the build and host that affect measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub family: String,
    pub available_cpus: usize,
    /// Worker threads used for computation; execution is single-threaded.
    pub threads: usize,
    pub debug_assertions: bool,
    pub alloc_tracking: bool,
}

impl EnvFingerprint {
    pub fn capture() -> Self {
        EnvFingerprint {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            family: std::env::consts::FAMILY.to_string(),
            available_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads: 1,
            debug_assertions: cfg!(debug_assertions),
            alloc_tracking: alloc_tracking_active(),
        }
    }
}

/// Written next to every set of outputs: what ran, with which resolved
/// configuration and seed, on what environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub env: EnvFingerprint,
    pub outputs: Vec<String>,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            args: Vec::new(),
            seed,
            config: serde_json::to_value(config)?,
            env: EnvFingerprint::capture(),
            outputs: Vec::new(),
            status: "ok".into(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| HomaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HomaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests;
