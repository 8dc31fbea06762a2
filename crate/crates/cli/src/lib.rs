//! `homa` command-line tool.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use homa_core::harness::RunManifest;

use config::{flag, parse_config, parse_override, Assignment, RunConfig};
pub use error::CliError;

/// Environment variable naming the base output directory; each subcommand
/// writes into `<base>/<subcommand>` unless `--out` is given.
pub const OUT_DIR_ENV: &str = "HOMA_OUT_DIR";
pub const DEFAULT_OUT_BASE: &str = "homa-out";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "homa", version, about = "Higher-order attention experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines grouped in `[sections]`.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory [default: $HOMA_OUT_DIR/<command>, else homa-out/<command>].
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Start from the resolved configuration recorded in a previous manifest.
    #[arg(long, global = true, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,
}

/// Shorthands for common configuration keys.
#[derive(Args, Debug, Clone, Default)]
pub struct Knobs {
    /// Preset: ss or fs.
    #[arg(long)]
    pub profile: Option<String>,
    /// token, regression, classify or match3.
    #[arg(long)]
    pub task: Option<String>,
    /// pairwise2d, blockwise2d, linear2d or homa.
    #[arg(long)]
    pub attention: Option<String>,
    /// Triadic window width (odd).
    #[arg(long = "w")]
    pub window: Option<usize>,
    /// Rank of the U projection or `full`.
    #[arg(long)]
    pub rank: Option<String>,
    /// Block length.
    #[arg(long)]
    pub ell: Option<usize>,
    /// Block stride.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// f64 or f32.
    #[arg(long)]
    pub precision: Option<String>,
}

impl Knobs {
    fn assignments(&self) -> Vec<Assignment> {
        let mut out = Vec::new();
        let mut push = |section: &str, key: &str, value: Option<String>, name: &str| {
            if let Some(v) = value {
                out.push(flag(section, key, v, name));
            }
        };
        let s = |v: &Option<usize>| v.map(|x| x.to_string());
        push("model", "profile", self.profile.clone(), "profile");
        push("model", "task", self.task.clone(), "task");
        push("attention", "kind", self.attention.clone(), "attention");
        push("attention", "window", s(&self.window), "w");
        push("attention", "rank", self.rank.clone(), "rank");
        push("attention", "block_len", s(&self.ell), "ell");
        push("attention", "stride", s(&self.stride), "stride");
        push("model", "layers", s(&self.layers), "layers");
        push("attention", "d_model", s(&self.d_model), "d-model");
        push("attention", "heads", s(&self.heads), "heads");
        push("attention", "precision", self.precision.clone(), "precision");
        out
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainKnobs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training set (jsonl or fasta).
    #[arg(long, value_name = "FILE")]
    pub train_file: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub val_file: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub test_file: Option<PathBuf>,
}

impl TrainKnobs {
    fn assignments(&self) -> Vec<Assignment> {
        let mut out = Vec::new();
        if let Some(v) = self.epochs {
            out.push(flag("train", "epochs", v, "epochs"));
        }
        if let Some(v) = self.max_steps {
            out.push(flag("train", "max_steps", v, "max-steps"));
        }
        if let Some(v) = self.batch_size {
            out.push(flag("train", "batch_size", v, "batch-size"));
        }
        for (key, path, name) in [
            ("train", &self.train_file, "train-file"),
            ("val", &self.val_file, "val-file"),
            ("test", &self.test_file, "test-file"),
        ] {
            if let Some(p) = path {
                out.push(flag("data", key, p.display(), name));
            }
        }
        out
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct BenchKnobs {
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Include batch generation in the timed region.
    #[arg(long)]
    pub end_to_end: bool,
}

impl BenchKnobs {
    fn assignments(&self) -> Vec<Assignment> {
        let mut out = Vec::new();
        for (key, v, name) in [
            ("batch", self.batch, "batch"),
            ("seq_len", self.seq_len, "seq-len"),
            ("reps", self.reps, "reps"),
        ] {
            if let Some(v) = v {
                out.push(flag("bench", key, v, name));
            }
        }
        if self.end_to_end {
            out.push(flag("bench", "end_to_end", true, "end-to-end"));
        }
        out
    }
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Finite-difference check of every differentiable operator and a small model.
    Gradcheck {
        /// Largest accepted relative error.
        #[arg(long, default_value_t = homa_core::gradcheck::DEFAULT_TOL)]
        tol: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = homa_core::gradcheck::DEFAULT_EPS)]
        eps: f64,
    },
    /// Windowed-versus-naive and blocked-versus-direct equivalence suites.
    Oracle {
        /// Longest sequence in the windowed suite.
        #[arg(long = "max-L", default_value_t = 16)]
        max_len: usize,
        /// Random draws per configuration of the windowed suite.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Random draws of the blocked suite.
        #[arg(long, default_value_t = 50)]
        block_seeds: u64,
    },
    /// Train a model on sequence files or on generated match3 data.
    Train {
        #[command(flatten)]
        knobs: Knobs,
        #[command(flatten)]
        train: TrainKnobs,
    },
    /// Warm-start a HOMA model from a pairwise checkpoint, then optionally train it.
    Transfer {
        /// Checkpoint directory of the pairwise source model.
        #[arg(long, value_name = "DIR")]
        from: PathBuf,
        /// Keep the copied weights fixed during training.
        #[arg(long)]
        freeze: bool,
        /// backbone or projections.
        #[arg(long, default_value = "backbone")]
        mode: String,
        #[command(flatten)]
        knobs: Knobs,
        #[command(flatten)]
        train: TrainKnobs,
    },
    /// Throughput, peak memory and cost of one configuration.
    Bench {
        #[command(flatten)]
        knobs: Knobs,
        #[command(flatten)]
        bench: BenchKnobs,
    },
    /// Sweep one knob and write one CSV row per value.
    Scale {
        /// w, L, ell or rank.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; `full` is accepted for rank.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        knobs: Knobs,
        #[command(flatten)]
        bench: BenchKnobs,
    },
    /// Encode a sequence file into token ids and attention masks.
    Tokenize {
        /// FASTA, jsonl records, or plain text with one sequence per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
        /// Wrap each sequence in <cls> ... <sep>.
        #[arg(long)]
        special: bool,
    },
    /// Write a synthetic match3 dataset as jsonl.
    Match3 {
        /// Number of examples [default: match3.n_train].
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::Oracle { .. } => "oracle",
            Command::Train { .. } => "train",
            Command::Transfer { .. } => "transfer",
            Command::Bench { .. } => "bench",
            Command::Scale { .. } => "scale",
            Command::Tokenize { .. } => "tokenize",
            Command::Match3 { .. } => "match3",
        }
    }

    fn assignments(&self) -> Vec<Assignment> {
        match self {
            Command::Train { knobs, train } | Command::Transfer { knobs, train, .. } => {
                let mut a = knobs.assignments();
                a.extend(train.assignments());
                a
            }
            Command::Bench { knobs, bench } | Command::Scale { knobs, bench, .. } => {
                let mut a = knobs.assignments();
                a.extend(bench.assignments());
                a
            }
            Command::Match3 { len, vocab, .. } => {
                let mut a = Vec::new();
                if let Some(v) = len {
                    a.push(flag("match3", "len", v, "len"));
                }
                if let Some(v) = vocab {
                    a.push(flag("match3", "vocab", v, "vocab"));
                }
                a
            }
            _ => Vec::new(),
        }
    }
}

/// Artifacts and a short printable summary of a finished command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<String>,
    pub summary: Vec<String>,
}

/// Configuration file, command flags and `--set` overrides, in increasing
/// precedence.
pub fn collect_assignments(cli: &Cli) -> Result<Vec<Assignment>, CliError> {
    let mut all = Vec::new();
    if let Some(path) = &cli.common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        all.extend(parse_config(&text, &path.display().to_string())?);
    }
    if let Some(seed) = cli.common.seed {
        all.push(flag("run", "seed", seed, "seed"));
    }
    all.extend(cli.command.assignments());
    for s in &cli.common.set {
        all.push(parse_override(s)?);
    }
    Ok(all)
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut base = match &cli.common.replay {
        Some(path) => {
            let m = RunManifest::read(path).map_err(CliError::input)?;
            serde_json::from_value(m.config)
                .map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Command::Transfer { from, .. } = &cli.command {
        base.model = commands::checkpoint_config(from)?;
        base.model.attention.kind = homa_core::AttentionKind::Homa;
    }
    Ok(base)
}

/// Output directory: `--out`, then `run.out`, then `$HOMA_OUT_DIR/<command>`,
/// then `homa-out/<command>`.
pub fn output_dir(cli: &Cli, cfg: &RunConfig, env_base: Option<&Path>) -> PathBuf {
    if let Some(p) = &cli.common.out {
        return p.clone();
    }
    if let Some(p) = &cfg.out {
        return p.clone();
    }
    env_base
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_BASE))
        .join(cli.command.name())
}

/// Resolves the configuration, runs the command and writes its manifest.
/// Returns the output directory with the outcome.
pub fn run(cli: &Cli) -> Result<(PathBuf, Outcome), CliError> {
    let assignments = collect_assignments(cli)?;
    let cfg = RunConfig::resolve(&assignments, base_config(cli)?)?;
    let env_base = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out = output_dir(cli, &cfg, env_base.as_deref());
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", out.display())))?;

    let result = commands::dispatch(&cli.command, &cfg, &out);
    let mut manifest = RunManifest::new(cli.command.name(), cfg.seed, &cfg)?;
    manifest.args = std::env::args().skip(1).collect();
    match &result {
        Ok(o) => manifest.outputs = o.outputs.clone(),
        Err(e) => manifest.status = format!("failed: {e}"),
    }
    manifest.write(&out.join(MANIFEST_FILE))?;
    result.map(|o| (out, o))
}
