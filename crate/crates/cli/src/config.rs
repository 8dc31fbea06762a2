//! Run configuration files.
//!
//! Grammar, one item per line:
//!
//! ```text
//! # comment          ; also a comment
//! [section]
//! key = value
//! section.key = value   # dotted form, valid anywhere
//! ```
//!
//! Blank lines are ignored and a later assignment overrides an earlier one.
//! `model.profile` is applied before every other key regardless of where it
//! appears, so individual keys refine the chosen profile. Unknown sections
//! and keys are rejected with the list of valid names.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use homa_core::model::TrainConfig;
use homa_core::{AttentionKind, ModelConfig, Precision, Task, URank};

use crate::error::CliError;

/// Valid keys per section, with a one-line description each.
pub const SECTIONS: &[(&str, &[(&str, &str)])] = &[
    ("run", &[("seed", "base seed for data and initialization"), ("out", "output directory")]),
    (
        "model",
        &[
            ("profile", "ss or fs preset, applied first"),
            ("layers", "encoder layers"),
            ("ffn_dim", "feed-forward hidden width"),
            ("lr", "Adam learning rate"),
            ("task", "token, regression, classify or match3"),
            ("classes", "classes of a token or classification head"),
            ("freeze_pairwise", "keep transferred pairwise weights fixed"),
        ],
    ),
    (
        "attention",
        &[
            ("kind", "pairwise2d, blockwise2d, linear2d or homa"),
            ("d_model", "model width"),
            ("heads", "attention heads"),
            ("block_len", "block length ell"),
            ("stride", "block stride s"),
            ("window", "odd triadic window w"),
            ("rank", "U projection rank or `full`"),
            ("linformer_k", "projected length of linear attention"),
            ("share_kv_projection", "share the key and value length projections"),
            ("max_len", "maximum sequence length"),
            ("dropout", "dropout on the attention output"),
            ("precision", "f64 or f32"),
        ],
    ),
    (
        "train",
        &[
            ("batch_size", "examples per optimizer step"),
            ("epochs", "passes over the training set"),
            ("max_steps", "optimizer step cap or `none`"),
            ("patience", "early-stopping patience in epochs or `none`"),
            ("seed", "shuffling and dropout seed"),
        ],
    ),
    (
        "data",
        &[
            ("source", "files or match3"),
            ("train", "training set path"),
            ("val", "validation set path"),
            ("test", "test set path"),
            ("format", "jsonl or fasta; inferred from the extension when unset"),
        ],
    ),
    (
        "bench",
        &[
            ("batch", "sequences per step"),
            ("seq_len", "sequence length"),
            ("warmup", "untimed steps per repetition"),
            ("measured", "timed steps per repetition"),
            ("reps", "repetitions; the median is reported"),
            ("end_to_end", "time batch generation along with the step"),
        ],
    ),
    (
        "match3",
        &[
            ("n_train", "training examples"),
            ("n_val", "validation examples"),
            ("n_test", "test examples"),
            ("len", "sequence length"),
            ("vocab", "alphabet size"),
        ],
    ),
];

/// One `section.key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub section: String,
    pub key: String,
    pub value: String,
    pub origin: String,
}

fn valid_sections() -> String {
    SECTIONS.iter().map(|(s, _)| *s).collect::<Vec<_>>().join(", ")
}

fn keys_of(section: &str) -> Option<&'static [(&'static str, &'static str)]> {
    SECTIONS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k)
}

fn check_key(section: &str, key: &str, origin: &str) -> Result<(), CliError> {
    let keys = keys_of(section).ok_or_else(|| {
        CliError::Usage(format!(
            "{origin}: unknown section `{section}` (valid sections: {})",
            valid_sections()
        ))
    })?;
    if keys.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        let names: Vec<&str> = keys.iter().map(|(k, _)| *k).collect();
        Err(CliError::Usage(format!(
            "{origin}: unknown key `{key}` in [{section}] (valid keys: {})",
            names.join(", ")
        )))
    }
}

fn split_dotted(lhs: &str) -> Option<(&str, &str)> {
    lhs.split_once('.').map(|(s, k)| (s.trim(), k.trim()))
}

/// Parses `section.key=value`, as given to `--set`.
pub fn parse_override(text: &str) -> Result<Assignment, CliError> {
    let origin = format!("--set {text}");
    let (lhs, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("{origin}: expected SECTION.KEY=VALUE")))?;
    let (section, key) = split_dotted(lhs.trim())
        .ok_or_else(|| CliError::Usage(format!("{origin}: expected SECTION.KEY=VALUE")))?;
    check_key(section, key, &origin)?;
    Ok(Assignment {
        section: section.into(),
        key: key.into(),
        value: value.trim().into(),
        origin,
    })
}

/// Parses a configuration file's text. `name` labels error messages.
pub fn parse_config(text: &str, name: &str) -> Result<Vec<Assignment>, CliError> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = format!("{name}:{}", i + 1);
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let s = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Usage(format!("{origin}: unterminated section header")))?
                .trim();
            if keys_of(s).is_none() {
                return Err(CliError::Usage(format!(
                    "{origin}: unknown section `{s}` (valid sections: {})",
                    valid_sections()
                )));
            }
            section = Some(s.to_string());
            continue;
        }
        let (lhs, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}: expected `key = value`, got `{line}`")))?;
        let lhs = lhs.trim();
        let (sec, key) = match split_dotted(lhs) {
            Some((s, k)) => (s.to_string(), k.to_string()),
            None => match &section {
                Some(s) => (s.clone(), lhs.to_string()),
                None => {
                    return Err(CliError::Usage(format!(
                        "{origin}: key `{lhs}` appears before any [section]"
                    )))
                }
            },
        };
        check_key(&sec, &key, &origin)?;
        let value = value.split(" #").next().unwrap_or_default().trim().to_string();
        out.push(Assignment {
            section: sec,
            key,
            value,
            origin,
        });
    }
    Ok(out)
}

/// Where the training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Files,
    Match3,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub batch: usize,
    pub seq_len: usize,
    pub warmup: usize,
    pub measured: usize,
    pub reps: usize,
    #[serde(default)]
    pub end_to_end: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            batch: 4,
            seq_len: 128,
            warmup: 1,
            measured: 3,
            reps: 3,
            end_to_end: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match3Section {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub len: usize,
    pub vocab: usize,
}

impl Default for Match3Section {
    fn default() -> Self {
        Match3Section {
            n_train: 4000,
            n_val: 0,
            n_test: 1000,
            len: 16,
            vocab: 8,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchSection,
    pub match3: Match3Section,
}

fn parse<T: std::str::FromStr>(a: &Assignment) -> Result<T, CliError> {
    a.value.parse().map_err(|_| {
        CliError::Usage(format!(
            "{}: invalid value `{}` for {}.{}",
            a.origin, a.value, a.section, a.key
        ))
    })
}

fn parse_bool(a: &Assignment) -> Result<bool, CliError> {
    match a.value.as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "{}: expected true or false for {}.{}, got `{}`",
            a.origin, a.section, a.key, a.value
        ))),
    }
}

fn parse_optional(a: &Assignment) -> Result<Option<usize>, CliError> {
    if a.value == "none" {
        Ok(None)
    } else {
        parse(a).map(Some)
    }
}

fn parse_with<T, E: std::fmt::Display>(a: &Assignment, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Usage(format!("{}: {e}", a.origin)))
}

impl RunConfig {
    /// Applies `assignments` on top of `base`.
    pub fn resolve(assignments: &[Assignment], base: RunConfig) -> Result<Self, CliError> {
        let mut cfg = base;
        let profile = assignments
            .iter()
            .rev()
            .find(|a| a.section == "model" && a.key == "profile");
        if let Some(a) = profile {
            let seed = cfg.model.seed;
            cfg.model = parse_with(a, ModelConfig::profile(&a.value))?;
            cfg.model.seed = seed;
        }
        for a in assignments {
            cfg.apply(a)?;
        }
        if cfg.data.source == DataSource::Match3 {
            cfg.model.task = Task::Classify;
            cfg.model.classes = 2;
            cfg.model.attention.max_len = cfg.match3.len;
            if cfg.model.attention.kind == AttentionKind::Linear2d {
                cfg.model.attention.linformer_k = cfg.model.attention.linformer_k.min(cfg.match3.len);
            }
        }
        cfg.model
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
        if cfg.train.batch_size == 0 {
            return Err(CliError::Usage("train.batch_size must be positive".into()));
        }
        Ok(cfg)
    }

    fn apply(&mut self, a: &Assignment) -> Result<(), CliError> {
        let att = &mut self.model.attention;
        match (a.section.as_str(), a.key.as_str()) {
            ("run", "seed") => {
                self.seed = parse(a)?;
                self.model.seed = self.seed;
                self.train.seed = self.seed;
            }
            ("run", "out") => self.out = Some(PathBuf::from(&a.value)),
            ("model", "profile") => {}
            ("model", "layers") => self.model.layers = parse(a)?,
            ("model", "ffn_dim") => self.model.ffn_dim = parse(a)?,
            ("model", "lr") => self.model.lr = parse(a)?,
            ("model", "task") => {
                if a.value == "match3" {
                    self.data.source = DataSource::Match3;
                    self.model.task = Task::Classify;
                } else {
                    self.model.task = parse_with(a, a.value.parse::<Task>())?;
                }
            }
            ("model", "classes") => self.model.classes = parse(a)?,
            ("model", "freeze_pairwise") => self.model.freeze_pairwise = parse_bool(a)?,
            ("attention", "kind") => att.kind = parse_with(a, a.value.parse::<AttentionKind>())?,
            ("attention", "d_model") => att.d_model = parse(a)?,
            ("attention", "heads") => att.heads = parse(a)?,
            ("attention", "block_len") => att.block_len = parse(a)?,
            ("attention", "stride") => att.stride = parse(a)?,
            ("attention", "window") => att.window = parse(a)?,
            ("attention", "rank") => att.rank = parse_with(a, a.value.parse::<URank>())?,
            ("attention", "linformer_k") => att.linformer_k = parse(a)?,
            ("attention", "share_kv_projection") => att.share_kv_projection = parse_bool(a)?,
            ("attention", "max_len") => att.max_len = parse(a)?,
            ("attention", "dropout") => att.dropout = parse(a)?,
            ("attention", "precision") => att.precision = parse_with(a, a.value.parse::<Precision>())?,
            ("train", "batch_size") => self.train.batch_size = parse(a)?,
            ("train", "epochs") => self.train.epochs = parse(a)?,
            ("train", "max_steps") => self.train.max_steps = parse_optional(a)?,
            ("train", "patience") => self.train.patience = parse_optional(a)?,
            ("train", "seed") => self.train.seed = parse(a)?,
            ("data", "source") => {
                self.data.source = match a.value.as_str() {
                    "files" => DataSource::Files,
                    "match3" => DataSource::Match3,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "{}: data.source must be files or match3, got `{}`",
                            a.origin, a.value
                        )))
                    }
                }
            }
            ("data", "train") => self.data.train = Some(PathBuf::from(&a.value)),
            ("data", "val") => self.data.val = Some(PathBuf::from(&a.value)),
            ("data", "test") => self.data.test = Some(PathBuf::from(&a.value)),
            ("data", "format") => {
                parse_with(a, a.value.parse::<homa_core::tokenizer::DatasetFormat>())?;
                self.data.format = Some(a.value.clone());
            }
            ("bench", "batch") => self.bench.batch = parse(a)?,
            ("bench", "seq_len") => self.bench.seq_len = parse(a)?,
            ("bench", "warmup") => self.bench.warmup = parse(a)?,
            ("bench", "measured") => self.bench.measured = parse(a)?,
            ("bench", "reps") => self.bench.reps = parse(a)?,
            ("bench", "end_to_end") => self.bench.end_to_end = parse_bool(a)?,
            ("match3", "n_train") => self.match3.n_train = parse(a)?,
            ("match3", "n_val") => self.match3.n_val = parse(a)?,
            ("match3", "n_test") => self.match3.n_test = parse(a)?,
            ("match3", "len") => self.match3.len = parse(a)?,
            ("match3", "vocab") => self.match3.vocab = parse(a)?,
            (s, k) => check_key(s, k, &a.origin)?,
        }
        Ok(())
    }
}

/// Shorthand assignment coming from a command-line flag.
pub fn flag(section: &str, key: &str, value: impl ToString, flag_name: &str) -> Assignment {
    Assignment {
        section: section.into(),
        key: key.into(),
        value: value.to_string(),
        origin: format!("--{flag_name}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let text = "# comment\n[attention]\nkind = blockwise2d\nwindow=7 # inline\n\n; other\ntrain.epochs = 2\n[model]\nlayers = 3\n";
        let a = parse_config(text, "c.cfg").unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!((a[1].section.as_str(), a[1].key.as_str(), a[1].value.as_str()), ("attention", "window", "7"));
        assert_eq!(a[2].section, "train");
        let cfg = RunConfig::resolve(&a, RunConfig::default()).unwrap();
        assert_eq!(cfg.model.attention.kind, AttentionKind::Blockwise2d);
        assert_eq!(cfg.model.attention.window, 7);
        assert_eq!((cfg.train.epochs, cfg.model.layers), (2, 3));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config("[attention]\nwidth = 3\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:2"), "{err}");
        assert!(err.contains("unknown key `width`"), "{err}");
        for k in ["kind", "window", "rank", "block_len"] {
            assert!(err.contains(k), "{err}");
        }
        let err = parse_config("[optim]\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("valid sections: run, model, attention"), "{err}");
        assert!(parse_override("model.depth=3").unwrap_err().to_string().contains("valid keys"));
    }

    #[test]
    fn malformed_lines() {
        assert!(parse_config("[model\n", "c").is_err());
        assert!(parse_config("layers = 3\n", "c").is_err());
        assert!(parse_config("[model]\nlayers\n", "c").is_err());
        assert!(parse_override("model.layers").is_err());
        assert!(parse_override("layers=2").is_err());
    }

    #[test]
    fn profile_applies_first() {
        let a = parse_config("[model]\nlayers = 2\nprofile = ss\n", "c").unwrap();
        let cfg = RunConfig::resolve(&a, RunConfig::default()).unwrap();
        assert_eq!(cfg.model.d_model(), 512);
        assert_eq!(cfg.model.layers, 2);
    }

    #[test]
    fn invalid_values() {
        for text in [
            "[attention]\nwindow = four\n",
            "[attention]\nwindow = 4\n",
            "[attention]\nkind = sparse\n",
            "[model]\nfreeze_pairwise = maybe\n",
            "[train]\nbatch_size = 0\n",
            "[model]\nprofile = xl\n",
        ] {
            let a = parse_config(text, "c").unwrap();
            assert!(matches!(RunConfig::resolve(&a, RunConfig::default()), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn match3_task_sets_classifier() {
        let a = vec![flag("model", "task", "match3", "task"), parse_override("match3.len=12").unwrap()];
        let cfg = RunConfig::resolve(&a, RunConfig::default()).unwrap();
        assert_eq!(cfg.data.source, DataSource::Match3);
        assert_eq!((cfg.model.task, cfg.model.classes), (Task::Classify, 2));
        assert_eq!(cfg.model.attention.max_len, 12);
    }

    #[test]
    fn optional_counts_and_seed() {
        let a = parse_config("[train]\nmax_steps = 10\npatience = none\n[run]\nseed = 9\n", "c").unwrap();
        let cfg = RunConfig::resolve(&a, RunConfig::default()).unwrap();
        assert_eq!((cfg.train.max_steps, cfg.train.patience), (Some(10), None));
        assert_eq!((cfg.seed, cfg.model.seed, cfg.train.seed), (9, 9, 9));
    }

    #[test]
    fn every_listed_key_is_applied() {
        for (section, keys) in SECTIONS {
            for (key, _) in *keys {
                let a = Assignment {
                    section: section.to_string(),
                    key: key.to_string(),
                    value: "__bad__".into(),
                    origin: "t".into(),
                };
                let mut cfg = RunConfig::default();
                let res = cfg.apply(&a);
                let string_valued = matches!(
                    (*section, *key),
                    ("run", "out") | ("model", "profile") | ("data", "train" | "val" | "test")
                );
                assert_eq!(res.is_ok(), string_valued, "{section}.{key}");
            }
        }
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = RunConfig::resolve(&[flag("attention", "window", 7, "w")], RunConfig::default()).unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        let back: RunConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }
}
