use std::fs;
use std::path::Path;

use serde_json::json;

use homa_core::blocks::cost_report;
use homa_core::gradcheck::{op_suite, GradCheckReport};
use homa_core::harness::{run_cell, run_scaling_experiment, write_records_csv, Axis, BenchConfig, BenchSpec};
use homa_core::model::{
    evaluate, load_checkpoint, make_match3_dataset, model_gradcheck, save_checkpoint, train, warm_start_transfer,
    write_history_csv, CheckpointManifest, TransferMode,
};
use homa_core::oracle::{blocked_vs_direct, windowed_vs_naive};
use homa_core::tokenizer::{encode_with, load_dataset, DatasetFormat, EncodeOptions, LabeledExample, Record};
use homa_core::{build_model, AttentionKind, Model, ModelConfig, Precision, Real, Rng, Task, URank};

use crate::config::{DataSource, RunConfig};
use crate::{Command, Outcome};

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<Outcome, crate::CliError> {
    match cmd {
        Command::Gradcheck { tol, eps } => gradcheck(cfg, out, *tol, *eps),
        Command::Oracle {
            max_len,
            seeds,
            block_seeds,
        } => oracle(out, *max_len, *seeds, *block_seeds),
        Command::Train { .. } => match cfg.model.attention.precision {
            Precision::F64 => train_cmd::<f64>(cfg, out, None),
            Precision::F32 => train_cmd::<f32>(cfg, out, None),
        },
        Command::Transfer { from, freeze, mode, .. } => {
            let mode = match mode.as_str() {
                "backbone" => TransferMode::Backbone,
                "projections" | "projections_only" => TransferMode::ProjectionsOnly,
                other => {
                    return Err(crate::CliError::Usage(format!(
                        "unknown transfer mode `{other}` (expected backbone or projections)"
                    )))
                }
            };
            match cfg.model.attention.precision {
                Precision::F64 => transfer::<f64>(cfg, out, from, *freeze, mode),
                Precision::F32 => transfer::<f32>(cfg, out, from, *freeze, mode),
            }
        }
        Command::Bench { .. } => bench(cfg, out),
        Command::Scale { axis, values, .. } => scale(cfg, out, axis, values),
        Command::Tokenize {
            input,
            max_len,
            special,
        } => tokenize(cfg, out, input, *max_len, *special),
        Command::Match3 { n, .. } => match3(cfg, out, *n),
    }
}

type CmdResult = Result<Outcome, crate::CliError>;

fn write_json(path: &Path, value: &serde_json::Value) -> Result<String, crate::CliError> {
    let text = serde_json::to_string_pretty(value).map_err(homa_core::HomaError::from)?;
    fs::write(path, text).map_err(|e| homa_core::HomaError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(file_name(path))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

/// Model used by `gradcheck`: two layers of width 8 over length-6 inputs.
pub fn gradcheck_model(kind: AttentionKind) -> ModelConfig {
    let mut m = ModelConfig::profile("fs").expect("fs profile exists");
    let a = &mut m.attention;
    a.kind = kind;
    a.d_model = 8;
    a.heads = 2;
    a.block_len = 6;
    a.stride = 3;
    a.window = 3;
    a.rank = URank::Low(2);
    a.linformer_k = 4;
    a.max_len = 6;
    a.dropout = 0.0;
    m.layers = 2;
    m.ffn_dim = 16;
    m.task = Task::Token;
    m
}

fn gradcheck(cfg: &RunConfig, out: &Path, tol: f64, eps: f64) -> CmdResult {
    let mut reports: Vec<GradCheckReport> = op_suite(cfg.seed)?;
    let mut rng = Rng::with_stream(cfg.seed, 40);
    let letters: Vec<char> = homa_core::tokenizer::RESIDUES.chars().collect();
    let examples: Vec<LabeledExample> = [6, 4]
        .iter()
        .map(|&n| {
            LabeledExample::from_record(
                Record {
                    seq: (0..n).map(|_| letters[rng.below(20)]).collect(),
                    labels: Some((0..n).map(|_| rng.below(3) as u8).collect()),
                    target: None,
                },
                6,
            )
        })
        .collect::<homa_core::Result<_>>()?;
    for kind in AttentionKind::ALL {
        let model = build_model::<f64>(&gradcheck_model(kind))?;
        let parts = model_gradcheck(&model, &examples, cfg.seed, eps)?;
        reports.push(GradCheckReport::merge(format!("model/{kind}"), &parts));
    }
    let failed: Vec<&GradCheckReport> = reports.iter().filter(|r| !r.passed(tol)).collect();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let report = json!({ "tol": tol, "eps": eps, "max_rel_err": worst, "passed": failed.is_empty(), "checks": reports });
    let file = write_json(&out.join("gradcheck.json"), &report)?;
    let mut summary = vec![format!("{} checks, max rel err {worst:.3e} (tol {tol:e})", reports.len())];
    if !failed.is_empty() {
        let names: Vec<String> = failed.iter().map(|r| format!("{} ({:.3e})", r.name, r.max_rel_err)).collect();
        return Err(crate::CliError::Suite(format!("gradient check failed: {}", names.join(", "))));
    }
    summary.push("all gradient checks passed".into());
    Ok(Outcome {
        outputs: vec![file],
        summary,
    })
}

fn oracle(out: &Path, max_len: usize, seeds: u64, block_seeds: u64) -> CmdResult {
    if max_len < 2 {
        return Err(crate::CliError::Usage(format!("--max-L must be at least 2, got {max_len}")));
    }
    let suites = vec![windowed_vs_naive(max_len, seeds)?, blocked_vs_direct(12, 6, 3, 3, block_seeds)?];
    let passed = suites.iter().all(|s| s.passed());
    let file = write_json(&out.join("oracle.json"), &json!({ "passed": passed, "suites": suites }))?;
    let summary: Vec<String> = suites
        .iter()
        .map(|s| {
            format!(
                "{}: {} cases, max abs err {:.3e} (tol {:e})",
                s.name, s.cases, s.max_abs_err, s.tol
            )
        })
        .collect();
    if !passed {
        return Err(crate::CliError::Suite(format!("oracle mismatch: {}", summary.join("; "))));
    }
    Ok(Outcome {
        outputs: vec![file],
        summary,
    })
}

/// Configuration stored in a checkpoint directory, without loading tensors.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig, crate::CliError> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| crate::CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| crate::CliError::Usage(format!("{}: not a checkpoint manifest: {e}", path.display())))?;
    Ok(m.config)
}

struct Splits {
    train: Vec<LabeledExample>,
    val: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<Vec<LabeledExample>, crate::CliError> {
    let format = match &cfg.data.format {
        Some(f) => f.parse().map_err(crate::CliError::input)?,
        None => DatasetFormat::from_path(path),
    };
    load_dataset(path, format, cfg.model.attention.max_len).map_err(crate::CliError::input)
}

fn load_splits(cfg: &RunConfig) -> Result<Option<Splits>, crate::CliError> {
    match cfg.data.source {
        DataSource::Match3 => {
            let m = &cfg.match3;
            let make = |n: usize, k: u64| -> Result<Vec<LabeledExample>, crate::CliError> {
                if n == 0 {
                    return Ok(Vec::new());
                }
                make_match3_dataset(n, m.len, m.vocab, 3 * cfg.seed + k).map_err(crate::CliError::input)
            };
            Ok(Some(Splits {
                train: make(m.n_train, 0)?,
                val: make(m.n_val, 1)?,
                test: make(m.n_test, 2)?,
            }))
        }
        DataSource::Files => {
            let Some(train) = &cfg.data.train else {
                return Ok(None);
            };
            let opt = |p: &Option<std::path::PathBuf>| p.as_ref().map_or(Ok(Vec::new()), |p| load_split(p, cfg));
            Ok(Some(Splits {
                train: load_split(train, cfg)?,
                val: opt(&cfg.data.val)?,
                test: opt(&cfg.data.test)?,
            }))
        }
    }
}

fn fit_and_report<T: Real>(model: Model<T>, splits: &Splits, cfg: &RunConfig, out: &Path) -> CmdResult {
    let params = model.num_params();
    let state = train(model, &splits.train, &splits.val, &cfg.train)?;
    let history = out.join("history.csv");
    write_history_csv(&state.history, &history)?;
    let ckpt = out.join("checkpoint");
    save_checkpoint(&state.model, &ckpt)?;
    let train_eval = evaluate(&state.model, &splits.train)?;
    let val_eval = if splits.val.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &splits.val)?)
    };
    let test_eval = if splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, &splits.test)?)
    };
    let metrics = json!({
        "attention": state.model.cfg.attention.kind,
        "params": params,
        "steps": state.steps,
        "best_epoch": state.best_epoch,
        "stopped_early": state.stopped_early,
        "train": train_eval,
        "val": val_eval,
        "test": test_eval,
    });
    let file = write_json(&out.join("metrics.json"), &metrics)?;
    let mut summary = vec![format!(
        "{} model, {params} parameters, {} steps; train loss {:.4}, metric {:.4}",
        state.model.cfg.attention.kind, state.steps, train_eval.loss, train_eval.metric
    )];
    if let Some(t) = test_eval {
        summary.push(format!("test loss {:.4}, metric {:.4}", t.loss, t.metric));
    }
    Ok(Outcome {
        outputs: vec![file_name(&history), "checkpoint".into(), file],
        summary,
    })
}

fn train_cmd<T: Real>(cfg: &RunConfig, out: &Path, model: Option<Model<T>>) -> CmdResult {
    let splits = load_splits(cfg)?.ok_or_else(|| {
        crate::CliError::Usage("train needs data.train (or --train-file) or --task match3".into())
    })?;
    let model = match model {
        Some(m) => m,
        None => build_model::<T>(&cfg.model)?,
    };
    fit_and_report(model, &splits, cfg, out)
}

fn transfer<T: Real>(cfg: &RunConfig, out: &Path, from: &Path, freeze: bool, mode: TransferMode) -> CmdResult {
    let src: Model<T> = load_checkpoint(from).map_err(crate::CliError::input)?;
    let mut dst_cfg = cfg.model.clone();
    dst_cfg.attention.kind = AttentionKind::Homa;
    let dst = warm_start_transfer(&src, build_model::<T>(&dst_cfg)?, freeze, mode).map_err(crate::CliError::input)?;
    let frozen = dst.params.iter().filter(|(id, _, _)| dst.params.is_frozen(*id)).count();
    let head = format!(
        "warm-started {} from {} ({} tensors frozen)",
        dst.cfg.attention.kind, src.cfg.attention.kind, frozen
    );
    match load_splits(cfg)? {
        Some(splits) => {
            let mut o = fit_and_report(dst, &splits, cfg, out)?;
            o.summary.insert(0, head);
            Ok(o)
        }
        None => {
            save_checkpoint(&dst, &out.join("checkpoint"))?;
            Ok(Outcome {
                outputs: vec!["checkpoint".into()],
                summary: vec![head],
            })
        }
    }
}

fn bench_config(cfg: &RunConfig) -> (BenchConfig, BenchSpec) {
    (
        BenchConfig {
            model: cfg.model.clone(),
            batch: cfg.bench.batch,
            seq_len: cfg.bench.seq_len,
            seed: cfg.seed,
        },
        BenchSpec {
            warmup: cfg.bench.warmup,
            measured: cfg.bench.measured,
            reps: cfg.bench.reps,
            end_to_end: cfg.bench.end_to_end,
        },
    )
}

fn bench(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (bc, spec) = bench_config(cfg);
    spec.validate().map_err(crate::CliError::input)?;
    bc.validate().map_err(crate::CliError::input)?;
    let cost = cost_report(&bc.model.attention, bc.seq_len)?;
    let rec = run_cell(&bc, &spec);
    let csv = out.join("bench.csv");
    write_records_csv(std::slice::from_ref(&rec), &csv)?;
    let cost_file = write_json(&out.join("cost.json"), &serde_json::to_value(&cost).map_err(homa_core::HomaError::from)?)?;
    if rec.failed() {
        return Err(crate::CliError::Runtime(homa_core::HomaError::InvalidArgument(rec.error)));
    }
    Ok(Outcome {
        outputs: vec![file_name(&csv), cost_file],
        summary: vec![format!(
            "{}: {:.1} tokens/s, peak {} bytes, {} pairwise + {} triadic flops per layer per sequence",
            rec.attention,
            rec.tokens_per_second.unwrap_or(f64::NAN),
            rec.peak_bytes.map_or_else(|| "n/a".to_string(), |b| b.to_string()),
            cost.pairwise_flops,
            cost.triadic_flops
        )],
    })
}

fn scale(cfg: &RunConfig, out: &Path, axis: &str, raw: &[String]) -> CmdResult {
    let axis: Axis = axis.parse().map_err(crate::CliError::input)?;
    let values = raw
        .iter()
        .map(|v| match (axis, v.trim()) {
            (Axis::Rank, "full") => Ok(0),
            (_, v) => v
                .parse::<usize>()
                .map_err(|_| crate::CliError::Usage(format!("--values: `{v}` is not a non-negative integer"))),
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let values = values.as_slice();
    let (bc, spec) = bench_config(cfg);
    let records = run_scaling_experiment(axis, values, &bc, &spec).map_err(crate::CliError::input)?;
    let csv = out.join("scale.csv");
    write_records_csv(&records, &csv)?;
    let summary = records
        .iter()
        .zip(raw)
        .map(|(r, v)| match (r.failed(), r.tokens_per_second) {
            (false, Some(tps)) => format!("{axis}={v}: {tps:.1} tokens/s"),
            _ => format!("{axis}={v}: failed: {}", r.error),
        })
        .collect();
    Ok(Outcome {
        outputs: vec![file_name(&csv)],
        summary,
    })
}

/// Sequences of a FASTA file, jsonl records or plain lines.
fn read_sequences(path: &Path) -> Result<Vec<String>, crate::CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut seqs = Vec::new();
    match ext {
        "jsonl" | "json" => {
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let rec: Record = serde_json::from_str(line)
                    .map_err(|e| crate::CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
                seqs.push(rec.seq);
            }
        }
        "fa" | "fasta" | "faa" => {
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                if line.starts_with('>') {
                    seqs.push(String::new());
                } else if let Some(s) = seqs.last_mut() {
                    s.push_str(line);
                } else {
                    return Err(crate::CliError::Usage(format!(
                        "{}: sequence data before the first header",
                        path.display()
                    )));
                }
            }
        }
        _ => seqs.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from)),
    }
    Ok(seqs)
}

fn tokenize(cfg: &RunConfig, out: &Path, input: &Path, max_len: Option<usize>, special: bool) -> CmdResult {
    let max_len = max_len.unwrap_or(cfg.model.attention.max_len);
    let seqs = read_sequences(input)?;
    let mut lines = String::new();
    for s in &seqs {
        let enc = encode_with(s, max_len, EncodeOptions { add_special: special }).map_err(crate::CliError::input)?;
        let row = json!({
            "seq": s,
            "ids": enc.ids,
            "attention_mask": enc.attention_mask,
            "original_length": enc.original_length,
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    let path = out.join("tokens.jsonl");
    fs::write(&path, lines).map_err(|e| homa_core::HomaError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(Outcome {
        outputs: vec![file_name(&path)],
        summary: vec![format!("encoded {} sequences at max_len {max_len}", seqs.len())],
    })
}

fn match3(cfg: &RunConfig, out: &Path, n: Option<usize>) -> CmdResult {
    let m = &cfg.match3;
    let n = n.unwrap_or(m.n_train);
    let data = make_match3_dataset(n, m.len, m.vocab, cfg.seed).map_err(crate::CliError::input)?;
    let text = homa_core::tokenizer::to_jsonl(data.iter().map(|e| &e.record))?;
    let path = out.join("match3.jsonl");
    fs::write(&path, text).map_err(|e| homa_core::HomaError::Io {
        path: path.clone(),
        source: e,
    })?;
    let positives = data.iter().filter(|e| e.record.target == Some(1.0)).count();
    Ok(Outcome {
        outputs: vec![file_name(&path)],
        summary: vec![format!(
            "{n} sequences of length {} over {} symbols, {positives} positive",
            m.len, m.vocab
        )],
    })
}
