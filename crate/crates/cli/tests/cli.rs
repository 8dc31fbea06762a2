use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use homa_cli::OUT_DIR_ENV;

const TINY: &str = "\
[attention]
d_model = 8
heads = 2
block_len = 6
stride = 3
window = 3
rank = 2
linformer_k = 4
max_len = 8
dropout = 0
[model]
layers = 1
ffn_dim = 16
[train]
batch_size = 8
max_steps = 10
[match3]
n_train = 32
n_test = 16
len = 8
[bench]
batch = 2
seq_len = 8
";

fn homa(base: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_homa"))
        .args(args)
        .env(OUT_DIR_ENV, base)
        .current_dir(base)
        .output()
        .expect("binary runs")
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn oracle_passes_and_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = homa(tmp.path(), &["oracle", "--max-L", "8", "--seeds", "4", "--block-seeds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("oracle");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    for suite in report["suites"].as_array().unwrap() {
        assert!(suite["max_abs_err"].as_f64().unwrap() <= 1e-12);
    }
    let m = manifest(&out);
    assert_eq!(m["command"], "oracle");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["env"]["threads"], 1);
    assert_eq!(m["outputs"][0], "oracle.json");
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = homa(tmp.path(), &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["checks"].as_array().unwrap().len() > 4);
}

#[test]
fn gradcheck_with_impossible_tolerance_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = homa(tmp.path(), &["gradcheck", "--tol", "0"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let m = manifest(&tmp.path().join("gradcheck"));
    assert!(m["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn unknown_key_is_a_usage_error_listing_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let o = homa(tmp.path(), &["--set", "attention.bogus=1", "oracle"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("window") && err.contains("linformer_k"), "{err}");

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "[nosuch]\nx = 1\n").unwrap();
    let o = homa(tmp.path(), &["--config", cfg.to_str().unwrap(), "oracle"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("attention"));
}

#[test]
fn bad_arguments_and_missing_files_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(homa(tmp.path(), &["nosuch"]).status.code(), Some(2));
    assert_eq!(homa(tmp.path(), &["train"]).status.code(), Some(2));
    assert_eq!(homa(tmp.path(), &["train", "--train-file", "missing.jsonl"]).status.code(), Some(2));
    assert_eq!(homa(tmp.path(), &["--config", "missing.cfg", "oracle"]).status.code(), Some(2));
    assert_eq!(homa(tmp.path(), &["transfer", "--from", "nowhere"]).status.code(), Some(2));
    assert_eq!(homa(tmp.path(), &["scale", "--axis", "depth", "--values", "1"]).status.code(), Some(2));
}

#[test]
fn scale_over_window_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = homa(tmp.path(), &["--config", &cfg, "scale", "--axis", "w", "--values", "3,5,7", "--reps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = homa_core::harness::read_records_csv(&tmp.path().join("scale/scale.csv")).unwrap();
    assert_eq!(records.len(), 3);
    for (r, w) in records.iter().zip([3, 5, 7]) {
        assert_eq!(r.w, w);
        assert!(!r.failed(), "{}", r.error);
        assert!(r.tokens_per_second.unwrap() > 0.0);
    }
    assert!(records[0].flops_triadic < records[2].flops_triadic);

    let o = homa(tmp.path(), &["--config", &cfg, "scale", "--axis", "rank", "--values", "full,3,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = homa_core::harness::read_records_csv(&tmp.path().join("scale/scale.csv")).unwrap();
    let ranks: Vec<&str> = records.iter().map(|r| r.rank.as_str()).collect();
    assert_eq!(ranks, ["full", "3", "2"]);
    assert!(records.windows(2).all(|p| p[0].params > p[1].params));
    assert_eq!(homa(tmp.path(), &["scale", "--axis", "w", "--values", "full"]).status.code(), Some(2));
}

#[test]
fn train_then_transfer_from_pairwise_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = homa(tmp.path(), &["--config", &cfg, "train", "--task", "match3", "--attention", "pairwise2d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train_dir = tmp.path().join("train");
    let history = homa_core::model::read_history_csv(&train_dir.join("history.csv")).unwrap();
    assert!(!history.is_empty());
    assert!(train_dir.join("checkpoint/checkpoint.json").exists());
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(train_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["attention"], "pairwise2d");

    let ckpt = train_dir.join("checkpoint");
    let o = homa(
        tmp.path(),
        &["--config", &cfg, "transfer", "--from", ckpt.to_str().unwrap(), "--freeze", "--task", "match3"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dst: homa_core::Model<f64> = homa_core::model::load_checkpoint(&tmp.path().join("transfer/checkpoint")).unwrap();
    assert_eq!(dst.cfg.attention.kind, homa_core::AttentionKind::Homa);
    let src: homa_core::Model<f64> = homa_core::model::load_checkpoint(&ckpt).unwrap();
    for name in ["layer0.attn.wq", "layer0.attn.wo", "layer0.ffn.w1"] {
        let (a, b) = (src.param_id(name).unwrap(), dst.param_id(name).unwrap());
        assert_eq!(src.params.get(a).data(), dst.params.get(b).data(), "{name}");
        assert!(dst.params.is_frozen(b), "{name}");
    }
}

#[test]
fn replay_reuses_the_recorded_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = homa(tmp.path(), &["--config", &cfg, "--seed", "7", "match3", "--n", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = fs::read_to_string(tmp.path().join("match3/match3.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 6);
    let m = manifest(&tmp.path().join("match3"));
    assert_eq!(m["seed"], 7);

    let replay = tmp.path().join("match3/manifest.json");
    let o = homa(tmp.path(), &["--replay", replay.to_str().unwrap(), "--out", "again", "match3", "--n", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = fs::read_to_string(tmp.path().join("again/match3.jsonl")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn tokenize_fasta_and_plain_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let fa = tmp.path().join("s.fa");
    fs::write(&fa, ">a\nACDE\nFG\n>b\nKLM\n").unwrap();
    let o = homa(tmp.path(), &["tokenize", "--input", fa.to_str().unwrap(), "--max-len", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = fs::read_to_string(tmp.path().join("tokenize/tokens.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["seq"], "ACDEFG");
    assert_eq!(rows[0]["ids"].as_array().unwrap().len(), 5);
    assert_eq!(rows[1]["attention_mask"], serde_json::json!([true, true, true, false, false]));

    let txt = tmp.path().join("s.txt");
    fs::write(&txt, "MKV\n\nAC\n").unwrap();
    let o = homa(tmp.path(), &["tokenize", "--input", txt.to_str().unwrap(), "--max-len", "4", "--special"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(tmp.path().join("tokenize/tokens.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn bench_writes_csv_and_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = homa(tmp.path(), &["--config", &cfg, "bench", "--attention", "linear2d"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = homa_core::harness::read_records_csv(&tmp.path().join("bench/bench.csv")).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].attention, "linear2d");
    assert_eq!(recs[0].flops_triadic, Some(0));
    assert!(tmp.path().join("bench/cost.json").exists());

    let o = homa(tmp.path(), &["--config", &cfg, "bench", "--end-to-end"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&tmp.path().join("bench"))["config"]["bench"]["end_to_end"], true);
}

#[test]
fn explicit_out_wins_over_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let o = homa(tmp.path(), &["--config", &cfg, "--out", "custom", "match3", "--n", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("custom/match3.jsonl").exists());
    assert!(!tmp.path().join("match3").exists());
}
