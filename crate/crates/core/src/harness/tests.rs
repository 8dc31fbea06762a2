use super::*;
use crate::config::{AttentionConfig, AttentionKind};
use crate::blocks::plan_blocks;
use crate::model::build_model;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn small(kind: AttentionKind) -> BenchConfig {
    let mut cfg = BenchConfig::profile("fs", 1, 2, 24).unwrap();
    cfg.model.attention = AttentionConfig {
        kind,
        d_model: 16,
        heads: 2,
        block_len: 8,
        stride: 4,
        window: 3,
        rank: URank::Low(4),
        linformer_k: 8,
        max_len: 32,
        ..cfg.model.attention
    };
    cfg.model.ffn_dim = 16;
    cfg
}

#[test]
fn spec_minimums() {
    assert!(BenchSpec::default().validate().is_ok());
    for (w, m, r) in [(0, 3, 3), (1, 2, 3), (1, 3, 2)] {
        let spec = BenchSpec {
            warmup: w,
            measured: m,
            reps: r,
            ..BenchSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}

#[test]
fn median_of_odd_and_even() {
    assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn fingerprint_tracks_config() {
    let a = small(AttentionKind::Homa);
    assert_eq!(a.fingerprint(), small(AttentionKind::Homa).fingerprint());
    assert_eq!(a.fingerprint().len(), 16);
    let b = Axis::W.apply(&a, 5);
    assert_ne!(a.fingerprint(), b.fingerprint());
}

#[test]
fn axis_parse_and_apply() {
    for name in Axis::NAMES {
        let axis: Axis = name.parse().unwrap();
        assert_eq!(axis.to_string(), name);
    }
    assert!("depth".parse::<Axis>().is_err());
    let base = small(AttentionKind::Homa);
    assert_eq!(Axis::W.apply(&base, 7).model.attention.window, 7);
    let l = Axis::L.apply(&base, 64);
    assert_eq!((l.seq_len, l.model.attention.max_len), (64, 64));
    let e = Axis::Ell.apply(&base, 9);
    assert_eq!((e.model.attention.block_len, e.model.attention.stride), (9, 5));
    assert_eq!(Axis::Rank.apply(&base, 2).model.attention.rank, URank::Low(2));
    assert_eq!(Axis::Rank.apply(&base, 0).model.attention.rank, URank::Full);
}

#[test]
fn rank_sweep_shrinks_parameters() {
    let mut base = BenchConfig::profile("fs", 1, 1, 16).unwrap();
    base.model.attention.d_model = 512;
    let counts: Vec<usize> = [0, 128, 32, 8]
        .iter()
        .map(|&r| build_model::<f32>(&Axis::Rank.apply(&base, r).model).unwrap().num_params())
        .collect();
    assert!(counts.windows(2).all(|p| p[0] > p[1]), "{counts:?}");
}

#[test]
fn length_sweep_cost_is_linear_in_blocks() {
    let base = BenchConfig::profile("fs", 1, 1, 16).unwrap();
    let per_block: Vec<(u64, u64)> = [256, 512, 1024]
        .iter()
        .map(|&l| {
            let cfg = Axis::L.apply(&base, l);
            let a = &cfg.model.attention;
            let cost = cost_report(a, l).unwrap();
            let blocks = plan_blocks(l, a.block_len, a.stride).unwrap().num_blocks() as u64;
            assert_eq!(cost.triadic_flops % blocks, 0);
            (cost.triadic_flops / blocks, cost.pairwise_flops / blocks)
        })
        .collect();
    assert!(per_block.iter().all(|&p| p == per_block[0]), "{per_block:?}");
}

#[test]
fn synthetic_batch_matches_task() {
    let mut cfg = small(AttentionKind::Homa);
    for task in [Task::Token, Task::Regression, Task::Classify] {
        cfg.model.task = task;
        let data = synthetic_batch(&cfg).unwrap();
        assert_eq!(data.len(), 2);
        assert!(data.iter().all(|e| e.encoded.attention_mask.iter().all(|&m| m)));
    }
}

#[test]
fn cell_reports_cost_and_params() {
    for kind in AttentionKind::ALL {
        let cfg = small(kind);
        let rec = run_cell(&cfg, &BenchSpec::default());
        assert!(!rec.failed(), "{kind}: {}", rec.error);
        let cost = cost_report(&cfg.model.attention, cfg.seq_len).unwrap();
        assert_eq!(rec.flops_pairwise, Some(cost.pairwise_flops));
        assert_eq!(rec.flops_triadic, Some(cost.triadic_flops));
        let params = build_model::<f64>(&cfg.model).unwrap().num_params() as u64;
        assert_eq!(rec.params, Some(params));
        assert!(rec.tokens_per_second.unwrap() > 0.0);
        assert!(rec.peak_bytes.unwrap() > 0);
    }
}

#[test]
fn scaling_keeps_failed_rows() {
    let recs = run_scaling_experiment(
        Axis::W,
        &[3, 4, 5],
        &small(AttentionKind::Homa),
        &BenchSpec::default(),
    )
    .unwrap();
    assert_eq!(recs.len(), 3);
    assert!(!recs[0].failed() && !recs[2].failed());
    assert!(recs[1].failed());
    assert!(recs[1].tokens_per_second.is_none());
    assert_eq!(recs[1].w, 4);
    assert!(run_scaling_experiment(Axis::W, &[], &small(AttentionKind::Homa), &BenchSpec::default()).is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scale.csv");
    let mut ok = RunRecord::skeleton(&small(AttentionKind::Homa));
    ok.tokens_per_second = Some(1234.5);
    ok.peak_bytes = Some(99);
    ok.flops_pairwise = Some(10);
    ok.flops_triadic = Some(20);
    ok.wall_seconds = Some(0.25);
    ok.params = Some(7);
    let mut bad = RunRecord::skeleton(&small(AttentionKind::Linear2d));
    bad.error = "window must be odd, got 4".into();
    let recs = vec![ok, bad];
    write_records_csv(&recs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(read_records_csv(&path).unwrap(), recs);
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let cfg = small(AttentionKind::Homa);
    let m = RunManifest::new("bench", 3, &cfg).unwrap();
    assert_eq!(m.env.threads, 1);
    assert!(m.env.alloc_tracking);
    m.write(&path).unwrap();
    let back = RunManifest::read(&path).unwrap();
    assert_eq!(back, m);
    let restored: BenchConfig = serde_json::from_value(back.config).unwrap();
    assert_eq!(restored, cfg);
}
