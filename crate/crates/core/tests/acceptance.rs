//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use homa_core::attention::{
    fuse, pairwise_attention, pairwise_with_weights, triadic_attention_naive, triadic_attention_restricted,
    triadic_attention_windowed, triadic_weights_naive, triadic_windowed_with_weights, FusionParams, HeadInputs,
};
use homa_core::blocks::{blocked_attention, cost_report, plan_blocks, u_param_count, BlockMode, BlockPlan};
use homa_core::gradcheck::DEFAULT_TOL;
use homa_core::harness::{measure_peak_memory, measure_throughput_interleaved, Axis, BenchConfig, BenchSpec, CountingAlloc};
use homa_core::model::metrics::{macro_f1, q3_accuracy, spearman};
use homa_core::model::{evaluate, make_match3_dataset, model_gradcheck, train, TrainConfig};
use homa_core::tokenizer::{build_vocab, decode, encode, LabeledExample, Record, IGNORE_INDEX, RESIDUES};
use homa_core::{build_model, AttentionConfig, AttentionKind, ModelConfig, Rng, Task, Tensor, URank};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn masked_inputs(len: usize, dh: usize, rng: &mut Rng) -> HeadInputs<f64> {
    let mut h = HeadInputs::random(len, dh, rng);
    for m in h.mask.iter_mut() {
        *m = rng.bernoulli(0.8);
    }
    h
}

fn windowed_equals_naive() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        for len in 2..=16 {
            for dh in [1, 2, 4] {
                let h = if seed % 2 == 0 {
                    HeadInputs::random(len, dh, &mut rng)
                } else {
                    masked_inputs(len, dh, &mut rng)
                };
                let naive = triadic_attention_naive(&h).map_err(|e| e.to_string())?;
                let win = triadic_attention_windowed(&h, 2 * len - 1).map_err(|e| e.to_string())?;
                worst = worst.max(naive.max_abs_diff(&win));
                cases += 1;
            }
        }
    }
    check(worst <= 1e-12, format!("{cases} cases, max abs err {worst:.2e}"))
}

fn direct_blocked(
    h: &HeadInputs<f64>,
    plan: &BlockPlan,
    w: usize,
    mode: BlockMode,
    fusion: &FusionParams<f64>,
) -> Tensor<f64> {
    let r = w / 2;
    let (len, dh) = (h.len(), h.d_head());
    let mut sum = vec![0.0; len * dh];
    let mut count = vec![0usize; len];
    for &(a, b) in &plan.blocks {
        let part = h.slice(a..b);
        let o2 = pairwise_attention(&part).unwrap();
        let o3 = triadic_attention_restricted(&part, |i, j, k| i.abs_diff(j) <= r && i.abs_diff(k) <= r).unwrap();
        let o = match mode {
            BlockMode::PairwiseOnly => o2,
            BlockMode::TriadicOnly => o3,
            BlockMode::Homa => fuse(&o2, &o3, fusion).unwrap(),
        };
        for row in 0..b - a {
            count[a + row] += 1;
            for c in 0..dh {
                sum[(a + row) * dh + c] += o.at2(row, c);
            }
        }
    }
    for (p, &n) in count.iter().enumerate() {
        for c in 0..dh {
            sum[p * dh + c] /= n as f64;
        }
    }
    Tensor::from_vec(&[len, dh], sum).unwrap()
}

fn blocked_equals_direct() -> Outcome {
    let plan = plan_blocks(12, 6, 3).map_err(|e| e.to_string())?;
    let single = plan_blocks(12, 12, 12).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut degenerate = 0.0f64;
    for seed in 0..50 {
        let mut rng = Rng::new(1000 + seed);
        let h = masked_inputs(12, 4, &mut rng);
        let mut fusion = FusionParams::<f64>::init(4, &mut rng);
        fusion.b1 = Tensor::randn(&[FusionParams::<f64>::hidden(4)], 0.5, &mut rng);
        for mode in [BlockMode::PairwiseOnly, BlockMode::TriadicOnly, BlockMode::Homa] {
            let got = blocked_attention(&h, &plan, 3, mode, Some(&fusion)).map_err(|e| e.to_string())?;
            worst = worst.max(got.max_abs_diff(&direct_blocked(&h, &plan, 3, mode, &fusion)));
            let whole = blocked_attention(&h, &single, 3, mode, Some(&fusion)).map_err(|e| e.to_string())?;
            degenerate = degenerate.max(whole.max_abs_diff(&direct_blocked(&h, &single, 3, mode, &fusion)));
        }
    }
    check(
        worst <= 1e-12 && degenerate <= 1e-12,
        format!("max abs err {worst:.2e}, single-block case {degenerate:.2e}"),
    )
}

fn gradcheck_config() -> ModelConfig {
    let mut cfg = ModelConfig::profile("fs").unwrap();
    cfg.attention = AttentionConfig {
        kind: AttentionKind::Homa,
        d_model: 8,
        heads: 2,
        block_len: 6,
        stride: 3,
        window: 3,
        rank: URank::Low(2),
        max_len: 6,
        dropout: 0.0,
        ..cfg.attention
    };
    cfg.layers = 2;
    cfg.ffn_dim = 16;
    cfg.task = Task::Token;
    cfg
}

fn model_gradients() -> Outcome {
    let start = Instant::now();
    let cfg = gradcheck_config();
    let model = build_model::<f64>(&cfg).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(3);
    let letters: Vec<char> = RESIDUES.chars().collect();
    let examples: Vec<LabeledExample> = [6, 4]
        .iter()
        .map(|&n| {
            let rec = Record {
                seq: (0..n).map(|_| letters[rng.below(20)]).collect(),
                labels: Some((0..n).map(|_| rng.below(3) as u8).collect()),
                target: None,
            };
            LabeledExample::from_record(rec, 6).unwrap()
        })
        .collect();
    let reports = model_gradcheck(&model, &examples, 7, 1e-6).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= DEFAULT_TOL && secs < 300.0,
        format!(
            "{checked} parameters over {} tensors, max rel err {worst:.2e}, {secs:.1}s",
            reports.len()
        ),
    )
}

fn row_sum_deviation(weights: &Tensor<f64>, rows: usize, mask: &[bool]) -> f64 {
    let width = weights.len() / rows;
    (0..rows)
        .filter(|&i| mask[i])
        .map(|i| {
            let s: f64 = weights.data()[i * width..(i + 1) * width].iter().sum();
            (s - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn mutate_masked(h: &HeadInputs<f64>, rng: &mut Rng) -> HeadInputs<f64> {
    let mut g = h.clone();
    for t in [&mut g.q, &mut g.k, &mut g.v, &mut g.u] {
        for i in (0..t.rows()).filter(|&i| !h.mask[i]) {
            for x in t.row_mut(i) {
                *x = 50.0 * rng.normal();
            }
        }
    }
    g
}

fn unmasked_changed(a: &Tensor<f64>, b: &Tensor<f64>, mask: &[bool]) -> bool {
    (0..a.rows()).any(|i| mask[i] && a.row(i) != b.row(i))
}

fn normalization_and_masking() -> Outcome {
    let mut sum_err = 0.0f64;
    let mut changed = 0;
    let mut cases = 0;
    let plan = plan_blocks(12, 6, 3).map_err(|e| e.to_string())?;
    for seed in 0..200 {
        let mut rng = Rng::new(5000 + seed);
        let len = 2 + rng.below(11);
        let mut h = masked_inputs(len, 1 + rng.below(4), &mut rng);
        h.mask[rng.below(len)] = true;
        let (o2, a2) = pairwise_with_weights(&h).map_err(|e| e.to_string())?;
        let a3 = triadic_weights_naive(&h).map_err(|e| e.to_string())?;
        let (o3, a3w) = triadic_windowed_with_weights(&h, 5).map_err(|e| e.to_string())?;
        sum_err = sum_err
            .max(row_sum_deviation(&a2, len, &h.mask))
            .max(row_sum_deviation(&a3, len, &h.mask))
            .max(row_sum_deviation(&a3w, len, &h.mask));
        let g = mutate_masked(&h, &mut rng);
        let (p2, _) = pairwise_with_weights(&g).map_err(|e| e.to_string())?;
        let (p3, _) = triadic_windowed_with_weights(&g, 5).map_err(|e| e.to_string())?;
        let n3 = triadic_attention_naive(&g).map_err(|e| e.to_string())?;
        let n3h = triadic_attention_naive(&h).map_err(|e| e.to_string())?;
        changed += usize::from(unmasked_changed(&o2, &p2, &h.mask));
        changed += usize::from(unmasked_changed(&o3, &p3, &h.mask));
        changed += usize::from(unmasked_changed(&n3h, &n3, &h.mask));
        cases += 3;

        let hb = masked_inputs(12, 2, &mut rng);
        let gb = mutate_masked(&hb, &mut rng);
        let mut fusion = FusionParams::<f64>::init(2, &mut rng);
        fusion.b1 = Tensor::randn(&[FusionParams::<f64>::hidden(2)], 0.5, &mut rng);
        let a = blocked_attention(&hb, &plan, 3, BlockMode::Homa, Some(&fusion)).map_err(|e| e.to_string())?;
        let b = blocked_attention(&gb, &plan, 3, BlockMode::Homa, Some(&fusion)).map_err(|e| e.to_string())?;
        changed += usize::from(unmasked_changed(&a, &b, &hb.mask));
        cases += 1;
    }
    let model = build_model::<f64>(&gradcheck_config()).map_err(|e| e.to_string())?;
    for n in 1..6 {
        let a = encode(&"ACDEFG"[..n], 6).map_err(|e| e.to_string())?;
        let mut b = a.clone();
        for (id, &m) in b.ids.iter_mut().zip(&a.attention_mask) {
            if !m {
                *id = 17;
            }
        }
        let out = model.forward(&[a.clone(), b]).map_err(|e| e.to_string())?;
        changed += usize::from(unmasked_changed(&out[0], &out[1], &a.attention_mask));
        cases += 1;
    }
    check(
        sum_err <= 1e-12 && changed == 0,
        format!("max |sum - 1| {sum_err:.2e}; {changed} of {cases} masked mutations changed a visible output"),
    )
}

fn block_plan() -> Outcome {
    let p = plan_blocks(512, 30, 15).map_err(|e| e.to_string())?;
    let min_cov = p.coverage.iter().copied().min().unwrap_or(0);
    check(
        p.base_blocks == 33 && p.coverage.len() == 512 && min_cov >= 1,
        format!(
            "base T={}, {} blocks with tail {:?}, min coverage {min_cov}",
            p.base_blocks,
            p.num_blocks(),
            p.blocks.last()
        ),
    )
}

fn parameter_overhead() -> Outcome {
    let mut cfg = ModelConfig::profile("fs").map_err(|e| e.to_string())?;
    cfg.attention.kind = AttentionKind::Blockwise2d;
    let blockwise = build_model::<f32>(&cfg).map_err(|e| e.to_string())?.num_params();
    cfg.attention.kind = AttentionKind::Homa;
    cfg.attention.rank = URank::Low(8);
    let homa = build_model::<f32>(&cfg).map_err(|e| e.to_string())?.num_params();
    let overhead = homa as f64 / blockwise as f64 - 1.0;
    let low = u_param_count(256, URank::Low(8));
    let full = u_param_count(256, URank::Full);
    check(
        homa > blockwise && overhead <= 0.05 && low == 4096 && full == 65536,
        format!(
            "HOMA {homa} vs Blockwise-2D {blockwise} (+{:.2}%), U weights {low} vs {full}",
            100.0 * overhead
        ),
    )
}

fn match3_config(kind: AttentionKind, ffn_dim: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::profile("fs").unwrap();
    cfg.attention = AttentionConfig {
        kind,
        d_model: 32,
        heads: 4,
        block_len: 16,
        stride: 16,
        window: 7,
        rank: URank::Full,
        max_len: 16,
        dropout: 0.0,
        ..cfg.attention
    };
    cfg.layers = 1;
    cfg.ffn_dim = ffn_dim;
    cfg.task = Task::Classify;
    cfg.classes = 2;
    cfg.lr = 1e-3;
    cfg.seed = seed;
    cfg
}

fn params_of(cfg: &ModelConfig) -> usize {
    build_model::<f64>(cfg).unwrap().num_params()
}

fn match3_accuracy(cfg: &ModelConfig, seed: u64) -> Result<f64, String> {
    let train_set = make_match3_dataset(4000, 16, 8, seed).map_err(|e| e.to_string())?;
    let test_set = make_match3_dataset(1000, 16, 8, 10_000 + seed).map_err(|e| e.to_string())?;
    let model = build_model::<f64>(cfg).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        batch_size: 32,
        epochs: usize::MAX,
        max_steps: Some(2000),
        patience: None,
        seed,
    };
    let state = train(model, &train_set, &[], &tc).map_err(|e| e.to_string())?;
    if state.steps != 2000 {
        return Err(format!("ran {} steps instead of 2000", state.steps));
    }
    Ok(evaluate(&state.model, &test_set).map_err(|e| e.to_string())?.metric)
}

fn median3(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

fn match3_expressivity() -> Outcome {
    let start = Instant::now();
    let homa_ffn = 64;
    let target = params_of(&match3_config(AttentionKind::Homa, homa_ffn, 0));
    let pair_ffn = (homa_ffn..homa_ffn + 200)
        .min_by_key(|&f| params_of(&match3_config(AttentionKind::Pairwise2d, f, 0)).abs_diff(target))
        .unwrap();
    let pair_params = params_of(&match3_config(AttentionKind::Pairwise2d, pair_ffn, 0));
    let mut homa = Vec::new();
    let mut pair = Vec::new();
    for seed in 0..3 {
        homa.push(match3_accuracy(&match3_config(AttentionKind::Homa, homa_ffn, seed), seed)?);
        pair.push(match3_accuracy(&match3_config(AttentionKind::Pairwise2d, pair_ffn, seed), seed)?);
    }
    let (mh, mp) = (median3(homa.clone()), median3(pair.clone()));
    let secs = start.elapsed().as_secs_f64();
    check(
        mh - mp >= 0.15 && secs < 900.0,
        format!(
            "HOMA {target} params median acc {:.1}% {homa:.3?}; pairwise {pair_params} params (ffn {pair_ffn}) \
             median acc {:.1}% {pair:.3?}; margin {:.1} points (need >= 15); {secs:.0}s",
            100.0 * mh,
            100.0 * mp,
            100.0 * (mh - mp)
        ),
    )
}

fn efficiency_trends() -> Outcome {
    let base = BenchConfig::profile("fs", 2, 4, 128).map_err(|e| e.to_string())?;
    let spec = BenchSpec {
        warmup: 1,
        measured: 3,
        reps: 15,
        end_to_end: false,
    };
    let cfgs: Vec<BenchConfig> = [3, 5, 7].iter().map(|&w| Axis::W.apply(&base, w)).collect();
    let tps: Vec<f64> = measure_throughput_interleaved(&cfgs, &spec)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|t| t.tokens_per_second)
        .collect();
    let mut peaks = Vec::new();
    let mut triadic = Vec::new();
    for cfg in &cfgs {
        peaks.push(measure_peak_memory(cfg).map_err(|e| e.to_string())?);
        triadic.push(cost_report(&cfg.model.attention, cfg.seq_len).map_err(|e| e.to_string())?.triadic_flops);
    }
    let tp_down = tps[0] > tps[1] && tps[1] > tps[2];
    let peak_up = peaks[0] < peaks[1] && peaks[1] < peaks[2];
    let ratio = triadic[2] * 9 == triadic[0] * 49;
    check(
        tp_down && peak_up && ratio,
        format!(
            "tokens/s {:.0?}, peak bytes {peaks:?}, triadic flops w=7:w=3 = {}:{}",
            tps, triadic[2], triadic[0]
        ),
    )
}

fn naive_q3(p: &[usize], l: &[i64]) -> f64 {
    let mut hit = 0;
    let mut n = 0;
    for i in 0..p.len() {
        if l[i] != IGNORE_INDEX {
            n += 1;
            if p[i] as i64 == l[i] {
                hit += 1;
            }
        }
    }
    hit as f64 / n as f64
}

fn naive_f1(p: &[usize], l: &[i64]) -> f64 {
    let mut classes: Vec<i64> = Vec::new();
    for i in 0..p.len() {
        if l[i] != IGNORE_INDEX {
            for c in [l[i], p[i] as i64] {
                if !classes.contains(&c) {
                    classes.push(c);
                }
            }
        }
    }
    classes.sort_unstable();
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for i in 0..p.len() {
            if l[i] == IGNORE_INDEX {
                continue;
            }
            let (pc, lc) = (p[i] as i64 == c, l[i] == c);
            if pc && lc {
                tp += 1.0;
            } else if pc {
                fp += 1.0;
            } else if lc {
                fnn += 1.0;
            }
        }
        total += 2.0 * tp / (2.0 * tp + fp + fnn);
    }
    total / classes.len() as f64
}

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&a| {
            let less = x.iter().filter(|&&b| b < a).count() as f64;
            let equal = x.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(77);
    let (mut q3_bad, mut f1_bad, mut rho_err, mut rho_cases) = (0, 0, 0.0f64, 0);
    for _ in 0..1000 {
        let n = 1 + rng.below(40);
        let labels: Vec<i64> = (0..n)
            .map(|i| if i > 0 && rng.bernoulli(0.2) { IGNORE_INDEX } else { rng.below(3) as i64 })
            .collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        if q3_accuracy(&preds, &labels).map_err(|e| e.to_string())? != naive_q3(&preds, &labels) {
            q3_bad += 1;
        }
        if macro_f1(&preds, &labels).map_err(|e| e.to_string())? != naive_f1(&preds, &labels) {
            f1_bad += 1;
        }
        let m = 2 + rng.below(30);
        let levels = 1 + rng.below(8);
        let x: Vec<f64> = (0..m).map(|_| rng.below(levels) as f64).collect();
        let y: Vec<f64> = (0..m).map(|_| (rng.normal() * 3.0).round()).collect();
        let expect = naive_spearman(&x, &y);
        match spearman(&x, &y) {
            Ok(r) => {
                rho_err = rho_err.max((r - expect).abs());
                rho_cases += 1;
            }
            Err(_) if !expect.is_finite() => {}
            Err(e) => return Err(format!("spearman failed on defined input: {e}")),
        }
    }
    check(
        q3_bad == 0 && f1_bad == 0 && rho_err <= 1e-12,
        format!(
            "1000 cases: Q3 mismatches {q3_bad}, F1 mismatches {f1_bad}, rho max err {rho_err:.2e} over {rho_cases} defined cases"
        ),
    )
}

fn tokenizer_round_trip() -> Outcome {
    let vocab = build_vocab();
    let letters: Vec<char> = RESIDUES.chars().collect();
    let mut rng = Rng::new(10);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(64);
        let s: String = (0..n).map(|_| letters[rng.below(letters.len())]).collect();
        let enc = encode(&s, 64).map_err(|e| e.to_string())?;
        if decode(&enc.ids).map_err(|e| e.to_string())? != s {
            bad += 1;
        }
    }
    check(
        vocab.len() == 30 && vocab.residue_count() == 25 && bad == 0,
        format!(
            "vocab {} tokens, {} residues, {bad} of 1000 round trips failed",
            vocab.len(),
            vocab.residue_count()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("windowed triadic attention with w >= 2L-1 equals naive", windowed_equals_naive),
        ("blocked attention equals direct per-block materialization", blocked_equals_direct),
        ("2-layer model gradient check", model_gradients),
        ("normalization and masked-content invariance", normalization_and_masking),
        ("block plan at L=512, ell=30, s=15", block_plan),
        ("parameter overhead at fs settings", parameter_overhead),
        ("match3 expressivity", match3_expressivity),
        ("efficiency trends over w = 3, 5, 7", efficiency_trends),
        ("metric oracles", metric_oracles),
        ("tokenizer vocabulary and round trip", tokenizer_round_trip),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Some(pos) = args.iter().position(|a| a == CHILD_FLAG) {
        let id: usize = args.get(pos + 1).and_then(|a| a.parse().ok()).unwrap_or(0);
        let Some((name, run)) = id.checked_sub(1).and_then(|i| criteria.get(i)) else {
            eprintln!("unknown criterion {id}");
            return ExitCode::from(2);
        };
        return run_one(id, name, *run);
    }
    let only: Option<usize> = args.iter().find_map(|a| a.parse().ok());
    let exe = std::env::current_exe().expect("test binary path");
    let mut failed = 0;
    for (i, (name, _)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let status = Command::new(&exe).arg(CHILD_FLAG).arg(id.to_string()).status();
        match status {
            Ok(s) if s.success() => {}
            Ok(_) => failed += 1,
            Err(e) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: could not start: {e}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

/// Each criterion runs in a fresh process so timing and allocation figures
/// start from a clean heap.
const CHILD_FLAG: &str = "--criterion";

fn run_one(id: usize, name: &str, run: fn() -> Outcome) -> ExitCode {
    let t = Instant::now();
    let outcome = run();
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)");
            ExitCode::SUCCESS
        }
        Err(detail) => {
            println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)");
            ExitCode::FAILURE
        }
    }
}
