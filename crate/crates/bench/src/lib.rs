//! Fixtures shared by the criterion benchmarks.

use homa_core::attention::HeadInputs;
use homa_core::harness::BenchConfig;
use homa_core::{Rng, URank};

/// Sequence lengths swept by the kernel benchmarks.
pub const LENGTHS: [usize; 3] = [32, 64, 128];

/// Window sizes swept by the windowed triadic benchmark.
pub const WINDOWS: [usize; 4] = [3, 5, 7, 9];

pub const D_HEAD: usize = 32;

/// Fixed random single-head inputs.
pub fn head_inputs(len: usize, seed: u64) -> HeadInputs<f64> {
    HeadInputs::random(len, D_HEAD, &mut Rng::new(seed))
}

/// Small two-layer training workload for `kind` at width 64.
pub fn step_config(kind: homa_core::AttentionKind, seq_len: usize) -> BenchConfig {
    let mut cfg = BenchConfig::profile("fs", 2, 4, seq_len).expect("fs profile exists");
    let a = &mut cfg.model.attention;
    a.kind = kind;
    a.d_model = 64;
    a.heads = 4;
    a.rank = URank::Low(8);
    a.linformer_k = a.linformer_k.min(seq_len);
    cfg.model.ffn_dim = 128;
    cfg
}
