//! Randomized equivalence suites between the fast operators and their
//! brute-force references.

use serde::{Deserialize, Serialize};

use crate::attention::{
    fuse, pairwise_attention, triadic_attention_naive, triadic_attention_restricted, triadic_attention_windowed,
    FusionParams, HeadInputs,
};
use crate::blocks::{blocked_attention, plan_blocks, BlockMode, BlockPlan};
use crate::error::Result;
use crate::tensor::{Rng, Tensor};

pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_abs_err: f64,
    pub tol: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err <= self.tol
    }
}

fn random_inputs(len: usize, d_head: usize, masked: bool, rng: &mut Rng) -> HeadInputs<f64> {
    let mut h = HeadInputs::random(len, d_head, rng);
    if masked {
        for m in h.mask.iter_mut() {
            *m = rng.bernoulli(0.8);
        }
    }
    h
}

/// Windowed triadic attention with `w = 2L − 1` against the full `(j, k)`
/// grid, for every `L` in `2..=max_len`, head widths 1, 2 and 4, and `seeds`
/// random draws (every other one with a random mask).
pub fn windowed_vs_naive(max_len: usize, seeds: u64) -> Result<OracleReport> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..seeds {
        let mut rng = Rng::with_stream(seed, 21);
        for len in 2..=max_len {
            for dh in [1, 2, 4] {
                let h = random_inputs(len, dh, seed % 2 == 1, &mut rng);
                let naive = triadic_attention_naive(&h)?;
                let win = triadic_attention_windowed(&h, 2 * len - 1)?;
                worst = worst.max(naive.max_abs_diff(&win));
                cases += 1;
            }
        }
    }
    Ok(OracleReport {
        name: "windowed_vs_naive".into(),
        cases,
        max_abs_err: worst,
        tol: ORACLE_TOL,
    })
}

/// Per-block operators on sliced inputs, outputs averaged over the blocks
/// covering each position.
pub fn direct_blocked(
    h: &HeadInputs<f64>,
    plan: &BlockPlan,
    w: usize,
    mode: BlockMode,
    fusion: &FusionParams<f64>,
) -> Result<Tensor<f64>> {
    let r = w / 2;
    let (len, dh) = (h.len(), h.d_head());
    let mut sum = vec![0.0; len * dh];
    for &(a, b) in &plan.blocks {
        let part = h.slice(a..b);
        let o2 = pairwise_attention(&part)?;
        let o3 = triadic_attention_restricted(&part, |i, j, k| i.abs_diff(j) <= r && i.abs_diff(k) <= r)?;
        let o = match mode {
            BlockMode::PairwiseOnly => o2,
            BlockMode::TriadicOnly => o3,
            BlockMode::Homa => fuse(&o2, &o3, fusion)?,
        };
        for row in 0..b - a {
            for c in 0..dh {
                sum[(a + row) * dh + c] += o.at2(row, c);
            }
        }
    }
    for p in 0..len {
        for c in 0..dh {
            sum[p * dh + c] /= plan.coverage[p] as f64;
        }
    }
    Tensor::from_vec(&[len, dh], sum)
}

/// `blocked_attention` against [`direct_blocked`] in all three modes, at a
/// plan with overlap and at the single-block plan of the same length.
pub fn blocked_vs_direct(len: usize, block_len: usize, stride: usize, w: usize, seeds: u64) -> Result<OracleReport> {
    let plans = [plan_blocks(len, block_len, stride)?, BlockPlan::single(len)?];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..seeds {
        let mut rng = Rng::with_stream(seed, 22);
        let h = random_inputs(len, 4, true, &mut rng);
        let mut fusion = FusionParams::<f64>::init(4, &mut rng);
        fusion.b1 = Tensor::randn(&[FusionParams::<f64>::hidden(4)], 0.5, &mut rng);
        for plan in &plans {
            for mode in [BlockMode::PairwiseOnly, BlockMode::TriadicOnly, BlockMode::Homa] {
                let got = blocked_attention(&h, plan, w, mode, Some(&fusion))?;
                worst = worst.max(got.max_abs_diff(&direct_blocked(&h, plan, w, mode, &fusion)?));
                cases += 1;
            }
        }
    }
    Ok(OracleReport {
        name: format!("blocked_vs_direct(L={len}, ell={block_len}, s={stride}, w={w})"),
        cases,
        max_abs_err: worst,
        tol: ORACLE_TOL,
    })
}
