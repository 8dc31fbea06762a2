//! Overlapping block decomposition, overlap-averaged merging, the low-rank
//! `U` projection and analytic cost accounting.

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, BlockLayout, FusionParams, FusionVars, HeadInputs, NAIVE_MAX_LEN,
};
use crate::config::{AttentionConfig, AttentionKind, URank};
use crate::error::{HomaError, Result};
use crate::tensor::{Real, Rng, Tape, Tensor, Var};

/// Ordered `[start, end)` blocks over a sequence plus per-position coverage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub len: usize,
    pub block_len: usize,
    pub stride: usize,
    pub blocks: Vec<(usize, usize)>,
    pub coverage: Vec<usize>,
    /// Blocks at starts `0, s, 2s, ...` before the tail block is appended.
    pub base_blocks: usize,
}

/// Plans blocks of length `block_len` at stride `stride` over `len`
/// positions. When the last base block stops short of `len`, a tail block
/// `[len - block_len, len)` is appended so every position is covered.
pub fn plan_blocks(len: usize, block_len: usize, stride: usize) -> Result<BlockPlan> {
    if len == 0 || block_len == 0 || stride == 0 {
        return Err(HomaError::invalid(format!(
            "block plan needs positive sizes, got L={len} l={block_len} s={stride}"
        )));
    }
    if block_len > len {
        return Err(HomaError::invalid(format!(
            "block length {block_len} exceeds sequence length {len}; clamp it first"
        )));
    }
    if stride > block_len {
        return Err(HomaError::invalid(format!(
            "stride {stride} exceeds block length {block_len} and would leave gaps"
        )));
    }
    let base_blocks = (len - block_len) / stride + 1;
    let mut blocks: Vec<(usize, usize)> = (0..base_blocks)
        .map(|t| (t * stride, t * stride + block_len))
        .collect();
    if blocks.last().is_some_and(|&(_, end)| end < len) {
        blocks.push((len - block_len, len));
    }
    let mut coverage = vec![0usize; len];
    for &(a, b) in &blocks {
        for c in &mut coverage[a..b] {
            *c += 1;
        }
    }
    Ok(BlockPlan {
        len,
        block_len,
        stride,
        blocks,
        coverage,
        base_blocks,
    })
}

impl BlockPlan {
    /// Like [`plan_blocks`] but clamps the block length to the sequence
    /// length and the stride to the block length.
    pub fn clamped(len: usize, block_len: usize, stride: usize) -> Result<Self> {
        let l = block_len.min(len);
        plan_blocks(len, l, stride.min(l))
    }

    pub fn single(len: usize) -> Result<Self> {
        plan_blocks(len, len, len)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn has_tail(&self) -> bool {
        self.blocks.len() > self.base_blocks
    }

    pub fn is_single(&self) -> bool {
        self.blocks.len() == 1
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout::uniform(self.blocks.len(), self.block_len)
    }

    /// Source position of every row in the stacked block layout.
    pub fn gather_index(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|&(a, b)| a..b).collect()
    }

    pub fn stacked_mask(&self, mask: &[bool]) -> Vec<bool> {
        self.gather_index().into_iter().map(|p| mask[p]).collect()
    }
}

/// `out[p] = sum over blocks b covering p of outputs[b][p - start_b] / coverage[p]`.
pub fn merge_overlap<T: Real>(outputs: &[Tensor<T>], plan: &BlockPlan) -> Result<Tensor<T>> {
    if outputs.len() != plan.blocks.len() {
        return Err(HomaError::invalid(format!(
            "merge got {} block outputs for a plan of {} blocks",
            outputs.len(),
            plan.blocks.len()
        )));
    }
    let width = outputs.first().map_or(0, |t| t.cols());
    for o in outputs {
        if o.shape() != [plan.block_len, width] {
            return Err(HomaError::ShapeMismatch {
                op: "merge_overlap",
                left: o.shape().to_vec(),
                right: vec![plan.block_len, width],
            });
        }
    }
    let mut data = Vec::with_capacity(outputs.len() * plan.block_len * width);
    for o in outputs {
        data.extend_from_slice(o.data());
    }
    let stacked = Tensor::from_vec(&[outputs.len() * plan.block_len, width], data)?;
    Ok(merge_stacked(&stacked, plan))
}

fn merge_stacked<T: Real>(stacked: &Tensor<T>, plan: &BlockPlan) -> Tensor<T> {
    let width = stacked.cols();
    let mut out = Tensor::zeros(&[plan.len, width]);
    for (row, p) in plan.gather_index().into_iter().enumerate() {
        for (acc, &x) in out.row_mut(p).iter_mut().zip(stacked.row(row)) {
            *acc = *acc + x;
        }
    }
    for (p, &c) in plan.coverage.iter().enumerate() {
        let inv = T::one() / T::c(c as f64);
        for x in out.row_mut(p) {
            *x = *x * inv;
        }
    }
    out
}

/// Overlap-averaged merge of a stacked `[blocks * block_len, d]` tensor,
/// recorded on the tape.
pub fn merge_on_tape<T: Real>(tape: &mut Tape<T>, stacked: Var, plan: &BlockPlan) -> Result<Var> {
    let rows = plan.blocks.len() * plan.block_len;
    let shape = tape.shape(stacked);
    if shape.len() != 2 || shape[0] != rows {
        return Err(HomaError::ShapeMismatch {
            op: "merge_overlap",
            left: shape.to_vec(),
            right: vec![rows],
        });
    }
    let value = merge_stacked(tape.value(stacked), plan);
    let index = plan.gather_index();
    let coverage = plan.coverage.clone();
    tape.push_op(
        "merge_overlap",
        value,
        vec![stacked],
        Box::new(move |g, _, _| {
            let width = g.cols();
            let mut d = Tensor::zeros(&[index.len(), width]);
            for (row, &p) in index.iter().enumerate() {
                let inv = T::one() / T::c(coverage[p] as f64);
                for (dst, &x) in d.row_mut(row).iter_mut().zip(g.row(p)) {
                    *dst = x * inv;
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Which pathways a blocked attention call evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    PairwiseOnly,
    TriadicOnly,
    Homa,
}

/// Already-projected per-layer attention inputs on a tape, each `[L, d]`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedInputs {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub u: Option<Var>,
}

/// Multi-head blocked attention: gather rows into blocks, run the selected
/// pathways per block and head, fuse per head, then overlap-average back to
/// `[L, d]`. The output projection is left to the caller.
#[allow(clippy::too_many_arguments)]
pub fn blocked_multihead<T: Real>(
    tape: &mut Tape<T>,
    inputs: ProjectedInputs,
    mask: &[bool],
    plan: &BlockPlan,
    heads: usize,
    w: usize,
    mode: BlockMode,
    fusion: Option<FusionVars>,
) -> Result<Var> {
    let (len, d) = match tape.shape(inputs.q) {
        &[l, d] => (l, d),
        s => {
            return Err(HomaError::invalid(format!(
                "blocked attention expects [L, d] inputs, got {s:?}"
            )))
        }
    };
    if len != plan.len || mask.len() != len {
        return Err(HomaError::invalid(format!(
            "plan covers {} positions but inputs have {len} rows and mask {}",
            plan.len,
            mask.len()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(HomaError::invalid(format!(
            "width {d} not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let needs_u = mode != BlockMode::PairwiseOnly;
    let u = match (needs_u, inputs.u) {
        (true, None) => return Err(HomaError::invalid("triadic pathway needs a U input")),
        (_, u) => u,
    };

    let single = plan.is_single();
    let index = plan.gather_index();
    let gather = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        if single {
            Ok(x)
        } else {
            tape.gather_rows(x, &index)
        }
    };
    let q = gather(tape, inputs.q)?;
    let k = gather(tape, inputs.k)?;
    let v = gather(tape, inputs.v)?;
    let u = match u {
        Some(u) if needs_u => Some(gather(tape, u)?),
        _ => None,
    };
    let smask = if single {
        mask.to_vec()
    } else {
        plan.stacked_mask(mask)
    };
    let layout = plan.layout();
    let rows = layout.blocks * layout.query_len;

    let o2 = match mode {
        BlockMode::TriadicOnly => None,
        _ => Some(attention::pairwise_multihead(
            tape, q, k, v, &smask, &smask, layout, heads,
        )?),
    };
    let o3 = match (mode, u) {
        (BlockMode::PairwiseOnly, _) => None,
        (_, Some(u)) => Some(attention::triadic_multihead(
            tape, q, k, v, u, &smask, layout, heads, w,
        )?),
        (_, None) => unreachable!(),
    };
    let stacked = match (o2, o3) {
        (Some(o), None) | (None, Some(o)) => o,
        (Some(o2), Some(o3)) => {
            let p = fusion.ok_or_else(|| HomaError::invalid("HOMA mode needs fusion parameters"))?;
            let a = tape.reshape(o2, &[rows * heads, dh])?;
            let b = tape.reshape(o3, &[rows * heads, dh])?;
            let f = attention::fuse_on_tape(tape, a, b, p)?;
            tape.reshape(f, &[rows, d])?
        }
        (None, None) => unreachable!(),
    };
    if single {
        Ok(stacked)
    } else {
        merge_on_tape(tape, stacked, plan)
    }
}

/// Single-head blocked attention on plain tensors.
pub fn blocked_attention<T: Real>(
    h: &HeadInputs<T>,
    plan: &BlockPlan,
    w: usize,
    mode: BlockMode,
    fusion: Option<&FusionParams<T>>,
) -> Result<Tensor<T>> {
    h.validate()?;
    let mut tape = Tape::new();
    let inputs = ProjectedInputs {
        q: tape.constant(h.q.clone()),
        k: tape.constant(h.k.clone()),
        v: tape.constant(h.v.clone()),
        u: Some(tape.constant(h.u.clone())),
    };
    let fusion = match fusion {
        Some(p) => {
            p.validate()?;
            Some(FusionVars::constants(&mut tape, p))
        }
        None => None,
    };
    let out = blocked_multihead(&mut tape, inputs, &h.mask, plan, 1, w, mode, fusion)?;
    Ok(tape.value(out).clone())
}

/// Triadic projection weights: either a full `d x d` matrix or a rank-`r`
/// factorization `W_u (d x r) * W_v (r x d)`.
#[derive(Debug, Clone, PartialEq)]
pub enum LowRankU<T> {
    Full(Tensor<T>),
    Factored { wu: Tensor<T>, wv: Tensor<T> },
}

impl<T: Real> LowRankU<T> {
    pub fn init(d_model: usize, rank: URank, rng: &mut Rng) -> Self {
        let std_in = 1.0 / (d_model as f64).sqrt();
        match rank {
            URank::Full => LowRankU::Full(Tensor::randn(&[d_model, d_model], std_in, rng)),
            URank::Low(r) => LowRankU::Factored {
                wu: Tensor::randn(&[d_model, r], std_in, rng),
                wv: Tensor::randn(&[r, d_model], 1.0 / (r as f64).sqrt(), rng),
            },
        }
    }

    pub fn d_model(&self) -> usize {
        match self {
            LowRankU::Full(w) => w.rows(),
            LowRankU::Factored { wu, .. } => wu.rows(),
        }
    }

    pub fn rank(&self) -> URank {
        match self {
            LowRankU::Full(_) => URank::Full,
            LowRankU::Factored { wu, .. } => URank::Low(wu.cols()),
        }
    }

    pub fn numel(&self) -> usize {
        u_param_count(self.d_model(), self.rank())
    }

    /// The `d x d` product matrix. Only for inspection and tests.
    pub fn dense(&self) -> Result<Tensor<T>> {
        match self {
            LowRankU::Full(w) => Ok(w.clone()),
            LowRankU::Factored { wu, wv } => wu.matmul(wv),
        }
    }
}

pub fn u_param_count(d_model: usize, rank: URank) -> usize {
    match rank {
        URank::Full => d_model * d_model,
        URank::Low(r) => 2 * d_model * r,
    }
}

/// `X * W_U`, as `(X * W_u) * W_v` in factored mode.
pub fn project_u<T: Real>(x: &Tensor<T>, u: &LowRankU<T>) -> Result<Tensor<T>> {
    match u {
        LowRankU::Full(w) => x.matmul(w),
        LowRankU::Factored { wu, wv } => x.matmul(wu)?.matmul(wv),
    }
}

/// Tape handles for a [`LowRankU`].
#[derive(Debug, Clone, Copy)]
pub enum UVars {
    Full(Var),
    Factored { wu: Var, wv: Var },
}

pub fn project_u_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, u: UVars) -> Result<Var> {
    match u {
        UVars::Full(w) => tape.matmul(x, w),
        UVars::Factored { wu, wv } => {
            let h = tape.matmul(x, wu)?;
            tape.matmul(h, wv)
        }
    }
}

/// Parameters of the fusion MLP for one layer.
pub fn fusion_param_count(d_head: usize) -> usize {
    let h = FusionParams::<f64>::hidden(d_head);
    2 * d_head * h + h + h * d_head + d_head
}

/// Analytic cost of one attention sublayer on one sequence of length `L`.
///
/// A multiply-add counts as two flops. Pairwise attention costs
/// `2 l^2 dh` for scores and `2 l^2 dh` for the weighted values per block and
/// head. A triadic score is a three-way product, `3 dh` per `(j, k)` pair, and
/// the quadratic value `V_j * V_k` weighted into the output costs `2 dh`, giving
/// `3 l w^2 dh + 2 l w^2 dh`. Window counts use the full `w^2` grid even
/// where it is clipped at block edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub attention: AttentionKind,
    pub seq_len: usize,
    /// Blocks actually evaluated, including a tail block.
    pub blocks: usize,
    pub base_blocks: usize,
    pub pairwise_flops: u64,
    pub triadic_flops: u64,
    /// Score entries held per head: pairwise plus triadic.
    pub score_elems: u64,
    pub pairwise_score_elems: u64,
    pub triadic_score_elems: u64,
    /// Parameters of one attention sublayer.
    pub params_total: u64,
    /// Parameters owned by the triadic pathway (U projection and fusion).
    pub params_triadic: u64,
    /// Elements of the full `L^3` triadic score tensor.
    pub naive_triadic_elems: u64,
    pub naive_feasible: bool,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.pairwise_flops + self.triadic_flops
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn cost_report(cfg: &AttentionConfig, seq_len: usize) -> Result<CostReport> {
    cfg.validate()?;
    if seq_len == 0 {
        return Err(HomaError::invalid("cost report needs a positive length"));
    }
    let d = cfg.d_model as u64;
    let h = cfg.heads as u64;
    let dh = cfg.d_head() as u64;
    let len = seq_len as u64;
    let (blocks, base_blocks, ell) = if cfg.kind.is_blocked() {
        let plan = BlockPlan::clamped(seq_len, cfg.block_len, cfg.stride)?;
        (plan.num_blocks(), plan.base_blocks, plan.block_len)
    } else {
        (1, 1, seq_len)
    };
    let t = blocks as u64;
    let l = ell as u64;
    let projections = 4 * d * d;

    let (pair_elems, pairwise_flops, extra_params) = match cfg.kind {
        AttentionKind::Linear2d => {
            let k = cfg.linformer_k as u64;
            let e = cfg.max_len as u64 * k;
            let ef = if cfg.share_kv_projection { e } else { 2 * e };
            (len * k, 4 * len * k * dh * h, ef)
        }
        _ => (t * l * l, 4 * t * l * l * dh * h, 0),
    };
    let (tri_elems, triadic_flops, params_triadic) = if cfg.kind == AttentionKind::Homa {
        let w2 = (cfg.window * cfg.window) as u64;
        let p = u_param_count(cfg.d_model, cfg.rank) + fusion_param_count(cfg.d_head());
        (t * l * w2, 5 * t * l * w2 * dh * h, p as u64)
    } else {
        (0, 0, 0)
    };
    let naive = len * len * len;
    Ok(CostReport {
        attention: cfg.kind,
        seq_len,
        blocks,
        base_blocks,
        pairwise_flops,
        triadic_flops,
        score_elems: pair_elems + tri_elems,
        pairwise_score_elems: pair_elems,
        triadic_score_elems: tri_elems,
        params_total: projections + extra_params + params_triadic,
        params_triadic,
        naive_triadic_elems: naive,
        naive_feasible: seq_len <= NAIVE_MAX_LEN,
    })
}
