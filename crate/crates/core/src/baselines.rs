//! Comparison attention sublayers: global pairwise, overlapping blockwise
//! pairwise and low-rank sequence-projected attention.

use crate::attention::{self, BlockLayout};
use crate::blocks::{blocked_multihead, BlockMode, BlockPlan, ProjectedInputs};
use crate::config::{AttentionConfig, AttentionKind};
use crate::error::{HomaError, Result};
use crate::layer::{attention_layer, project_qkv, LayerParams, LayerVars};
use crate::tensor::{Real, Tape, Tensor, Var};

fn pairwise_over_plan<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    heads: usize,
    plan: &BlockPlan,
) -> Result<Var> {
    let (q, k, v) = project_qkv(tape, x, p)?;
    let inputs = ProjectedInputs { q, k, v, u: None };
    let o = blocked_multihead(tape, inputs, mask, plan, heads, 1, BlockMode::PairwiseOnly, None)?;
    tape.matmul(o, p.wo)
}

/// Multi-head self-attention over the whole sequence.
pub fn global_pairwise_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let plan = BlockPlan::single(tape.shape(x)[0])?;
    pairwise_over_plan(tape, x, p, mask, heads, &plan)
}

/// Multi-head self-attention within overlapping blocks, merged by
/// overlap-averaging. Uses the same plan and merge as the HOMA layer.
pub fn blockwise2d_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    heads: usize,
    block_len: usize,
    stride: usize,
) -> Result<Var> {
    let plan = BlockPlan::clamped(tape.shape(x)[0], block_len, stride)?;
    pairwise_over_plan(tape, x, p, mask, heads, &plan)
}

/// Attention against `k` projected key/value slots: `Kp = E[:L]^T K`,
/// `Vp = F[:L]^T V`. Padded rows of `K` and `V` are zeroed first so they
/// contribute nothing to any slot.
pub fn linformer_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let e = p
        .lin_e
        .ok_or_else(|| HomaError::invalid("low-rank layer needs an E projection"))?;
    let f = p.lin_f.unwrap_or(e);
    let len = tape.shape(x)[0];
    let max_len = tape.shape(e)[0];
    if len > max_len || mask.len() != len {
        return Err(HomaError::invalid(format!(
            "sequence of {len} rows (mask {}) exceeds projection length {max_len}",
            mask.len()
        )));
    }
    let kslots = tape.shape(e)[1];
    let (q, k, v) = project_qkv(tape, x, p)?;
    let d = tape.shape(k)[1];
    let keep: Vec<T> = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, d))
        .collect();
    let keep = Tensor::from_vec(&[len, d], keep)?;
    let k = tape.mul_const(k, keep.clone())?;
    let v = tape.mul_const(v, keep)?;
    let prefix: Vec<usize> = (0..len).collect();
    let project = |tape: &mut Tape<T>, m: Var, x: Var| -> Result<Var> {
        let m = if len == max_len { m } else { tape.gather_rows(m, &prefix)? };
        let mt = tape.transpose(m)?;
        tape.matmul(mt, x)
    };
    let kp = project(tape, e, k)?;
    let vp = project(tape, f, v)?;
    let layout = BlockLayout {
        blocks: 1,
        query_len: len,
        key_len: kslots,
    };
    let slots = vec![true; kslots];
    let o = attention::pairwise_multihead(tape, q, kp, vp, mask, &slots, layout, heads)?;
    tape.matmul(o, p.wo)
}

fn with_kind(kind: AttentionKind, d_model: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        kind,
        d_model,
        heads,
        ..AttentionConfig::default()
    }
}

pub fn global_pairwise_layer<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    mask: &[bool],
    heads: usize,
) -> Result<Tensor<T>> {
    let cfg = with_kind(AttentionKind::Pairwise2d, x.cols(), heads);
    attention_layer(x, p, mask, &cfg)
}

pub fn blockwise2d_layer<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    mask: &[bool],
    heads: usize,
    block_len: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let cfg = AttentionConfig {
        block_len,
        stride,
        ..with_kind(AttentionKind::Blockwise2d, x.cols(), heads)
    };
    attention_layer(x, p, mask, &cfg)
}

pub fn linformer_layer<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    mask: &[bool],
    heads: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = LayerVars::constants(&mut tape, p);
    let out = linformer_on_tape(&mut tape, xv, &vars, mask, heads)?;
    Ok(tape.value(out).clone())
}
