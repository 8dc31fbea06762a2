//! Attention sublayer parameters and the dispatch shared by every variant.

use crate::attention::{FusionParams, FusionVars};
use crate::baselines;
use crate::blocks::{
    blocked_multihead, project_u_on_tape, BlockMode, BlockPlan, LowRankU, ProjectedInputs, UVars,
};
use crate::config::{AttentionConfig, AttentionKind};
use crate::error::{HomaError, Result};
use crate::tensor::{ParamStore, Real, Rng, Tape, Tensor, Var};

/// Sequence-length projections of the low-rank baseline, `max_len x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinformerParams<T> {
    pub e: Tensor<T>,
    /// `None` when keys and values share `e`.
    pub f: Option<Tensor<T>>,
}

impl<T: Real> LinformerParams<T> {
    pub fn init(max_len: usize, k: usize, shared: bool, rng: &mut Rng) -> Self {
        let std = 1.0 / (k as f64).sqrt();
        let e = Tensor::randn(&[max_len, k], std, rng);
        let f = (!shared).then(|| Tensor::randn(&[max_len, k], std, rng));
        LinformerParams { e, f }
    }

    pub fn k(&self) -> usize {
        self.e.cols()
    }
}

/// Weights of one attention sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub u: Option<LowRankU<T>>,
    pub fusion: Option<FusionParams<T>>,
    pub linformer: Option<LinformerParams<T>>,
}

impl<T: Real> LayerParams<T> {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = || Tensor::randn(&[d, d], std, rng);
        let (wq, wk, wv, wo) = (proj(), proj(), proj(), proj());
        let homa = cfg.kind == AttentionKind::Homa;
        let u = homa.then(|| LowRankU::init(d, cfg.rank, rng));
        let fusion = homa.then(|| FusionParams::init(cfg.d_head(), rng));
        let linformer = (cfg.kind == AttentionKind::Linear2d).then(|| {
            LinformerParams::init(cfg.max_len, cfg.linformer_k, cfg.share_kv_projection, rng)
        });
        Ok(LayerParams {
            wq,
            wk,
            wv,
            wo,
            u,
            fusion,
            linformer,
        })
    }

    /// Named tensors, in registration order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ];
        match &self.u {
            Some(LowRankU::Full(w)) => out.push(("u", w)),
            Some(LowRankU::Factored { wu, wv }) => {
                out.push(("u_u", wu));
                out.push(("u_v", wv));
            }
            None => {}
        }
        if let Some(f) = &self.fusion {
            out.extend([
                ("fuse_w1", &f.w1),
                ("fuse_b1", &f.b1),
                ("fuse_w2", &f.w2),
                ("fuse_b2", &f.b2),
            ]);
        }
        if let Some(l) = &self.linformer {
            out.push(("lin_e", &l.e));
            if let Some(f) = &l.f {
                out.push(("lin_f", f));
            }
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn register(&self, store: &mut ParamStore<T>, prefix: &str) {
        for (name, t) in self.named() {
            store.add(format!("{prefix}{name}"), t.clone());
        }
    }
}

/// Names of the pairwise pathway projections.
pub const PAIRWISE_PROJECTIONS: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Tape handles for a [`LayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub u: Option<UVars>,
    pub fusion: Option<FusionVars>,
    pub lin_e: Option<Var>,
    pub lin_f: Option<Var>,
}

impl LayerVars {
    fn build<T: Real>(
        tape: &mut Tape<T>,
        p: &LayerParams<T>,
        mut bind: impl FnMut(&mut Tape<T>, &Tensor<T>) -> Var,
    ) -> Self {
        let wq = bind(tape, &p.wq);
        let wk = bind(tape, &p.wk);
        let wv = bind(tape, &p.wv);
        let wo = bind(tape, &p.wo);
        let u = p.u.as_ref().map(|u| match u {
            LowRankU::Full(w) => UVars::Full(bind(tape, w)),
            LowRankU::Factored { wu, wv } => UVars::Factored {
                wu: bind(tape, wu),
                wv: bind(tape, wv),
            },
        });
        let fusion = p.fusion.as_ref().map(|f| FusionVars {
            w1: bind(tape, &f.w1),
            b1: bind(tape, &f.b1),
            w2: bind(tape, &f.w2),
            b2: bind(tape, &f.b2),
        });
        let lin_e = p.linformer.as_ref().map(|l| bind(tape, &l.e));
        let lin_f = p
            .linformer
            .as_ref()
            .and_then(|l| l.f.as_ref())
            .map(|f| bind(tape, f));
        LayerVars {
            wq,
            wk,
            wv,
            wo,
            u,
            fusion,
            lin_e,
            lin_f,
        }
    }

    pub fn constants<T: Real>(tape: &mut Tape<T>, p: &LayerParams<T>) -> Self {
        Self::build(tape, p, |t, x| t.constant(x.clone()))
    }

    pub fn leaves<T: Real>(tape: &mut Tape<T>, p: &LayerParams<T>) -> Self {
        Self::build(tape, p, |t, x| t.leaf(x.clone()))
    }

    /// Binds the parameters registered under `prefix` by
    /// [`LayerParams::register`], as constants when `constant` is set.
    pub fn from_store<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        constant: bool,
    ) -> Result<Self> {
        let mut get = |name: &str| -> Option<Var> {
            store.id(&format!("{prefix}{name}")).map(|id| {
                if constant {
                    tape.param_constant(store, id)
                } else {
                    tape.param(store, id)
                }
            })
        };
        let req = |v: Option<Var>, name: &str| {
            v.ok_or_else(|| HomaError::invalid(format!("missing parameter {prefix}{name}")))
        };
        let wq = req(get("wq"), "wq")?;
        let wk = req(get("wk"), "wk")?;
        let wv = req(get("wv"), "wv")?;
        let wo = req(get("wo"), "wo")?;
        let u = match (get("u"), get("u_u"), get("u_v")) {
            (Some(w), None, None) => Some(UVars::Full(w)),
            (None, Some(wu), Some(wv)) => Some(UVars::Factored { wu, wv }),
            (None, None, None) => None,
            _ => return Err(HomaError::invalid(format!("inconsistent U parameters under {prefix}"))),
        };
        let fusion = match (get("fuse_w1"), get("fuse_b1"), get("fuse_w2"), get("fuse_b2")) {
            (Some(w1), Some(b1), Some(w2), Some(b2)) => Some(FusionVars { w1, b1, w2, b2 }),
            (None, None, None, None) => None,
            _ => return Err(HomaError::invalid(format!("incomplete fusion parameters under {prefix}"))),
        };
        Ok(LayerVars {
            wq,
            wk,
            wv,
            wo,
            u,
            fusion,
            lin_e: get("lin_e"),
            lin_f: get("lin_f"),
        })
    }
}

pub(crate) fn project_qkv<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
) -> Result<(Var, Var, Var)> {
    Ok((tape.matmul(x, p.wq)?, tape.matmul(x, p.wk)?, tape.matmul(x, p.wv)?))
}

/// HOMA sublayer: shared projections, blocked pairwise and windowed triadic
/// heads fused per head, merged, then the output projection.
pub fn homa_layer_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Var> {
    let len = tape.shape(x)[0];
    let uvars = p.u.ok_or_else(|| HomaError::invalid("HOMA layer needs U parameters"))?;
    let (q, k, v) = project_qkv(tape, x, p)?;
    let u = project_u_on_tape(tape, x, uvars)?;
    let plan = BlockPlan::clamped(len, cfg.block_len, cfg.stride)?;
    let inputs = ProjectedInputs {
        q,
        k,
        v,
        u: Some(u),
    };
    let o = blocked_multihead(tape, inputs, mask, &plan, cfg.heads, cfg.window, BlockMode::Homa, p.fusion)?;
    tape.matmul(o, p.wo)
}

/// Dispatches to the sublayer selected by `cfg.kind`. Input and output are
/// `[L, d_model]`.
pub fn attention_sublayer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    p: &LayerVars,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Var> {
    match cfg.kind {
        AttentionKind::Pairwise2d => baselines::global_pairwise_on_tape(tape, x, p, mask, cfg.heads),
        AttentionKind::Blockwise2d => baselines::blockwise2d_on_tape(
            tape,
            x,
            p,
            mask,
            cfg.heads,
            cfg.block_len,
            cfg.stride,
        ),
        AttentionKind::Linear2d => baselines::linformer_on_tape(tape, x, p, mask, cfg.heads),
        AttentionKind::Homa => homa_layer_on_tape(tape, x, p, mask, cfg),
    }
}

/// Plain-tensor evaluation of one sublayer.
pub fn attention_layer<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = LayerVars::constants(&mut tape, p);
    let out = attention_sublayer(&mut tape, xv, &vars, mask, cfg)?;
    Ok(tape.value(out).clone())
}

/// Per-block, per-head pairwise attention weights of a blocked or global
/// layer, in block-major order.
pub fn pairwise_maps<T: Real>(
    x: &Tensor<T>,
    p: &LayerParams<T>,
    mask: &[bool],
    cfg: &AttentionConfig,
) -> Result<Vec<Tensor<T>>> {
    use crate::attention::{pairwise_with_weights, HeadInputs};
    let len = x.rows();
    let plan = if cfg.kind.is_blocked() {
        BlockPlan::clamped(len, cfg.block_len, cfg.stride)?
    } else {
        BlockPlan::single(len)?
    };
    let q = x.matmul(&p.wq)?;
    let k = x.matmul(&p.wk)?;
    let v = x.matmul(&p.wv)?;
    let dh = cfg.d_head();
    let cols = |t: &Tensor<T>, (a, b): (usize, usize), h: usize| -> Result<Tensor<T>> {
        let mut d = Vec::with_capacity((b - a) * dh);
        for r in a..b {
            d.extend_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
        }
        Tensor::from_vec(&[b - a, dh], d)
    };
    let mut maps = Vec::new();
    for &blk in &plan.blocks {
        for h in 0..cfg.heads {
            let q = cols(&q, blk, h)?;
            let inputs = HeadInputs::new(
                q.clone(),
                cols(&k, blk, h)?,
                cols(&v, blk, h)?,
                q,
                mask[blk.0..blk.1].to_vec(),
            )?;
            maps.push(pairwise_with_weights(&inputs)?.1);
        }
    }
    Ok(maps)
}
