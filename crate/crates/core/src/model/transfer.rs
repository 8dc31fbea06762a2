use serde::{Deserialize, Serialize};

use super::Model;
use crate::config::AttentionKind;
use crate::error::{HomaError, Result};
use crate::layer::PAIRWISE_PROJECTIONS;
use crate::tensor::Real;

/// Which weights a warm start copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Embeddings, attention projections, layer norms and feed-forward
    /// weights.
    #[default]
    Backbone,
    /// Only the query, key, value and output projections.
    ProjectionsOnly,
}

fn is_projection(name: &str) -> bool {
    name.strip_prefix("layer")
        .and_then(|rest| rest.split_once(".attn."))
        .is_some_and(|(_, p)| PAIRWISE_PROJECTIONS.contains(&p))
}

pub(crate) fn is_backbone(name: &str) -> bool {
    name.starts_with("embed.")
        || is_projection(name)
        || name.contains(".ln1.")
        || name.contains(".ln2.")
        || name.contains(".ffn.")
}

/// Copies the pairwise weights of `src` into the HOMA model `dst`. The
/// triadic projection, fusion network and task head of `dst` keep their
/// fresh initialization. With `freeze`, every copied tensor is excluded from
/// optimization.
pub fn warm_start_transfer<T: Real>(
    src: &Model<T>,
    mut dst: Model<T>,
    freeze: bool,
    mode: TransferMode,
) -> Result<Model<T>> {
    let (s, d) = (&src.cfg, &dst.cfg);
    if !matches!(s.attention.kind, AttentionKind::Pairwise2d | AttentionKind::Blockwise2d) {
        return Err(HomaError::invalid(format!(
            "warm start needs a pairwise source model, got {}",
            s.attention.kind
        )));
    }
    if d.attention.kind != AttentionKind::Homa {
        return Err(HomaError::invalid(format!(
            "warm start needs a HOMA destination model, got {}",
            d.attention.kind
        )));
    }
    let arch = |m: &super::ModelConfig| (m.d_model(), m.layers, m.attention.heads);
    if arch(s) != arch(d) {
        return Err(HomaError::invalid(format!(
            "architecture mismatch: source (d_model, layers, heads) = {:?}, destination {:?}",
            arch(s),
            arch(d)
        )));
    }
    let wanted = |name: &str| match mode {
        TransferMode::Backbone => is_backbone(name),
        TransferMode::ProjectionsOnly => is_projection(name),
    };
    let mut copied = 0;
    for (_, name, t) in src.params.iter() {
        if !wanted(name) {
            continue;
        }
        let id = dst
            .params
            .id(name)
            .ok_or_else(|| HomaError::invalid(format!("destination lacks parameter {name}")))?;
        if dst.params.get(id).shape() != t.shape() {
            return Err(HomaError::invalid(format!(
                "architecture mismatch on {name}: {:?} vs {:?}",
                t.shape(),
                dst.params.get(id).shape()
            )));
        }
        dst.params.set(id, t.clone())?;
        dst.params.set_frozen(id, freeze);
        copied += 1;
    }
    if copied == 0 {
        return Err(HomaError::invalid("warm start copied no parameters"));
    }
    dst.cfg.freeze_pairwise = freeze;
    Ok(dst)
}
