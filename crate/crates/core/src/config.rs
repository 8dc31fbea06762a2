use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HomaError, Result};
use crate::tensor::Precision;

/// Which attention operator a layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Global multi-head self-attention.
    Pairwise2d,
    /// Overlapping block multi-head self-attention.
    Blockwise2d,
    /// Low-rank key/value sequence projections.
    Linear2d,
    /// Blockwise pairwise attention fused with windowed triadic attention.
    Homa,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::Pairwise2d,
        AttentionKind::Blockwise2d,
        AttentionKind::Linear2d,
        AttentionKind::Homa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Pairwise2d => "pairwise2d",
            AttentionKind::Blockwise2d => "blockwise2d",
            AttentionKind::Linear2d => "linear2d",
            AttentionKind::Homa => "homa",
        }
    }

    pub fn is_blocked(self) -> bool {
        matches!(self, AttentionKind::Blockwise2d | AttentionKind::Homa)
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = HomaError;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                HomaError::Config(format!(
                    "unknown attention `{s}` (expected pairwise2d, blockwise2d, linear2d or homa)"
                ))
            })
    }
}

/// Parameterization of the triadic `U` projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum URank {
    Full,
    Low(usize),
}

impl fmt::Display for URank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            URank::Full => f.write_str("full"),
            URank::Low(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for URank {
    type Err = HomaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(URank::Full);
        }
        match s.parse::<usize>() {
            Ok(r) if r > 0 => Ok(URank::Low(r)),
            _ => Err(HomaError::Config(format!(
                "rank must be `full` or a positive integer, got `{s}`"
            ))),
        }
    }
}

/// Hyperparameters of one attention sublayer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub d_model: usize,
    pub heads: usize,
    /// Block length ℓ.
    pub block_len: usize,
    /// Block stride s.
    pub stride: usize,
    /// Triadic window width w (odd).
    pub window: usize,
    pub rank: URank,
    /// Projected length k of the low-rank baseline.
    pub linformer_k: usize,
    /// Use one projection for keys and values in the low-rank baseline.
    pub share_kv_projection: bool,
    pub max_len: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            kind: AttentionKind::Homa,
            d_model: 256,
            heads: 8,
            block_len: 30,
            stride: 15,
            window: 5,
            rank: URank::Low(8),
            linformer_k: 50,
            share_kv_projection: false,
            max_len: 512,
            dropout: 0.4,
            precision: Precision::F64,
        }
    }
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HomaError::Config(m));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if self.kind.is_blocked() && (self.block_len == 0 || self.stride == 0) {
            return fail("block length and stride must be positive".into());
        }
        if self.kind.is_blocked() && self.stride > self.block_len {
            return fail(format!(
                "stride {} exceeds block length {} and would leave gaps",
                self.stride, self.block_len
            ));
        }
        if self.kind == AttentionKind::Homa && (self.window == 0 || self.window.is_multiple_of(2)) {
            return fail(format!("window {} must be odd", self.window));
        }
        if let URank::Low(0) = self.rank {
            return fail("rank must be positive".into());
        }
        if self.kind == AttentionKind::Linear2d
            && (self.linformer_k == 0 || self.linformer_k > self.max_len)
        {
            return fail(format!(
                "linformer k {} must be in 1..=max_len {}",
                self.linformer_k, self.max_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }
}
