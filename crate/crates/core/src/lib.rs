//! Higher-order modular attention: a pairwise attention pathway fused with a
//! windowed triadic pathway, executed over overlapping blocks.

pub mod attention;
pub mod baselines;
pub mod blocks;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layer;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod tokenizer;

pub use error::{HomaError, Result};
pub use tensor::{Gradients, ParamId, ParamStore, Precision, Real, Rng, Tape, Tensor, Var};
pub use config::{AttentionConfig, AttentionKind, URank};
pub use model::{build_model, Model, ModelConfig, Task};
