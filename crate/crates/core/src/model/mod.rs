//! Full transformer assembly with a selectable attention sublayer, task
//! heads, training, warm-start transfer and evaluation metrics.

mod checkpoint;
mod match3;
pub mod metrics;
mod train;
mod transfer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use match3::{has_zero_triple, make_match3_dataset, MATCH3_SYMBOL_OFFSET};
pub use train::{
    evaluate, read_history_csv, train, write_history_csv, Adam, EvalResult, HistoryRow, TrainConfig,
    TrainState,
};
pub use transfer::{warm_start_transfer, TransferMode};

use crate::config::{AttentionConfig, AttentionKind, URank};
use crate::error::{HomaError, Result};
use crate::layer::{attention_layer, attention_sublayer, pairwise_maps, LayerParams, LayerVars};
use crate::tensor::{ParamStore, Real, Rng, Tape, Tensor, Var};
use crate::tokenizer::{EncodedSeq, LabeledExample, Target, IGNORE_INDEX, VOCAB_SIZE};

pub const LN_EPS: f64 = 1e-5;

/// Prediction head attached to the final hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Per-position classification, e.g. three-state secondary structure.
    Token,
    /// Masked mean-pool followed by a scalar output.
    Regression,
    /// Masked mean-pool followed by class logits.
    Classify,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Token => "token",
            Task::Regression => "regression",
            Task::Classify => "classify",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = HomaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Task::Token),
            "regression" => Ok(Task::Regression),
            "classify" => Ok(Task::Classify),
            _ => Err(HomaError::Config(format!(
                "unknown task `{s}` (expected token, regression or classify)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub layers: usize,
    pub ffn_dim: usize,
    pub lr: f64,
    /// Exclude the transferred pairwise weights from optimization after a
    /// warm start.
    pub freeze_pairwise: bool,
    pub seed: u64,
    pub task: Task,
    /// Output classes of the token and classification heads.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::profile("fs").expect("built-in profile")
    }
}

impl ModelConfig {
    pub const PROFILES: [&'static str; 2] = ["ss", "fs"];

    /// Named presets. `ss` targets per-residue classification, `fs`
    /// sequence-level regression.
    pub fn profile(name: &str) -> Result<Self> {
        let (d_model, ffn_dim, lr, task) = match name {
            "ss" => (512, 1024, 1e-4, Task::Token),
            "fs" => (256, 128, 5e-5, Task::Regression),
            _ => {
                return Err(HomaError::Config(format!(
                    "unknown profile `{name}` (expected ss or fs)"
                )))
            }
        };
        Ok(ModelConfig {
            attention: AttentionConfig {
                kind: AttentionKind::Homa,
                d_model,
                heads: 8,
                block_len: 30,
                stride: 15,
                window: 5,
                rank: URank::Low(8),
                linformer_k: 50,
                share_kv_projection: false,
                max_len: 512,
                dropout: 0.4,
                precision: crate::tensor::Precision::F64,
            },
            layers: 12,
            ffn_dim,
            lr,
            freeze_pairwise: false,
            seed: 0,
            task,
            classes: 3,
        })
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Regression => 1,
            Task::Token | Task::Classify => self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.ffn_dim == 0 {
            return Err(HomaError::Config("ffn_dim must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(HomaError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.task != Task::Regression && self.classes < 2 {
            return Err(HomaError::Config("classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// A model is its configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

pub(crate) fn layer_prefix(i: usize) -> String {
    format!("layer{i}.")
}

/// Builds a model with parameters drawn deterministically from `cfg.seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let d = cfg.d_model();
    let mut rng = Rng::new(cfg.seed);
    let mut store = ParamStore::new();
    store.add("embed.token", Tensor::randn(&[VOCAB_SIZE, d], 1.0, &mut rng));
    store.add("embed.pos", Tensor::randn(&[cfg.attention.max_len, d], 0.1, &mut rng));
    for i in 0..cfg.layers {
        let p = layer_prefix(i);
        let mut lrng = rng.fork(1000 + i as u64);
        LayerParams::init(&cfg.attention, &mut lrng)?.register(&mut store, &format!("{p}attn."));
        add_norm(&mut store, &format!("{p}ln1."), d);
        let f = cfg.ffn_dim;
        store.add(format!("{p}ffn.w1"), Tensor::randn(&[d, f], 1.0 / (d as f64).sqrt(), &mut lrng));
        store.add(format!("{p}ffn.b1"), Tensor::zeros(&[f]));
        store.add(format!("{p}ffn.w2"), Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt(), &mut lrng));
        store.add(format!("{p}ffn.b2"), Tensor::zeros(&[d]));
        add_norm(&mut store, &format!("{p}ln2."), d);
    }
    let out = cfg.output_dim();
    let mut hrng = rng.fork(999);
    store.add("head.w", Tensor::randn(&[d, out], 1.0 / (d as f64).sqrt(), &mut hrng));
    store.add("head.b", Tensor::zeros(&[out]));
    Ok(Model {
        cfg: cfg.clone(),
        params: store,
    })
}

fn add_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.add(format!("{prefix}gamma"), Tensor::ones(&[d]));
    store.add(format!("{prefix}beta"), Tensor::zeros(&[d]));
}

struct BlockVars {
    attn: LayerVars,
    ln1: (Var, Var),
    ffn: (Var, Var, Var, Var),
    ln2: (Var, Var),
}

/// Model parameters bound onto one tape.
pub struct ModelVars {
    token: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    head: (Var, Var),
}

/// Per-example output of [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Output {
    /// `[L, classes]` for token tasks, `[1, out]` otherwise.
    pub logits: Var,
}

impl<T: Real> Model<T> {
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Binds every parameter as a tape parameter; frozen ones get no
    /// gradient.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<ModelVars> {
        self.bind_with(tape, false)
    }

    /// Binds every parameter as a constant, for gradient-free evaluation.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Result<ModelVars> {
        self.bind_with(tape, true)
    }

    fn bind_with(&self, tape: &mut Tape<T>, constant: bool) -> Result<ModelVars> {
        let store = &self.params;
        let get = |tape: &mut Tape<T>, name: &str| -> Result<Var> {
            let id = store
                .id(name)
                .ok_or_else(|| HomaError::invalid(format!("missing parameter {name}")))?;
            Ok(if constant {
                tape.param_constant(store, id)
            } else {
                tape.param(store, id)
            })
        };
        let token = get(tape, "embed.token")?;
        let pos = get(tape, "embed.pos")?;
        let mut blocks = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let p = layer_prefix(i);
            blocks.push(BlockVars {
                attn: LayerVars::from_store(tape, store, &format!("{p}attn."), constant)?,
                ln1: (get(tape, &format!("{p}ln1.gamma"))?, get(tape, &format!("{p}ln1.beta"))?),
                ffn: (
                    get(tape, &format!("{p}ffn.w1"))?,
                    get(tape, &format!("{p}ffn.b1"))?,
                    get(tape, &format!("{p}ffn.w2"))?,
                    get(tape, &format!("{p}ffn.b2"))?,
                ),
                ln2: (get(tape, &format!("{p}ln2.gamma"))?, get(tape, &format!("{p}ln2.beta"))?),
            });
        }
        let head = (get(tape, "head.w")?, get(tape, "head.b")?);
        Ok(ModelVars {
            token,
            pos,
            blocks,
            head,
        })
    }

    fn check_seq(&self, seq: &EncodedSeq) -> Result<()> {
        let max_len = self.cfg.attention.max_len;
        if seq.ids.is_empty() || seq.ids.len() > max_len || seq.attention_mask.len() != seq.ids.len() {
            return Err(HomaError::invalid(format!(
                "sequence of {} ids (mask {}) does not fit max_len {max_len}",
                seq.ids.len(),
                seq.attention_mask.len()
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(HomaError::invalid(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Final hidden states `[L, d_model]` of one sequence. `dropout` carries
    /// the RNG when training with a nonzero rate.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        seq: &EncodedSeq,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_seq(seq)?;
        let len = seq.ids.len();
        let positions: Vec<usize> = (0..len).collect();
        let tok = tape.gather_rows(vars.token, &seq.ids)?;
        let pos = tape.gather_rows(vars.pos, &positions)?;
        let mut h = tape.add(tok, pos)?;
        let mut dropout = dropout.filter(|_| self.cfg.attention.dropout > 0.0);
        for b in &vars.blocks {
            h = self.block_on_tape(tape, b, h, &seq.attention_mask, dropout.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Post-norm transformer block: attention, add & norm, feed-forward,
    /// add & norm. Dropout applies to the attention sublayer output.
    fn block_on_tape(
        &self,
        tape: &mut Tape<T>,
        b: &BlockVars,
        h: Var,
        mask: &[bool],
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let mut a = attention_sublayer(tape, h, &b.attn, mask, &self.cfg.attention)?;
        if let Some(rng) = dropout {
            let rate = self.cfg.attention.dropout;
            let keep = T::c(1.0 / (1.0 - rate));
            let m: Vec<T> = (0..tape.value(a).len())
                .map(|_| if rng.bernoulli(rate) { T::zero() } else { keep })
                .collect();
            a = tape.mul_const(a, Tensor::from_vec(tape.shape(a), m)?)?;
        }
        let r = tape.add(h, a)?;
        let h = tape.layer_norm(r, b.ln1.0, b.ln1.1, LN_EPS)?;
        let (w1, b1, w2, b2) = b.ffn;
        let f = tape.matmul(h, w1)?;
        let f = tape.add_bias(f, b1)?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, b2)?;
        let r = tape.add(h, f)?;
        tape.layer_norm(r, b.ln2.0, b.ln2.1, LN_EPS)
    }

    /// Task-head output of one sequence.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        seq: &EncodedSeq,
        dropout: Option<&mut Rng>,
    ) -> Result<Output> {
        let h = self.encode_on_tape(tape, vars, seq, dropout)?;
        let x = match self.cfg.task {
            Task::Token => h,
            Task::Regression | Task::Classify => tape.mean_rows_masked(h, &seq.attention_mask)?,
        };
        let y = tape.matmul(x, vars.head.0)?;
        Ok(Output {
            logits: tape.add_bias(y, vars.head.1)?,
        })
    }

    /// Inference on a batch: one `[L, classes]` or `[1, out]` tensor per
    /// sequence.
    pub fn forward(&self, batch: &[EncodedSeq]) -> Result<Vec<Tensor<T>>> {
        batch
            .iter()
            .map(|seq| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape)?;
                let out = self.forward_on_tape(&mut tape, &vars, seq, None)?;
                Ok(tape.value(out.logits).clone())
            })
            .collect()
    }

    /// Summed loss of `examples` and the number of targets it covers:
    /// cross-entropy for classification heads (pad labels ignored), squared
    /// error for regression.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        examples: &[&LabeledExample],
        mut dropout: Option<&mut Rng>,
    ) -> Result<(Var, usize)> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        for ex in examples {
            let out = self.forward_on_tape(tape, vars, &ex.encoded, dropout.as_deref_mut())?;
            let (l, n) = example_loss(tape, self.cfg.task, out.logits, ex)?;
            count += n;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(HomaError::EmptyDataset)?;
        Ok((total, count))
    }

    /// Mean loss over `examples` without recording gradients.
    pub fn mean_loss(&self, examples: &[&LabeledExample]) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in examples.chunks(16) {
            let mut tape = Tape::new();
            let vars = self.bind_constants(&mut tape)?;
            let (l, n) = self.loss_on_tape(&mut tape, &vars, chunk, None)?;
            sum += tape.value(l).item().as_f64();
            count += n;
        }
        if count == 0 {
            return Err(HomaError::EmptyDataset);
        }
        Ok(sum / count as f64)
    }

    /// Input to the attention sublayer of every layer, `[L, d_model]`, for
    /// one sequence without dropout.
    pub fn layer_inputs(&self, seq: &EncodedSeq) -> Result<Vec<Tensor<T>>> {
        self.check_seq(seq)?;
        let d = self.cfg.d_model();
        let tok = self.params.get(self.param_id("embed.token")?);
        let pos = self.params.get(self.param_id("embed.pos")?);
        let mut h = Tensor::zeros(&[seq.ids.len(), d]);
        for (r, &id) in seq.ids.iter().enumerate() {
            for (c, x) in h.row_mut(r).iter_mut().enumerate() {
                *x = tok.at2(id, c) + pos.at2(r, c);
            }
        }
        let mut inputs = Vec::with_capacity(self.cfg.layers);
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape)?;
        let mut x = tape.constant(h);
        for b in &vars.blocks {
            inputs.push(tape.value(x).clone());
            x = self.block_on_tape(&mut tape, b, x, &seq.attention_mask, None)?;
        }
        Ok(inputs)
    }

    pub fn param_id(&self, name: &str) -> Result<crate::tensor::ParamId> {
        self.params
            .id(name)
            .ok_or_else(|| HomaError::invalid(format!("missing parameter {name}")))
    }

    /// Attention-sublayer weights of layer `i` as plain tensors.
    pub fn layer_params(&self, i: usize) -> Result<LayerParams<T>> {
        use crate::attention::FusionParams;
        use crate::blocks::LowRankU;
        use crate::layer::LinformerParams;
        let p = format!("{}attn.", layer_prefix(i));
        let get = |n: &str| self.params.id(&format!("{p}{n}")).map(|id| self.params.get(id).clone());
        let req = |n: &str| get(n).ok_or_else(|| HomaError::invalid(format!("missing parameter {p}{n}")));
        let u = match (get("u"), get("u_u"), get("u_v")) {
            (Some(w), _, _) => Some(LowRankU::Full(w)),
            (None, Some(wu), Some(wv)) => Some(LowRankU::Factored { wu, wv }),
            _ => None,
        };
        let fusion = match (get("fuse_w1"), get("fuse_b1"), get("fuse_w2"), get("fuse_b2")) {
            (Some(w1), Some(b1), Some(w2), Some(b2)) => Some(FusionParams { w1, b1, w2, b2 }),
            _ => None,
        };
        let linformer = get("lin_e").map(|e| LinformerParams { e, f: get("lin_f") });
        Ok(LayerParams {
            wq: req("wq")?,
            wk: req("wk")?,
            wv: req("wv")?,
            wo: req("wo")?,
            u,
            fusion,
            linformer,
        })
    }

    /// Pairwise attention weights of layer `i`, per block and head.
    pub fn pairwise_maps(&self, i: usize, seq: &EncodedSeq) -> Result<Vec<Tensor<T>>> {
        let x = self
            .layer_inputs(seq)?
            .into_iter()
            .nth(i)
            .ok_or_else(|| HomaError::invalid(format!("layer {i} out of range")))?;
        pairwise_maps(&x, &self.layer_params(i)?, &seq.attention_mask, &self.cfg.attention)
    }

    /// Attention-sublayer output of layer `i`.
    pub fn attention_output(&self, i: usize, seq: &EncodedSeq) -> Result<Tensor<T>> {
        let x = self
            .layer_inputs(seq)?
            .into_iter()
            .nth(i)
            .ok_or_else(|| HomaError::invalid(format!("layer {i} out of range")))?;
        attention_layer(&x, &self.layer_params(i)?, &seq.attention_mask, &self.cfg.attention)
    }
}

fn example_loss<T: Real>(
    tape: &mut Tape<T>,
    task: Task,
    logits: Var,
    ex: &LabeledExample,
) -> Result<(Var, usize)> {
    match (task, &ex.target) {
        (Task::Token, Target::Tokens(labels)) => {
            if labels.len() != ex.encoded.ids.len() {
                return Err(HomaError::invalid("label count differs from sequence length"));
            }
            tape.cross_entropy_sum(logits, labels, IGNORE_INDEX)
        }
        (Task::Classify, Target::Scalar(c)) => {
            let label = class_index(*c)?;
            tape.cross_entropy_sum(logits, &[label], IGNORE_INDEX)
        }
        (Task::Regression, Target::Scalar(y)) => {
            Ok((tape.squared_error_sum(logits, &[T::c(*y)])?, 1))
        }
        (task, _) => Err(HomaError::invalid(format!(
            "example target does not match the {task} head"
        ))),
    }
}

pub(crate) fn class_index(c: f64) -> Result<i64> {
    if c >= 0.0 && c.fract() == 0.0 {
        Ok(c as i64)
    } else {
        Err(HomaError::invalid(format!("class target {c} is not a non-negative integer")))
    }
}

/// Finite-difference check of every parameter gradient of `model` on
/// `examples`, one report per parameter tensor. All parameters are first redrawn at random so that biases and
/// normalization gains are off their special initial values.
pub fn model_gradcheck(
    model: &Model<f64>,
    examples: &[LabeledExample],
    seed: u64,
    eps: f64,
) -> Result<Vec<crate::gradcheck::GradCheckReport>> {
    use crate::gradcheck::{central_difference, GradCheckReport};

    let mut m = model.clone();
    let mut rng = Rng::with_stream(seed, 31);
    let ids: Vec<_> = m.params.ids().collect();
    for &id in &ids {
        let shape = m.params.get(id).shape().to_vec();
        let base = m.params.get(id).clone();
        let noise = Tensor::randn(&shape, 0.3, &mut rng);
        m.params.set(id, base.add(&noise)?)?;
    }
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let loss_of = |mm: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = mm.bind_constants(&mut tape)?;
        let (l, _) = mm.loss_on_tape(&mut tape, &vars, &refs, None)?;
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape)?;
    let (loss, _) = m.loss_on_tape(&mut tape, &vars, &refs, None)?;
    let mut grads = crate::tensor::Gradients::new();
    tape.backward(loss, &mut grads)?;

    let mut parts = Vec::with_capacity(ids.len());
    for &id in &ids {
        let analytic = grads.get_or_zeros(&m.params, id);
        let shape = m.params.get(id).shape().to_vec();
        let x0 = m.params.get(id).data().to_vec();
        let mut probe = m.clone();
        let numeric = central_difference(
            |x| {
                probe.params.set(id, Tensor::from_vec(&shape, x.to_vec())?)?;
                loss_of(&probe)
            },
            &x0,
            eps,
        )?;
        parts.push(GradCheckReport::compare(m.params.name(id), analytic.data(), &numeric));
    }
    Ok(parts)
}
