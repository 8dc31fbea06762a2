use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, macro_f1, q3_accuracy, spearman};
use super::{class_index, Model, Task};
use crate::error::{HomaError, Result};
use crate::tensor::{Gradients, ParamId, ParamStore, Real, Rng, Tape, Tensor};
use crate::tokenizer::{LabeledExample, Target};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: HashMap<ParamId, Tensor<T>>,
    v: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::c(1.0 - b1.powi(t));
        let c2 = T::c(1.0 - b2.powi(t));
        let (b1, b2, lr, eps) = (T::c(b1), T::c(b2), T::c(self.lr), T::c(self.eps));
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let shape = store.get(id).shape().to_vec();
            let m = self.m.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
            if !p.all_finite() {
                return Err(HomaError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Epochs without validation improvement before stopping; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            max_steps: None,
            patience: Some(3),
            seed: 0,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Task metric: per-residue accuracy, sequence accuracy or Spearman rho.
    /// NaN where undefined.
    pub metric: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub steps: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub history: Vec<HistoryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub metric: f64,
    /// Macro F1 for classification heads.
    pub macro_f1: Option<f64>,
}

/// Prediction collected for metric computation.
enum Pred {
    Tokens(Vec<usize>),
    Scalar(f64),
    Class(usize),
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

fn prediction<T: Real>(task: Task, logits: &Tensor<T>) -> Pred {
    match task {
        Task::Token => Pred::Tokens((0..logits.rows()).map(|r| argmax(logits.row(r))).collect()),
        Task::Regression => Pred::Scalar(logits.data()[0].as_f64()),
        Task::Classify => Pred::Class(argmax(logits.row(0))),
    }
}

fn metrics_of(task: Task, preds: &[Pred], examples: &[&LabeledExample]) -> Result<(f64, Option<f64>)> {
    match task {
        Task::Token => {
            let mut p = Vec::new();
            let mut l = Vec::new();
            for (pred, ex) in preds.iter().zip(examples) {
                if let (Pred::Tokens(tp), Target::Tokens(tl)) = (pred, &ex.target) {
                    p.extend_from_slice(tp);
                    l.extend_from_slice(tl);
                }
            }
            Ok((q3_accuracy(&p, &l)?, Some(macro_f1(&p, &l)?)))
        }
        Task::Classify => {
            let mut p = Vec::new();
            let mut l = Vec::new();
            for (pred, ex) in preds.iter().zip(examples) {
                if let (Pred::Class(c), Target::Scalar(t)) = (pred, &ex.target) {
                    p.push(*c);
                    l.push(class_index(*t)?);
                }
            }
            let acc = accuracy(&p, &l.iter().map(|&x| x as usize).collect::<Vec<_>>())?;
            Ok((acc, Some(macro_f1(&p, &l)?)))
        }
        Task::Regression => {
            let mut p = Vec::new();
            let mut l = Vec::new();
            for (pred, ex) in preds.iter().zip(examples) {
                if let (Pred::Scalar(y), Target::Scalar(t)) = (pred, &ex.target) {
                    p.push(*y);
                    l.push(*t);
                }
            }
            Ok((spearman(&p, &l).unwrap_or(f64::NAN), None))
        }
    }
}

/// Mean loss and task metric of `model` on `examples`, without dropout.
pub fn evaluate<T: Real>(model: &Model<T>, examples: &[LabeledExample]) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(HomaError::EmptyDataset);
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    let mut count = 0;
    for chunk in examples.chunks(16) {
        let mut tape = Tape::new();
        let vars = model.bind_constants(&mut tape)?;
        for ex in chunk {
            let out = model.forward_on_tape(&mut tape, &vars, &ex.encoded, None)?;
            let (l, n) = super::example_loss(&mut tape, model.cfg.task, out.logits, ex)?;
            loss += tape.value(l).item().as_f64();
            count += n;
            preds.push(prediction(model.cfg.task, tape.value(out.logits)));
        }
    }
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let (metric, macro_f1) = metrics_of(model.cfg.task, &preds, &refs)?;
    Ok(EvalResult {
        loss: if count == 0 { f64::NAN } else { loss / count as f64 },
        metric,
        macro_f1,
    })
}

fn improved(metric: f64, best: Option<f64>) -> bool {
    !metric.is_nan() && best.is_none_or(|b| metric > b)
}

/// Trains with Adam on shuffled mini-batches, evaluating on `val` after
/// every epoch. With a patience set, training stops once the validation
/// metric has not improved for that many epochs and the best parameters are
/// restored.
pub fn train<T: Real>(
    model: Model<T>,
    train_set: &[LabeledExample],
    val: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<TrainState<T>> {
    if train_set.is_empty() {
        return Err(HomaError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(HomaError::Config("batch_size must be positive".into()));
    }
    let task = model.cfg.task;
    let mut state = TrainState {
        optimizer: Adam::new(model.cfg.lr),
        model,
        steps: 0,
        best_metric: None,
        best_epoch: None,
        stopped_early: false,
        history: Vec::new(),
    };
    let mut order_rng = Rng::with_stream(cfg.seed, 7);
    let mut drop_rng = Rng::with_stream(cfg.seed, 8);
    let mut snapshot: Option<ParamStore<T>> = None;
    let mut stale = 0;
    let start = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut grads = Gradients::new();

    'epochs: for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_count = 0;
        let mut preds = Vec::with_capacity(order.len());
        let mut seen = Vec::with_capacity(order.len());
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| state.steps >= m) {
                break;
            }
            let examples: Vec<&LabeledExample> = batch.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let vars = state.model.bind(&mut tape)?;
            let mut total = None;
            let mut count = 0;
            for ex in &examples {
                let out = state.model.forward_on_tape(&mut tape, &vars, &ex.encoded, Some(&mut drop_rng))?;
                let (l, n) = super::example_loss(&mut tape, task, out.logits, ex)?;
                preds.push(prediction(task, tape.value(out.logits)));
                count += n;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.ok_or(HomaError::EmptyDataset)?;
            seen.extend(examples);
            loss_sum += tape.value(total).item().as_f64();
            loss_count += count;
            if count == 0 {
                continue;
            }
            grads.clear();
            tape.backward(total, &mut grads)?;
            grads.scale(T::c(1.0 / count as f64));
            state.optimizer.update(&mut state.model.params, &grads)?;
            state.steps += 1;
        }
        if seen.is_empty() {
            break;
        }
        let (metric, _) = metrics_of(task, &preds, &seen).unwrap_or((f64::NAN, None));
        state.history.push(HistoryRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / loss_count.max(1) as f64,
            metric,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if !val.is_empty() {
            let ev = evaluate(&state.model, val)?;
            state.history.push(HistoryRow {
                epoch,
                split: "val".into(),
                loss: ev.loss,
                metric: ev.metric,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            if improved(ev.metric, state.best_metric) {
                state.best_metric = Some(ev.metric);
                state.best_epoch = Some(epoch);
                stale = 0;
                if cfg.patience.is_some() {
                    snapshot = Some(state.model.params.clone());
                }
            } else if let Some(p) = cfg.patience {
                stale += 1;
                if stale >= p {
                    state.stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if cfg.max_steps.is_some_and(|m| state.steps >= m) {
            break;
        }
    }
    if let Some(best) = snapshot {
        state.model.params = best;
    }
    Ok(state)
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HomaError::io(path, e))?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HomaError::from)).collect()
}
