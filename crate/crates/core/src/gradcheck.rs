//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it shares no code
//! with the backward rules it checks.

use crate::attention::{self, BlockLayout, FusionParams, FusionVars};
use crate::error::Result;
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale: with
/// `eps = 1e-6` the round-off of a central difference is ~1e-10, which would
/// otherwise dominate the relative error of near-zero entries.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut rel: f64 = 0.0;
        let mut abs: f64 = 0.0;
        for (&a, &n) in analytic.iter().zip(numeric) {
            rel = rel.max(rel_error(a, n));
            abs = abs.max((a - n).abs());
        }
        GradCheckReport {
            name: name.into(),
            checked: analytic.len(),
            max_rel_err: rel,
            max_abs_err: abs,
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    /// Merges reports, keeping the worst errors.
    pub fn merge(name: impl Into<String>, parts: &[GradCheckReport]) -> Self {
        GradCheckReport {
            name: name.into(),
            checked: parts.iter().map(|p| p.checked).sum(),
            max_rel_err: parts.iter().map(|p| p.max_rel_err).fold(0.0, f64::max),
            max_abs_err: parts.iter().map(|p| p.max_abs_err).fold(0.0, f64::max),
        }
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Checks the gradient of an arbitrary tape computation with respect to
/// every entry of `inputs`. The output is contracted against fixed random
/// weights so that no coordinate's gradient cancels by symmetry.
pub fn check_op<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    seed: u64,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], record_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                if record_grad {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut tape, &vars)?;
        let mut rng = Rng::with_stream(seed, 77);
        let weights = Tensor::randn(tape.shape(out), 1.0, &mut rng);
        let c = tape.constant(weights);
        let prod = tape.hadamard(out, c)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).item();
        let grads = if record_grad {
            tape.grads_of(loss, &vars)?
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut flat_a = Vec::new();
    let mut flat_n = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[idx] = Tensor::from_vec(input.shape(), x.to_vec())?;
                Ok(eval(&vals, false)?.0)
            },
            input.data(),
            eps,
        )?;
        flat_a.extend_from_slice(analytic[idx].data());
        flat_n.extend(numeric);
    }
    Ok(GradCheckReport::compare(name, &flat_a, &flat_n))
}

fn mask_with_holes(n: usize, rng: &mut Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.8)).collect();
    m[0] = true;
    m
}

/// Finite-difference check of every differentiable tape operation on small
/// random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::with_stream(seed, 1);
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let mut reports = Vec::new();

    reports.push(check_op("matmul", &[r(&[5, 4]), r(&[4, 3])], seed, DEFAULT_EPS, |t, v| {
        t.matmul(v[0], v[1])
    })?);
    reports.push(check_op("add", &[r(&[3, 2]), r(&[3, 2])], seed, DEFAULT_EPS, |t, v| {
        t.add(v[0], v[1])
    })?);
    reports.push(check_op("sub", &[r(&[3, 2]), r(&[3, 2])], seed, DEFAULT_EPS, |t, v| {
        t.sub(v[0], v[1])
    })?);
    reports.push(check_op("hadamard", &[r(&[4]), r(&[4])], seed, DEFAULT_EPS, |t, v| {
        t.hadamard(v[0], v[1])
    })?);
    reports.push(check_op("add_bias", &[r(&[3, 4]), r(&[4])], seed, DEFAULT_EPS, |t, v| {
        t.add_bias(v[0], v[1])
    })?);
    reports.push(check_op("relu", &[r(&[4, 4])], seed, DEFAULT_EPS, |t, v| t.relu(v[0]))?);
    reports.push(check_op("transpose", &[r(&[2, 5])], seed, DEFAULT_EPS, |t, v| {
        t.transpose(v[0])
    })?);
    reports.push(check_op("concat_cols", &[r(&[3, 2]), r(&[3, 4])], seed, DEFAULT_EPS, |t, v| {
        t.concat_cols(v[0], v[1])
    })?);
    reports.push(check_op("gather_rows", &[r(&[4, 3])], seed, DEFAULT_EPS, |t, v| {
        t.gather_rows(v[0], &[3, 0, 0, 2, 1, 3])
    })?);
    reports.push(check_op("softmax", &[r(&[3, 5])], seed, DEFAULT_EPS, |t, v| {
        t.softmax(v[0], Some(&[true, false, true, true, true]))
    })?);
    reports.push(check_op(
        "layer_norm",
        &[r(&[3, 6]), r(&[6]), r(&[6])],
        seed,
        DEFAULT_EPS,
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    )?);
    reports.push(check_op("mean_rows_masked", &[r(&[5, 3])], seed, DEFAULT_EPS, |t, v| {
        t.mean_rows_masked(v[0], &[true, false, true, true, false])
    })?);
    let labels = [2i64, -100, 0, 1];
    reports.push(check_op("cross_entropy", &[r(&[4, 3])], seed, DEFAULT_EPS, |t, v| {
        Ok(t.cross_entropy_sum(v[0], &labels, -100)?.0)
    })?);
    reports.push(check_op("squared_error", &[r(&[4])], seed, DEFAULT_EPS, |t, v| {
        t.squared_error_sum(v[0], &[0.5, -1.0, 2.0, 0.0])
    })?);

    // two blocks of five rows, two heads of width 3
    let layout = BlockLayout::uniform(2, 5);
    let mut mrng = Rng::with_stream(seed, 2);
    let mask = mask_with_holes(10, &mut mrng);
    let qkvu: Vec<Tensor<f64>> = (0..4).map(|_| r(&[10, 6])).collect();
    let m = mask.clone();
    reports.push(check_op("pairwise_attention", &qkvu[..3], seed, DEFAULT_EPS, move |t, v| {
        attention::pairwise_multihead(t, v[0], v[1], v[2], &m, &m, layout, 2)
    })?);
    for w in [1usize, 3, 5] {
        let m = mask.clone();
        reports.push(check_op(
            &format!("triadic_attention_w{w}"),
            &qkvu,
            seed,
            DEFAULT_EPS,
            move |t, v| attention::triadic_multihead(t, v[0], v[1], v[2], v[3], &m, layout, 2, w),
        )?);
    }
    // rectangular keys, as used by the low-rank baseline
    let kl = BlockLayout {
        blocks: 1,
        query_len: 6,
        key_len: 3,
    };
    let qm = mask_with_holes(6, &mut mrng);
    reports.push(check_op(
        "pairwise_attention_rect",
        &[r(&[6, 4]), r(&[3, 4]), r(&[3, 4])],
        seed,
        DEFAULT_EPS,
        move |t, v| attention::pairwise_multihead(t, v[0], v[1], v[2], &qm, &[true; 3], kl, 2),
    )?);

    let fusion = FusionParams::<f64>::init(3, &mut Rng::with_stream(seed, 3));
    reports.push(check_op(
        "fuse",
        &[r(&[4, 3]), r(&[4, 3]), fusion.w1, fusion.b1, fusion.w2, fusion.b2],
        seed,
        DEFAULT_EPS,
        |t, v| {
            let p = FusionVars {
                w1: v[2],
                b1: v[3],
                w2: v[4],
                b2: v[5],
            };
            attention::fuse_on_tape(t, v[0], v[1], p)
        },
    )?);
    Ok(reports)
}
