//! Single-head attention operators: pairwise attention, the brute-force
//! triadic operator, the windowed triadic operator, and pathway fusion.

mod kernels;

pub use kernels::{pairwise_multihead, triadic_multihead, BlockLayout};
pub(crate) use kernels::check_window;

use crate::error::{HomaError, Result};
use crate::tensor::{Real, Rng, Tape, Tensor, Var};

/// Largest sequence length the brute-force triadic operator accepts.
pub const NAIVE_MAX_LEN: usize = 64;

/// Per-head projections for a length-`L` sequence.
#[derive(Debug, Clone)]
pub struct HeadInputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub u: Tensor<T>,
    /// `true` on real positions.
    pub mask: Vec<bool>,
}

impl<T: Real> HeadInputs<T> {
    pub fn new(
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        u: Tensor<T>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let h = HeadInputs { q, k, v, u, mask };
        h.validate()?;
        Ok(h)
    }

    /// Random inputs with entries N(0, 1) and every position visible.
    pub fn random(len: usize, d_head: usize, rng: &mut Rng) -> Self {
        let mut t = || Tensor::randn(&[len, d_head], 1.0, rng);
        HeadInputs {
            q: t(),
            k: t(),
            v: t(),
            u: t(),
            mask: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn d_head(&self) -> usize {
        self.q.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let want = [self.mask.len(), self.q.cols()];
        for (t, name) in [(&self.q, "q"), (&self.k, "k"), (&self.v, "v"), (&self.u, "u")] {
            if t.shape() != want {
                return Err(HomaError::ShapeMismatch {
                    op: name,
                    left: t.shape().to_vec(),
                    right: want.to_vec(),
                });
            }
        }
        if self.mask.is_empty() || self.q.cols() == 0 {
            return Err(HomaError::invalid("head inputs must be non-empty"));
        }
        Ok(())
    }

    /// Rows `range` of every tensor and of the mask.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let rows = |t: &Tensor<T>| {
            let d = t.cols();
            Tensor::from_vec(&[range.len(), d], t.data()[range.start * d..range.end * d].to_vec())
                .expect("in-range slice")
        };
        HeadInputs {
            q: rows(&self.q),
            k: rows(&self.k),
            v: rows(&self.v),
            u: rows(&self.u),
            mask: self.mask[range.clone()].to_vec(),
        }
    }
}

/// Pairwise attention output `O2` (`L×d_head`).
pub fn pairwise_attention<T: Real>(h: &HeadInputs<T>) -> Result<Tensor<T>> {
    Ok(pairwise_with_weights(h)?.0)
}

/// Pairwise output together with the weights `A2` (`L×L`).
pub fn pairwise_with_weights<T: Real>(h: &HeadInputs<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    h.validate()?;
    let (l, dh) = (h.len(), h.d_head());
    let (out, w) = kernels::pairwise_forward(
        h.q.data(),
        h.k.data(),
        h.v.data(),
        &h.mask,
        &h.mask,
        dh,
    );
    Ok((
        Tensor::from_vec(&[l, dh], out)?.ensure_finite("pairwise_attention")?,
        Tensor::from_vec(&[l, l], w)?,
    ))
}

fn naive_guard(l: usize) -> Result<()> {
    if l > NAIVE_MAX_LEN {
        return Err(HomaError::invalid(format!(
            "naive triadic attention limited to L <= {NAIVE_MAX_LEN}, got {l}"
        )));
    }
    Ok(())
}

/// Full triadic score tensor `S3[i][j][k] = Σ_c Q_ic K_jc U_kc / √d_head`.
pub fn triadic_scores_naive<T: Real>(h: &HeadInputs<T>) -> Result<Tensor<T>> {
    h.validate()?;
    let (l, dh) = (h.len(), h.d_head());
    naive_guard(l)?;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut s = Vec::with_capacity(l * l * l);
    for i in 0..l {
        for j in 0..l {
            for k in 0..l {
                let mut acc = T::zero();
                for c in 0..dh {
                    acc = acc + h.q.at2(i, c) * h.k.at2(j, c) * h.u.at2(k, c);
                }
                s.push(acc * scale);
            }
        }
    }
    Tensor::from_vec(&[l, l, l], s)?.ensure_finite("triadic_scores")
}

/// Brute-force triadic attention over the whole `(j, k)` grid.
pub fn triadic_attention_naive<T: Real>(h: &HeadInputs<T>) -> Result<Tensor<T>> {
    triadic_attention_restricted(h, |_, _, _| true)
}

/// Brute-force triadic attention where pair `(j, k)` is considered for query
/// `i` only when `allow(i, j, k)` holds, in addition to the position mask.
pub fn triadic_attention_restricted<T: Real>(
    h: &HeadInputs<T>,
    allow: impl Fn(usize, usize, usize) -> bool,
) -> Result<Tensor<T>> {
    let (out, _) = triadic_naive_impl(h, allow)?;
    Ok(out)
}

/// Brute-force triadic weights `A3` (`L×L×L`), zero on excluded pairs and
/// masked queries.
pub fn triadic_weights_naive<T: Real>(h: &HeadInputs<T>) -> Result<Tensor<T>> {
    Ok(triadic_naive_impl(h, |_, _, _| true)?.1)
}

fn triadic_naive_impl<T: Real>(
    h: &HeadInputs<T>,
    allow: impl Fn(usize, usize, usize) -> bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let scores = triadic_scores_naive(h)?;
    let (l, dh) = (h.len(), h.d_head());
    let mut weights = Tensor::zeros(&[l, l, l]);
    let mut out = Tensor::zeros(&[l, dh]);
    let mut keep = vec![false; l * l];
    for i in (0..l).filter(|&i| h.mask[i]) {
        for j in 0..l {
            for k in 0..l {
                keep[j * l + k] = h.mask[j] && h.mask[k] && allow(i, j, k);
            }
        }
        let grid = &scores.data()[i * l * l..(i + 1) * l * l];
        let mut probs = vec![T::zero(); l * l];
        crate::tensor::softmax_into(grid, Some(&keep), &mut probs);
        for j in 0..l {
            for k in 0..l {
                let a = probs[j * l + k];
                for c in 0..dh {
                    let o = out.at2(i, c) + a * h.v.at2(j, c) * h.v.at2(k, c);
                    out.set2(i, c, o);
                }
            }
        }
        weights.data_mut()[i * l * l..(i + 1) * l * l].copy_from_slice(&probs);
    }
    Ok((out.ensure_finite("triadic_attention_naive")?, weights))
}

/// Windowed triadic attention with odd window width `w`.
pub fn triadic_attention_windowed<T: Real>(h: &HeadInputs<T>, w: usize) -> Result<Tensor<T>> {
    Ok(triadic_windowed_with_weights(h, w)?.0)
}

/// Windowed triadic output together with weights of shape `L×w×w`; entry
/// `[i][a][b]` belongs to pair `(i − w/2 + a, i − w/2 + b)`.
pub fn triadic_windowed_with_weights<T: Real>(
    h: &HeadInputs<T>,
    w: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    h.validate()?;
    check_window(w)?;
    let (l, dh) = (h.len(), h.d_head());
    let (out, wts) = kernels::triadic_forward(
        h.q.data(),
        h.k.data(),
        h.v.data(),
        h.u.data(),
        &h.mask,
        dh,
        w,
    );
    Ok((
        Tensor::from_vec(&[l, dh], out)?.ensure_finite("triadic_attention_windowed")?,
        Tensor::from_vec(&[l, w, w], wts)?,
    ))
}

/// Weights of the fusion network `g`: affine → ReLU → affine, mapping
/// `[O2 ‖ O3]` (`2·d_head`) back to `d_head`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> FusionParams<T> {
    /// Hidden width of the fusion network for a given head width.
    pub fn hidden(d_head: usize) -> usize {
        2 * d_head
    }

    pub fn init(d_head: usize, rng: &mut Rng) -> Self {
        let h = Self::hidden(d_head);
        FusionParams {
            w1: Tensor::randn(&[2 * d_head, h], (1.0 / (2 * d_head) as f64).sqrt(), rng),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::randn(&[h, d_head], (1.0 / h as f64).sqrt(), rng),
            b2: Tensor::zeros(&[d_head]),
        }
    }

    pub fn d_head(&self) -> usize {
        self.w2.cols()
    }

    pub fn numel(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dh = self.d_head();
        let h = self.w1.cols();
        let ok = self.w1.shape() == [2 * dh, h]
            && self.b1.len() == h
            && self.w2.shape() == [h, dh]
            && self.b2.len() == dh;
        if !ok {
            return Err(HomaError::invalid("inconsistent fusion parameter shapes"));
        }
        Ok(())
    }
}

/// Fusion parameters bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FusionVars {
    pub fn leaves<T: Real>(tape: &mut Tape<T>, p: &FusionParams<T>) -> Self {
        FusionVars {
            w1: tape.leaf(p.w1.clone()),
            b1: tape.leaf(p.b1.clone()),
            w2: tape.leaf(p.w2.clone()),
            b2: tape.leaf(p.b2.clone()),
        }
    }

    pub fn constants<T: Real>(tape: &mut Tape<T>, p: &FusionParams<T>) -> Self {
        FusionVars {
            w1: tape.constant(p.w1.clone()),
            b1: tape.constant(p.b1.clone()),
            w2: tape.constant(p.w2.clone()),
            b2: tape.constant(p.b2.clone()),
        }
    }
}

/// `g([O2 ‖ O3])` row by row, recorded on `tape`.
pub fn fuse_on_tape<T: Real>(
    tape: &mut Tape<T>,
    o2: Var,
    o3: Var,
    p: FusionVars,
) -> Result<Var> {
    if tape.shape(o2) != tape.shape(o3) {
        return Err(HomaError::ShapeMismatch {
            op: "fuse",
            left: tape.shape(o2).to_vec(),
            right: tape.shape(o3).to_vec(),
        });
    }
    let cat = tape.concat_cols(o2, o3)?;
    let h = tape.matmul(cat, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, p.w2)?;
    tape.add_bias(y, p.b2)
}

pub fn fuse<T: Real>(o2: &Tensor<T>, o3: &Tensor<T>, p: &FusionParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    if o2.shape() != o3.shape() || o2.cols() != p.d_head() {
        return Err(HomaError::ShapeMismatch {
            op: "fuse",
            left: o2.shape().to_vec(),
            right: o3.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let a = tape.constant(o2.clone());
    let b = tape.constant(o3.clone());
    let vars = FusionVars::constants(&mut tape, p);
    let out = fuse_on_tape(&mut tape, a, b, vars)?;
    Ok(tape.value(out).clone())
}
