//! Per-head attention kernels with hand-written backward passes, and the
//! multi-head, multi-block tape operations built from them.
//!
//! Stacked layout: a tensor of `blocks · block_len` rows whose consecutive
//! `block_len`-row segments attend only within themselves. Head `h` owns the
//! column range `h·d_head .. (h+1)·d_head`.

use crate::error::{HomaError, Result};
use crate::tensor::{softmax_into, Real, Tape, Tensor, Var};

/// Contiguous copy of one head's columns for rows `rows`.
fn head_slice<T: Real>(t: &Tensor<T>, rows: std::ops::Range<usize>, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for r in rows {
        out.extend_from_slice(&t.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Real>(dst: &mut Tensor<T>, src: &[T], row0: usize, h: usize, dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        dst.row_mut(row0 + i)[h * dh..(h + 1) * dh].copy_from_slice(chunk);
    }
}

/// Pairwise attention for one head. `q` is `lq×dh`, `k`/`v` are `lk×dh`.
/// Returns the output (`lq×dh`) and the row-stochastic weights (`lq×lk`).
/// Masked queries produce zero rows; masked keys are excluded.
pub(crate) fn pairwise_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    qmask: &[bool],
    kmask: &[bool],
    dh: usize,
) -> (Vec<T>, Vec<T>) {
    let (lq, lk) = (qmask.len(), kmask.len());
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut weights = vec![T::zero(); lq * lk];
    let mut scores = vec![T::zero(); lk];
    let mut out = vec![T::zero(); lq * dh];
    for i in (0..lq).filter(|&i| qmask[i]) {
        let qi = &q[i * dh..(i + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * dh..(j + 1) * dh];
            *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        let wrow = &mut weights[i * lk..(i + 1) * lk];
        softmax_into(&scores, Some(kmask), wrow);
        let orow = &mut out[i * dh..(i + 1) * dh];
        for (j, &a) in wrow.iter().enumerate() {
            if a == T::zero() {
                continue;
            }
            for (o, &vv) in orow.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                *o = *o + a * vv;
            }
        }
    }
    (out, weights)
}

/// Gradients `(dq, dk, dv)` of [`pairwise_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn pairwise_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    lq: usize,
    lk: usize,
    dh: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = vec![T::zero(); lq * dh];
    let mut dk = vec![T::zero(); lk * dh];
    let mut dv = vec![T::zero(); lk * dh];
    let mut da = vec![T::zero(); lk];
    for i in 0..lq {
        let arow = &weights[i * lk..(i + 1) * lk];
        let doi = &dout[i * dh..(i + 1) * dh];
        let mut dot = T::zero();
        for j in 0..lk {
            let vj = &v[j * dh..(j + 1) * dh];
            da[j] = doi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
            dot = dot + arow[j] * da[j];
        }
        let qi = &q[i * dh..(i + 1) * dh];
        for j in 0..lk {
            let a = arow[j];
            if a == T::zero() {
                continue;
            }
            let ds = a * (da[j] - dot) * scale;
            let kj = &k[j * dh..(j + 1) * dh];
            for c in 0..dh {
                dq[i * dh + c] = dq[i * dh + c] + ds * kj[c];
                dk[j * dh + c] = dk[j * dh + c] + ds * qi[c];
                dv[j * dh + c] = dv[j * dh + c] + a * doi[c];
            }
        }
    }
    (dq, dk, dv)
}

/// Half-width and clipped range of the window centred on `i`.
fn window(i: usize, n: usize, w: usize) -> (usize, usize) {
    let r = w / 2;
    (i.saturating_sub(r), (i + r + 1).min(n))
}

/// Windowed triadic attention for one head over a length-`n` segment.
///
/// For query `i` the pairs `(j, k)` range over the centred window of width
/// `w` clipped to the segment; pairs touching a masked position are dropped
/// and the softmax renormalizes over what survives. The returned weights
/// have shape `n×w×w`, entry `[i][a][b]` belonging to pair
/// `(i − w/2 + a, i − w/2 + b)`.
pub(crate) fn triadic_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    u: &[T],
    mask: &[bool],
    dh: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let n = mask.len();
    let r = w / 2;
    let ww = w * w;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = vec![T::zero(); n * dh];
    let mut weights = vec![T::zero(); n * ww];
    let mut qk = vec![T::zero(); w * dh];
    let mut scores = vec![T::zero(); ww];
    let mut keep = vec![false; ww];
    let mut probs = vec![T::zero(); ww];
    let mut t = vec![T::zero(); dh];
    for i in (0..n).filter(|&i| mask[i]) {
        let (lo, hi) = window(i, n, w);
        let qi = &q[i * dh..(i + 1) * dh];
        for j in lo..hi {
            let kj = &k[j * dh..(j + 1) * dh];
            let row = &mut qk[(j - lo) * dh..(j - lo + 1) * dh];
            for c in 0..dh {
                row[c] = qi[c] * kj[c];
            }
        }
        keep.iter_mut().for_each(|x| *x = false);
        for j in lo..hi {
            let a = j + r - i;
            let qkj = &qk[(j - lo) * dh..(j - lo + 1) * dh];
            for kk in lo..hi {
                let b = kk + r - i;
                if !(mask[j] && mask[kk]) {
                    continue;
                }
                let uk = &u[kk * dh..(kk + 1) * dh];
                scores[a * w + b] = qkj.iter().zip(uk).map(|(&x, &y)| x * y).sum::<T>() * scale;
                keep[a * w + b] = true;
            }
        }
        softmax_into(&scores, Some(&keep), &mut probs);
        weights[i * ww..(i + 1) * ww].copy_from_slice(&probs);
        let oi = &mut out[i * dh..(i + 1) * dh];
        for j in lo..hi {
            let a = j + r - i;
            t.iter_mut().for_each(|x| *x = T::zero());
            let mut any = false;
            for kk in lo..hi {
                let p = probs[a * w + kk + r - i];
                if p == T::zero() {
                    continue;
                }
                any = true;
                for (tc, &vc) in t.iter_mut().zip(&v[kk * dh..(kk + 1) * dh]) {
                    *tc = *tc + p * vc;
                }
            }
            if any {
                for ((o, &tc), &vc) in oi.iter_mut().zip(&t).zip(&v[j * dh..(j + 1) * dh]) {
                    *o = *o + vc * tc;
                }
            }
        }
    }
    (out, weights)
}

/// Gradients `(dq, dk, dv, du)` of [`triadic_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn triadic_backward<T: Real>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    u: &[T],
    weights: &[T],
    n: usize,
    dh: usize,
    w: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let r = w / 2;
    let ww = w * w;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = vec![T::zero(); n * dh];
    let mut dk = vec![T::zero(); n * dh];
    let mut dv = vec![T::zero(); n * dh];
    let mut du = vec![T::zero(); n * dh];
    let mut pj = vec![T::zero(); w * dh];
    let mut da = vec![T::zero(); ww];
    let mut acc = vec![T::zero(); dh];
    let mut m = vec![T::zero(); dh];
    for i in 0..n {
        let probs = &weights[i * ww..(i + 1) * ww];
        if probs.iter().all(|&p| p == T::zero()) {
            continue;
        }
        let (lo, hi) = window(i, n, w);
        let doi = &dout[i * dh..(i + 1) * dh];
        let qi = &q[i * dh..(i + 1) * dh];
        // p_j = dO ⊙ v_j ; dA_jk = p_j · v_k
        for j in lo..hi {
            let vj = &v[j * dh..(j + 1) * dh];
            for c in 0..dh {
                pj[(j - lo) * dh + c] = doi[c] * vj[c];
            }
        }
        let mut dot = T::zero();
        for j in lo..hi {
            let a = j + r - i;
            let p = &pj[(j - lo) * dh..(j - lo + 1) * dh];
            for kk in lo..hi {
                let idx = a * w + kk + r - i;
                if probs[idx] == T::zero() {
                    continue;
                }
                let vk = &v[kk * dh..(kk + 1) * dh];
                da[idx] = p.iter().zip(vk).map(|(&x, &y)| x * y).sum();
                dot = dot + probs[idx] * da[idx];
            }
        }
        for j in lo..hi {
            let a = j + r - i;
            // m_j = Σ_k g_jk u_k ; t_j = Σ_k a_jk v_k
            m.iter_mut().for_each(|x| *x = T::zero());
            acc.iter_mut().for_each(|x| *x = T::zero());
            for kk in lo..hi {
                let idx = a * w + kk + r - i;
                let p = probs[idx];
                if p == T::zero() {
                    continue;
                }
                let g = p * (da[idx] - dot) * scale;
                let uk = &u[kk * dh..(kk + 1) * dh];
                let vk = &v[kk * dh..(kk + 1) * dh];
                let kj = &k[j * dh..(j + 1) * dh];
                let vj = &v[j * dh..(j + 1) * dh];
                for c in 0..dh {
                    m[c] = m[c] + g * uk[c];
                    acc[c] = acc[c] + p * vk[c];
                    // n_k contribution and the second value slot
                    du[kk * dh + c] = du[kk * dh + c] + g * qi[c] * kj[c];
                    dv[kk * dh + c] = dv[kk * dh + c] + p * doi[c] * vj[c];
                }
            }
            let kj = &k[j * dh..(j + 1) * dh];
            for c in 0..dh {
                dk[j * dh + c] = dk[j * dh + c] + qi[c] * m[c];
                dq[i * dh + c] = dq[i * dh + c] + kj[c] * m[c];
                dv[j * dh + c] = dv[j * dh + c] + doi[c] * acc[c];
            }
        }
        da.iter_mut().for_each(|x| *x = T::zero());
    }
    (dq, dk, dv, du)
}

/// Row structure shared by the multi-head tape operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub blocks: usize,
    pub query_len: usize,
    pub key_len: usize,
}

impl BlockLayout {
    /// `blocks` independent segments of `len` rows, queries and keys alike.
    pub fn uniform(blocks: usize, len: usize) -> Self {
        BlockLayout {
            blocks,
            query_len: len,
            key_len: len,
        }
    }
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(HomaError::invalid(format!(
            "width {d} not divisible into {heads} heads"
        )));
    }
    Ok(d / heads)
}

fn expect_rows<T: Real>(tape: &Tape<T>, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
    if tape.shape(v) != [rows, cols] {
        return Err(HomaError::invalid(format!(
            "{what}: expected [{rows}, {cols}], got {:?}",
            tape.shape(v)
        )));
    }
    Ok(())
}

/// Multi-head pairwise attention over a stacked block layout.
#[allow(clippy::too_many_arguments)]
pub fn pairwise_multihead<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    qmask: &[bool],
    kmask: &[bool],
    layout: BlockLayout,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = check_heads(d, heads)?;
    let nq = layout.blocks * layout.query_len;
    let nk = layout.blocks * layout.key_len;
    expect_rows(tape, q, nq, d, "pairwise q")?;
    expect_rows(tape, k, nk, d, "pairwise k")?;
    expect_rows(tape, v, nk, d, "pairwise v")?;
    if qmask.len() != nq || kmask.len() != nk {
        return Err(HomaError::invalid("pairwise mask length mismatch"));
    }
    let keep = tape.any_needs_grad(&[q, k, v]);
    let (qt, kt, vt) = (tape.value(q), tape.value(k), tape.value(v));
    let mut out = Tensor::zeros(&[nq, d]);
    let mut saved = Vec::new();
    for b in 0..layout.blocks {
        let qr = b * layout.query_len..(b + 1) * layout.query_len;
        let kr = b * layout.key_len..(b + 1) * layout.key_len;
        for h in 0..heads {
            let (o, wts) = pairwise_forward(
                &head_slice(qt, qr.clone(), h, dh),
                &head_slice(kt, kr.clone(), h, dh),
                &head_slice(vt, kr.clone(), h, dh),
                &qmask[qr.clone()],
                &kmask[kr.clone()],
                dh,
            );
            scatter_head(&mut out, &o, qr.start, h, dh);
            if keep {
                saved.push(wts);
            }
        }
    }
    tape.push_op(
        "pairwise_attention",
        out,
        vec![q, k, v],
        Box::new(move |g, p, _| {
            let mut dq = Tensor::zeros(p[0].shape());
            let mut dk = Tensor::zeros(p[1].shape());
            let mut dv = Tensor::zeros(p[2].shape());
            for b in 0..layout.blocks {
                let qr = b * layout.query_len..(b + 1) * layout.query_len;
                let kr = b * layout.key_len..(b + 1) * layout.key_len;
                for h in 0..heads {
                    let (gq, gk, gv) = pairwise_backward(
                        &head_slice(g, qr.clone(), h, dh),
                        &head_slice(p[0], qr.clone(), h, dh),
                        &head_slice(p[1], kr.clone(), h, dh),
                        &head_slice(p[2], kr.clone(), h, dh),
                        &saved[b * heads + h],
                        layout.query_len,
                        layout.key_len,
                        dh,
                    );
                    scatter_head(&mut dq, &gq, qr.start, h, dh);
                    scatter_head(&mut dk, &gk, kr.start, h, dh);
                    scatter_head(&mut dv, &gv, kr.start, h, dh);
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        }),
    )
}

/// Multi-head windowed triadic attention over a stacked block layout
/// (queries and keys share the layout).
#[allow(clippy::too_many_arguments)]
pub fn triadic_multihead<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    u: Var,
    mask: &[bool],
    layout: BlockLayout,
    heads: usize,
    w: usize,
) -> Result<Var> {
    check_window(w)?;
    if layout.query_len != layout.key_len {
        return Err(HomaError::invalid("triadic attention needs a square layout"));
    }
    let d = tape.shape(q)[1];
    let dh = check_heads(d, heads)?;
    let n = layout.query_len;
    let rows = layout.blocks * n;
    for (var, what) in [(q, "q"), (k, "k"), (v, "v"), (u, "u")] {
        expect_rows(tape, var, rows, d, what)?;
    }
    if mask.len() != rows {
        return Err(HomaError::invalid("triadic mask length mismatch"));
    }
    let keep = tape.any_needs_grad(&[q, k, v, u]);
    let mut out = Tensor::zeros(&[rows, d]);
    let mut saved = Vec::new();
    for b in 0..layout.blocks {
        let rr = b * n..(b + 1) * n;
        for h in 0..heads {
            let slice = |t: Var| head_slice(tape.value(t), rr.clone(), h, dh);
            let (o, wts) = triadic_forward(
                &slice(q),
                &slice(k),
                &slice(v),
                &slice(u),
                &mask[rr.clone()],
                dh,
                w,
            );
            scatter_head(&mut out, &o, rr.start, h, dh);
            if keep {
                saved.push(wts);
            }
        }
    }
    tape.push_op(
        "triadic_attention",
        out,
        vec![q, k, v, u],
        Box::new(move |g, p, _| {
            let mut grads: Vec<Tensor<T>> = (0..4).map(|i| Tensor::zeros(p[i].shape())).collect();
            for b in 0..layout.blocks {
                let rr = b * n..(b + 1) * n;
                for h in 0..heads {
                    let s = |t: &Tensor<T>| head_slice(t, rr.clone(), h, dh);
                    let (gq, gk, gv, gu) = triadic_backward(
                        &s(g),
                        &s(p[0]),
                        &s(p[1]),
                        &s(p[2]),
                        &s(p[3]),
                        &saved[b * heads + h],
                        n,
                        dh,
                        w,
                    );
                    for (dst, src) in grads.iter_mut().zip([gq, gk, gv, gu]) {
                        scatter_head(dst, &src, rr.start, h, dh);
                    }
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    )
}

pub(crate) fn check_window(w: usize) -> Result<()> {
    if w == 0 || w.is_multiple_of(2) {
        return Err(HomaError::invalid(format!(
            "triadic window must be a positive odd integer, got {w}"
        )));
    }
    Ok(())
}
