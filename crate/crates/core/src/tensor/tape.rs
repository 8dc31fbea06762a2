use std::collections::{BTreeMap, HashMap};

use super::{gemm_nt, gemm_tn, softmax_into, Real, Tensor};
use crate::error::{HomaError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identity of a trainable parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Gradient rule of one node: given the upstream gradient, the parent values
/// and which parents need a gradient, return one gradient per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    value: Tensor<T>,
    frozen: bool,
}

/// Named parameter tensors, ordered by insertion.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(HomaError::ShapeMismatch {
                op: "ParamStore::set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * T::BYTES
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

/// Gradient buffers keyed by parameter identity. Successive backward passes
/// accumulate until [`Gradients::clear`] is called.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            grads: HashMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Gradient of `id`, or zeros shaped like the parameter when it never
    /// received one.
    pub fn get_or_zeros(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }
}

/// Reverse-mode differentiation tape. Nodes are appended after their
/// parents, so index order is a topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn any_needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].needs_grad)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Records an input whose gradient can be read back with [`Tape::grads_of`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Binds a parameter, reusing the existing node if already bound on this
    /// tape. Frozen parameters are recorded without gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), !store.is_frozen(id), Some(id));
        self.bound.insert(id, v);
        v
    }

    /// Like [`Tape::param`] but never records a gradient.
    pub fn param_constant(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), false, Some(id));
        self.bound.insert(id, v);
        v
    }

    /// Records a computed node. `backward` is dropped when no parent needs a
    /// gradient.
    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let value = value.ensure_finite(op)?;
        let needs_grad = self.any_needs_grad(&parents);
        self.nodes.push(Node {
            value,
            parents,
            backward: needs_grad.then_some(backward),
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(HomaError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parents: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| {
                    assert!(p.0 < idx, "tape cycle: parent {} of node {idx}", p.0);
                    &self.nodes[p.0].value
                })
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].needs_grad)
                .collect();
            let pgrads = backward(&g, &parents, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for ((p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(grads)
    }

    /// Back-propagates `loss` and accumulates parameter gradients into `out`.
    pub fn backward(&self, loss: Var, out: &mut Gradients<T>) -> Result<()> {
        let grads = self.run_backward(loss)?;
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (Some(id), Some(g), true) = (node.param, g, node.needs_grad) {
                out.accumulate(id, &g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to each of `vars` (zeros when `loss`
    /// does not depend on it).
    pub fn grads_of(&self, loss: Var, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.run_backward(loss)?;
        Ok(vars
            .iter()
            .map(|v| {
                grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()))
            })
            .collect())
    }

    fn expect_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(HomaError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [m, n] => Ok((m, n)),
            ref s => Err(HomaError::invalid(format!(
                "{op} needs a rank-2 tensor, got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.dims2("matmul", a)?;
        let n = self.shape(b)[1];
        self.push_op(
            "matmul",
            value,
            vec![a, b],
            Box::new(move |g, p, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm_nt(g.data(), p[1].data(), &mut d, m, n, k);
                    Tensor::from_vec(&[m, k], d).expect("shape")
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm_tn(p[0].data(), g.data(), &mut d, m, k, n);
                    Tensor::from_vec(&[k, n], d).expect("shape")
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        self.push_op(
            "add",
            value,
            vec![a, b],
            Box::new(|g, _, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        self.push_op(
            "sub",
            value,
            vec![a, b],
            Box::new(|g, _, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.scale(-T::one())),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_shape("hadamard", a, b)?;
        let value = self.value(a).hadamard(self.value(b))?;
        self.push_op(
            "hadamard",
            value,
            vec![a, b],
            Box::new(|g, p, need| {
                vec![
                    need[0].then(|| g.hadamard(p[1]).expect("shape")),
                    need[1].then(|| g.hadamard(p[0]).expect("shape")),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push_op(
            "scale",
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.scale(s))]),
        )
    }

    /// Elementwise product with a non-differentiable tensor (dropout masks,
    /// row masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        self.push_op(
            "mul_const",
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.hadamard(&c).expect("shape"))]),
        )
    }

    /// Adds a length-`n` bias to every row of an `m×n` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.value(bias).len() != n {
            return Err(HomaError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..m {
            for (x, &bv) in value.row_mut(r).iter_mut().zip(&b) {
                *x = *x + bv;
            }
        }
        let bias_shape = self.shape(bias).to_vec();
        self.push_op(
            "add_bias",
            value,
            vec![a, bias],
            Box::new(move |g, _, need| {
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); n];
                    for r in 0..m {
                        for (acc, &x) in d.iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    Tensor::from_vec(&bias_shape, d).expect("shape")
                });
                vec![need[0].then(|| g.clone()), gb]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push_op(
            "relu",
            value,
            vec![a],
            Box::new(|g, p, _| {
                let mut d = g.clone();
                for (x, &inp) in d.data_mut().iter_mut().zip(p[0].data()) {
                    if inp <= T::zero() {
                        *x = T::zero();
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let orig = self.shape(a).to_vec();
        self.push_op(
            "reshape",
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.reshape(&orig).expect("shape"))]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push_op(
            "transpose",
            value,
            vec![a],
            Box::new(|g, _, _| vec![Some(g.transpose().expect("rank 2"))]),
        )
    }

    /// `[a ‖ b]` along columns of two tensors with equal row count.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.dims2("concat_cols", a)?;
        let (mb, nb) = self.dims2("concat_cols", b)?;
        if m != mb {
            return Err(HomaError::ShapeMismatch {
                op: "concat_cols",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let n = na + nb;
        let mut d = Vec::with_capacity(m * n);
        for r in 0..m {
            d.extend_from_slice(self.value(a).row(r));
            d.extend_from_slice(self.value(b).row(r));
        }
        let value = Tensor::from_vec(&[m, n], d)?;
        self.push_op(
            "concat_cols",
            value,
            vec![a, b],
            Box::new(move |g, _, need| {
                let split = |lo: usize, w: usize| {
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g.row(r)[lo..lo + w]);
                    }
                    Tensor::from_vec(&[m, w], d).expect("shape")
                };
                vec![need[0].then(|| split(0, na)), need[1].then(|| split(na, nb))]
            }),
        )
    }

    /// Row gather: output row `r` is row `idx[r]` of `a`. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(HomaError::invalid(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let mut d = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            d.extend_from_slice(self.value(a).row(i));
        }
        let value = Tensor::from_vec(&[idx.len(), n], d)?;
        let idx = idx.to_vec();
        self.push_op(
            "gather_rows",
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(&[m, n]);
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push_op(
            "sum",
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    /// Differentiable softmax over the last dimension; see
    /// [`Tensor::softmax_lastdim`] for the mask convention.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let value = self.value(a).softmax_lastdim(mask)?;
        let n = value.cols();
        let y = value.clone();
        self.push_op(
            "softmax",
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.len() / n {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(HomaError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::c(eps);
        let nf = T::c(n as f64);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..n {
                let h = (row[c] - mean) * istd;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        let gshape = self.shape(gamma).to_vec();
        self.push_op(
            "layer_norm",
            value,
            vec![x, gamma, beta],
            Box::new(move |g, p, need| {
                let gam = p[1].data();
                let gx = need[0].then(|| {
                    let mut d = vec![T::zero(); m * n];
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            s1 = s1 + dh;
                            s2 = s2 + dh * xh[c];
                        }
                        for c in 0..n {
                            let dh = gr[c] * gam[c];
                            d[r * n + c] = inv_std[r] * (dh - s1 / nf - xh[c] * s2 / nf);
                        }
                    }
                    Tensor::from_vec(&[m, n], d).expect("shape")
                });
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                if need[1] || need[2] {
                    for r in 0..m {
                        for c in 0..n {
                            let gv = g.data()[r * n + c];
                            dg[c] = dg[c] + gv * xhat[r * n + c];
                            db[c] = db[c] + gv;
                        }
                    }
                }
                vec![
                    gx,
                    need[1].then(|| Tensor::from_vec(&gshape, dg).expect("shape")),
                    need[2].then(|| Tensor::from_vec(&gshape, db).expect("shape")),
                ]
            }),
        )
    }

    /// Mean of the rows selected by `mask`, as a `1×n` tensor. An empty
    /// selection pools to the zero vector.
    pub fn mean_rows_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows_masked", a)?;
        if mask.len() != m {
            return Err(HomaError::ShapeMismatch {
                op: "mean_rows_masked",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        let inv = if count == 0 {
            T::zero()
        } else {
            T::one() / T::c(count as f64)
        };
        let mut d = vec![T::zero(); n];
        for r in (0..m).filter(|&r| mask[r]) {
            for (acc, &x) in d.iter_mut().zip(self.value(a).row(r)) {
                *acc = *acc + x;
            }
        }
        d.iter_mut().for_each(|x| *x = *x * inv);
        let value = Tensor::from_vec(&[1, n], d)?;
        let mask = mask.to_vec();
        self.push_op(
            "mean_rows_masked",
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let mut d = Tensor::zeros(&[m, n]);
                for r in (0..m).filter(|&r| mask[r]) {
                    for (o, &x) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x * inv;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Summed softmax cross-entropy of `logits` (`N×C`) against class labels;
    /// entries equal to `ignore` contribute nothing. Returns the summed loss
    /// and the number of counted rows.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        labels: &[i64],
        ignore: i64,
    ) -> Result<(Var, usize)> {
        let (m, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != m {
            return Err(HomaError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); m * c];
        let mut loss = T::zero();
        let mut counted = 0;
        for r in 0..m {
            let y = labels[r];
            if y == ignore {
                continue;
            }
            if y < 0 || y as usize >= c {
                return Err(HomaError::invalid(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            softmax_into(lv.row(r), None, &mut probs[r * c..(r + 1) * c]);
            loss = loss - probs[r * c + y as usize].max(T::min_positive_value()).ln();
            counted += 1;
        }
        let labels = labels.to_vec();
        let var = self.push_op(
            "cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _, _| {
                let gs = g.item();
                let mut d = vec![T::zero(); m * c];
                for r in 0..m {
                    let y = labels[r];
                    if y == ignore {
                        continue;
                    }
                    for k in 0..c {
                        let ind = if k as i64 == y { T::one() } else { T::zero() };
                        d[r * c + k] = gs * (probs[r * c + k] - ind);
                    }
                }
                vec![Some(Tensor::from_vec(&[m, c], d).expect("shape"))]
            }),
        )?;
        Ok((var, counted))
    }

    /// Summed squared error between a prediction of any shape and targets
    /// of the same length.
    pub fn squared_error_sum(&mut self, pred: Var, targets: &[T]) -> Result<Var> {
        if self.value(pred).len() != targets.len() {
            return Err(HomaError::ShapeMismatch {
                op: "squared_error",
                left: self.shape(pred).to_vec(),
                right: vec![targets.len()],
            });
        }
        let diff: Vec<T> = self
            .value(pred)
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| p - t)
            .collect();
        let loss = diff.iter().map(|&d| d * d).sum();
        let shape = self.shape(pred).to_vec();
        self.push_op(
            "squared_error",
            Tensor::scalar(loss),
            vec![pred],
            Box::new(move |g, _, _| {
                let two = T::c(2.0) * g.item();
                let d = diff.iter().map(|&x| two * x).collect();
                vec![Some(Tensor::from_vec(&shape, d).expect("shape"))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn half_sum_of_squares_has_gradient_p() {
        let mut store = ParamStore::new();
        let p = store.add(
            "p",
            Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap(),
        );
        let mut tape = Tape::new();
        let pv = tape.param(&store, p);
        let sq = tape.hadamard(pv, pv).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let mut grads = Gradients::new();
        tape.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), store.get(p).data());

        // second pass accumulates
        tape.backward(loss, &mut grads).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::<f64>::ones(&[2]));
        let unused = store.add("unused", Tensor::<f64>::ones(&[2]));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let loss = tape.sum(u).unwrap();
        let mut grads = Gradients::new();
        tape.backward(loss, &mut grads).unwrap();
        let g = grads.get_or_zeros(&store, unused);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(tape.grads_of(x, &[x]).is_err());
    }

    #[test]
    fn frozen_parameters_receive_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::<f64>::ones(&[2]));
        store.set_frozen(p, true);
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = tape.sum(v).unwrap();
        let mut grads = Gradients::new();
        tape.backward(loss, &mut grads).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn matmul_gradient_of_sum_is_ones_times_bt() {
        let mut rng = Rng::new(11);
        let a = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.constant(b.clone());
        let y = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(y).unwrap();
        let ga = &tape.grads_of(loss, &[av]).unwrap()[0];
        let expected = Tensor::ones(&[5, 3]).matmul(&b.transpose().unwrap()).unwrap();
        assert!(ga.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn cross_entropy_skips_ignored_rows() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let (loss, n) = tape.cross_entropy_sum(logits, &[2, -100], -100).unwrap();
        assert_eq!(n, 1);
        let expected = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        let g = &tape.grads_of(loss, &[logits]).unwrap()[0];
        assert!(g.row(1).iter().all(|&x| x == 0.0));
    }
}
