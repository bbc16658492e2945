//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order. Because an op can only
//! reference nodes that already exist, creation order is a topological
//! order, and [`Graph::backward`] visits nodes in reverse creation order,
//! each exactly once. Gradient contributions to a node are summed in that
//! fixed order, so the result is deterministic for a fixed graph.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one op: receives the gradient of the op's output, read
/// access to every node value, and the gradient accumulators.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Values<'_, T>, &mut Grads<T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Read-only view of node values during the backward pass.
pub struct Values<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Scalar> Values<'_, T> {
    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

/// Gradient accumulators, one lazily allocated buffer per node.
pub struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
    requires: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    /// Accumulator for `v`, or `None` when `v` does not need a gradient.
    pub fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let len = self.lens[v.0];
        Some(self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    bufs: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (or parameter) node. Zero if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.bufs[v.0] {
            Some(b) => Tensor::new(shape, b.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradients indexed by parameter id, `None` for parameters the graph never used.
    pub fn params(&self, store_len: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; store_len];
        for &(id, v) in &self.params {
            out[id.0] = Some(self.get(v));
        }
        out
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Softplus,
    Silu,
    Gelu,
    Sigmoid,
    Relu,
}

impl Unary {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => kernels::softplus(x),
            Unary::Silu => kernels::silu(x),
            Unary::Gelu => kernels::gelu(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Relu => x.max(T::zero()),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Silu => kernels::silu_grad(x),
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Sigmoid => {
                let s = kernels::sigmoid(x);
                s * (T::one() - s)
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_vars: Vec<(ParamId, Var)>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            param_vars: Vec::new(),
            macs: 0,
        }
    }

    /// A graph that records no backward rules (inference only).
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul-like ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            backward: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        self.param_vars.push((id, v));
        v
    }

    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    /// Whether an op over `parents` must record a backward rule.
    pub fn needs_grad(&self, parents: &[Var]) -> bool {
        self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    /// Appends an op node. `backward` is dropped when no parent needs a gradient.
    pub fn push_op(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() && parents.iter().all(|p| self.nodes[p.0].value.is_finite()) {
            panic!("op produced non-finite output from finite inputs: {value:?}");
        }
        let requires_grad = self.needs_grad(parents);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads = Grads {
            bufs: vec![None; n],
            lens: self.nodes[..n].iter().map(|nd| nd.value.len()).collect(),
            requires: self.nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
        };
        if grads.requires[loss.0] {
            grads.bufs[loss.0] = Some(vec![T::one()]);
        }
        let values = Values {
            nodes: &self.nodes[..n],
        };
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(buf) = grads.bufs[i].take() else {
                continue;
            };
            let gout = Tensor::new(node.value.shape(), buf).expect("gradient shape");
            backward(&gout, &values, &mut grads);
            // Intermediate gradients are released once propagated.
        }
        Ok(Gradients {
            bufs: grads.bufs,
            shapes: self.nodes[..n]
                .iter()
                .map(|nd| nd.value.shape().to_vec())
                .collect(),
            params: self
                .param_vars
                .iter()
                .copied()
                .filter(|(_, v)| v.0 < n)
                .collect(),
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = Tensor::new(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect(),
        )?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, _, grads| {
                for v in [a, b] {
                    if let Some(acc) = grads.acc(v) {
                        for (o, &gi) in acc.iter_mut().zip(g.data()) {
                            *o += gi;
                        }
                    }
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = Tensor::new(
            va.shape(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, vals, grads| {
                for (v, other) in [(a, b), (b, a)] {
                    let ov = vals.get(other).data();
                    if let Some(acc) = grads.acc(v) {
                        for ((o, &gi), &y) in acc.iter_mut().zip(g.data()).zip(ov) {
                            *o += gi * y;
                        }
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |g, _, grads| {
                if let Some(acc) = grads.acc(a) {
                    for (o, &gi) in acc.iter_mut().zip(g.data()) {
                        *o += gi * s;
                    }
                }
            }),
        ))
    }

    pub fn unary(&mut self, a: Var, op: Unary) -> Result<Var> {
        let out = self.value(a).map(|x| op.apply(x));
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |g, vals, grads| {
                let x = vals.get(a).data();
                if let Some(acc) = grads.acc(a) {
                    for ((o, &gi), &xi) in acc.iter_mut().zip(g.data()).zip(x) {
                        *o += gi * op.derivative(xi);
                    }
                }
            }),
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push_op(
            out,
            &[a],
            Box::new(move |g, _, grads| {
                let gi = g.data()[0];
                if let Some(acc) = grads.acc(a) {
                    for o in acc.iter_mut() {
                        *o += gi;
                    }
                }
            }),
        ))
    }

    /// Rank-2 product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(format!("matmul: {sa:?} · {sb:?}")));
            }
        };
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, vals, grads| {
                if let Some(acc) = grads.acc(a) {
                    matmul_bt_acc(g.data(), vals.get(b).data(), acc, m, n, k);
                }
                if let Some(acc) = grads.acc(b) {
                    matmul_at_acc(vals.get(a).data(), g.data(), acc, m, k, n);
                }
            }),
        ))
    }

    /// Affine map over the last axis: `x[…, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (fan_in, fan_out) = match self.shape(w) {
            [i, o] => (*i, *o),
            s => return Err(Error::shape(format!("linear weight must be rank 2, got {s:?}"))),
        };
        if self.value(x).last_dim() != fan_in {
            return Err(Error::shape(format!(
                "linear: input {:?} vs weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} vs {fan_out} outputs",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        matmul_acc(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            rows,
            fan_in,
            fan_out,
        );
        self.macs += (rows * fan_in * fan_out) as u64;
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let out = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(
            out,
            &parents,
            Box::new(move |g, vals, grads| {
                if let Some(acc) = grads.acc(x) {
                    matmul_bt_acc(g.data(), vals.get(w).data(), acc, rows, fan_out, fan_in);
                }
                if let Some(acc) = grads.acc(w) {
                    matmul_at_acc(vals.get(x).data(), g.data(), acc, rows, fan_in, fan_out);
                }
                if let Some(b) = b {
                    if let Some(acc) = grads.acc(b) {
                        for row in g.data().chunks_exact(fan_out) {
                            for (o, &gi) in acc.iter_mut().zip(row) {
                                *o += gi;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm: input {:?}, gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let xv = self.value(x);
        let rows = xv.rows();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |g, vals, grads| {
                let xd = vals.get(x).data();
                let gam = vals.get(gamma).data();
                let gd = g.data();
                let xhat = |r: usize, j: usize| (xd[r * c + j] - mean[r]) * rstd[r];
                if let Some(acc) = grads.acc(gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            acc[j] += gd[r * c + j] * xhat(r, j);
                        }
                    }
                }
                if let Some(acc) = grads.acc(beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            acc[j] += gd[r * c + j];
                        }
                    }
                }
                if let Some(acc) = grads.acc(x) {
                    let mut dxhat = vec![T::zero(); c];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            dxhat[j] = gd[r * c + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat(r, j);
                        }
                        m1 /= cn;
                        m2 /= cn;
                        for j in 0..c {
                            acc[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }),
        ))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.value(x).last_dim();
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_last: {start}..{} out of {c} channels",
                start + len
            )));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for row in xv.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(acc) = grads.acc(x) {
                    for (arow, grow) in acc.chunks_exact_mut(c).zip(g.data().chunks_exact(len)) {
                        for (o, &gi) in arow[start..start + len].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenation along the last axis, in argument order.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_last of nothing"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!(
                    "concat_last: {:?} vs {:?}",
                    self.shape(first),
                    s
                )));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for (orow, prow) in out
                .chunks_exact_mut(total)
                .zip(self.value(p).data().chunks_exact(w))
            {
                orow[off..off + w].copy_from_slice(prow);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        let parts_owned = parts.to_vec();
        Ok(self.push_op(
            out,
            parts,
            Box::new(move |g, _, grads| {
                let mut off = 0;
                for (&p, &w) in parts_owned.iter().zip(&widths) {
                    if let Some(acc) = grads.acc(p) {
                        for (arow, grow) in
                            acc.chunks_exact_mut(w).zip(g.data().chunks_exact(total))
                        {
                            for (o, &gi) in arow.iter_mut().zip(&grow[off..off + w]) {
                                *o += gi;
                            }
                        }
                    }
                    off += w;
                }
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(acc) = grads.acc(x) {
                    for (o, &gi) in acc.iter_mut().zip(g.data()) {
                        *o += gi;
                    }
                }
            }),
        ))
    }

    /// Reorders the token axis of a `(B, L, C)` sequence: `out[b, i] = x[b, order[i]]`.
    pub fn gather_tokens(&mut self, x: Var, order: Arc<[usize]>) -> Result<Var> {
        let [b, l, c] = self.value(x).dims3()?;
        if order.len() != l || order.iter().any(|&i| i >= l) {
            return Err(Error::shape(format!(
                "gather_tokens: order of length {} for {l} tokens",
                order.len()
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for bi in 0..b {
            for &src in order.iter() {
                let o = (bi * l + src) * c;
                out.extend_from_slice(&xd[o..o + c]);
            }
        }
        let out = Tensor::new(&[b, l, c], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(acc) = grads.acc(x) {
                    let gd = g.data();
                    for bi in 0..b {
                        for (i, &src) in order.iter().enumerate() {
                            let so = (bi * l + src) * c;
                            let go = (bi * l + i) * c;
                            for j in 0..c {
                                acc[so + j] += gd[go + j];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Depthwise 1-D convolution along the token axis of a `(B, L, C)`
    /// sequence with `w[C, k]` (odd `k`, zero padding on both sides) and bias `b[C]`.
    pub fn dwconv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [bn, l, c] = self.value(x).dims3()?;
        let k = match self.shape(w) {
            [cw, k] if *cw == c && k % 2 == 1 => *k,
            s => return Err(Error::shape(format!("dwconv1d: weight {s:?} for {c} channels"))),
        };
        if self.shape(b) != [c] {
            return Err(Error::shape(format!("dwconv1d: bias {:?}", self.shape(b))));
        }
        let pad = k / 2;
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..bn {
            for t in 0..l {
                let orow = &mut out[(bi * l + t) * c..(bi * l + t + 1) * c];
                orow.copy_from_slice(bd);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                        continue;
                    };
                    let xrow = &xd[(bi * l + src) * c..(bi * l + src + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wd[ch * k + j] * xrow[ch];
                    }
                }
            }
        }
        self.macs += (bn * l * c * k) as u64;
        let out = Tensor::new(&[bn, l, c], out)?;
        Ok(self.push_op(
            out,
            &[x, w, b],
            Box::new(move |g, vals, grads| {
                let gd = g.data();
                if let Some(acc) = grads.acc(b) {
                    for row in gd.chunks_exact(c) {
                        for (o, &gi) in acc.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                let xd = vals.get(x).data();
                let wd = vals.get(w).data();
                let mut dw = grads.wants(w).then(|| vec![T::zero(); c * k]);
                let mut dx = grads.wants(x).then(|| vec![T::zero(); xd.len()]);
                for bi in 0..bn {
                    for t in 0..l {
                        let grow = &gd[(bi * l + t) * c..(bi * l + t + 1) * c];
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < l) else {
                                continue;
                            };
                            let so = (bi * l + src) * c;
                            for ch in 0..c {
                                if let Some(dw) = dw.as_mut() {
                                    dw[ch * k + j] += grow[ch] * xd[so + ch];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[so + ch] += grow[ch] * wd[ch * k + j];
                                }
                            }
                        }
                    }
                }
                if let (Some(dw), Some(acc)) = (dw, grads.acc(w)) {
                    for (o, v) in acc.iter_mut().zip(dw) {
                        *o += v;
                    }
                }
                if let (Some(dx), Some(acc)) = (dx, grads.acc(x)) {
                    for (o, v) in acc.iter_mut().zip(dx) {
                        *o += v;
                    }
                }
            }),
        ))
    }

    /// 2-D convolution over a `(B, H, W, Cin)` map with a square kernel.
    ///
    /// `w` has shape `[k, k, Cin, Cout]`, `b` has shape `[Cout]`; output
    /// size is `(H + 2·pad − k) / stride + 1` per spatial axis.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [bn, h, wd_, ci] = self.value(x).dims4()?;
        let (k, co) = match self.shape(w) {
            [k1, k2, c_in, c_out] if k1 == k2 && *c_in == ci => (*k1, *c_out),
            s => {
                return Err(Error::shape(format!(
                    "conv2d: weight {s:?} for input {:?}",
                    self.shape(x)
                )))
            }
        };
        if self.shape(b) != [co] {
            return Err(Error::shape(format!("conv2d: bias {:?}", self.shape(b))));
        }
        if stride == 0 || h + 2 * pad < k || wd_ + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} on {h}x{wd_}"
            )));
        }
        let geo = ConvGeometry {
            h,
            w: wd_,
            ci,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd_ + 2 * pad - k) / stride + 1,
        };
        let patch = k * k * ci;
        let npix = geo.ho * geo.wo;
        let xd = self.value(x).data();
        let wv = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); bn * npix * co];
        let mut cols = vec![T::zero(); npix * patch];
        for bi in 0..bn {
            geo.im2col(&xd[bi * h * wd_ * ci..(bi + 1) * h * wd_ * ci], &mut cols);
            let o = &mut out[bi * npix * co..(bi + 1) * npix * co];
            for row in o.chunks_exact_mut(co) {
                row.copy_from_slice(bias);
            }
            matmul_acc(&cols, wv, o, npix, patch, co);
        }
        self.macs += (bn * npix * patch * co) as u64;
        let out = Tensor::new(&[bn, geo.ho, geo.wo, co], out)?;
        Ok(self.push_op(
            out,
            &[x, w, b],
            Box::new(move |g, vals, grads| {
                let gd = g.data();
                if let Some(acc) = grads.acc(b) {
                    for row in gd.chunks_exact(co) {
                        for (o, &gi) in acc.iter_mut().zip(row) {
                            *o += gi;
                        }
                    }
                }
                let xd = vals.get(x).data();
                let wv = vals.get(w).data();
                let in_len = h * wd_ * ci;
                let mut cols = vec![T::zero(); npix * patch];
                let mut dw = grads.wants(w).then(|| vec![T::zero(); patch * co]);
                let mut dx = grads.wants(x).then(|| vec![T::zero(); xd.len()]);
                for bi in 0..bn {
                    let gb = &gd[bi * npix * co..(bi + 1) * npix * co];
                    if let Some(dw) = dw.as_mut() {
                        geo.im2col(&xd[bi * in_len..(bi + 1) * in_len], &mut cols);
                        matmul_at_acc(&cols, gb, dw, npix, patch, co);
                    }
                    if let Some(dx) = dx.as_mut() {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        matmul_bt_acc(gb, wv, &mut cols, npix, co, patch);
                        geo.col2im(&cols, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                if let (Some(dw), Some(acc)) = (dw, grads.acc(w)) {
                    for (o, v) in acc.iter_mut().zip(dw) {
                        *o += v;
                    }
                }
                if let (Some(dx), Some(acc)) = (dx, grads.acc(x)) {
                    for (o, v) in acc.iter_mut().zip(dx) {
                        *o += v;
                    }
                }
            }),
        ))
    }

    /// Mean over every axis between batch and channels: `(B, …, C) → (B, C)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape(format!("mean_spatial needs rank >= 3, got {shape:?}")));
        }
        let (bn, c) = (shape[0], shape[shape.len() - 1]);
        let positions = self.value(x).len() / (bn * c);
        let inv = T::one() / T::of(positions as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); bn * c];
        for bi in 0..bn {
            let o = &mut out[bi * c..(bi + 1) * c];
            for p in 0..positions {
                let row = &xd[(bi * positions + p) * c..(bi * positions + p + 1) * c];
                for (s, &v) in o.iter_mut().zip(row) {
                    *s += v;
                }
            }
            o.iter_mut().for_each(|s| *s *= inv);
        }
        let out = Tensor::new(&[bn, c], out)?;
        Ok(self.push_op(
            out,
            &[x],
            Box::new(move |g, _, grads| {
                if let Some(acc) = grads.acc(x) {
                    let gd = g.data();
                    for bi in 0..bn {
                        for p in 0..positions {
                            let o = (bi * positions + p) * c;
                            for j in 0..c {
                                acc[o + j] += gd[bi * c + j] * inv;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Per-sample, per-channel scaling: `out[b, …, c] = x[b, …, c] · s[b, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (bn, c) = (shape[0], shape[shape.len() - 1]);
        if shape.len() < 2 || self.shape(s) != [bn, c] {
            return Err(Error::shape(format!(
                "channel_scale: {:?} by {:?}",
                shape,
                self.shape(s)
            )));
        }
        let positions = self.value(x).len() / (bn * c);
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..bn {
            let sv = &sd[bi * c..(bi + 1) * c];
            for p in 0..positions {
                let o = (bi * positions + p) * c;
                for j in 0..c {
                    out[o + j] = xd[o + j] * sv[j];
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(
            out,
            &[x, s],
            Box::new(move |g, vals, grads| {
                let gd = g.data();
                let xd = vals.get(x).data();
                let sd = vals.get(s).data();
                if let Some(acc) = grads.acc(x) {
                    for bi in 0..bn {
                        for p in 0..positions {
                            let o = (bi * positions + p) * c;
                            for j in 0..c {
                                acc[o + j] += gd[o + j] * sd[bi * c + j];
                            }
                        }
                    }
                }
                if let Some(acc) = grads.acc(s) {
                    for bi in 0..bn {
                        for p in 0..positions {
                            let o = (bi * positions + p) * c;
                            for j in 0..c {
                                acc[bi * c + j] += gd[o + j] * xd[o + j];
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Label-smoothed cross-entropy summed over rows and divided by `denom`.
    ///
    /// Each row's target puts `1 − smoothing` on its label plus
    /// `smoothing / K` on every class. Returns shape `[1]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        smoothing: f64,
        denom: usize,
    ) -> Result<Var> {
        let (rows, k) = match self.shape(logits) {
            [r, k] => (*r, *k),
            s => return Err(Error::shape(format!("cross_entropy: logits {s:?}"))),
        };
        if labels.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Domain(format!("label {bad} out of range for {k} classes")));
        }
        if !(0.0..1.0).contains(&smoothing) || denom == 0 {
            return Err(Error::Domain(format!(
                "cross_entropy: smoothing {smoothing} must be in [0, 1), denom {denom} > 0"
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut total = T::zero();
        let on = T::of(1.0 - smoothing);
        let off = T::of(smoothing / k as f64);
        for r in 0..rows {
            let row = &ld[r * k..(r + 1) * k];
            let top = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            let m = row[top];
            let rest: T = (0..k)
                .filter(|&j| j != top)
                .map(|j| (row[j] - m).exp())
                .sum();
            // log-sum-exp relative to the max, exact when one logit dominates
            let shifted = rest.ln_1p();
            let lse = m + shifted;
            let mut loss = on * (shifted - (row[labels[r]] - m));
            if smoothing > 0.0 {
                let mean_nll = row.iter().map(|&v| shifted - (v - m)).sum::<T>();
                loss += off * mean_nll;
            }
            total += loss;
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let scale = T::one() / T::of(denom as f64);
        let out = Tensor::scalar(total * scale);
        let labels = labels.to_vec();
        Ok(self.push_op(
            out,
            &[logits],
            Box::new(move |g, _, grads| {
                let gs = g.data()[0] * scale;
                if let Some(acc) = grads.acc(logits) {
                    for r in 0..rows {
                        for j in 0..k {
                            let target = if j == labels[r] { on + off } else { off };
                            acc[r * k + j] += gs * (probs[r * k + j] - target);
                        }
                    }
                }
            }),
        ))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    h: usize,
    w: usize,
    ci: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn source(&self, out_pos: usize, tap: usize, extent: usize) -> Option<usize> {
        (out_pos * self.stride + tap)
            .checked_sub(self.pad)
            .filter(|&s| s < extent)
    }

    /// Rows are output pixels, columns are `(ky, kx, cin)` taps.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let patch = self.k * self.k * self.ci;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * patch..(oy * self.wo + ox + 1) * patch];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let dst = &mut row[(ky * self.k + kx) * self.ci..][..self.ci];
                        match (self.source(oy, ky, self.h), self.source(ox, kx, self.w)) {
                            (Some(iy), Some(ix)) => {
                                let src = (iy * self.w + ix) * self.ci;
                                dst.copy_from_slice(&x[src..src + self.ci]);
                            }
                            _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let patch = self.k * self.k * self.ci;
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * patch..(oy * self.wo + ox + 1) * patch];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        if let (Some(iy), Some(ix)) =
                            (self.source(oy, ky, self.h), self.source(ox, kx, self.w))
                        {
                            let dst = (iy * self.w + ix) * self.ci;
                            let src = &row[(ky * self.k + kx) * self.ci..][..self.ci];
                            for (d, &s) in dx[dst..dst + self.ci].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
