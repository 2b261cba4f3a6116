//! Tape of recorded tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its value; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into tracked leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{
    axis_split, broadcast_shape, col2im, for_each_bcast, im2col, permute_map, softmax_axis,
};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{numel, Tensor};

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: T },
    AddScalar { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize },
    Sum { a: usize },
    MeanAxis { a: usize, axis: usize },
    Reshape { a: usize },
    Permute { a: usize, map: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    IndexSelect { a: usize, idx: Vec<usize> },
    Pick { a: usize, idx: Vec<usize> },
    Conv2d { x: usize, w: usize, kh: usize, kw: usize, cols: Vec<T> },
    Norm(NormSaved<T>),
    StraightThrough { soft: usize },
}

struct NormSaved<T> {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    kind: NormKind,
}

#[derive(Clone, Copy, PartialEq)]
enum NormKind {
    /// Per-channel statistics over all leading positions, taken from the batch.
    BatchTrain,
    /// Per-channel affine map with frozen running statistics.
    BatchEval,
    /// Per-row statistics over the last axis.
    Layer,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
    grad: Option<Tensor<T>>,
}

/// Operation tape for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Statistics source for [`Graph::batch_norm`].
pub enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; nothing is tracked.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = self.grad_enabled && inputs.iter().any(|&i| nodes[i].tracked);
        nodes.push(Node {
            value,
            op,
            tracked,
            grad: None,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, value: Tensor<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: tracked && self.grad_enabled,
            grad: None,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    /// Untracked input.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t, false)
    }

    /// Tracked input whose gradient is readable through [`Graph::grad`].
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t, true)
    }

    /// Binds a parameter as a tracked leaf; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { g: self, id: node };
        }
        let v = self.push_leaf(store.value(id).clone(), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<_> = self
            .params
            .borrow()
            .iter()
            .filter_map(|(&pid, &node)| nodes[node].grad.clone().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul<'g>(&'g self, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let (ra, rb) = (sa.len(), sb.len());
        if ra < 2 || rb < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, kb, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != kb || (rb > 2 && sa[..ra - 2] != sb[..rb - 2]) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch = numel(&sa[..ra - 2]);
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        if rb == 2 {
            gemm(batch * m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[i * m * k..],
                    false,
                    &tb.data()[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        drop(nodes);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul { a: a.id, b: b.id },
            &[a.id, b.id],
        ))
    }

    fn ewise<'g>(
        &'g self,
        a: Var<'g, T>,
        b: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.id].value, &nodes[b.id].value);
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let mut out = vec![T::zero(); numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        for_each_bcast(ta.shape(), tb.shape(), &shape, |o, ia, ib| {
            out[o] = f(da[ia], db[ib])
        });
        drop(nodes);
        Ok(self.push(Tensor::new(&shape, out)?, op, &[a.id, b.id]))
    }

    pub fn add<'g>(&'g self, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.ewise(a, b, "add", |x, y| x + y, Op::Add { a: a.id, b: b.id })
    }

    pub fn sub<'g>(&'g self, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.ewise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.id, b: b.id })
    }

    pub fn mul<'g>(&'g self, a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.ewise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.id, b: b.id })
    }

    fn unary<'g>(&'g self, a: Var<'g, T>, f: impl Fn(T) -> T, op: Op<T>) -> Var<'g, T> {
        let out = self.with_value(a, |t| t.map(f));
        self.push(out, op, &[a.id])
    }

    pub fn scale<'g>(&'g self, a: Var<'g, T>, k: T) -> Var<'g, T> {
        self.unary(a, |x| x * k, Op::Scale { a: a.id, k })
    }

    pub fn add_scalar<'g>(&'g self, a: Var<'g, T>, c: T) -> Var<'g, T> {
        self.unary(a, |x| x + c, Op::AddScalar { a: a.id })
    }

    pub fn relu<'g>(&'g self, a: Var<'g, T>) -> Var<'g, T> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a: a.id })
    }

    pub fn sigmoid<'g>(&'g self, a: Var<'g, T>) -> Var<'g, T> {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.id })
    }

    pub fn softmax<'g>(&'g self, a: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            check_axis("softmax", axis, t.rank())?;
            if t.shape()[axis] == 0 {
                return Err(TensorError::Invalid("softmax over an empty axis".into()));
            }
            Tensor::new(t.shape(), softmax_axis(t.data(), t.shape(), axis))
        })?;
        Ok(self.push(out, Op::Softmax { a: a.id, axis }, &[a.id]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax<'g>(&'g self, a: Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            let d = *t
                .shape()
                .last()
                .filter(|&&d| d > 0)
                .ok_or_else(|| TensorError::Invalid("log_softmax over an empty axis".into()))?;
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
                row.iter_mut().for_each(|x| *x -= lse);
            }
            Tensor::new(t.shape(), out)
        })?;
        Ok(self.push(out, Op::LogSoftmax { a: a.id }, &[a.id]))
    }

    pub fn sum<'g>(&'g self, a: Var<'g, T>) -> Var<'g, T> {
        let s = self.with_value(a, |t| t.data().iter().copied().sum::<T>());
        self.push(Tensor::scalar(s), Op::Sum { a: a.id }, &[a.id])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis<'g>(&'g self, a: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            check_axis("mean_axis", axis, t.rank())?;
            let (outer, len, inner) = axis_split(t.shape(), axis);
            let inv = T::one() / T::of(len.max(1) as f64);
            let d = t.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= inv);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, out)
        })?;
        Ok(self.push(out, Op::MeanAxis { a: a.id, axis }, &[a.id]))
    }

    pub fn reshape<'g>(&'g self, a: Var<'g, T>, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| t.clone().reshape(shape))?;
        Ok(self.push(out, Op::Reshape { a: a.id }, &[a.id]))
    }

    pub fn permute<'g>(&'g self, a: Var<'g, T>, perm: &[usize]) -> Result<Var<'g, T>> {
        let (out, map) = self.with_value(a, |t| {
            let r = t.rank();
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
            {
                return Err(TensorError::Invalid(format!(
                    "permute: {perm:?} is not a permutation of rank {r}"
                )));
            }
            let map = permute_map(t.shape(), perm);
            let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
            let d = t.data();
            let out = Tensor::new(&shape, map.iter().map(|&i| d[i]).collect())?;
            Ok((out, map))
        })?;
        Ok(self.push(out, Op::Permute { a: a.id, map }, &[a.id]))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let first = nodes[parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?.id]
            .value
            .shape()
            .to_vec();
        check_axis("concat", axis, first.len())?;
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &nodes[p.id].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    pub fn narrow<'g>(
        &'g self,
        a: Var<'g, T>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            check_axis("narrow", axis, t.rank())?;
            let (outer, full, inner) = axis_split(t.shape(), axis);
            if start + len > full {
                return Err(TensorError::Invalid(format!(
                    "narrow: {start}+{len} exceeds axis size {full}"
                )));
            }
            let d = t.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)
        })?;
        Ok(self.push(out, Op::Narrow { a: a.id, axis, start }, &[a.id]))
    }

    /// Rows of `a` (along axis 0) at `idx`, in order; rows may repeat.
    pub fn index_select<'g>(&'g self, a: Var<'g, T>, idx: &[usize]) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            if t.rank() == 0 {
                return Err(TensorError::Invalid("index_select on a scalar".into()));
            }
            let rows = t.shape()[0];
            let width = t.numel() / rows.max(1);
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                if i >= rows {
                    return Err(TensorError::Invalid(format!(
                        "index_select: row {i} out of range {rows}"
                    )));
                }
                out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = idx.len();
            Tensor::new(&shape, out)
        })?;
        Ok(self.push(
            out,
            Op::IndexSelect {
                a: a.id,
                idx: idx.to_vec(),
            },
            &[a.id],
        ))
    }

    /// Picks one entry per row along the last axis; the axis is removed.
    pub fn pick<'g>(&'g self, a: Var<'g, T>, idx: &[usize]) -> Result<Var<'g, T>> {
        let out = self.with_value(a, |t| {
            let v = *t
                .shape()
                .last()
                .ok_or_else(|| TensorError::Invalid("pick on a scalar".into()))?;
            let rows = t.numel() / v.max(1);
            if idx.len() != rows {
                return Err(TensorError::Invalid(format!(
                    "pick: {} indices for {rows} rows",
                    idx.len()
                )));
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &i) in idx.iter().enumerate() {
                if i >= v {
                    return Err(TensorError::Invalid(format!("pick: index {i} >= {v}")));
                }
                out.push(t.data()[r * v + i]);
            }
            Tensor::new(&t.shape()[..t.rank() - 1], out)
        })?;
        Ok(self.push(
            out,
            Op::Pick {
                a: a.id,
                idx: idx.to_vec(),
            },
            &[a.id],
        ))
    }

    /// Same-padded cross-correlation, NHWC input and `[kh, kw, cin, cout]` kernel.
    pub fn conv2d<'g>(&'g self, x: Var<'g, T>, w: Var<'g, T>) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let (tx, tw) = (&nodes[x.id].value, &nodes[w.id].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] {
            return Err(shape_err("conv2d", sx, sw));
        }
        let (kh, kw) = (sw[0], sw[1]);
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(TensorError::Invalid(format!(
                "conv2d: unsupported kernel size {kh}x{kw}, expected 1 or 3"
            )));
        }
        let (b, h, wd, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[3];
        let m = b * h * wd;
        let kc = kh * kw * cin;
        let mut out = vec![T::zero(); m * cout];
        let tracked = self.grad_enabled && (nodes[x.id].tracked || nodes[w.id].tracked);
        let cols = if kh == 1 && kw == 1 {
            gemm(m, kc, cout, tx.data(), false, tw.data(), false, &mut out, false);
            Vec::new()
        } else {
            let cols = im2col(tx.data(), b, h, wd, cin, kh, kw);
            gemm(m, kc, cout, &cols, false, tw.data(), false, &mut out, false);
            if tracked {
                cols
            } else {
                Vec::new()
            }
        };
        drop(nodes);
        Ok(self.push(
            Tensor::new(&[b, h, wd, cout], out)?,
            Op::Conv2d {
                x: x.id,
                w: w.id,
                kh,
                kw,
                cols,
            },
            &[x.id, w.id],
        ))
    }

    /// Per-channel normalization over every axis but the last.
    ///
    /// With [`BnStats::Batch`] the biased batch variance is used and the batch
    /// mean and unbiased variance are returned for running-stat updates.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm<'g>(
        &'g self,
        x: Var<'g, T>,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        stats: BnStats<'_, T>,
        eps: T,
    ) -> Result<(Var<'g, T>, Option<(Vec<T>, Vec<T>)>)> {
        let nodes = self.nodes.borrow();
        let tx = &nodes[x.id].value;
        let c = *tx.shape().last().ok_or_else(|| shape_err("batch_norm", tx.shape(), &[]))?;
        let (tg, tb) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("batch_norm", tx.shape(), tg.shape()));
        }
        let m = tx.numel() / c;
        let d = tx.data();
        let (mean, var, kind, report) = match stats {
            BnStats::Batch => {
                if m <= 1 {
                    return Err(TensorError::Invalid(
                        "batch_norm: train mode needs more than one value per channel".into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                for row in d.chunks(c) {
                    for (acc, &v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                let mf = T::of(m as f64);
                mean.iter_mut().for_each(|v| *v /= mf);
                let mut var = vec![T::zero(); c];
                for row in d.chunks(c) {
                    for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= mf);
                let unbiased = var
                    .iter()
                    .map(|&v| v * mf / T::of(m as f64 - 1.0))
                    .collect();
                let report = Some((mean.clone(), unbiased));
                (mean, var, NormKind::BatchTrain, report)
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", tx.shape(), &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), NormKind::BatchEval, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        for (r, row) in d.chunks(c).enumerate() {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        drop(nodes);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::Norm(NormSaved {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                kind,
            }),
            &[x.id, gamma.id, beta.id],
        );
        Ok((v, report))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm<'g>(
        &'g self,
        x: Var<'g, T>,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: T,
    ) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let tx = &nodes[x.id].value;
        let dim = *tx.shape().last().ok_or_else(|| shape_err("layer_norm", tx.shape(), &[]))?;
        let (tg, tb) = (&nodes[gamma.id].value, &nodes[beta.id].value);
        if tg.shape() != [dim] || tb.shape() != [dim] {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let d = tx.data();
        let rows = d.len() / dim.max(1);
        let df = T::of(dim as f64);
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &d[r * dim..(r + 1) * dim];
            let mu = row.iter().copied().sum::<T>() / df;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..dim {
                let xh = (row[j] - mu) * inv;
                xhat[r * dim + j] = xh;
                out[r * dim + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        drop(nodes);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Norm(NormSaved {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                kind: NormKind::Layer,
            }),
            &[x.id, gamma.id, beta.id],
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through<'g>(&'g self, soft: Var<'g, T>, hard: Tensor<T>) -> Result<Var<'g, T>> {
        let s = soft.shape();
        if s != hard.shape() {
            return Err(shape_err("straight_through", &s, hard.shape()));
        }
        Ok(self.push(hard, Op::StraightThrough { soft: soft.id }, &[soft.id]))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every tracked leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        if !nodes[loss.id].tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].tracked {
                continue;
            }
            backprop_node(&nodes, i, g, &mut grads, &mut leaf_grads);
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in leaf_grads {
            let node = &mut nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    g: Vec<T>,
) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: Vec<T>,
    grads: &mut [Option<Vec<T>>],
    leaf_grads: &mut Vec<(usize, Vec<T>)>,
) {
    let out = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    let tracked = |id: usize| nodes[id].tracked;
    match &nodes[i].op {
        Op::Leaf => leaf_grads.push((i, g)),
        &Op::MatMul { a, b } => {
            let (ta, tb) = (val(a), val(b));
            let (sa, sb) = (ta.shape(), tb.shape());
            let (ra, rb) = (sa.len(), sb.len());
            let (m, k, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 1]);
            let batch = numel(&sa[..ra - 2]);
            if tracked(a) {
                let mut da = vec![T::zero(); ta.numel()];
                if rb == 2 {
                    gemm(batch * m, n, k, &g, false, tb.data(), true, &mut da, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            false,
                            &tb.data()[bi * k * n..],
                            true,
                            &mut da[bi * m * k..],
                            false,
                        );
                    }
                }
                accumulate(nodes, grads, a, da);
            }
            if tracked(b) {
                let mut db = vec![T::zero(); tb.numel()];
                if rb == 2 {
                    gemm(k, batch * m, n, ta.data(), true, &g, false, &mut db, false);
                } else {
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[bi * m * k..],
                            true,
                            &g[bi * m * n..],
                            false,
                            &mut db[bi * k * n..],
                            false,
                        );
                    }
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } | &Op::Mul { a, b } => {
            let (ta, tb) = (val(a), val(b));
            let (sa, sb, so) = (ta.shape(), tb.shape(), out.shape());
            let (xa, xb) = (ta.data(), tb.data());
            let is_mul = matches!(nodes[i].op, Op::Mul { .. });
            let negate_b = matches!(nodes[i].op, Op::Sub { .. });
            if tracked(a) {
                let da = if !is_mul && sa == so {
                    g.clone()
                } else {
                    let mut d = vec![T::zero(); ta.numel()];
                    if is_mul {
                        for_each_bcast(sa, sb, so, |o, ia, ib| d[ia] += g[o] * xb[ib]);
                    } else {
                        for_each_bcast(sa, sb, so, |o, ia, _| d[ia] += g[o]);
                    }
                    d
                };
                accumulate(nodes, grads, a, da);
            }
            if tracked(b) {
                let mut db = if !is_mul && sb == so {
                    g.clone()
                } else {
                    let mut d = vec![T::zero(); tb.numel()];
                    if is_mul {
                        for_each_bcast(sa, sb, so, |o, ia, ib| d[ib] += g[o] * xa[ia]);
                    } else {
                        for_each_bcast(sa, sb, so, |o, _, ib| d[ib] += g[o]);
                    }
                    d
                };
                if negate_b {
                    db.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, grads, b, db);
            }
        }
        &Op::Scale { a, k } => {
            accumulate(nodes, grads, a, g.iter().map(|&v| v * k).collect());
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => accumulate(nodes, grads, a, g),
        &Op::StraightThrough { soft } => accumulate(nodes, grads, soft, g),
        &Op::Relu { a } => {
            let x = val(a).data();
            let d = g
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Sigmoid { a } => {
            let d = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &s)| gv * s * (T::one() - s))
                .collect();
            accumulate(nodes, grads, a, d);
        }
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = axis_split(out.shape(), axis);
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for ii in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + ii;
                    let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        &Op::LogSoftmax { a } => {
            let dim = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); g.len()];
            for ((drow, grow), yrow) in d
                .chunks_mut(dim)
                .zip(g.chunks(dim))
                .zip(out.data().chunks(dim))
            {
                let s: T = grow.iter().copied().sum();
                for j in 0..dim {
                    drow[j] = grow[j] - yrow[j].exp() * s;
                }
            }
            accumulate(nodes, grads, a, d);
        }
        &Op::Sum { a } => accumulate(nodes, grads, a, vec![g[0]; val(a).numel()]),
        &Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_split(val(a).shape(), axis);
            let inv = T::one() / T::of(len.max(1) as f64);
            let mut d = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for ii in 0..inner {
                        d[(o * len + j) * inner + ii] = g[o * inner + ii] * inv;
                    }
                }
            }
            accumulate(nodes, grads, a, d);
        }
        Op::Permute { a, map } => {
            let mut d = vec![T::zero(); g.len()];
            for (o, &src) in map.iter().enumerate() {
                d[src] = g[o];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let oshape = out.shape();
            let outer: usize = oshape[..axis].iter().product();
            let inner: usize = oshape[axis + 1..].iter().product();
            let total = oshape[axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = val(p).shape()[axis] * inner;
                if tracked(p) {
                    let mut d = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                    }
                    accumulate(nodes, grads, p, d);
                }
                offset += chunk;
            }
        }
        &Op::Narrow { a, axis, start } => {
            let (outer, full, inner) = axis_split(val(a).shape(), axis);
            let len = out.shape()[axis];
            let mut d = vec![T::zero(); val(a).numel()];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, a, d);
        }
        Op::IndexSelect { a, idx } => {
            let ta = val(*a);
            let width = ta.numel() / ta.shape()[0].max(1);
            let mut d = vec![T::zero(); ta.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for j in 0..width {
                    d[src * width + j] += g[r * width + j];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Pick { a, idx } => {
            let ta = val(*a);
            let v = *ta.shape().last().unwrap();
            let mut d = vec![T::zero(); ta.numel()];
            for (r, &j) in idx.iter().enumerate() {
                d[r * v + j] += g[r];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Conv2d { x, w, kh, kw, cols } => {
            let (tx, tw) = (val(*x), val(*w));
            let s = tx.shape();
            let (b, h, wd, cin) = (s[0], s[1], s[2], s[3]);
            let cout = tw.shape()[3];
            let m = b * h * wd;
            let kc = kh * kw * cin;
            let pointwise = *kh == 1 && *kw == 1;
            if tracked(*w) {
                let src: &[T] = if pointwise { tx.data() } else { cols };
                let mut dw = vec![T::zero(); tw.numel()];
                gemm(kc, m, cout, src, true, &g, false, &mut dw, false);
                accumulate(nodes, grads, *w, dw);
            }
            if tracked(*x) {
                if pointwise {
                    let mut dx = vec![T::zero(); tx.numel()];
                    gemm(m, cout, kc, &g, false, tw.data(), true, &mut dx, false);
                    accumulate(nodes, grads, *x, dx);
                } else {
                    let mut dcols = vec![T::zero(); m * kc];
                    gemm(m, cout, kc, &g, false, tw.data(), true, &mut dcols, false);
                    let mut dx = vec![T::zero(); tx.numel()];
                    col2im(&dcols, &mut dx, b, h, wd, cin, *kh, *kw);
                    accumulate(nodes, grads, *x, dx);
                }
            }
        }
        Op::Norm(s) => backprop_norm(nodes, s, &g, grads),
    }
}

fn backprop_norm<T: Scalar>(
    nodes: &[Node<T>],
    s: &NormSaved<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let gamma = nodes[s.gamma].value.data();
    let c = gamma.len();
    let rows = g.len() / c.max(1);
    if nodes[s.gamma].tracked || nodes[s.beta].tracked {
        let mut dg = vec![T::zero(); c];
        let mut db = vec![T::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                dg[j] += g[r * c + j] * s.xhat[r * c + j];
                db[j] += g[r * c + j];
            }
        }
        accumulate(nodes, grads, s.gamma, dg);
        accumulate(nodes, grads, s.beta, db);
    }
    if !nodes[s.x].tracked {
        return;
    }
    let mut dx = vec![T::zero(); g.len()];
    match s.kind {
        NormKind::BatchEval => {
            for r in 0..rows {
                for j in 0..c {
                    dx[r * c + j] = g[r * c + j] * gamma[j] * s.inv_std[j];
                }
            }
        }
        NormKind::BatchTrain => {
            let mf = T::of(rows as f64);
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for r in 0..rows {
                for j in 0..c {
                    sum_g[j] += g[r * c + j];
                    sum_gx[j] += g[r * c + j] * s.xhat[r * c + j];
                }
            }
            for r in 0..rows {
                for j in 0..c {
                    let k = r * c + j;
                    dx[k] = gamma[j] * s.inv_std[j] / mf
                        * (mf * g[k] - sum_g[j] - s.xhat[k] * sum_gx[j]);
                }
            }
        }
        NormKind::Layer => {
            let df = T::of(c as f64);
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let xr = &s.xhat[r * c..(r + 1) * c];
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for j in 0..c {
                    let gy = gr[j] * gamma[j];
                    sum_g += gy;
                    sum_gx += gy * xr[j];
                }
                for j in 0..c {
                    let gy = gr[j] * gamma[j];
                    dx[r * c + j] = s.inv_std[r] / df * (df * gy - sum_g - xr[j] * sum_gx);
                }
            }
        }
    }
    accumulate(nodes, grads, s.x, dx);
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.with_value(*self, |t| t.shape().to_vec())
    }

    pub fn value(&self) -> Tensor<T> {
        self.g.value(*self)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.g.with_value(*self, |t| t.data().to_vec())
    }

    pub fn item(&self) -> T {
        self.g.with_value(*self, |t| t.item())
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.g.grad(*self)
    }

    pub fn matmul(self, rhs: Self) -> Result<Self> {
        self.g.matmul(self, rhs)
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        self.g.add(self, rhs)
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        self.g.sub(self, rhs)
    }

    pub fn mul(self, rhs: Self) -> Result<Self> {
        self.g.mul(self, rhs)
    }

    pub fn scale(self, k: f64) -> Self {
        self.g.scale(self, T::of(k))
    }

    pub fn add_scalar(self, c: f64) -> Self {
        self.g.add_scalar(self, T::of(c))
    }

    pub fn relu(self) -> Self {
        self.g.relu(self)
    }

    pub fn sigmoid(self) -> Self {
        self.g.sigmoid(self)
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        self.g.softmax(self, axis)
    }

    pub fn log_softmax(self) -> Result<Self> {
        self.g.log_softmax(self)
    }

    pub fn sum(self) -> Self {
        self.g.sum(self)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        self.g.mean_axis(self, axis)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.g.reshape(self, shape)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        self.g.permute(self, perm)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.g.narrow(self, axis, start, len)
    }

    pub fn index_select(self, idx: &[usize]) -> Result<Self> {
        self.g.index_select(self, idx)
    }

    pub fn pick(self, idx: &[usize]) -> Result<Self> {
        self.g.pick(self, idx)
    }

    pub fn conv2d(self, kernel: Self) -> Result<Self> {
        self.g.conv2d(self, kernel)
    }
}
