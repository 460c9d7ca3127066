//! Wengert-list reverse-mode differentiation.
//!
//! Forward ops append nodes holding materialized values; `backward` walks the
//! list once in reverse, matching on the op kind. Leaf nodes snapshot their
//! source tensor's values and keep a handle to its gradient buffer, into
//! which repeated backward calls accumulate.

use crate::tensor::{lit, Scalar, Tensor};
use crate::{Result, TensorError};
use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T: Scalar> {
    Leaf { sink: Rc<RefCell<Option<Vec<T>>>> },
    Constant,
    /// `b` may have a shape that is a suffix of `a`'s; it broadcasts over the
    /// leading axes.
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// `x * mul + add`, elementwise with host scalars. The shift never needs
    /// storing: its derivative is zero and the output is materialized.
    Affine { x: usize, mul: T },
    /// `[.., m, k] x [k, n]` or `[.., m, k] x [.., k, n]` with equal leading
    /// dims.
    Matmul { a: usize, b: usize },
    Transpose { x: usize, d0: usize, d1: usize },
    Reshape { x: usize },
    Narrow { x: usize, axis: usize, start: usize, len: usize },
    Concat { axis: usize, parts: Vec<usize> },
    /// Select rows along axis 0; duplicate ids accumulate gradient.
    Gather { x: usize, ids: Vec<usize> },
    /// Softmax over the last axis. Rows that are entirely -inf are an error.
    Softmax { x: usize },
    /// Root-mean-square normalization over the last axis with a learned
    /// per-channel weight.
    RmsNorm { x: usize, w: usize, eps: T },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Silu { x: usize },
    /// Rotate adjacent lane pairs `(2j, 2j+1)` by per-pair angles given as
    /// cos/sin tables matching the input's shape with last axis halved.
    RotatePairs { x: usize, cos: usize, sin: usize },
    /// Per-row `logsumexp(z) - z[target]` over the last axis of `[n, v]`.
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Sum { x: usize },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    op: Op<T>,
}

/// One forward pass's computation graph.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

fn shape_err(op: &'static str, message: String) -> TensorError {
    TensorError::Shape { op, message }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, values: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, values, op });
        Var { tape: self.id, index: nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(TensorError::WrongTape { var_tape: v.tape, tape: self.id });
        }
        Ok(v.index)
    }

    /// Shape of a node.
    pub fn shape_of(&self, v: Var) -> Result<Vec<usize>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].shape.clone())
    }

    /// Copy a node's values out as a tensor.
    pub fn value(&self, v: Var) -> Result<Tensor<T>> {
        let i = self.check(v)?;
        let n = &self.nodes.borrow()[i];
        Tensor::from_vec(n.shape.clone(), n.values.clone())
    }

    /// Copy a node's values out as a flat vector.
    pub fn value_vec(&self, v: Var) -> Result<Vec<T>> {
        let i = self.check(v)?;
        Ok(self.nodes.borrow()[i].values.clone())
    }

    // -- graph inputs -------------------------------------------------------

    /// Register a tensor as a differentiable input. Its values are
    /// snapshotted; if it carries a gradient buffer, backward accumulates
    /// into it.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.to_vec(), Op::Leaf { sink: t.grad_handle() })
    }

    /// Register a tensor as a non-differentiable input.
    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.to_vec(), Op::Constant)
    }

    /// Non-differentiable input from raw parts.
    pub fn constant_data(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err(
                "constant_data",
                format!("shape {shape:?} vs {} elements", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Constant))
    }

    // -- elementwise --------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[ai].shape, &nodes[bi].shape);
        if !sa.ends_with(sb) {
            return Err(shape_err(
                "add",
                format!("{sb:?} does not broadcast over {sa:?} (suffix rule)"),
            ));
        }
        let span: usize = sb.iter().product();
        let va = &nodes[ai].values;
        let vb = &nodes[bi].values;
        let mut out = va.clone();
        if span > 0 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o + vb[i % span];
            }
        }
        let shape = sa.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Add { a: ai, b: bi }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[ai].shape, &nodes[bi].shape);
        if sa != sb {
            return Err(shape_err("mul", format!("shapes {sa:?} and {sb:?} differ")));
        }
        let out: Vec<T> = nodes[ai]
            .values
            .iter()
            .zip(&nodes[bi].values)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = sa.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Mul { a: ai, b: bi }))
    }

    pub fn affine(&self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let (m, c) = (lit::<T>(mul), lit::<T>(add));
        let nodes = self.nodes.borrow();
        let out: Vec<T> = nodes[xi].values.iter().map(|&v| v * m + c).collect();
        let shape = nodes[xi].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Affine { x: xi, mul: m }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let neg_b = self.affine(b, -1.0, 0.0)?;
        self.add(a, neg_b)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let out: Vec<T> = nodes[xi].values.iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = nodes[xi].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Sigmoid { x: xi }))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let out: Vec<T> = nodes[xi].values.iter().map(|&v| v.tanh()).collect();
        let shape = nodes[xi].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Tanh { x: xi }))
    }

    pub fn silu(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let out: Vec<T> = nodes[xi]
            .values
            .iter()
            .map(|&v| v * sigmoid_scalar(v))
            .collect();
        let shape = nodes[xi].shape.clone();
        drop(nodes);
        Ok(self.push(shape, out, Op::Silu { x: xi }))
    }

    // -- structure ----------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xi = self.check(x)?;
        let shape = shape.into();
        let nodes = self.nodes.borrow();
        if shape.iter().product::<usize>() != nodes[xi].values.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} cannot become {shape:?}", nodes[xi].shape),
            ));
        }
        let values = nodes[xi].values.clone();
        drop(nodes);
        Ok(self.push(shape, values, Op::Reshape { x: xi }))
    }

    pub fn transpose(&self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let shape = &nodes[xi].shape;
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(shape_err(
                "transpose",
                format!("axes ({d0}, {d1}) out of range for shape {shape:?}"),
            ));
        }
        let mut new_shape = shape.clone();
        new_shape.swap(d0, d1);
        let values = permute_swap(&nodes[xi].values, shape, d0, d1);
        drop(nodes);
        Ok(self.push(new_shape, values, Op::Transpose { x: xi, d0, d1 }))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let shape = &nodes[xi].shape;
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} out of shape {shape:?}", start + len),
            ));
        }
        let mut new_shape = shape.clone();
        new_shape[axis] = len;
        let values = copy_narrow(&nodes[xi].values, shape, axis, start, len);
        drop(nodes);
        Ok(self.push(new_shape, values, Op::Narrow { x: xi, axis, start, len }))
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts given".into()));
        }
        let idxs: Vec<usize> = parts.iter().map(|p| self.check(*p)).collect::<Result<_>>()?;
        let nodes = self.nodes.borrow();
        let first = &nodes[idxs[0]].shape;
        if axis >= first.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut axis_total = 0;
        for &i in &idxs {
            let s = &nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("part shape {s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut new_shape = first.clone();
        new_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * axis_total * inner];
        let mut at = 0;
        for &i in &idxs {
            let s = &nodes[i].shape;
            let rows = s[axis];
            let src = &nodes[i].values;
            for o in 0..outer {
                let dst_base = (o * axis_total + at) * inner;
                let src_base = o * rows * inner;
                out[dst_base..dst_base + rows * inner]
                    .copy_from_slice(&src[src_base..src_base + rows * inner]);
            }
            at += rows;
        }
        drop(nodes);
        Ok(self.push(new_shape, out, Op::Concat { axis, parts: idxs }))
    }

    pub fn gather(&self, x: Var, ids: &[usize]) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let shape = &nodes[xi].shape;
        if shape.is_empty() {
            return Err(shape_err("gather", "source must have at least one axis".into()));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { op: "gather", index: id, size: rows });
            }
        }
        let mut out = vec![T::zero(); ids.len() * width];
        for (r, &id) in ids.iter().enumerate() {
            out[r * width..(r + 1) * width]
                .copy_from_slice(&nodes[xi].values[id * width..(id + 1) * width]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = ids.len();
        drop(nodes);
        Ok(self.push(new_shape, out, Op::Gather { x: xi, ids: ids.to_vec() }))
    }

    // -- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (sa, sb) = (&nodes[ai].shape, &nodes[bi].shape);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(
                "matmul",
                format!("operands need >= 2 axes, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_batched = !lead_b.is_empty();
        if k != kb || (b_batched && lead_a != lead_b) {
            return Err(shape_err(
                "matmul",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bt in 0..batch {
            let a_off = bt * m * k;
            let b_off = if b_batched { bt * k * n } else { 0 };
            matmul_slices(
                &nodes[ai].values[a_off..a_off + m * k],
                &nodes[bi].values[b_off..b_off + k * n],
                m,
                k,
                n,
                &mut out[bt * m * n..(bt + 1) * m * n],
            );
        }
        let mut new_shape = lead_a.to_vec();
        new_shape.push(m);
        new_shape.push(n);
        drop(nodes);
        Ok(self.push(new_shape, out, Op::Matmul { a: ai, b: bi }))
    }

    /// `x @ w + bias` with the bias broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, bias)
    }

    // -- normalization / attention pieces -----------------------------------

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let shape = nodes[xi].shape.clone();
        let width = *shape.last().ok_or_else(|| {
            shape_err("softmax", "input needs at least one axis".into())
        })?;
        let mut out = vec![T::zero(); nodes[xi].values.len()];
        for (r, row) in nodes[xi].values.chunks_exact(width).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            if !max.is_finite() {
                return Err(TensorError::Invalid(format!(
                    "softmax row {r} has no finite entry"
                )));
            }
            let dst = &mut out[r * width..(r + 1) * width];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = (v - max).exp();
                *d = e;
                total = total + e;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        }
        drop(nodes);
        Ok(self.push(shape, out, Op::Softmax { x: xi }))
    }

    pub fn rms_norm(&self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let nodes = self.nodes.borrow();
        let shape = nodes[xi].shape.clone();
        let width = *shape.last().ok_or_else(|| {
            shape_err("rms_norm", "input needs at least one axis".into())
        })?;
        if nodes[wi].shape != [width] {
            return Err(shape_err(
                "rms_norm",
                format!("weight shape {:?} vs channel count {width}", nodes[wi].shape),
            ));
        }
        let epsilon = lit::<T>(eps);
        let wv = nodes[wi].values.clone();
        let mut out = vec![T::zero(); nodes[xi].values.len()];
        for (r, row) in nodes[xi].values.chunks_exact(width).enumerate() {
            let mean_sq = row.iter().fold(T::zero(), |s, &v| s + v * v) / lit::<T>(width as f64);
            let inv = (mean_sq + epsilon).sqrt().recip();
            for (c, &v) in row.iter().enumerate() {
                out[r * width + c] = v * inv * wv[c];
            }
        }
        drop(nodes);
        Ok(self.push(shape, out, Op::RmsNorm { x: xi, w: wi, eps: epsilon }))
    }

    pub fn rotate_pairs(&self, x: Var, cos: Var, sin: Var) -> Result<Var> {
        let (xi, ci, si) = (self.check(x)?, self.check(cos)?, self.check(sin)?);
        let nodes = self.nodes.borrow();
        let shape = nodes[xi].shape.clone();
        let width = *shape.last().ok_or_else(|| {
            shape_err("rotate_pairs", "input needs at least one axis".into())
        })?;
        if width % 2 != 0 {
            return Err(shape_err(
                "rotate_pairs",
                format!("last axis {width} must be even"),
            ));
        }
        let mut half_shape = shape.clone();
        *half_shape.last_mut().unwrap() = width / 2;
        if nodes[ci].shape != half_shape || nodes[si].shape != half_shape {
            return Err(shape_err(
                "rotate_pairs",
                format!(
                    "cos shape {:?} / sin shape {:?} must equal {half_shape:?}",
                    nodes[ci].shape, nodes[si].shape
                ),
            ));
        }
        let (xv, cv, sv) = (&nodes[xi].values, &nodes[ci].values, &nodes[si].values);
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..xv.len() / 2 {
            let (c, s) = (cv[p], sv[p]);
            let (x0, x1) = (xv[2 * p], xv[2 * p + 1]);
            out[2 * p] = x0 * c - x1 * s;
            out[2 * p + 1] = x0 * s + x1 * c;
        }
        drop(nodes);
        Ok(self.push(shape, out, Op::RotatePairs { x: xi, cos: ci, sin: si }))
    }

    // -- losses / reductions ------------------------------------------------

    /// Per-row cross entropy `logsumexp(row) - row[target]` over `[n, v]`
    /// logits; returns shape `[n]`. `-inf` logits are legal padding as long
    /// as each row keeps a finite target and at least one finite entry.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let nodes = self.nodes.borrow();
        let shape = &nodes[li].shape;
        if shape.len() != 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits must be [rows, vocab], got {shape:?}"),
            ));
        }
        let (n, v) = (shape[0], shape[1]);
        if targets.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut out = vec![T::zero(); n];
        for (r, row) in nodes[li].values.chunks_exact(v).enumerate() {
            let t = targets[r];
            if t >= v {
                return Err(TensorError::Index { op: "cross_entropy", index: t, size: v });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            if !max.is_finite() {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy row {r} has no finite logit"
                )));
            }
            if !row[t].is_finite() {
                return Err(TensorError::Invalid(format!(
                    "cross_entropy row {r}: target {t} logit is not finite"
                )));
            }
            let sum_exp = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
            out[r] = max + sum_exp.ln() - row[t];
        }
        drop(nodes);
        Ok(self.push(vec![n], out, Op::CrossEntropy { logits: li, targets: targets.to_vec() }))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let nodes = self.nodes.borrow();
        let total = nodes[xi].values.iter().fold(T::zero(), |s, &v| s + v);
        drop(nodes);
        Ok(self.push(vec![1], vec![total], Op::Sum { x: xi }))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self, x: Var) -> Result<Var> {
        let count = self.shape_of(x)?.iter().product::<usize>();
        if count == 0 {
            return Err(shape_err("mean", "cannot average zero elements".into()));
        }
        let s = self.sum(x)?;
        self.affine(s, 1.0 / count as f64, 0.0)
    }

    /// Sum of `x * mask` divided by a host-side count; the standard masked
    /// average where `mask` holds ones at active positions.
    pub fn masked_mean(&self, x: Var, mask: Var, active: usize) -> Result<Var> {
        if active == 0 {
            return Err(shape_err("masked_mean", "no active positions".into()));
        }
        let picked = self.mul(x, mask)?;
        let s = self.sum(picked)?;
        self.affine(s, 1.0 / active as f64, 0.0)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from `loss` (shape `[]`-like: exactly one element),
    /// accumulating into every reachable leaf's gradient buffer. Node-local
    /// gradients are fresh per call, so calling twice adds the same leaf
    /// gradients twice.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[li].values.len() != 1 {
            return Err(TensorError::NotScalarLoss(nodes[li].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Leaf { sink } => {
                    if let Some(acc) = sink.borrow_mut().as_mut() {
                        for (a, &d) in acc.iter_mut().zip(&g) {
                            *a = *a + d;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, &g);
                    let span = nodes[b].values.len();
                    if span == g.len() {
                        accumulate(&mut grads, b, &g);
                    } else {
                        let mut gb = vec![T::zero(); span];
                        if span > 0 {
                            for (j, &d) in g.iter().enumerate() {
                                gb[j % span] = gb[j % span] + d;
                            }
                        }
                        accumulate(&mut grads, b, &gb);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<T> = g.iter().zip(&nodes[b].values).map(|(&d, &v)| d * v).collect();
                    let gb: Vec<T> = g.iter().zip(&nodes[a].values).map(|(&d, &v)| d * v).collect();
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::Affine { x, mul } => {
                    let gx: Vec<T> = g.iter().map(|&d| d * *mul).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = &nodes[a].shape;
                    let sb = &nodes[b].shape;
                    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                    let n = sb[sb.len() - 1];
                    let b_batched = sb.len() > 2;
                    let batch: usize = sa[..sa.len() - 2].iter().product();
                    let mut ga = vec![T::zero(); nodes[a].values.len()];
                    let mut gb = vec![T::zero(); nodes[b].values.len()];
                    for bt in 0..batch {
                        let go = &g[bt * m * n..(bt + 1) * m * n];
                        let av = &nodes[a].values[bt * m * k..(bt + 1) * m * k];
                        let b_off = if b_batched { bt * k * n } else { 0 };
                        let bv = &nodes[b].values[b_off..b_off + k * n];
                        // ga += g @ b^T ; gb += a^T @ g
                        let ga_s = &mut ga[bt * m * k..(bt + 1) * m * k];
                        for r in 0..m {
                            for c in 0..n {
                                let d = go[r * n + c];
                                if d != T::zero() {
                                    for kk in 0..k {
                                        ga_s[r * k + kk] = ga_s[r * k + kk] + d * bv[kk * n + c];
                                    }
                                }
                            }
                        }
                        let gb_s = &mut gb[b_off..b_off + k * n];
                        for r in 0..m {
                            for kk in 0..k {
                                let av_rk = av[r * k + kk];
                                if av_rk != T::zero() {
                                    for c in 0..n {
                                        gb_s[kk * n + c] = gb_s[kk * n + c] + av_rk * go[r * n + c];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, a, &ga);
                    accumulate(&mut grads, b, &gb);
                }
                Op::Transpose { x, d0, d1 } => {
                    let gx = permute_swap(&g, &node.shape, *d0, *d1);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads, *x, &g);
                }
                Op::Narrow { x, axis, start, len } => {
                    let src_shape = &nodes[*x].shape;
                    let mut gx = vec![T::zero(); nodes[*x].values.len()];
                    scatter_narrow(&mut gx, src_shape, *axis, *start, *len, &g);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat { axis, parts } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[*axis + 1..].iter().product();
                    let total = node.shape[*axis];
                    let mut at = 0;
                    for &p in parts {
                        let rows = nodes[p].shape[*axis];
                        let mut gp = vec![T::zero(); nodes[p].values.len()];
                        for o in 0..outer {
                            let src = (o * total + at) * inner;
                            let dst = o * rows * inner;
                            gp[dst..dst + rows * inner]
                                .copy_from_slice(&g[src..src + rows * inner]);
                        }
                        at += rows;
                        accumulate(&mut grads, p, &gp);
                    }
                }
                Op::Gather { x, ids } => {
                    let width: usize = nodes[*x].shape[1..].iter().product();
                    let mut gx = vec![T::zero(); nodes[*x].values.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..width {
                            gx[id * width + c] = gx[id * width + c] + g[r * width + c];
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Softmax { x } => {
                    let width = *node.shape.last().unwrap();
                    let y = &node.values;
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / width {
                        let ys = &y[r * width..(r + 1) * width];
                        let gs = &g[r * width..(r + 1) * width];
                        let dot = ys
                            .iter()
                            .zip(gs)
                            .fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                        for c in 0..width {
                            gx[r * width + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::RmsNorm { x, w, eps } => {
                    let width = *node.shape.last().unwrap();
                    let xv = &nodes[*x].values;
                    let wv = &nodes[*w].values;
                    let mut gx = vec![T::zero(); xv.len()];
                    let mut gw = vec![T::zero(); wv.len()];
                    let d = lit::<T>(width as f64);
                    for (r, row) in xv.chunks_exact(width).enumerate() {
                        let mean_sq = row.iter().fold(T::zero(), |s, &v| s + v * v) / d;
                        let inv = (mean_sq + *eps).sqrt().recip();
                        let gs = &g[r * width..(r + 1) * width];
                        let mut inner = T::zero();
                        for c in 0..width {
                            inner = inner + gs[c] * wv[c] * row[c];
                            gw[c] = gw[c] + gs[c] * row[c] * inv;
                        }
                        let inv3_over_d = inv * inv * inv / d;
                        for c in 0..width {
                            gx[r * width + c] = gs[c] * wv[c] * inv - row[c] * inv3_over_d * inner;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *w, &gw);
                }
                Op::Sigmoid { x } => {
                    let gx: Vec<T> = node
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &d)| d * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Tanh { x } => {
                    let gx: Vec<T> = node
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&y, &d)| d * (T::one() - y * y))
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Silu { x } => {
                    let gx: Vec<T> = nodes[*x]
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| {
                            let s = sigmoid_scalar(v);
                            d * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::RotatePairs { x, cos, sin, .. } => {
                    let cv = &nodes[*cos].values;
                    let sv = &nodes[*sin].values;
                    let mut gx = vec![T::zero(); g.len()];
                    for p in 0..g.len() / 2 {
                        let (c, s) = (cv[p], sv[p]);
                        let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                        gx[2 * p] = g0 * c + g1 * s;
                        gx[2 * p + 1] = g1 * c - g0 * s;
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let v = nodes[*logits].shape[1];
                    let zv = &nodes[*logits].values;
                    let mut gz = vec![T::zero(); zv.len()];
                    for (r, row) in zv.chunks_exact(v).enumerate() {
                        let gr = g[r];
                        if gr == T::zero() {
                            continue;
                        }
                        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                        let sum_exp = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
                        for c in 0..v {
                            let p = (row[c] - max).exp() / sum_exp;
                            let onehot = if c == targets[r] { T::one() } else { T::zero() };
                            gz[r * v + c] = gr * (p - onehot);
                        }
                    }
                    accumulate(&mut grads, *logits, &gz);
                }
                Op::Sum { x } => {
                    let gx = vec![g[0]; nodes[*x].values.len()];
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, delta: &[T]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Naive row-major matmul: `[m,k] x [k,n] -> [m,n]` accumulated into `out`.
fn matmul_slices<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for r in 0..m {
        for kk in 0..k {
            let a_rk = a[r * k + kk];
            if a_rk == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            let o_row = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                o_row[c] = o_row[c] + a_rk * b_row[c];
            }
        }
    }
}

/// Materialize an axis-swap permutation.
fn permute_swap<T: Scalar>(values: &[T], shape: &[usize], d0: usize, d1: usize) -> Vec<T> {
    if d0 == d1 {
        return values.to_vec();
    }
    let rank = shape.len();
    let mut new_shape = shape.to_vec();
    new_shape.swap(d0, d1);
    let mut old_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        old_strides[i] = old_strides[i + 1] * shape[i + 1];
    }
    let mut new_strides_in_old = old_strides.clone();
    new_strides_in_old.swap(d0, d1);
    let mut out = vec![T::zero(); values.len()];
    let mut index = vec![0usize; rank];
    for slot in out.iter_mut() {
        let src: usize = index
            .iter()
            .zip(&new_strides_in_old)
            .map(|(i, s)| i * s)
            .sum();
        *slot = values[src];
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < new_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    out
}

fn copy_narrow<T: Scalar>(
    values: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = (o * full + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&values[src..src + len * inner]);
    }
    out
}

fn scatter_narrow<T: Scalar>(
    dst: &mut [T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    src: &[T],
) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    for o in 0..outer {
        let d = (o * full + start) * inner;
        let s = o * len * inner;
        for j in 0..len * inner {
            dst[d + j] = dst[d + j] + src[s + j];
        }
    }
}
