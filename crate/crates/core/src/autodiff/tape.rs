use std::sync::Arc;

use super::{soft_exponential, soft_exponential_grad, AdError, Tensor, DIV_GUARD};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivGuarded(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowI(Var, i32),
    Sum(Var),
    SumAxis(Var, usize),
    L1(Var),
    Sigmoid(Var),
    MaxScalar(Var, f64),
    Clamp(Var, f64, f64),
    SoftExp { alpha: Var, x: Var },
    MaskedSoftmax { x: Var, axis: usize },
    MatMul(Var, Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Scatter { x: Var, index: Arc<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it is not a trainable leaf or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled if the loss does not reach it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Append-only record of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), AdError> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(AdError::NonFinite { op })
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AdError> {
    let mismatch = || AdError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Row-major strides of `shape` read through `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every flat output index together with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if a == out && b == out {
        for k in 0..total {
            f(k, k, k);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut k = 0;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(k, pa, pb);
            k += 1;
            pa += ia;
            pb += ib;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize), AdError> {
    if axis >= shape.len() {
        return Err(AdError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    // a few rows against a wide row-major matrix: stream `b` once instead of
    // packing it, which dominates for single-observation inference
    if m <= 4 && b.2 == 1 && b.1 >= 0 {
        let rs = b.1 as usize;
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                row.fill(0.0);
            } else if beta != 1.0 {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let w = a.0[(i as isize * a.1 + p as isize * a.2) as usize];
                for (o, &bv) in row.iter_mut().zip(&b.0[p * rs..p * rs + n]) {
                    *o += w * bv;
                }
            }
        }
        return;
    }
    // SAFETY: the caller passes slices whose extents cover the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        kind: Op,
        inputs: &[Var],
    ) -> Result<Var, AdError> {
        check_finite(op, &value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        kind: Op,
    ) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&shape, ta.shape(), tb.shape(), |k, i, j| {
            out[k] = f(da[i], db[j]);
        });
        let value = Tensor::new(shape, out)?;
        self.push(name, value, kind, &[a, b])
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        kind: Op,
    ) -> Result<Var, AdError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(name, value, kind, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a / b`, or 0 wherever `b < DIV_GUARD`.
    pub fn div_guarded(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(
            "div_guarded",
            a,
            b,
            |x, y| if y < DIV_GUARD { 0.0 } else { x / y },
            Op::DivGuarded(a, b),
        )
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Result<Var, AdError> {
        self.unary("powi", x, |v| v.powi(n), Op::PowI(x, n))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AdError> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// `max(x, c)` elementwise.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var, AdError> {
        self.unary("max_scalar", x, |v| v.max(c), Op::MaxScalar(x, c))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var, AdError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AdError> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split("sum_axis", tx.shape(), axis)?;
        let d = tx.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis(x, axis), &[x])
    }

    /// Sum of absolute values, shape `[1]`.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var, AdError> {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push("l1_norm", Tensor::scalar(s), Op::L1(x), &[x])
    }

    /// SoftExponential activation with a scalar (shape `[1]`) `alpha`.
    pub fn soft_exponential(&mut self, alpha: Var, x: Var) -> Result<Var, AdError> {
        let ta = self.value(alpha);
        if !ta.is_scalar() {
            return Err(AdError::ShapeMismatch {
                op: "soft_exponential",
                lhs: ta.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let a = ta.item();
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| soft_exponential(a, v))
            .collect::<Result<Vec<_>, _>>()?;
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "soft_exponential",
            value,
            Op::SoftExp { alpha, x },
            &[alpha, x],
        )
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    ///
    /// `mask` covers the trailing dimensions of `x` and repeats over the
    /// leading ones. Masked entries are exactly 0 and take no part in the
    /// normalisation. Every slice must contain at least one admissible entry.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: &[bool]) -> Result<Var, AdError> {
        let tx = self.value(x);
        let (outer, n, inner) = axis_split("masked_softmax", tx.shape(), axis)?;
        if mask.is_empty() || !tx.len().is_multiple_of(mask.len()) || mask.len() < n * inner {
            return Err(AdError::ShapeMismatch {
                op: "masked_softmax",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let d = tx.data();
        let mut out = vec![0.0; tx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..n {
                    if mask[at(k) % mask.len()] {
                        max = max.max(d[at(k)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(AdError::Domain {
                        op: "masked_softmax",
                        detail: "slice has no admissible entries".into(),
                    });
                }
                let mut z = 0.0;
                for k in 0..n {
                    if mask[at(k) % mask.len()] {
                        let e = (d[at(k)] - max).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax { x, axis }, &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (ta.data(), k as isize, 1),
            (tb.data(), n as isize, 1),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let value = self.value(x).reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AdError> {
        let first = inputs.first().ok_or(AdError::Axis {
            op: "concat",
            axis,
            rank: 0,
        })?;
        let base = self.value(*first).shape().to_vec();
        let (outer, _, inner) = axis_split("concat", &base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same_rest {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Selects `index` entries along the last axis.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var, AdError> {
        let tx = self.value(x);
        let last = *tx.shape().last().unwrap_or(&0);
        if index.iter().any(|&i| i >= last) {
            return Err(AdError::ShapeMismatch {
                op: "gather",
                lhs: tx.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let rows = tx.len() / last.max(1);
        let d = tx.data();
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            out.extend(index.iter().map(|&i| d[r * last + i]));
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = index.len();
        let value = Tensor::new(shape, out)?;
        self.push("gather", value, Op::Gather { x, index }, &[x])
    }

    /// Places the last-axis entries of `x` at `index` in a last axis of
    /// length `width`; all other positions hold `fill`.
    pub fn scatter(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        width: usize,
        fill: f64,
    ) -> Result<Var, AdError> {
        let tx = self.value(x);
        let last = *tx.shape().last().unwrap_or(&0);
        if last != index.len() || index.iter().any(|&i| i >= width) {
            return Err(AdError::ShapeMismatch {
                op: "scatter",
                lhs: tx.shape().to_vec(),
                rhs: vec![index.len(), width],
            });
        }
        let rows = tx.len() / last.max(1);
        let d = tx.data();
        let mut out = vec![fill; rows * width];
        for r in 0..rows {
            for (e, &i) in index.iter().enumerate() {
                out[r * width + i] = d[r * last + e];
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, out)?;
        self.push("scatter", value, Op::Scatter { x, index }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AdError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; loss.0 + 1],
        };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                if node.trainable {
                    out.grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), AdError> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let out_shape = node.value.shape();

        // Returns the gradient buffer of `v` if it needs one.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if v.0 >= idx {
                    return Err(AdError::Cycle(idx));
                }
                if self.nodes[v.0].needs_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                if let Some(ga) = buf!(*a) {
                    for_each_broadcast(out_shape, &sa, &sb, |k, i, _| ga[i] += g[k]);
                }
                if let Some(gb) = buf!(*b) {
                    for_each_broadcast(out_shape, &sa, &sb, |k, _, j| gb[j] += sign * g[k]);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = buf!(*a) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, i, j| {
                        ga[i] += g[k] * db[j]
                    });
                }
                if let Some(gb) = buf!(*b) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, i, j| {
                        gb[j] += g[k] * da[i]
                    });
                }
            }
            Op::DivGuarded(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let db = tb.data();
                if let Some(ga) = buf!(*a) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, i, j| {
                        if db[j] >= DIV_GUARD {
                            ga[i] += g[k] / db[j];
                        }
                    });
                }
                if let Some(gb) = buf!(*b) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, _, j| {
                        if db[j] >= DIV_GUARD {
                            gb[j] -= g[k] * y[k] / db[j];
                        }
                    });
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let take_max = matches!(node.op, Op::Maximum(..));
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                // ties route the gradient to the first operand
                let first = |x: f64, yv: f64| if take_max { x >= yv } else { x <= yv };
                if let Some(ga) = buf!(*a) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, i, j| {
                        if first(da[i], db[j]) {
                            ga[i] += g[k];
                        }
                    });
                }
                if let Some(gb) = buf!(*b) {
                    for_each_broadcast(out_shape, ta.shape(), tb.shape(), |k, i, j| {
                        if !first(da[i], db[j]) {
                            gb[j] += g[k];
                        }
                    });
                }
            }
            Op::Neg(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a -= b);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::PowI(x, n) => {
                let dx = self.value(*x).data();
                let n = *n;
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * n as f64 * dx[k].powi(n - 1);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = axis_split("sum_axis", self.shape(*x), *axis)?;
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (acc, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::L1(x) => {
                let dx = self.value(*x).data();
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        // subgradient 0 at the kink
                        let s = if dx[k] > 0.0 {
                            1.0
                        } else if dx[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[k] += g[0] * s;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::MaxScalar(x, c) => {
                let dx = self.value(*x).data();
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        if dx[k] > *c {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let dx = self.value(*x).data();
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        if dx[k] > *lo && dx[k] < *hi {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::SoftExp { alpha, x } => {
                let a = self.value(*alpha).item();
                let dx = self.value(*x).data();
                let partials: Vec<(f64, f64)> =
                    dx.iter().map(|&v| soft_exponential_grad(a, v)).collect();
                if let Some(gx) = buf!(*x) {
                    for k in 0..gx.len() {
                        gx[k] += g[k] * partials[k].0;
                    }
                }
                if let Some(ga) = buf!(*alpha) {
                    ga[0] += partials.iter().zip(g).map(|(p, gk)| p.1 * gk).sum::<f64>();
                }
            }
            Op::MaskedSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split("masked_softmax", out_shape, *axis)?;
                if let Some(gx) = buf!(*x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            // masked entries have y = 0 and receive nothing
                            let dot: f64 = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (da, db) = (ta.data(), tb.data());
                if let Some(ga) = buf!(*a) {
                    // dA = G * B^T
                    gemm(m, n, k, (g, n as isize, 1), (db, 1, n as isize), ga, 1.0);
                }
                if let Some(gb) = buf!(*b) {
                    // dB = A^T * G
                    gemm(k, m, n, (da, 1, k as isize), (g, n as isize, 1), gb, 1.0);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split("concat", out_shape, *axis)?;
                let total = out_shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if let Some(gv) = buf!(*v) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (acc, s) in gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *acc += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Gather { x, index } => {
                let last = *self.shape(*x).last().unwrap();
                let width = index.len();
                if let Some(gx) = buf!(*x) {
                    let rows = gx.len() / last;
                    for r in 0..rows {
                        for (e, &i) in index.iter().enumerate() {
                            gx[r * last + i] += g[r * width + e];
                        }
                    }
                }
            }
            Op::Scatter { x, index } => {
                let width = *out_shape.last().unwrap();
                let last = index.len();
                if let Some(gx) = buf!(*x) {
                    let rows = gx.len() / last;
                    for r in 0..rows {
                        for (e, &i) in index.iter().enumerate() {
                            gx[r * last + e] += g[r * width + i];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(w).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().item(), 0.25);
    }

    #[test]
    fn l1_of_vector() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[-2.0, 3.0]));
        let n = tape.l1_norm(a).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[5.0, 5.0]));
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(AdError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e200));
        assert!(matches!(
            tape.powi(a, 3),
            Err(AdError::NonFinite { op: "powi" })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(AdError::NotScalar(_))));
    }

    #[test]
    fn guarded_division_zero_branch() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[3.0, 4.0]));
        let b = tape.param(t(&[2], &[0.0, 2.0]));
        let q = tape.div_guarded(a, b).unwrap();
        assert_eq!(tape.value(q).data(), &[0.0, 2.0]);
        let loss = tape.sum(q).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.5]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, -1.0]);
    }

    #[test]
    fn masked_softmax_excludes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[0.0, 0.0, 7.0, 1.0, 0.0, 2.0]));
        // column 0 admits rows 0 and 2; column 1 admits all rows
        let mask = [true, true, false, true, true, true];
        let y = tape.masked_softmax(x, 0, &mask).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[4], 0.5);
        assert!((v[1] + v[3] + v[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
        let loss = tape.sum(c).unwrap();
        let g = tape.backward(loss).unwrap();
        // dL/dA = 1 * B^T row sums
        assert_eq!(
            g.get(a).unwrap().data(),
            &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]
        );
        assert_eq!(g.get(b).unwrap().data(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let idx = Arc::new(vec![2, 0]);
        let s = tape.scatter(x, idx.clone(), 3, -1.0).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, -1.0, 1.0, 4.0, -1.0, 3.0]);
        let back = tape.gather(s, idx).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_middle_axis() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
