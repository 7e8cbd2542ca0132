use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self, BIndex, MatmulDims};
use super::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied op: receives the input values, the
/// output value and the output gradient, returns one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Vec<T>>>;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Exp(Var),
    Log(Var),
    Pow(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    Prelu(Var, Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    MaxAxis(Var, usize, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var),
    GatherRows(Var, Vec<Vec<usize>>),
    BroadcastTo(Var),
    Custom(Vec<Var>, BackwardFn<T>),
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records every op applied to its values so that [`Tape::backward`] can
/// replay them in reverse.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order of the graph; the backward sweep walks indices downwards and visits
/// each node once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    flops: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize, src: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    src(buf);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating point operations executed so far (2 per multiply-accumulate,
    /// 1 per elementwise op).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a tensor as a leaf. Shares the buffer; nothing is copied.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Arc::clone(t.arc()),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// Leaf that always receives a gradient.
    pub fn variable(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_arc(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.tensor(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = kernels::broadcast_shape(&sa, &sb)?;
        let va = self.value(a);
        let vb = self.value(b);
        let n = numel(&out_shape);
        let value: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = BIndex::new(&out_shape, &sa);
            let ib = BIndex::new(&out_shape, &sb);
            (0..n).map(|i| f(va[ia.get(i)], vb[ib.get(i)])).collect()
        };
        self.flops += n as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>, cost: u64) -> Var {
        let value: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        self.flops += cost * value.len() as u64;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, value, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a), 1)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c), 1)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a), 1)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a), 1)
    }

    pub fn pow(&mut self, a: Var, p: T) -> Var {
        self.unary(a, |x| x.powf(p), Op::Pow(a, p), 1)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.pow(a, T::from_f64_lossy(2.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a), 4)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64_lossy(0.5);
        let inv_sqrt2 = T::FRAC_1_SQRT_2();
        self.unary(
            a,
            |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            Op::Gelu(a),
            8,
        )
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi), 1)
    }

    /// `max(x, 0) + slope * min(x, 0)`; `slope` has one element or one per
    /// entry of the last axis of `x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ns = numel(self.shape(slope));
        let last = *shape.last().unwrap_or(&1);
        if ns != 1 && ns != last {
            return Err(Error::Shape(format!(
                "prelu slope of {ns} values for input {shape:?}"
            )));
        }
        let vx = self.value(x);
        let vs = self.value(slope);
        let value: Vec<T> = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = if ns == 1 { vs[0] } else { vs[i % last] };
                if v > T::zero() {
                    v
                } else {
                    s * v
                }
            })
            .collect();
        self.flops += 2 * value.len() as u64;
        let rg = self.rg(&[x, slope]);
        Ok(self.push(shape, value, Op::Prelu(x, slope), rg))
    }

    // ---------------------------------------------------------------- linalg

    /// `a[..., m, k] @ b[k, n]` or batched `a[..., m, k] @ b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let value = kernels::matmul_forward(self.value(a), self.value(b), &d);
        self.flops += 2 * (d.batch * d.m * d.k * d.n) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(d.out_shape, value, Op::MatMul(a, b), rg))
    }

    // ------------------------------------------------------------ reductions

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for {:?}",
                self.shape(a)
            )));
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.flops += self.value(a).len() as u64;
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).expect("length fits scalar");
        let s = self.sum(a);
        self.mul_scalar(s, T::one() / n)
    }

    /// Population variance over every element.
    pub fn var(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let flat = self.reshape(a, &[numel(&shape)])?;
        let v = self.var_axis(flat, 0, false)?;
        Ok(v)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let value = kernels::sum_axis(self.value(a), &shape, axis);
        self.flops += value.len() as u64 * shape[axis] as u64;
        let rg = self.rg(&[a]);
        Ok(self.push(kernels::reduce_shape(&shape, axis, keepdim), value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let n = T::from_usize(shape[axis]).expect("axis fits scalar");
        let mut value = kernels::sum_axis(self.value(a), &shape, axis);
        value.iter_mut().for_each(|v| *v /= n);
        self.flops += value.len() as u64 * (shape[axis] as u64 + 1);
        let rg = self.rg(&[a]);
        Ok(self.push(kernels::reduce_shape(&shape, axis, keepdim), value, Op::MeanAxis(a, axis), rg))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let nf = T::from_usize(len).expect("axis fits scalar");
        let means: Vec<T> = kernels::sum_axis(x, &shape, axis).into_iter().map(|s| s / nf).collect();
        let mut value = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let d = x[(o * len + l) * inner + i] - means[o * inner + i];
                    value[o * inner + i] += d * d;
                }
            }
        }
        value.iter_mut().for_each(|v| *v /= nf);
        self.flops += 4 * x.len() as u64;
        let rg = self.rg(&[a]);
        Ok(self.push(kernels::reduce_shape(&shape, axis, keepdim), value, Op::VarAxis(a, axis), rg))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let mut value = vec![T::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + l) * inner + i];
                    let slot = o * inner + i;
                    if v > value[slot] || l == 0 {
                        value[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        self.flops += x.len() as u64;
        let rg = self.rg(&[a]);
        Ok(self.push(kernels::reduce_shape(&shape, axis, keepdim), value, Op::MaxAxis(a, axis, arg), rg))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let x = self.value(a);
        let mut value = vec![T::zero(); x.len()];
        for (row, out) in x.chunks(last).zip(value.chunks_mut(last)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        }
        self.flops += 4 * x.len() as u64;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Softmax(a), rg))
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = Arc::clone(&self.nodes[a.0].value);
        let rg = self.rg(&[a]);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape(a),
            requires_grad: rg,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} of {shape:?}")));
        }
        let (value, out_shape) = kernels::permute(self.value(a), &shape, axes);
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, value, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Shape("transpose needs >=2 dims".into()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::Shape(format!("concat of {base:?} with {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut value = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out_shape, value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of axis {axis} in {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let x = self.value(a);
        let mut value = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            value.extend_from_slice(&x[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(out_shape, value, Op::Slice(a, axis, start), rg))
    }

    /// Per-batch row selection: `a[B, P, D]` and `B` index lists of equal
    /// length `K` give `[B, K, D]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || indices.len() != shape[0] {
            return Err(Error::Shape(format!(
                "gather_rows needs [B,P,D] with B index lists, got {shape:?} and {}",
                indices.len()
            )));
        }
        let k = indices.first().map_or(0, Vec::len);
        let (p, d) = (shape[1], shape[2]);
        let x = self.value(a);
        let mut value = Vec::with_capacity(shape[0] * k * d);
        for (b, idx) in indices.iter().enumerate() {
            if idx.len() != k || idx.iter().any(|&i| i >= p) {
                return Err(Error::Shape(format!("bad gather indices for batch {b}")));
            }
            for &i in idx {
                value.extend_from_slice(&x[(b * p + i) * d..(b * p + i + 1) * d]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![shape[0], k, d], value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let out = kernels::broadcast_shape(&sa, shape)?;
        if out != shape {
            return Err(Error::Shape(format!("cannot broadcast {sa:?} to {shape:?}")));
        }
        let idx = BIndex::new(&out, &sa);
        let x = self.value(a);
        let value = (0..numel(&out)).map(|i| x[idx.get(i)]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(out, value, Op::BroadcastTo(a), rg))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::Shape("custom op value does not match shape".into()));
        }
        let rg = self.rg(inputs);
        Ok(self.push(shape.to_vec(), value, Op::Custom(inputs.to_vec(), backward), rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt each time.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for n in &mut self.nodes[..=root.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.nodes[root.0].grad, 1, |g| g[0] += T::one());
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let n = &mut self.nodes[v.0];
        if !n.requires_grad {
            return;
        }
        let len = n.value.len();
        add_into(&mut n.grad, len, f);
    }

    fn accumulate_broadcast(&mut self, v: Var, out_shape: &[usize], g: &[T], scale: impl Fn(usize) -> T) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let in_shape = self.nodes[v.0].shape.clone();
        let idx = BIndex::new(out_shape, &in_shape);
        self.accumulate(v, |dst| match idx {
            BIndex::Same => {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d += g[i] * scale(i);
                }
            }
            _ => {
                for (i, &gi) in g.iter().enumerate() {
                    dst[idx.get(i)] += gi * scale(i);
                }
            }
        });
    }

    fn backward_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        let out_shape = self.nodes[i].shape.clone();
        let out = Arc::clone(&self.nodes[i].value);
        // Temporarily take the op so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, g, |_| T::one());
                self.accumulate_broadcast(*b, &out_shape, g, |_| T::one());
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, g, |_| T::one());
                self.accumulate_broadcast(*b, &out_shape, g, |_| -T::one());
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let va = Arc::clone(&self.nodes[a.0].value);
                let vb = Arc::clone(&self.nodes[b.0].value);
                let ia = BIndex::new(&out_shape, &self.nodes[a.0].shape);
                let ib = BIndex::new(&out_shape, &self.nodes[b.0].shape);
                let is_mul = matches!(op, Op::Mul(..));
                if is_mul {
                    self.accumulate_broadcast(*a, &out_shape, g, |k| vb[ib.get(k)]);
                    self.accumulate_broadcast(*b, &out_shape, g, |k| va[ia.get(k)]);
                } else {
                    self.accumulate_broadcast(*a, &out_shape, g, |k| T::one() / vb[ib.get(k)]);
                    self.accumulate_broadcast(*b, &out_shape, g, |k| {
                        let y = vb[ib.get(k)];
                        -va[ia.get(k)] / (y * y)
                    });
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(*a, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi));
            }
            Op::BroadcastTo(a) => {
                self.accumulate_broadcast(*a, &out_shape, g, |_| T::one());
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(*a, |d| d.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c));
            }
            Op::Exp(a) => {
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k];
                    }
                });
            }
            Op::Log(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / x[k];
                    }
                });
            }
            Op::Pow(a, p) => {
                let p = *p;
                let x = Arc::clone(&self.nodes[a.0].value);
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * p * x[k].powf(p - T::one());
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k] * (T::one() - out[k]);
                    }
                });
            }
            Op::Gelu(a) => {
                let x = Arc::clone(&self.nodes[a.0].value);
                let half = T::from_f64_lossy(0.5);
                let inv_sqrt2 = T::FRAC_1_SQRT_2();
                let inv_sqrt_2pi = T::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        let v = x[k];
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        d[k] += g[k] * (cdf + v * pdf);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let x = Arc::clone(&self.nodes[a.0].value);
                self.accumulate(*a, |d| {
                    for k in 0..d.len() {
                        if x[k] >= lo && x[k] <= hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Prelu(x, s) => {
                let vx = Arc::clone(&self.nodes[x.0].value);
                let vs = Arc::clone(&self.nodes[s.0].value);
                let ns = vs.len();
                let last = *out_shape.last().unwrap_or(&1);
                let slope_at = |k: usize| if ns == 1 { vs[0] } else { vs[k % last] };
                self.accumulate(*x, |d| {
                    for k in 0..d.len() {
                        d[k] += if vx[k] > T::zero() { g[k] } else { g[k] * slope_at(k) };
                    }
                });
                self.accumulate(*s, |d| {
                    for k in 0..vx.len() {
                        if vx[k] <= T::zero() {
                            let slot = if ns == 1 { 0 } else { k % last };
                            d[slot] += g[k] * vx[k];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let dims: MatmulDims = kernels::matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let (ga, gb) = kernels::matmul_backward(
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    g,
                    &dims,
                    need_a,
                    need_b,
                );
                if let Some(ga) = ga {
                    self.accumulate(*a, |d| d.iter_mut().zip(&ga).for_each(|(d, &v)| *d += v));
                }
                if let Some(gb) = gb {
                    self.accumulate(*b, |d| d.iter_mut().zip(&gb).for_each(|(d, &v)| *d += v));
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(*a, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&in_shape, *axis);
                let scale = if matches!(op, Op::MeanAxis(..)) {
                    T::one() / T::from_usize(len).expect("axis fits scalar")
                } else {
                    T::one()
                };
                self.accumulate(*a, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                d[(o * len + l) * inner + k] += g[o * inner + k] * scale;
                            }
                        }
                    }
                });
            }
            Op::VarAxis(a, axis) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let x = Arc::clone(&self.nodes[a.0].value);
                let (outer, len, inner) = kernels::axis_split(&in_shape, *axis);
                let nf = T::from_usize(len).expect("axis fits scalar");
                let means: Vec<T> = kernels::sum_axis(&x, &in_shape, *axis)
                    .into_iter()
                    .map(|s| s / nf)
                    .collect();
                let two = T::from_f64_lossy(2.0);
                self.accumulate(*a, |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            for k in 0..inner {
                                let idx = (o * len + l) * inner + k;
                                d[idx] += g[o * inner + k] * two * (x[idx] - means[o * inner + k]) / nf;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(a, axis, arg) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&in_shape, *axis);
                self.accumulate(*a, |d| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let slot = o * inner + k;
                            d[(o * len + arg[slot]) * inner + k] += g[slot];
                        }
                    }
                });
            }
            Op::Permute(a, axes) => {
                let inv = kernels::inverse_axes(axes);
                let (back, _) = kernels::permute(g, &out_shape, &inv);
                self.accumulate(*a, |d| d.iter_mut().zip(&back).for_each(|(d, &v)| *d += v));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = kernels::axis_split(&out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[*axis] * inner;
                    self.accumulate(p, |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (dv, &s) in d[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *dv += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(a, axis, start) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = kernels::axis_split(&in_shape, *axis);
                let w = out_shape[*axis];
                let start = *start;
                self.accumulate(*a, |d| {
                    for o in 0..outer {
                        let dst = &mut d[(o * len + start) * inner..(o * len + start + w) * inner];
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Softmax(a) => {
                let last = *out_shape.last().expect("softmax output has an axis");
                self.accumulate(*a, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(last).zip(out.chunks(last)).zip(g.chunks(last)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for k in 0..last {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (p, dd) = (in_shape[1], in_shape[2]);
                self.accumulate(*a, |d| {
                    let mut src = 0;
                    for (b, idx) in indices.iter().enumerate() {
                        for &row in idx {
                            let dst = &mut d[(b * p + row) * dd..(b * p + row + 1) * dd];
                            dst.iter_mut().zip(&g[src..src + dd]).for_each(|(d, &s)| *d += s);
                            src += dd;
                        }
                    }
                });
            }
            Op::Custom(inputs, backward) => {
                let values: Vec<Arc<Vec<T>>> =
                    inputs.iter().map(|v| Arc::clone(&self.nodes[v.0].value)).collect();
                let refs: Vec<&[T]> = values.iter().map(|v| v.as_slice()).collect();
                let grads = backward(&refs, &out, g);
                if grads.len() != inputs.len() {
                    return Err(Error::Contract("custom backward returned wrong arity".into()));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if gv.len() != self.nodes[v.0].value.len() {
                        return Err(Error::Contract("custom backward returned wrong length".into()));
                    }
                    self.accumulate(*v, |d| d.iter_mut().zip(&gv).for_each(|(d, &s)| *d += s));
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}
