//! Shape arithmetic and raw kernels behind the tape ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::numel;

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back onto one of its inputs.
#[derive(Debug, Clone)]
pub(crate) enum BIndex {
    Same,
    /// Input is a single element.
    Scalar,
    /// Input matches the trailing dims of the output: `i % len`.
    Trailing(usize),
    /// Input matches the leading dims, trailing dims broadcast: `i / inner`.
    Leading(usize),
    Map(Vec<usize>),
}

impl BIndex {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Self {
        let n_out = numel(out);
        let n_in = numel(inp);
        if out == inp {
            return BIndex::Same;
        }
        if n_in == 1 {
            return BIndex::Scalar;
        }
        let trimmed: Vec<usize> = {
            let first = inp.iter().position(|&d| d != 1).unwrap_or(inp.len());
            inp[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BIndex::Trailing(n_in);
        }
        // Align input on the right, then check for "leading dims equal, rest 1".
        let pad = out.len() - inp.len();
        let aligned: Vec<usize> = std::iter::repeat(1).take(pad).chain(inp.iter().copied()).collect();
        if let Some(split) = (0..=out.len()).find(|&k| {
            aligned[..k] == out[..k] && aligned[k..].iter().all(|&d| d == 1)
        }) {
            let inner = numel(&out[split..]);
            if inner > 0 && n_out / inner == n_in {
                return BIndex::Leading(inner);
            }
        }
        let out_strides = strides(out);
        let in_strides = strides(&aligned);
        let map = (0..n_out)
            .map(|i| {
                let mut off = 0;
                for d in 0..out.len() {
                    let idx = (i / out_strides[d]) % out[d];
                    if aligned[d] != 1 {
                        off += idx * in_strides[d];
                    }
                }
                off
            })
            .collect();
        BIndex::Map(map)
    }

    #[inline]
    pub(crate) fn get(&self, i: usize) -> usize {
        match self {
            BIndex::Same => i,
            BIndex::Scalar => 0,
            BIndex::Trailing(len) => i % len,
            BIndex::Leading(inner) => i / inner,
            BIndex::Map(m) => m[i],
        }
    }
}

/// Generic strided gather: `out[idx] = src[sum(idx_d * src_strides[d])]`
/// over the multi-index of `out_shape`.
pub(crate) fn strided_copy<T: Copy>(src: &[T], src_strides: &[usize], out_shape: &[usize]) -> Vec<T> {
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let nd = out_shape.len();
    if nd == 0 {
        out.push(src[0]);
        return out;
    }
    let inner_len = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut counter = vec![0usize; nd - 1];
    let outer: usize = numel(&out_shape[..nd - 1]);
    for _ in 0..outer {
        let base: usize = counter
            .iter()
            .zip(src_strides)
            .map(|(c, s)| c * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..nd - 1).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}

pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    (strided_copy(src, &src_strides, &out_shape), out_shape)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, len, inner)` view of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn reduce_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

pub(crate) fn sum_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    out
}

/// Shapes for a (possibly batched) product `a @ b`.
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[k, n]` matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!("matmul needs >=2-D operands, got {a:?} @ {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(Error::Shape(format!("matmul inner dims differ: {a:?} @ {b:?}")));
    }
    let a_batch = &a[..a.len() - 2];
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    if b.len() == 2 {
        return Ok(MatmulDims {
            batch: numel(a_batch),
            m,
            k,
            n,
            shared_rhs: true,
            out_shape,
        });
    }
    if &b[..b.len() - 2] != a_batch {
        return Err(Error::Shape(format!("matmul batch dims differ: {a:?} @ {b:?}")));
    }
    Ok(MatmulDims {
        batch: numel(a_batch),
        m,
        k,
        n,
        shared_rhs: false,
        out_shape,
    })
}

pub(crate) fn matmul_forward<T: Scalar>(a: &[T], b: &[T], d: &MatmulDims) -> Vec<T> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![T::zero(); d.batch * m * n];
    if d.shared_rhs {
        let rows = d.batch * m;
        T::gemm(rows, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut out, n as isize, 1);
    } else {
        for bi in 0..d.batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &b[bi * k * n..(bi + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(dA, dB)` for `C = A @ B` given `dC`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    d: &MatmulDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = None;
    let mut gb = None;
    if d.shared_rhs {
        let rows = d.batch * m;
        if need_a {
            // dA = dC @ B^T
            let mut out = vec![T::zero(); rows * k];
            T::gemm(rows, n, k, T::one(), g, n as isize, 1, b, 1, n as isize, T::zero(), &mut out, k as isize, 1);
            ga = Some(out);
        }
        if need_b {
            // dB = A^T @ dC
            let mut out = vec![T::zero(); k * n];
            T::gemm(k, rows, n, T::one(), a, 1, k as isize, g, n as isize, 1, T::zero(), &mut out, n as isize, 1);
            gb = Some(out);
        }
    } else {
        if need_a {
            let mut out = vec![T::zero(); d.batch * m * k];
            for bi in 0..d.batch {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &g[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                    &b[bi * k * n..(bi + 1) * k * n],
                    1,
                    n as isize,
                    T::zero(),
                    &mut out[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                );
            }
            ga = Some(out);
        }
        if need_b {
            let mut out = vec![T::zero(); d.batch * k * n];
            for bi in 0..d.batch {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &a[bi * m * k..(bi + 1) * m * k],
                    1,
                    k as isize,
                    &g[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * k * n..(bi + 1) * k * n],
                    n as isize,
                    1,
                );
            }
            gb = Some(out);
        }
    }
    (ga, gb)
}
