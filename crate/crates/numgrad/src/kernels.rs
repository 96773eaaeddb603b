//! Raw numeric kernels shared by the graph operations.

use crate::tensor::dims2;

/// `c = a·b + beta·c` for row-major operands; `a` is `m x k` (stored `k x m`
/// when `a_t`), `b` is `k x n` (stored `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // of the three slices, whose lengths are asserted in debug builds.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Sequential ascending-index sum.
pub fn sum(data: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in data {
        acc += v;
    }
    acc
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Mean and inverse standard deviation (population variance plus `eps`).
pub fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = sum(row) / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub fn add_assign(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Sums a gradient of shape `out` down to the (broadcast) shape `target`.
pub fn reduce_to(g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let (ro, co) = dims2(out);
    let (rt, ct) = dims2(target);
    let mut res = vec![0.0; rt * ct];
    for i in 0..ro {
        let ti = if rt == 1 { 0 } else { i };
        for j in 0..co {
            let tj = if ct == 1 { 0 } else { j };
            res[ti * ct + tj] += g[i * co + j];
        }
    }
    res
}

/// Two-dimensional broadcasting of a pair of shapes.
pub struct Bcast {
    pub rows: usize,
    pub cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Bcast {
    pub fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let (ra, ca) = dims2(a);
        let (rb, cb) = dims2(b);
        let rows = join(ra, rb)?;
        let cols = join(ca, cb)?;
        Some(Self { rows, cols, a: (ra, ca), b: (rb, cb) })
    }

    pub fn index_a(&self, i: usize, j: usize) -> usize {
        index(self.a, i, j)
    }

    pub fn index_b(&self, i: usize, j: usize) -> usize {
        index(self.b, i, j)
    }
}

fn join(x: usize, y: usize) -> Option<usize> {
    if x == y {
        Some(x)
    } else if x == 1 {
        Some(y)
    } else if y == 1 {
        Some(x)
    } else {
        None
    }
}

fn index((r, c): (usize, usize), i: usize, j: usize) -> usize {
    let i = if r == 1 { 0 } else { i };
    let j = if c == 1 { 0 } else { j };
    i * c + j
}
