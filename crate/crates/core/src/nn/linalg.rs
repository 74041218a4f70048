//! Strided matrix views and the handful of row-wise kernels the transformer
//! needs.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    data: &'a [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

pub struct MatMut<'a, F> {
    data: &'a mut [F],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Row-major `rows x cols` matrix at the start of `data`.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "matrix view out of bounds");
        MatRef { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

impl<'a, F: Scalar> MatMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [F], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "matrix view out of bounds");
        MatMut { data, rows, cols, rs, cs }
    }
}

/// `c = alpha * a * b + beta * c`. With `beta == 0` the old contents of `c`
/// are ignored.
pub fn gemm<F: Scalar>(alpha: F, a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: MatMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "output shape differs");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let e = &mut c.data[i * c.rs + j * c.cs];
                *e = if beta == F::zero() { F::zero() } else { *e * beta };
            }
        }
        return;
    }
    // SAFETY: the constructors checked that every addressed element is in
    // bounds, and `c` holds the only mutable borrow.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// `out[n x cols] = x[n x k] * w[k x cols] + bias`, overwriting `out`.
pub fn linear<F: Scalar>(x: &[F], w: &[F], bias: &[F], n: usize, k: usize, out: &mut [F]) {
    let cols = bias.len();
    for row in out.chunks_exact_mut(cols) {
        row.copy_from_slice(bias);
    }
    gemm(F::one(), MatRef::new(x, n, k), MatRef::new(w, k, cols), F::one(), MatMut::new(out, n, cols));
}

/// Accumulates the gradients of `y = x * w + b`: `dw += x^T dy`,
/// `db += colsum(dy)`, and returns `dx = dy * w^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    n: usize,
    k: usize,
    cols: usize,
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    gemm(F::one(), MatRef::new(x, n, k).t(), MatRef::new(dy, n, cols), F::one(), MatMut::new(dw, k, cols));
    for row in dy.chunks_exact(cols) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = vec![F::zero(); n * k];
    gemm(F::one(), MatRef::new(dy, n, cols), MatRef::new(w, k, cols).t(), F::zero(), MatMut::new(&mut dx, n, k));
    dx
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

/// Row-wise layer normalisation. Returns the output and, when requested,
/// the normalised input and inverse standard deviations for the backward
/// pass.
pub fn layer_norm<F: Scalar>(x: &[F], gamma: &[F], beta: &[F], keep: bool) -> (Vec<F>, LnCache<F>) {
    let d = gamma.len();
    let n = x.len() / d;
    let eps = F::lit(LN_EPS);
    let inv_d = F::one() / F::lit(d as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut cache = LnCache::default();
    if keep {
        cache.xhat = vec![F::zero(); x.len()];
        cache.rstd = vec![F::zero(); n];
    }
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            o[j] = xh * gamma[j] + beta[j];
            if keep {
                cache.xhat[r * d + j] = xh;
            }
        }
        if keep {
            cache.rstd[r] = rstd;
        }
    }
    (out, cache)
}

/// Backward of [`layer_norm`]; accumulates `dgamma`/`dbeta` and adds the
/// input gradient into `dx`.
pub fn layer_norm_backward<F: Scalar>(
    cache: &LnCache<F>,
    gamma: &[F],
    dy: &[F],
    dgamma: &mut [F],
    dbeta: &mut [F],
    dx: &mut [F],
) {
    let d = gamma.len();
    let inv_d = F::one() / F::lit(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rstd) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] += rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` via one exponential; much cheaper than the libm routine.
fn fast_tanh<F: Scalar>(z: F) -> F {
    let two = F::lit(2.0);
    F::one() - two / ((two * z).exp() + F::one())
}

/// The inner `tanh` of the GELU approximation; [`gelu`] and [`gelu_grad`]
/// take it as input so the backward pass can reuse the forward's value.
pub fn gelu_tanh<F: Scalar>(u: F) -> F {
    fast_tanh(F::lit(GELU_C) * (u + F::lit(GELU_A) * u * u * u))
}

/// Tanh approximation of GELU given `t = gelu_tanh(u)`.
pub fn gelu<F: Scalar>(u: F, t: F) -> F {
    F::lit(0.5) * u * (F::one() + t)
}

pub fn gelu_grad<F: Scalar>(u: F, t: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * u * u)
}

/// In-place softmax of one row; returns the log of the normaliser relative
/// to the row maximum plus that maximum, i.e. `logsumexp(row)`.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

pub fn log_softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    row.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_and_strided_views() {
        // a = [[1,2,3],[4,5,6]], b = a^T
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = [0.0f64; 4];
        gemm(1.0, MatRef::new(&a, 2, 3), MatRef::new(&a, 2, 3).t(), 0.0, MatMut::new(&mut c, 2, 2));
        assert_eq!(c, [14.0, 32.0, 32.0, 77.0]);
        // column 1 of a as a 2x1 strided view
        let mut d = [0.0f64; 1];
        gemm(1.0, MatRef::strided(&a[1..], 1, 2, 0, 3), MatRef::strided(&a[1..], 2, 1, 3, 0), 0.0, MatMut::new(&mut d, 1, 1));
        assert_eq!(d, [29.0]);
    }

    #[test]
    fn softmax_normalises() {
        let mut row = [1.0f64, 2.0, 3.0];
        let lse = softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((lse - (1f64.exp() + 2f64.exp() + 3f64.exp()).ln()).abs() < 1e-12);
        let lp = log_softmax(&[1.0f64, 2.0, 3.0]);
        assert!((lp[2].exp() - row[2]).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let f = |x: f64| gelu(x, gelu_tanh(x));
            let fd = (f(u + h) - f(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u, gelu_tanh(u))).abs() < 1e-8);
            assert!((gelu_tanh(u) - (GELU_C * (u + GELU_A * u * u * u)).tanh()).abs() < 1e-12);
        }
    }
}
