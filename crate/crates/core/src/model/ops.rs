//! Dense row-major kernels with hand-written backward passes.
//!
//! Every matrix is a flat `[f64]` slice in row-major order; shapes travel as
//! explicit arguments. Backward functions accumulate (`+=`) into gradient
//! buffers so callers can sum over samples without extra copies.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m×k] += g · bᵀ` where `g` is `m×n` and `b` is `k×n`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds `bias` to every row of an `m×n` matrix.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `g` accumulated into `out` (bias gradient).
pub fn col_sum_acc(g: &[f64], out: &mut [f64]) {
    for row in g.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given softmax output `p` and upstream gradient `dp`, writes the gradient
/// with respect to the softmax input into `dp`.
pub fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let inner = dot(p, dp);
    for (d, &pv) in dp.iter_mut().zip(p) {
        *d = pv * (*d - inner);
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization cache.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `dx`; accumulates into `dgamma` and `dbeta`.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let d = gamma.len();
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx[r * d + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Lays out `k×k` same-padded patches of a `c×s×s` image as columns:
/// result is `(c·k·k) × (s·s)`.
pub fn im2col(x: &[f64], c: usize, s: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = s * s;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..s {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    for xo in 0..s {
                        let ix = xo as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= s as isize {
                            continue;
                        }
                        dst[y * s + xo] = x[(ch * s + iy as usize) * s + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f64], c: usize, s: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = s * s;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..s {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    for xo in 0..s {
                        let ix = xo as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= s as isize {
                            continue;
                        }
                        x[(ch * s + iy as usize) * s + ix as usize] += src[y * s + xo];
                    }
                }
            }
        }
    }
    x
}

/// 3x3 stride-2 max pooling with padding 1 over a `c×s×s` map.
/// Returns the pooled map and the flat source index of every output.
pub fn max_pool(x: &[f64], c: usize, s: usize) -> (Vec<f64>, Vec<usize>) {
    use crate::arch::{POOL_KERNEL, POOL_PADDING, POOL_STRIDE};
    let so = crate::arch::pooled_side(s);
    let mut out = vec![0.0; c * so * so];
    let mut arg = vec![0usize; c * so * so];
    for ch in 0..c {
        for oy in 0..so {
            for ox in 0..so {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..POOL_KERNEL {
                    let iy = (oy * POOL_STRIDE + ky) as isize - POOL_PADDING as isize;
                    if iy < 0 || iy >= s as isize {
                        continue;
                    }
                    for kx in 0..POOL_KERNEL {
                        let ix = (ox * POOL_STRIDE + kx) as isize - POOL_PADDING as isize;
                        if ix < 0 || ix >= s as isize {
                            continue;
                        }
                        let idx = (ch * s + iy as usize) * s + ix as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * so + oy) * so + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// Transposes an `r×c` matrix.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, s, k) = (2, 5, 3);
        let x: Vec<f64> = (0..c * s * s).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * s * s).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs = dot(&im2col(&x, c, s, k), &y);
        let rhs = dot(&x, &col2im(&y, c, s, k));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = vec![1000.0, 999.0, -5.0, 3.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn max_pool_shape_and_routing() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let (y, arg) = max_pool(&x, 1, 4);
        assert_eq!(y, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = max_pool_backward(&[1.0; 4], &arg, 16);
        assert_eq!(dx.iter().sum::<f64>(), 4.0);
        assert_eq!(dx[15], 1.0);
    }
}
