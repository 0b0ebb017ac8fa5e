//! Raw slice kernels shared by the tape's forward and backward passes.

/// `c[m,n] = op(a)[m,k] · op(b)[k,n] + beta · c`.
///
/// With `ta` set, `a` is stored as `[k, m]`; with `tb` set, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every index reachable through
    // the given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) const LN_EPS: f32 = 1e-6;

/// Normalizes each row of width `d`; returns `(y, rstd)`.
pub(crate) fn layer_norm(x: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut y = vec![0.0f32; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = xr
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let r = 1.0 / (var + LN_EPS as f64).sqrt();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = ((v as f64 - mean) * r) as f32;
        }
        rstd.push(r as f32);
    }
    (y, rstd)
}

pub(crate) fn layer_norm_backward(y: &[f32], rstd: &[f32], dy: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for (((yr, dyr), dxr), &r) in y
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(rstd)
    {
        let mean_dy = dyr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let mean_dyy = dyr.iter().zip(yr).map(|(&g, &v)| g as f64 * v as f64).sum::<f64>() / d as f64;
        for ((o, &g), &v) in dxr.iter_mut().zip(dyr).zip(yr) {
            *o = (r as f64 * (g as f64 - mean_dy - v as f64 * mean_dyy)) as f32;
        }
    }
    dx
}

pub(crate) fn softmax(x: &[f32], d: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (o, &v) in yr.iter_mut().zip(xr) {
            let e = (v - max).exp();
            *o = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        yr.iter_mut().for_each(|o| *o *= inv);
    }
    y
}

pub(crate) fn softmax_backward(y: &[f32], dy: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((yr, dyr), dxr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(&a, &b)| a as f64 * b as f64).sum();
        for ((o, &v), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = v * (g - dot as f32);
        }
    }
    dx
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Non-overlapping `r×r` window mean over a `[lead, h, w, d]` layout.
pub(crate) fn avg_pool(x: &[f32], lead: usize, h: usize, w: usize, d: usize, r: usize) -> Vec<f32> {
    let (ho, wo) = (h / r, w / r);
    let inv = 1.0 / (r * r) as f64;
    let mut y = vec![0.0f32; lead * ho * wo * d];
    let mut acc = vec![0.0f64; d];
    for b in 0..lead {
        for oy in 0..ho {
            for ox in 0..wo {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dy in 0..r {
                    for dx in 0..r {
                        let base = ((b * h + oy * r + dy) * w + ox * r + dx) * d;
                        for (a, &v) in acc.iter_mut().zip(&x[base..base + d]) {
                            *a += v as f64;
                        }
                    }
                }
                let out = ((b * ho + oy) * wo + ox) * d;
                for (o, &a) in y[out..out + d].iter_mut().zip(&acc) {
                    *o = (a * inv) as f32;
                }
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward(dy: &[f32], lead: usize, h: usize, w: usize, d: usize, r: usize) -> Vec<f32> {
    let (ho, wo) = (h / r, w / r);
    let inv = 1.0 / (r * r) as f32;
    let mut dx = vec![0.0f32; lead * h * w * d];
    for b in 0..lead {
        for y in 0..h {
            for x in 0..w {
                let src = ((b * ho + y / r) * wo + x / r) * d;
                let dst = ((b * h + y) * w + x) * d;
                for (o, &g) in dx[dst..dst + d].iter_mut().zip(&dy[src..src + d]) {
                    *o = g * inv;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f32>();

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                assert!((c[i * n + j] - naive(i, j)).abs() < 1e-5);
            }
        }

        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn avg_pool_window_mean() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(avg_pool(&x, 1, 2, 2, 1, 2), vec![2.5]);
        assert_eq!(avg_pool(&x, 1, 2, 2, 1, 1), x.to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 3);
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
