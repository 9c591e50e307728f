//! Row-major dense kernels with hand-written backward passes. Every
//! reduction runs in a fixed index order.

/// `y[r] = x[r] W + b` for `rows` rows; `w` is `in_dim x out_dim`.
pub fn linear_fwd(x: &[f64], rows: usize, in_dim: usize, w: &[f64], b: &[f64], out_dim: usize, y: &mut [f64]) {
    for r in 0..rows {
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        yr.copy_from_slice(b);
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (k, &a) in xr.iter().enumerate() {
            let wk = &w[k * out_dim..(k + 1) * out_dim];
            for (o, wv) in yr.iter_mut().zip(wk) {
                *o += a * wv;
            }
        }
    }
}

/// Accumulates `dw += x^T dy`, `db += sum(dy)` and, when given, writes
/// `dx = dy W^T`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    w: &[f64],
    out_dim: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        for (acc, g) in db.iter_mut().zip(dyr) {
            *acc += g;
        }
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (k, &a) in xr.iter().enumerate() {
            let dwk = &mut dw[k * out_dim..(k + 1) * out_dim];
            for (acc, g) in dwk.iter_mut().zip(dyr) {
                *acc += a * g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * out_dim..(r + 1) * out_dim];
            let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
            for (k, out) in dxr.iter_mut().enumerate() {
                let wk = &w[k * out_dim..(k + 1) * out_dim];
                *out = wk.iter().zip(dyr).map(|(a, b)| a * b).sum();
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[allow(clippy::too_many_arguments)]
pub fn layernorm_fwd(
    x: &[f64],
    rows: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    y: &mut [f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
) {
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
}

/// Writes `dx` (overwriting) and accumulates `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_bwd(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    rows: usize,
    d: usize,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let inv_d = 1.0 / d as f64;
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let hr = &xhat[r * d..(r + 1) * d];
        let mut mean_g = 0.0;
        let mut mean_gh = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * hr[j];
            dbeta[j] += dyr[j];
            let g = dyr[j] * gamma[j];
            mean_g += g;
            mean_gh += g * hr[j];
        }
        mean_g *= inv_d;
        mean_gh *= inv_d;
        for j in 0..d {
            let g = dyr[j] * gamma[j];
            dx[r * d + j] = rstd[r] * (g - mean_g - hr[j] * mean_gh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1000.0, 999.0, 990.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|p| *p > 0.0));
    }
}
