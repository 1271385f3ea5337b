//! Building blocks shared by the encoder and the task heads. Matrices are
//! row-major `[rows, cols]` slices; weights are stored `[in, out]`.

use crate::rng;
use crate::tensor::{gemm, Float, Tensor, View, ViewMut};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b` for `x: [rows, in]`.
pub fn linear<F: Float>(x: &[F], rows: usize, w: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut y = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        y.extend_from_slice(&b.data);
    }
    gemm(F::one(), View::dense(x, rows, din), w.view(), F::one(), ViewMut::dense(&mut y, rows, dout));
    y
}

/// Accumulates `dW += x^T dy`, `db += colsum(dy)` and returns `dy W^T` when asked.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Float>(
    x: &[F],
    dy: &[F],
    rows: usize,
    w: &Tensor<F>,
    dw: &mut Tensor<F>,
    db: &mut Tensor<F>,
    want_dx: bool,
) -> Option<Vec<F>> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    gemm(
        F::one(),
        View::dense(x, rows, din).t(),
        View::dense(dy, rows, dout),
        F::one(),
        dw.view_mut(),
    );
    for row in dy.chunks_exact(dout) {
        for (acc, &g) in db.data.iter_mut().zip(row) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![F::zero(); rows * din];
        gemm(F::one(), View::dense(dy, rows, dout), w.view().t(), F::zero(), ViewMut::dense(&mut dx, rows, din));
        dx
    })
}

pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Float>(x: &[F], cols: usize, gain: &Tensor<F>, bias: &Tensor<F>) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / cols;
    let n = F::of(cols as f64);
    let eps = F::of(LN_EPS);
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain.data[c] + bias.data[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Float>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &Tensor<F>,
    dgain: &mut Tensor<F>,
    dbias: &mut Tensor<F>,
) -> Vec<F> {
    let cols = gain.len();
    let n = F::of(cols as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dxhat = vec![F::zero(); cols];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let off = r * cols;
        let mut sum = F::zero();
        let mut dot = F::zero();
        for c in 0..cols {
            let g = dy[off + c];
            let h = cache.xhat[off + c];
            dgain.data[c] += g * h;
            dbias.data[c] += g;
            dxhat[c] = g * gain.data[c];
            sum += dxhat[c];
            dot += dxhat[c] * h;
        }
        let (mean, mean_dot) = (sum / n, dot / n);
        for c in 0..cols {
            dx[off + c] = rs * (dxhat[c] - mean - cache.xhat[off + c] * mean_dot);
        }
    }
    dx
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu<F: Float>(x: F) -> F {
    x * F::of(0.5) * (F::one() + (x * F::of(INV_SQRT2)).erf())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let cdf = F::of(0.5) * (F::one() + (x * F::of(INV_SQRT2)).erf());
    let pdf = F::of(INV_SQRT_2PI) * (-(x * x) * F::of(0.5)).exp();
    cdf + x * pdf
}

/// Numerically stable log-sum-exp of one row.
pub fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// In-place softmax over the first `valid` entries; the rest become zero.
pub fn softmax_prefix<F: Float>(row: &mut [F], valid: usize) {
    let max = row[..valid].iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    for v in &mut row[valid..] {
        *v = F::zero();
    }
}

/// Inverted dropout whose mask is a pure function of `(key, element index)`,
/// so the backward pass regenerates it instead of storing it.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub key: u64,
    pub p: f64,
}

impl Dropout {
    pub fn site(&self, parts: &[u64]) -> Dropout {
        let mut all = vec![self.key];
        all.extend_from_slice(parts);
        Dropout { key: rng::mix(&all), p: self.p }
    }

    #[inline]
    pub fn keeps(&self, idx: usize) -> bool {
        rng::unit_f64(rng::splitmix64(self.key ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))) >= self.p
    }

    /// Multiplies by the mask and rescales by `1 / (1 - p)`. The same call
    /// serves as its own backward.
    pub fn apply<F: Float>(&self, data: &mut [F]) {
        if self.p <= 0.0 {
            return;
        }
        let scale = F::of(1.0 / (1.0 - self.p));
        for (i, v) in data.iter_mut().enumerate() {
            *v = if self.keeps(i) { *v * scale } else { F::zero() };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values_and_derivative() {
        assert_eq!(gelu(0.0f64), 0.0);
        // x Φ(x) at 1: Φ(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
        for &x in &[-2.5f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_prefix_masks_tail() {
        let mut row = vec![1.0f64, 2.0, 3.0, 100.0];
        softmax_prefix(&mut row, 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(row[3], 0.0);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.1, 0.5, 0.5, -0.7, 1.9];
        let gain = Tensor::from_vec(&[4], vec![1.1, 0.9, -0.5, 2.0]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.0, 0.1, 0.2, 0.3]).unwrap();
        let w = [0.7, -0.2, 0.4, 1.3, -0.9, 0.6, 0.25, -1.1];
        let f = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(x, 4, &gain, &bias);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, 4, &gain, &bias);
        let mut dg = Tensor::zeros(&[4]);
        let mut db = Tensor::zeros(&[4]);
        let dx = layer_norm_backward(&w, &cache, &gain, &mut dg, &mut db);
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut m = x.clone();
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn dropout_rate_and_determinism() {
        let d = Dropout { key: 42, p: 0.1 };
        let kept = (0..100_000).filter(|&i| d.keeps(i)).count();
        // Binomial(1e5, 0.9): sd ~ 95.
        assert!((kept as i64 - 90_000).abs() < 600, "{kept}");
        let mut a = vec![1.0f32; 64];
        let mut b = vec![1.0f32; 64];
        d.apply(&mut a);
        d.apply(&mut b);
        assert_eq!(a, b);
        assert_ne!(d.site(&[1]).key, d.site(&[2]).key);
    }
}
