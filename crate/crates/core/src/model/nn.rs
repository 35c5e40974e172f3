//! Minimal dense layers with explicit backward passes.
//!
//! Activations are row-major `rows x cols` slices. Every layer keeps its own
//! gradient buffers; `backward` accumulates into them so a batch can be
//! processed one sample at a time.

use std::fmt::Debug;

use num_traits::Float;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Stream;

/// Floating-point element type for model math (`f32` for training, `f64`
/// for gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C = op(A) * op(B)` (`C += ...` when `accumulate`), all row-major.
    /// `A` is `m x k` (stored `k x m` when `ta`), `B` is `k x n` (stored
    /// `n x k` when `tb`), `C` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool);

    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

#[inline]
fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical rows x cols
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self], accumulate: bool) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].fill(0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense row-major buffers.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies (matrices yes, norms/biases no).
    pub decay: bool,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(shape: &[usize], decay: bool) -> Self {
        let n = shape.iter().product();
        Self {
            value: vec![F::zero(); n],
            grad: vec![F::zero(); n],
            shape: shape.to_vec(),
            decay,
        }
    }

    pub fn filled(shape: &[usize], v: f64, decay: bool) -> Self {
        let mut p = Self::zeros(shape, decay);
        p.value.fill(F::of(v));
        p
    }

    pub fn normal(shape: &[usize], std: f64, rng: &mut Stream, decay: bool) -> Self {
        let mut p = Self::zeros(shape, decay);
        for v in &mut p.value {
            let z: f64 = StandardNormal.sample(rng);
            *v = F::of(z * std);
        }
        p
    }

    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Stream) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut p = Self::zeros(&[fan_in, fan_out], true);
        for v in &mut p.value {
            *v = F::of(rng.random_range(-a..a));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Visitor over named parameters, in a fixed deterministic order.
pub trait Params<F: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Param<F>,
    pub b: Param<F>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Stream) -> Self {
        Self {
            w: Param::xavier(d_in, d_out, rng),
            b: Param::zeros(&[d_out], false),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let mut y = Vec::with_capacity(rows * self.d_out);
        for _ in 0..rows {
            y.extend_from_slice(&self.b.value);
        }
        F::gemm(rows, self.d_in, self.d_out, x, false, &self.w.value, false, &mut y, true);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[F], dy: &[F], rows: usize) -> Vec<F> {
        self.accumulate_grads(x, dy, rows);
        self.backward_input(dy, rows)
    }

    pub fn accumulate_grads(&mut self, x: &[F], dy: &[F], rows: usize) {
        F::gemm(self.d_in, rows, self.d_out, x, true, dy, false, &mut self.w.grad, true);
        for r in 0..rows {
            for (g, &d) in self.b.grad.iter_mut().zip(&dy[r * self.d_out..(r + 1) * self.d_out]) {
                *g = *g + d;
            }
        }
    }

    pub fn backward_input(&self, dy: &[F], rows: usize) -> Vec<F> {
        let mut dx = vec![F::zero(); rows * self.d_in];
        F::gemm(rows, self.d_out, self.d_in, dy, false, &self.w.value, true, &mut dx, false);
        dx
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.w);
        f(&join(prefix, "bias"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.w);
        f(&join(prefix, "bias"), &mut self.b);
    }
}

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(&[dim], 1.0, false),
            beta: Param::zeros(&[dim], false),
            dim,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> (Vec<F>, LnCache<F>) {
        let d = self.dim;
        let inv_d = F::of(1.0 / d as f64);
        let eps = F::of(LN_EPS);
        let mut y = vec![F::zero(); rows * d];
        let mut xhat = vec![F::zero(); rows * d];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                y[r * d + c] = h * self.gamma.value[c] + self.beta.value[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LnCache<F>, dy: &[F], rows: usize) -> Vec<F> {
        let d = self.dim;
        let inv_d = F::of(1.0 / d as f64);
        let mut dx = vec![F::zero(); rows * d];
        let mut dxhat = vec![F::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            for c in 0..d {
                self.gamma.grad[c] = self.gamma.grad[c] + g[c] * xh[c];
                self.beta.grad[c] = self.beta.grad[c] + g[c];
                dxhat[c] = g[c] * self.gamma.value[c];
                m1 = m1 + dxhat[c];
                m2 = m2 + dxhat[c] * xh[c];
            }
            m1 = m1 * inv_d;
            m2 = m2 * inv_d;
            let rs = cache.rstd[r];
            for c in 0..d {
                dx[r * d + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
            }
        }
        dx
    }
}

impl<F: Scalar> Params<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: &[F]) -> Vec<F> {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    x.iter()
        .map(|&v| half * v * (F::one() + tanh(c * (v + a * v * v * v))))
        .collect()
}

// tanh(u) = 1 - 2 / (e^{2u} + 1), clamped so `exp` stays finite.
#[inline]
fn tanh<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    let u = u.max(F::of(-20.0)).min(F::of(20.0));
    F::one() - two / ((two * u).exp() + F::one())
}

/// Returns `dL/dx` given the pre-activation `x` and `dL/dy`.
pub fn gelu_backward<F: Scalar>(x: &[F], dy: &[F]) -> Vec<F> {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let a3 = F::of(3.0 * GELU_A);
    let half = F::of(0.5);
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = tanh(c * (v + a * v * v * v));
            let dt = (F::one() - t * t) * c * (F::one() + a3 * v * v);
            g * (half * (F::one() + t) + half * v * dt)
        })
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn add_in_place<F: Scalar>(a: &mut [F], b: &[F]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone, Default)]
pub struct MlpCache<F> {
    x: Vec<F>,
    h: Vec<F>,
    g: Vec<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Stream) -> Self {
        Self {
            fc1: Linear::new(d_in, d_hidden, rng),
            fc2: Linear::new(d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> (Vec<F>, MlpCache<F>) {
        let h = self.fc1.forward(x, rows);
        let g = gelu(&h);
        let y = self.fc2.forward(&g, rows);
        (
            y,
            MlpCache {
                x: x.to_vec(),
                h,
                g,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &[F], rows: usize) -> Vec<F> {
        let dg = self.fc2.backward(&cache.g, dy, rows);
        let dh = gelu_backward(&cache.h, &dg);
        self.fc1.backward(&cache.x, &dh, rows)
    }
}

impl<F: Scalar> Params<F> for Mlp<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()), "i={i} num={num} an={}", analytic[i]);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = stream(1, &[]);
        let ln = LayerNorm::<f64>::new(6);
        let x: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = ln.forward(x, 2);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ln.forward(&x, 2);
        let dx = ln.clone().backward(&cache, &w, 2);
        fd_check(loss, &x, &dx);
    }

    #[test]
    fn gelu_gradient() {
        let x: Vec<f64> = (-20..20).map(|i| i as f64 * 0.17).collect();
        let ones = vec![1.0; x.len()];
        let dx = gelu_backward(&x, &ones);
        fd_check(|x| gelu(x).iter().sum(), &x, &dx);
    }

    #[test]
    fn linear_gradient() {
        let mut r = stream(2, &[]);
        let mut lin = Linear::<f64>::new(3, 4, &mut r);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let l2 = lin.clone();
        let loss = |x: &[f64]| -> f64 { l2.forward(x, 2).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let dx = lin.backward(&x, &w, 2);
        fd_check(loss, &x, &dx);
        // bias grad is the column sum of dy
        assert!((lin.b.grad[0] - (w[0] + w[4])).abs() < 1e-12);
    }
}
