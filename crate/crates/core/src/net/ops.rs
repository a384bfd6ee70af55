//! Dense layer primitives with their reverse-mode counterparts.
//!
//! Activations are row-major `rows × cols` slices; weights follow the
//! `out × in` convention so that `y = x · Wᵀ + b`.

use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// `y = x · Wᵀ + b`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, inp: usize, w: &[T], b: Option<&[T]>, outp: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * outp];
    if let Some(b) = b {
        for r in y.chunks_exact_mut(outp) {
            r.copy_from_slice(b);
        }
    }
    T::gemm(rows, inp, outp, x, false, w, true, &mut y, b.is_some());
    y
}

/// Accumulates weight/bias gradients of [`linear`] and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    rows: usize,
    inp: usize,
    outp: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    T::gemm(outp, rows, inp, dy, true, x, false, dw, true);
    if let Some(db) = db {
        for r in dy.chunks_exact(outp) {
            for (g, &v) in db.iter_mut().zip(r) {
                *g += v;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * inp];
        T::gemm(rows, outp, inp, dy, false, w, false, &mut dx, false);
        dx
    })
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044_715))
}

/// `tanh` through one `exp`; saturates cleanly for large `|u|`.
fn tanh_exp<T: Scalar>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

fn gelu_inner<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    tanh_exp(c * (x + a * x * x * x))
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + gelu_inner(x))
}

/// Derivative of [`gelu`] given the inner `tanh` value `t` at `x`.
fn gelu_grad_with<T: Scalar>(x: T, t: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    gelu_grad_with(x, gelu_inner(x))
}

/// Elementwise GELU, also returning the inner `tanh` values for the backward pass.
pub fn gelu_forward<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let t: Vec<T> = x.iter().map(|&v| gelu_inner(v)).collect();
    let half = T::lit(0.5);
    let y = x.iter().zip(&t).map(|(&v, &tv)| half * v * (T::one() + tv)).collect();
    (y, t)
}

/// `dy ⊙ gelu'(x)` using the `tanh` values from [`gelu_forward`].
pub fn gelu_backward<T: Scalar>(dy: &[T], x: &[T], t: &[T]) -> Vec<T> {
    dy.iter().zip(x).zip(t).map(|((&g, &v), &tv)| g * gelu_grad_with(v, tv)).collect()
}

pub fn leaky_relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::lit(LEAKY_SLOPE) * x
    }
}

pub fn leaky_relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::lit(LEAKY_SLOPE)
    }
}

/// In-place softmax with max subtraction.
pub fn softmax<T: Scalar>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Gradient through softmax: `dz_i = p_i (dp_i − Σ_j p_j dp_j)`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&a, &b)| a * (b - dot)).collect()
}

pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(x: &[T], rows: usize, d: usize, gain: &[T], bias: &[T]) -> (Vec<T>, LayerNormCache<T>) {
    let eps = T::lit(LAYER_NORM_EPS);
    let dn = T::from_usize(d).unwrap();
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mu) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = gain[c] * h + bias[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    rows: usize,
    d: usize,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let dn = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); rows * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for c in 0..d {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            s1 += dxhat[c];
            s2 += dxhat[c] * xh[c];
        }
        let scale = cache.rstd[r] / dn;
        for c in 0..d {
            dx[r * d + c] = scale * (dn * dxhat[c] - s1 - xh[c] * s2);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
        for &x in &[-40.0f64, -0.3, 1e-9, 0.7, 40.0] {
            let reference = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
            assert!((gelu(x) - reference).abs() < 1e-15, "x = {x}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_survives_large_inputs() {
        let mut v = vec![1000.0f64, 1001.0, 999.0];
        softmax(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(v.iter().all(|p| p.is_finite() && *p > 0.0));
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let (rows, d) = (2, 5);
        let x: Vec<f64> = (0..rows * d).map(|i| (i as f64 * 1.3).sin()).collect();
        let gain: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
        let bias = vec![0.05; d];
        let w: Vec<f64> = (0..rows * d).map(|i| (i as f64 * 0.7).cos()).collect();
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(x, rows, d, &gain, &bias);
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer_norm(&x, rows, d, &gain, &bias);
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let dx = layer_norm_backward(&w, &cache, rows, d, &gain, &mut dg, &mut db);
        for i in 0..rows * d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let num = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "{i}: {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_backward_shapes() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = vec![0.5, -1.0, 0.25, 1.0, 0.0, 2.0];
        let b = vec![0.1, 0.2];
        let y = linear(&x, 2, 3, &w, Some(&b), 2);
        assert_eq!(y, vec![0.5 - 2.0 + 0.75 + 0.1, 1.0 + 6.0 + 0.2, 2.0 - 5.0 + 1.5 + 0.1, 4.0 + 12.0 + 0.2]);
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = linear_backward(&[1.0, 0.0, 0.0, 1.0], &x, 2, 3, 2, &w, &mut dw, Some(&mut db), true).unwrap();
        assert_eq!(dw, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(db, vec![1.0, 1.0]);
        assert_eq!(dx, vec![0.5, -1.0, 0.25, 1.0, 0.0, 2.0]);
    }
}
