//! Small numerical building blocks shared by the simulation and inference
//! code: order-stable summation, Gauss–Legendre rules and a few dense-matrix
//! helpers for the `d × d` objects the models return.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Block length below which [`pairwise_sum`] falls back to a plain loop.
const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation.
///
/// The association order depends only on the slice length, so the result is
/// identical no matter how the slice was produced (serially or in parallel).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..len`, without materialising a buffer
/// for short inputs.
pub fn pairwise_sum_by(len: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, len, f)
}

/// Gauss–Legendre rule on `[0, 1]`: returns `(nodes, weights)`.
///
/// Nodes are the roots of the Legendre polynomial of the given order, found by
/// Newton iteration from the Chebyshev-like initial guesses.
pub fn gauss_legendre_unit(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::domain("quadrature order must be at least 1"));
    }
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    Ok((nodes, weights))
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &DMatrix<f64>, context: &'static str) -> Result<(DMatrix<f64>, f64)> {
    let chol = m.clone().cholesky().ok_or(Error::Singular(context))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

/// `A Aᵀ`, the covariance generated by a diffusion matrix `A`.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    a * a.transpose()
}

/// `Σ_r ξ_r M_r v`: contraction of per-column Jacobians with a vector and a
/// noise sample. Used for the stochastic-integral terms of the tangents.
pub fn column_jacobian_contract(jacobians: &[DMatrix<f64>], v: &DVector<f64>, noise: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for (jac, &xi) in jacobians.iter().zip(noise) {
        if xi != 0.0 {
            out += jac * v * xi;
        }
    }
    out
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
