//! Closed-form Gaussian machinery for the mean-field Ornstein–Uhlenbeck
//! model, and a nested Monte Carlo estimate of conditional moments for
//! arbitrary models.
//!
//! For `b = θ1(κ⟨μ⟩ − x)`, `a = θ2` the law mean solves
//! `m̄' = θ1(κ − 1) m̄`, and the transition from `(t, x)` over `dt` is
//! Gaussian with mean `m̄_{t+dt} + e^{−θ1 dt}(x − m̄_t)` and variance
//! `θ2²(1 − e^{−2θ1 dt})/(2θ1)` in each coordinate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeasureSnapshot, ModelSpec, ThetaPair};
use crate::numerics::{pairwise_sum, spd_inverse_logdet};
use crate::rng::NoiseStream;
use crate::simulate::euler_step;

/// Gaussian transition law `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTransition {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianTransition {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::Misaligned("covariance shape".into()));
        }
        let scale = cov.abs().max().max(f64::MIN_POSITIVE);
        if (&cov - cov.transpose()).abs().max() > 1e-14 * scale {
            return Err(Error::domain("covariance is not symmetric"));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::Singular("transition covariance"));
        }
        Ok(GaussianTransition { mean, cov })
    }
}

/// Mean of the oracle law over time for one coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFlow {
    pub m0: f64,
    pub kappa: f64,
    pub theta1: f64,
}

impl MeanFlow {
    pub fn value(&self, t: f64) -> f64 {
        self.m0 * (self.theta1 * (self.kappa - 1.0) * t).exp()
    }

    /// `∂_{θ1} m̄_t = (κ − 1) t m̄_t`.
    pub fn d_theta1(&self, t: f64) -> f64 {
        (self.kappa - 1.0) * t * self.value(t)
    }
}

/// Switch to the series form of the variance below this `|θ1 dt|`.
const VARIANCE_SERIES_CUTOFF: f64 = 1e-6;

/// Scalar transition mean and variance of the oracle.
pub fn ou_moments(theta1: f64, theta2: f64, kappa: f64, m0: f64, t: f64, x: f64, dt: f64) -> (f64, f64) {
    let flow = MeanFlow { m0, kappa, theta1 };
    let mean = flow.value(t + dt) + (-theta1 * dt).exp() * (x - flow.value(t));
    let s = theta1 * dt;
    let var = if s.abs() < VARIANCE_SERIES_CUTOFF {
        theta2 * theta2 * dt * (1.0 - s + 2.0 / 3.0 * s * s)
    } else {
        theta2 * theta2 * -(-2.0 * s).exp_m1() / (2.0 * theta1)
    };
    (mean, var)
}

/// Transition law of the one-dimensional oracle from `(t, x)` over `dt`.
pub fn ou_transition(theta: &ThetaPair, kappa: f64, m0: f64, t: f64, x: f64, dt: f64) -> Result<GaussianTransition> {
    if !(dt > 0.0) {
        return Err(Error::domain(format!("transition step {dt} must be positive")));
    }
    let (mean, var) = ou_moments(theta.theta1, theta.theta2, kappa, m0, t, x, dt);
    GaussianTransition::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
}

/// Gaussian log-density of `y` under `trans`.
pub fn ou_log_density(trans: &GaussianTransition, y: &[f64]) -> Result<f64> {
    let d = trans.mean.len();
    if y.len() != d {
        return Err(Error::Misaligned(format!("point of length {} for a {d}-dimensional law", y.len())));
    }
    if d == 1 {
        return Ok(scalar_log_density(trans.mean[0], trans.cov[(0, 0)], y[0]));
    }
    let (inv, logdet) = spd_inverse_logdet(&trans.cov, "transition covariance")?;
    let r = DVector::from_column_slice(y) - &trans.mean;
    let q = r.dot(&(&inv * &r));
    Ok(-0.5 * (q + logdet + d as f64 * (2.0 * std::f64::consts::PI).ln()))
}

pub(crate) fn scalar_log_density(mean: f64, var: f64, y: f64) -> f64 {
    let r = y - mean;
    -0.5 * (r * r / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

/// Conditional moments with their Monte Carlo standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub mean_se: DVector<f64>,
    pub cov_se: DMatrix<f64>,
    pub n_inner: usize,
}

/// Mean and covariance of `X_{t+dt}` given `X_t = x`, from `n_inner` Euler
/// paths on the fine grid implied by `mu_path` (one frozen measure per fine
/// step, `dt / mu_path.len()` each).
#[allow(clippy::too_many_arguments)]
pub fn conditional_moments_mc(
    model: &dyn ModelSpec,
    theta: &ThetaPair,
    x: &[f64],
    dt: f64,
    mu_path: &[MeasureSnapshot],
    n_inner: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    let d = model.dim();
    if x.len() != d {
        return Err(Error::Misaligned("start point dimension".into()));
    }
    if mu_path.is_empty() || n_inner < 2 || !(dt > 0.0) {
        return Err(Error::domain("need a non-empty measure path, n_inner >= 2 and dt > 0"));
    }
    let h = dt / mu_path.len() as f64;
    let ends: Vec<Vec<f64>> = (0..n_inner)
        .into_par_iter()
        .map(|p| {
            let mut stream = NoiseStream::new(seed, p as u64, d);
            let mut state = x.to_vec();
            let mut noise = vec![0.0; d];
            for (j, mu) in mu_path.iter().enumerate() {
                stream.fill(j as u64, &mut noise);
                state = euler_step(model, &state, mu, theta, h, &noise)
                    .map_err(|_| Error::Propagation { particle: Some(p), step: Some(j) })?
                    .as_slice()
                    .to_vec();
            }
            Ok(state)
        })
        .collect::<Result<_>>()?;

    let nf = n_inner as f64;
    let mean = DVector::from_fn(d, |c, _| pairwise_sum(&ends.iter().map(|e| e[c]).collect::<Vec<_>>()) / nf);
    let mut cov = DMatrix::zeros(d, d);
    let mut cov_se = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..=a {
            let prods: Vec<f64> = ends.iter().map(|e| (e[a] - mean[a]) * (e[b] - mean[b])).collect();
            let (m, v) = crate::stats::mean_var(&prods);
            let c = m * nf / (nf - 1.0);
            cov[(a, b)] = c;
            cov[(b, a)] = c;
            let se = (v / nf).sqrt();
            cov_se[(a, b)] = se;
            cov_se[(b, a)] = se;
        }
    }
    let mean_se = DVector::from_fn(d, |c, _| (cov[(c, c)] / nf).sqrt());
    Ok(MomentEstimate { mean, cov, mean_se, cov_se, n_inner })
}

/// Setting of the mean Taylor identity check: the oracle's interaction and
/// initial mean, particle count and observation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorContext {
    pub kappa: f64,
    pub m0: f64,
    pub n_particles: usize,
    pub delta: f64,
}

/// Oracle value of `z^θ_t(x) = κ m̄_t − x + θ1 κ ∂_{θ1} m̄_t` in one coordinate.
pub fn ou_z_field(theta1: f64, kappa: f64, m0: f64, t: f64, x: f64) -> f64 {
    let flow = MeanFlow { m0, kappa, theta1 };
    kappa * flow.value(t) - x + theta1 * kappa * flow.d_theta1(t)
}

/// `|m^{θ0} − m^{θ1(l)} + (l u Δ/√N) z^{θ0}_{t_k}(x)|` for the oracle.
///
/// The conditional mean does not depend on θ2, so only the drift
/// perturbation enters. The residual is second order: `O(Δ² u/√N)` plus
/// `O(Δ u²/N)`.
pub fn taylor_mean_identity_check(theta0: &ThetaPair, u: f64, l: f64, k: usize, x: f64, ctx: &TaylorContext) -> f64 {
    let delta = ctx.delta;
    let shift = l * u / (ctx.n_particles as f64).sqrt();
    let t = k as f64 * delta;
    let (m0_mean, _) = ou_moments(theta0.theta1, theta0.theta2, ctx.kappa, ctx.m0, t, x, delta);
    let (ml_mean, _) = ou_moments(theta0.theta1 + shift, theta0.theta2, ctx.kappa, ctx.m0, t, x, delta);
    let z = ou_z_field(theta0.theta1, ctx.kappa, ctx.m0, t, x);
    (m0_mean - ml_mean + shift * delta * z).abs()
}
