//! Local perturbations, score expansion terms, the exact log-likelihood
//! ratio of the oracle and the Monte Carlo harness that checks local
//! asymptotic normality.
//!
//! Cell values are indexed by particle `i` and transition `k` (from `t_k` to
//! `t_{k+1}`, `k = 0..n`). Conditional moments inside the score terms come
//! from a [`MomentSource`]: exact Gaussian moments for the oracle, or the
//! first-order Euler proxies `m ≈ x + Δ b`, `V ≈ Δ a aᵀ` for other models.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{fisher_quadrature, fisher_quadrature_oracle, FisherInfo};
use crate::measure::TangentMeasure;
use crate::model::{MeasureSnapshot, ModelSpec, ThetaPair};
use crate::numerics::{gauss_legendre_unit, pairwise_sum};
use crate::oracle::{ou_moments, ou_z_field, scalar_log_density};
use crate::rng::{derive_seed, NoiseStream};
use crate::simulate::{simulate_particles, simulate_with_tangents, SimConfig, SimMode, TangentCloud, TrajectoryGrid};
use crate::stats::{ks_test_normal, mean_var, KsResult};

/// Default Gauss–Legendre order of the `∫₀¹ dl` path integrals.
pub const DEFAULT_QUADRATURE_ORDER: usize = 5;

/// `θ⁺ = (θ1⁰ + u/√N, θ2⁰ + v √(Δ/N))` and the straight path to it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPerturbation {
    pub u: f64,
    pub v: f64,
    pub theta0: ThetaPair,
    pub n_particles: usize,
    pub delta: f64,
}

impl LocalPerturbation {
    /// Rejects perturbations whose endpoint leaves the parameter box.
    pub fn new(theta0: ThetaPair, u: f64, v: f64, n_particles: usize, delta: f64) -> Result<Self> {
        if n_particles == 0 || !(delta > 0.0) {
            return Err(Error::domain("perturbation needs N >= 1 and a positive step"));
        }
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::domain("perturbation direction must be finite"));
        }
        let p = LocalPerturbation { u, v, theta0, n_particles, delta };
        theta0.with_values(p.theta1_at(1.0), p.theta2_at(1.0))?;
        Ok(p)
    }

    pub fn drift_rate(&self) -> f64 {
        1.0 / (self.n_particles as f64).sqrt()
    }

    pub fn diffusion_rate(&self) -> f64 {
        (self.delta / self.n_particles as f64).sqrt()
    }

    pub fn theta1_at(&self, l: f64) -> f64 {
        self.theta0.theta1 + l * self.u * self.drift_rate()
    }

    pub fn theta2_at(&self, l: f64) -> f64 {
        self.theta0.theta2 + l * self.v * self.diffusion_rate()
    }

    pub fn plus(&self) -> ThetaPair {
        ThetaPair { theta1: self.theta1_at(1.0), theta2: self.theta2_at(1.0), ..self.theta0 }
    }

    pub fn is_zero(&self) -> bool {
        self.u == 0.0 && self.v == 0.0
    }
}

/// Where conditional moments `m`, `V` and the z-field come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MomentSource {
    /// Closed forms of the mean-field Ornstein–Uhlenbeck model.
    Oracle { kappa: f64, m0: Vec<f64> },
    /// `m ≈ x + Δ b`, `V ≈ Δ a aᵀ`, z-field from the particle tangents.
    EulerProxy,
}

impl MomentSource {
    /// Oracle closed forms when the model declares itself the oracle.
    pub fn for_model(model: &dyn ModelSpec) -> Self {
        match model.traits().oracle_kappa {
            Some(kappa) => MomentSource::Oracle { kappa, m0: model.initial_law().mean().to_vec() },
            None => MomentSource::EulerProxy,
        }
    }

    pub fn is_oracle(&self) -> bool {
        matches!(self, MomentSource::Oracle { .. })
    }
}

/// `z(x) = ∂_{θ1}b(x, μ) + Σ_j w_j ∇_y∂_μ b(x, y_j, μ) v_j`.
pub fn z_field(
    model: &dyn ModelSpec,
    theta1: f64,
    x: &[f64],
    mu: &MeasureSnapshot,
    tangent: &TangentMeasure<'_>,
) -> Result<DVector<f64>> {
    let base = tangent.base();
    if base.len() != mu.len() || base.dim() != mu.dim() || x.len() != mu.dim() {
        return Err(Error::Misaligned("tangent measure does not match the measure".into()));
    }
    Ok(model.d_drift_dtheta1(theta1, x, mu) + model.lfd_tangent_integral(theta1, x, mu, tangent))
}

/// Per-observation inputs shared by all particles at time `t_k`.
pub(crate) struct StepContext {
    pub t: f64,
    pub mu: MeasureSnapshot,
    pub velocities: Option<Vec<f64>>,
}

impl StepContext {
    pub(crate) fn new(grid: &TrajectoryGrid, tangents: Option<&TangentCloud>, k: usize) -> Self {
        StepContext { t: grid.times()[k], mu: grid.snapshot(k), velocities: tangents.map(|c| c.velocities_theta1(k)) }
    }
}

/// Moment evaluations at one state `x` observed at `t_k`.
pub(crate) struct Moments<'a> {
    pub model: &'a dyn ModelSpec,
    pub source: &'a MomentSource,
    pub delta: f64,
}

impl Moments<'_> {
    pub fn mean(&self, step: &StepContext, x: &[f64], theta1: f64, theta2: f64) -> DVector<f64> {
        match self.source {
            MomentSource::Oracle { kappa, m0 } => DVector::from_fn(x.len(), |c, _| {
                ou_moments(theta1, theta2, *kappa, m0[c], step.t, x[c], self.delta).0
            }),
            MomentSource::EulerProxy => DVector::from_column_slice(x) + self.model.drift(theta1, x, &step.mu) * self.delta,
        }
    }

    pub fn cov(&self, step: &StepContext, x: &[f64], theta1: f64, theta2: f64) -> DMatrix<f64> {
        match self.source {
            MomentSource::Oracle { kappa, .. } => {
                let (_, var) = ou_moments(theta1, theta2, *kappa, 0.0, step.t, 0.0, self.delta);
                DMatrix::identity(x.len(), x.len()) * var
            }
            MomentSource::EulerProxy => {
                let a = self.model.diffusion(theta2, x);
                &a * a.transpose() * self.delta
            }
        }
    }

    /// z-field at `θ1`; the proxy uses the tangents of the simulation
    /// parameter whatever `θ1` is.
    pub fn z(&self, step: &StepContext, x: &[f64], theta1: f64) -> Result<DVector<f64>> {
        match self.source {
            MomentSource::Oracle { kappa, m0 } => {
                Ok(DVector::from_fn(x.len(), |c, _| ou_z_field(theta1, *kappa, m0[c], step.t, x[c])))
            }
            MomentSource::EulerProxy => {
                let v = step.velocities.as_ref().ok_or_else(|| {
                    Error::Misaligned("the Euler proxy z-field needs tangents aligned with the grid".into())
                })?;
                let tm = TangentMeasure::new(&step.mu, v)?;
                z_field(self.model, theta1, x, &step.mu, &tm)
            }
        }
    }
}

/// `y`-independent pieces of the score cells at one `(i, k)`:
/// `ζ̂1(y) = s1 (gᵀy − h)` and `ζ̂2(y) = s2 Σ_l w_l [(y − m_l)ᵀ B_l (y − m_l) − c_l]`.
pub(crate) struct CellTerms {
    g: DVector<f64>,
    h: f64,
    diff: Vec<(DVector<f64>, DMatrix<f64>, f64)>,
    s1: f64,
    s2: f64,
}

impl CellTerms {
    pub fn drift(&self, y: &DVector<f64>) -> f64 {
        self.s1 * (self.g.dot(y) - self.h)
    }

    pub fn diff(&self, y: &DVector<f64>) -> f64 {
        if self.s2 == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (m, b, c) in &self.diff {
            let r = y - m;
            acc += r.dot(&(b * &r)) - c;
        }
        self.s2 * acc
    }
}

/// Which conditional moments enter the score cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Centering {
    /// `m^{θ1(l), θ2⁺}` and `(m, V)^{θ1⁰, θ2(l)}`, as in the expansion.
    Expansion,
    /// `m^{θ⁰}`, `V^{θ⁰}` everywhere (exactly centred under `θ⁰`).
    TrueParameter,
}

pub(crate) struct CellBuilder<'a> {
    pub moments: Moments<'a>,
    pub pert: &'a LocalPerturbation,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub centering: Centering,
}

impl CellBuilder<'_> {
    pub fn terms(&self, step: &StepContext, x: &[f64]) -> Result<CellTerms> {
        let model = self.moments.model;
        let p = self.pert;
        let d = x.len();
        let delta = self.moments.delta;
        let s1 = p.u * p.drift_rate();
        let s2 = p.v / (p.n_particles as f64 * delta).sqrt();
        let (t10, t20) = (p.theta0.theta1, p.theta0.theta2);
        let true_mean = match self.centering {
            Centering::TrueParameter => Some(self.moments.mean(step, x, t10, t20)),
            Centering::Expansion => None,
        };

        let mut g = DVector::zeros(d);
        let mut h = 0.0;
        if s1 != 0.0 {
            let t2p = p.theta2_at(1.0);
            let a = model.diffusion(t2p, x);
            let ainv2 = inverse_square(&a)?;
            for (l, w) in self.nodes.iter().zip(&self.weights) {
                let t1l = p.theta1_at(*l);
                let zl = self.moments.z(step, x, t1l)?;
                let m = match &true_mean {
                    Some(m) => m.clone(),
                    None => self.moments.mean(step, x, t1l, t2p),
                };
                let gl = ainv2.transpose() * &zl;
                h += w * gl.dot(&m);
                g += gl * *w;
            }
        }

        let mut diff = Vec::new();
        if s2 != 0.0 {
            let true_cov = match self.centering {
                Centering::TrueParameter => Some(self.moments.cov(step, x, t10, t20)),
                Centering::Expansion => None,
            };
            for (l, w) in self.nodes.iter().zip(&self.weights) {
                let t2l = p.theta2_at(*l);
                let a = model.diffusion(t2l, x);
                let da = model.d_diffusion_dtheta2(t2l, x);
                let ainv = a.clone().try_inverse().ok_or(Error::Singular("diffusion"))?;
                // tr[∂a a⁻¹ r rᵀ a⁻²] = rᵀ a⁻² ∂a a⁻¹ r
                let b = &ainv * &ainv * &da * &ainv;
                let b = (&b + b.transpose()) * (0.5 * w);
                let (m, v) = match (&true_mean, &true_cov) {
                    (Some(m), Some(v)) => (m.clone(), v.clone()),
                    _ => (self.moments.mean(step, x, t10, t2l), self.moments.cov(step, x, t10, t2l)),
                };
                let c = (&b * &v).trace();
                diff.push((m, b, c));
            }
        }
        Ok(CellTerms { g, h, diff, s1, s2 })
    }
}

fn inverse_square(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = a.clone().try_inverse().ok_or(Error::Singular("diffusion"))?;
    Ok(&inv * &inv)
}

/// Cell values `ζ̂^{i,θ1}_k`, `ζ̂^{i,θ2}_k` and their sums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub n_particles: usize,
    pub n_steps: usize,
    /// `k`-major: entry `k * N + i`.
    pub drift: Vec<f64>,
    pub diff: Vec<f64>,
    pub s_b: f64,
    pub s_a: f64,
    /// `u² Σ̂_b` and `v² Σ̂_a` from the same grid.
    pub quad_b: f64,
    pub quad_a: f64,
}

impl ScoreBreakdown {
    pub fn drift_cell(&self, i: usize, k: usize) -> f64 {
        self.drift[k * self.n_particles + i]
    }

    pub fn diff_cell(&self, i: usize, k: usize) -> f64 {
        self.diff[k * self.n_particles + i]
    }

    /// `Σζ̂^{θ1} + Σζ̂^{θ2}`, the expansion of the log-likelihood ratio.
    pub fn total(&self) -> f64 {
        self.s_b + self.s_a
    }
}

pub(crate) struct CellGrid {
    pub drift: Vec<f64>,
    pub diff: Vec<f64>,
}

/// Evaluate both score cells for every `(i, k)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_cells(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    order: usize,
    centering: Centering,
) -> Result<CellGrid> {
    check_inputs(grid, tangents, model)?;
    let (nodes, weights) = gauss_legendre_unit(order)?;
    let builder = CellBuilder {
        moments: Moments { model, source, delta: grid.delta() },
        pert,
        nodes,
        weights,
        centering,
    };
    let n = grid.n_particles();
    let mut drift = vec![0.0; n * grid.n_steps()];
    let mut diff = vec![0.0; n * grid.n_steps()];
    for k in 0..grid.n_steps() {
        let step = StepContext::new(grid, tangents, k);
        let row: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let terms = builder.terms(&step, grid.state(i, k))?;
                let y = DVector::from_column_slice(grid.state(i, k + 1));
                Ok((terms.drift(&y), terms.diff(&y)))
            })
            .collect::<Result<_>>()?;
        for (i, (a, b)) in row.into_iter().enumerate() {
            drift[k * n + i] = a;
            diff[k * n + i] = b;
        }
    }
    Ok(CellGrid { drift, diff })
}

fn check_inputs(grid: &TrajectoryGrid, tangents: Option<&TangentCloud>, model: &dyn ModelSpec) -> Result<()> {
    if grid.dim() != model.dim() {
        return Err(Error::Misaligned(format!("grid dimension {} vs model dimension {}", grid.dim(), model.dim())));
    }
    if let Some(t) = tangents {
        if !t.is_aligned_with(grid) {
            return Err(Error::Misaligned("tangent cloud does not match the grid".into()));
        }
    }
    Ok(())
}

/// `ζ̂^{i,θ1}_k` for every cell (`k`-major).
pub fn zeta_hat_drift(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    quadrature_order: usize,
) -> Result<Vec<f64>> {
    let zero = LocalPerturbation { v: 0.0, ..*pert };
    Ok(evaluate_cells(grid, tangents, &zero, model, source, quadrature_order, Centering::Expansion)?.drift)
}

/// `ζ̂^{i,θ2}_k` for every cell (`k`-major).
pub fn zeta_hat_diff(
    grid: &TrajectoryGrid,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    quadrature_order: usize,
) -> Result<Vec<f64>> {
    let zero = LocalPerturbation { u: 0.0, ..*pert };
    Ok(evaluate_cells(grid, None, &zero, model, source, quadrature_order, Centering::Expansion)?.diff)
}

/// Score cells with all conditional moments taken at `θ⁰`; their
/// conditional means given `X_{t_k}` vanish exactly (for exact moments).
pub fn true_parameter_scores(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    quadrature_order: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cells = evaluate_cells(grid, tangents, pert, model, source, quadrature_order, Centering::TrueParameter)?;
    Ok((cells.drift, cells.diff))
}

/// Both score families, their sums and the quadratic forms `u²Σ̂_b`, `v²Σ̂_a`.
pub fn score_breakdown(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    quadrature_order: usize,
) -> Result<ScoreBreakdown> {
    let cells = evaluate_cells(grid, tangents, pert, model, source, quadrature_order, Centering::Expansion)?;
    let fisher = match (source, tangents) {
        (MomentSource::Oracle { kappa, m0 }, _) => fisher_quadrature_oracle(grid, model, &pert.theta0, *kappa, m0)?,
        (MomentSource::EulerProxy, Some(t)) => fisher_quadrature(grid, t, model, &pert.theta0)?,
        (MomentSource::EulerProxy, None) => {
            return Err(Error::Misaligned("the Euler proxy needs tangents for the z-field".into()))
        }
    };
    Ok(ScoreBreakdown {
        n_particles: grid.n_particles(),
        n_steps: grid.n_steps(),
        s_b: pairwise_sum(&cells.drift),
        s_a: pairwise_sum(&cells.diff),
        drift: cells.drift,
        diff: cells.diff,
        quad_b: pert.u * pert.u * fisher.sigma_b,
        quad_a: pert.v * pert.v * fisher.sigma_a,
    })
}

/// Exact `Σ_{k,i} log p^{θ⁺} − log p^{θ⁰}` on the oracle model.
///
/// The mean flow under each parameter is its own closed form.
pub fn log_lr_exact(
    grid: &TrajectoryGrid,
    model: &dyn ModelSpec,
    pert: &LocalPerturbation,
) -> Result<f64> {
    let (kappa, m0) = match MomentSource::for_model(model) {
        MomentSource::Oracle { kappa, m0 } => (kappa, m0),
        MomentSource::EulerProxy => {
            return Err(Error::UnsupportedModel(format!(
                "the exact likelihood ratio needs the oracle model, got `{}`",
                model.name()
            )))
        }
    };
    log_lr_between(grid, kappa, &m0, &pert.theta0, &pert.plus())
}

/// Exact log-likelihood ratio of `to` against `from` on the oracle.
pub fn log_lr_between(grid: &TrajectoryGrid, kappa: f64, m0: &[f64], from: &ThetaPair, to: &ThetaPair) -> Result<f64> {
    if m0.len() != grid.dim() {
        return Err(Error::Misaligned("initial mean dimension".into()));
    }
    let (n, d, delta) = (grid.n_steps(), grid.dim(), grid.delta());
    let per_particle: Vec<f64> = (0..grid.n_particles())
        .into_par_iter()
        .map(|i| {
            let cells: Vec<f64> = (0..n)
                .flat_map(|k| (0..d).map(move |c| (k, c)))
                .map(|(k, c)| {
                    let t = grid.times()[k];
                    let x = grid.state(i, k)[c];
                    let y = grid.state(i, k + 1)[c];
                    let (mp, vp) = ou_moments(to.theta1, to.theta2, kappa, m0[c], t, x, delta);
                    let (mq, vq) = ou_moments(from.theta1, from.theta2, kappa, m0[c], t, x, delta);
                    scalar_log_density(mp, vp, y) - scalar_log_density(mq, vq, y)
                })
                .collect();
            pairwise_sum(&cells)
        })
        .collect();
    let total = pairwise_sum(&per_particle);
    if !total.is_finite() {
        return Err(Error::Propagation { particle: None, step: None });
    }
    Ok(total)
}

/// How the conditional expectations `E_{t_k}[·]` in the CLT conditions are
/// evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionalExpectation {
    /// Exact Gaussian moments of the polynomial score cells.
    ClosedForm,
    /// `n_inner` joint draws of all particles' next states per transition.
    MonteCarlo { n_inner: usize, seed: u64 },
}

/// Left-hand sides of the seven CLT conditions, in the order
/// `ΣE[S_b]`, `ΣVar[S_b]`, `ΣE[S_b⁴]`, `ΣE[S_a]`, `ΣVar[S_a]`, `ΣE[S_a⁴]`,
/// `ΣCov[S_b, S_a]`, where `S_b = Σ_i ζ̂^{i,θ1}_k` and `S_a = Σ_i ζ̂^{i,θ2}_k`.
pub fn clt_condition_sums(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    pert: &LocalPerturbation,
    model: &dyn ModelSpec,
    source: &MomentSource,
    quadrature_order: usize,
    method: ConditionalExpectation,
) -> Result<[f64; 7]> {
    check_inputs(grid, tangents, model)?;
    let (nodes, weights) = gauss_legendre_unit(quadrature_order)?;
    let builder = CellBuilder {
        moments: Moments { model, source, delta: grid.delta() },
        pert,
        nodes,
        weights,
        centering: Centering::Expansion,
    };
    let (n, d) = (grid.n_particles(), grid.dim());
    let mut per_k: Vec<[f64; 7]> = Vec::with_capacity(grid.n_steps());
    for k in 0..grid.n_steps() {
        let step = StepContext::new(grid, tangents, k);
        // Y = m⁰ + L ξ under θ⁰ (exact or proxy law)
        let polys: Vec<CellPolynomial> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = grid.state(i, k);
                let terms = builder.terms(&step, x)?;
                let m = builder.moments.mean(&step, x, pert.theta0.theta1, pert.theta0.theta2);
                let v = builder.moments.cov(&step, x, pert.theta0.theta1, pert.theta0.theta2);
                let l = v.cholesky().ok_or(Error::Singular("conditional covariance"))?.l();
                Ok(CellPolynomial::fit(&terms, &m, &l, d))
            })
            .collect::<Result<_>>()?;
        per_k.push(match method {
            ConditionalExpectation::ClosedForm => closed_form_conditions(&polys),
            ConditionalExpectation::MonteCarlo { n_inner, seed } => {
                monte_carlo_conditions(&polys, d, n_inner, derive_seed(seed, k as u64))?
            }
        });
    }
    let mut out = [0.0; 7];
    for (j, o) in out.iter_mut().enumerate() {
        *o = pairwise_sum(&per_k.iter().map(|r| r[j]).collect::<Vec<_>>());
    }
    Ok(out)
}

/// `ζ̂1 = c0 + c1ᵀξ`, `ζ̂2 = e0 + e1ᵀξ + ξᵀEξ` for standard normal `ξ`.
struct CellPolynomial {
    c0: f64,
    c1: DVector<f64>,
    e0: f64,
    e1: DVector<f64>,
    e2: DMatrix<f64>,
}

impl CellPolynomial {
    /// Exact coefficients from evaluations at `ξ ∈ {0, ±e_j, e_j + e_l}`.
    fn fit(terms: &CellTerms, m: &DVector<f64>, l: &DMatrix<f64>, d: usize) -> Self {
        let at = |xi: &DVector<f64>| {
            let y = m + l * xi;
            (terms.drift(&y), terms.diff(&y))
        };
        let zero = DVector::zeros(d);
        let (c0, e0) = at(&zero);
        let mut c1 = DVector::zeros(d);
        let mut e1 = DVector::zeros(d);
        let mut e2 = DMatrix::zeros(d, d);
        let unit = |j: usize, s: f64| {
            let mut v = DVector::zeros(d);
            v[j] = s;
            v
        };
        for j in 0..d {
            let (cp, ep) = at(&unit(j, 1.0));
            let (cm, em) = at(&unit(j, -1.0));
            c1[j] = 0.5 * (cp - cm);
            e1[j] = 0.5 * (ep - em);
            e2[(j, j)] = 0.5 * (ep + em) - e0;
        }
        for j in 0..d {
            for q in (j + 1)..d {
                let (_, ejq) = at(&(unit(j, 1.0) + unit(q, 1.0)));
                let off = 0.5 * (ejq - e0 - e1[j] - e1[q] - e2[(j, j)] - e2[(q, q)]);
                e2[(j, q)] = off;
                e2[(q, j)] = off;
            }
        }
        CellPolynomial { c0, c1, e0, e1, e2 }
    }
}

fn fourth_moment_from_cumulants(k1: f64, k2: f64, k3: f64, k4: f64) -> f64 {
    k4 + 4.0 * k3 * k1 + 3.0 * k2 * k2 + 6.0 * k2 * k1 * k1 + k1.powi(4)
}

fn closed_form_conditions(polys: &[CellPolynomial]) -> [f64; 7] {
    let sum = |f: &dyn Fn(&CellPolynomial) -> f64| pairwise_sum(&polys.iter().map(f).collect::<Vec<_>>());
    let mean_b = sum(&|p| p.c0);
    let var_b = sum(&|p| p.c1.norm_squared());
    let fourth_b = fourth_moment_from_cumulants(mean_b, var_b, 0.0, 0.0);
    // cumulants of a Gaussian quadratic form ξᵀEξ + e1ᵀξ + e0
    let k1 = sum(&|p| p.e0 + p.e2.trace());
    let k2 = sum(&|p| 2.0 * (&p.e2 * &p.e2).trace() + p.e1.norm_squared());
    let k3 = sum(&|p| 8.0 * (&p.e2 * &p.e2 * &p.e2).trace() + 6.0 * p.e1.dot(&(&p.e2 * &p.e1)));
    let k4 = sum(&|p| {
        let e2sq = &p.e2 * &p.e2;
        48.0 * (&e2sq * &e2sq).trace() + 48.0 * p.e1.dot(&(&e2sq * &p.e1))
    });
    let fourth_a = fourth_moment_from_cumulants(k1, k2, k3, k4);
    let cov = sum(&|p| p.c1.dot(&p.e1));
    [mean_b, var_b, fourth_b, k1, k2, fourth_a, cov]
}

fn monte_carlo_conditions(polys: &[CellPolynomial], d: usize, n_inner: usize, seed: u64) -> Result<[f64; 7]> {
    if n_inner < 2 {
        return Err(Error::domain("inner Monte Carlo needs at least two draws"));
    }
    let draws: Vec<(f64, f64)> = (0..n_inner)
        .into_par_iter()
        .map(|r| {
            let mut stream = NoiseStream::new(seed, r as u64, d);
            let mut xi = DVector::zeros(d);
            let mut sb = Vec::with_capacity(polys.len());
            let mut sa = Vec::with_capacity(polys.len());
            for (i, p) in polys.iter().enumerate() {
                stream.fill(i as u64, xi.as_mut_slice());
                sb.push(p.c0 + p.c1.dot(&xi));
                sa.push(p.e0 + p.e1.dot(&xi) + xi.dot(&(&p.e2 * &xi)));
            }
            (pairwise_sum(&sb), pairwise_sum(&sa))
        })
        .collect();
    let sb: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let sa: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (mb, vb) = mean_var(&sb);
    let (ma, va) = mean_var(&sa);
    let nf = n_inner as f64;
    let fourth = |v: &[f64]| pairwise_sum(&v.iter().map(|x| x.powi(4)).collect::<Vec<_>>()) / nf;
    let cov = pairwise_sum(&draws.iter().map(|(b, a)| (b - mb) * (a - ma)).collect::<Vec<_>>()) / (nf - 1.0);
    Ok([mb, vb, fourth(&sb), ma, va, fourth(&sa), cov])
}

/// Limits of the seven CLT conditions.
pub fn clt_targets(u: f64, v: f64, sigma_b: f64, sigma_a: f64) -> [f64; 7] {
    let qb = u * u * sigma_b;
    let qa = v * v * sigma_a;
    [-0.5 * qb, qb, 0.0, -0.5 * qa, qa, 0.0, 0.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanOptions {
    pub quadrature_order: usize,
    /// Compute `Σζ̂` and the expansion gaps per replication.
    pub expansion: bool,
    /// Compute the CLT condition sums per replication.
    pub clt: Option<ConditionalExpectation>,
    /// Use these `(Σ_b, Σ_a)` instead of a pilot Fisher quadrature.
    pub sigma: Option<(f64, f64)>,
    /// Particles of the pilot run for `Σ` (defaults to `N` when zero).
    pub pilot_particles: usize,
    pub ks_alpha: f64,
}

impl Default for LanOptions {
    fn default() -> Self {
        LanOptions {
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            expansion: false,
            clt: None,
            sigma: None,
            pilot_particles: 0,
            ks_alpha: 0.01,
        }
    }
}

/// Per-replication expansion diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionSummary {
    /// `Σζ̂` per replication.
    pub zeta_sums: Vec<f64>,
    /// `|z − Σζ̂|` per replication (exact branch only).
    pub gaps: Vec<f64>,
    pub median_gap: f64,
    /// `|z − (Σζ̄ − ½(u²Σ̂_b + v²Σ̂_a))|` with `ζ̄` the true-parameter cells.
    pub centered_gaps: Vec<f64>,
    pub median_centered_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanReport {
    /// `"exact"` when z is the exact log-likelihood ratio, `"expansion-only"`
    /// when it is `Σζ̂` (models without closed-form densities).
    pub branch: String,
    pub n_replications: usize,
    pub u: f64,
    pub v: f64,
    pub z_values: Vec<f64>,
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub sigma_b: f64,
    pub sigma_a: f64,
    pub sigma_se: (f64, f64),
    pub mean_target: f64,
    pub sigma2_target: f64,
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    pub ks_alpha: f64,
    pub expansion: Option<ExpansionSummary>,
    pub clt_sums: Option<[f64; 7]>,
    pub clt_se: Option<[f64; 7]>,
    pub clt_targets: [f64; 7],
}

impl LanReport {
    pub fn ks_passed(&self) -> bool {
        self.ks_pvalue >= self.ks_alpha
    }
}

const PILOT_TAG: u64 = 0x5049_4C54;

/// `Σ_b`, `Σ_a` from a pilot run at `θ⁰`.
pub fn pilot_fisher(model: &dyn ModelSpec, cfg: &SimConfig, pilot_particles: usize, seed: u64) -> Result<FisherInfo> {
    let mut pilot = cfg.clone();
    pilot.seed = derive_seed(seed, PILOT_TAG);
    if pilot_particles > 0 {
        pilot.n_particles = pilot_particles;
    }
    match MomentSource::for_model(model) {
        MomentSource::Oracle { kappa, m0 } => {
            pilot.mode = SimMode::ExactOracle;
            let grid = simulate_particles(model, &pilot)?;
            fisher_quadrature_oracle(&grid, model, &cfg.theta, kappa, &m0)
        }
        MomentSource::EulerProxy => {
            if pilot.mode == SimMode::ExactOracle {
                pilot.mode = SimMode::Particles;
            }
            let (grid, tangents) = simulate_with_tangents(model, &pilot)?;
            fisher_quadrature(&grid, &tangents, model, &cfg.theta)
        }
    }
}

struct Replication {
    z: f64,
    zeta_sum: Option<f64>,
    centered: Option<f64>,
    clt: Option<[f64; 7]>,
}

/// Monte Carlo check of the LAN limit.
///
/// Every replication simulates fresh data at `θ⁰ = cfg.theta` with a seed
/// derived from `seed`, computes z (exact on the oracle, `Σζ̂` otherwise) and
/// optionally the expansion and CLT diagnostics.
pub fn lan_harness(
    model: &dyn ModelSpec,
    cfg: &SimConfig,
    u: f64,
    v: f64,
    n_replications: usize,
    seed: u64,
    opts: &LanOptions,
) -> Result<LanReport> {
    if n_replications == 0 {
        return Err(Error::domain("at least one replication is required"));
    }
    cfg.validate()?;
    let pert = LocalPerturbation::new(cfg.theta, u, v, cfg.n_particles, cfg.delta())?;
    let source = MomentSource::for_model(model);
    let exact = source.is_oracle();

    let (sigma_b, sigma_a, sigma_se) = match opts.sigma {
        Some((b, a)) => (b, a, (0.0, 0.0)),
        None => {
            let f = pilot_fisher(model, cfg, opts.pilot_particles, seed)?;
            (f.sigma_b, f.sigma_a, (f.se_b, f.se_a))
        }
    };

    let needs_tangents = !exact && (opts.expansion || opts.clt.is_some() || !exact);
    let reps: Vec<Replication> = (0..n_replications)
        .into_par_iter()
        .map(|r| -> Result<Replication> {
            let mut c = cfg.clone();
            c.seed = derive_seed(seed, r as u64);
            if pert.is_zero() {
                return Ok(Replication {
                    z: 0.0,
                    zeta_sum: opts.expansion.then_some(0.0),
                    centered: opts.expansion.then_some(0.0),
                    clt: opts.clt.map(|_| [0.0; 7]),
                });
            }
            let (grid, tangents) = if needs_tangents {
                let (g, t) = simulate_with_tangents(model, &c)?;
                (g, Some(t))
            } else {
                (simulate_particles(model, &c)?, None)
            };
            let tangents = tangents.as_ref();
            let mut breakdown = None;
            if opts.expansion || !exact {
                breakdown = Some(score_breakdown(&grid, tangents, &pert, model, &source, opts.quadrature_order)?);
            }
            let z = if exact { log_lr_exact(&grid, model, &pert)? } else { breakdown.as_ref().unwrap().total() };
            let centered = if opts.expansion {
                let b = breakdown.as_ref().unwrap();
                let (d1, d2) = true_parameter_scores(&grid, tangents, &pert, model, &source, opts.quadrature_order)?;
                Some(pairwise_sum(&d1) + pairwise_sum(&d2) - 0.5 * (b.quad_b + b.quad_a))
            } else {
                None
            };
            let clt = match opts.clt {
                Some(method) => Some(clt_condition_sums(
                    &grid,
                    tangents,
                    &pert,
                    model,
                    &source,
                    opts.quadrature_order,
                    method,
                )?),
                None => None,
            };
            Ok(Replication { z, zeta_sum: breakdown.map(|b| b.total()).filter(|_| opts.expansion), centered, clt })
        })
        .collect::<Result<_>>()?;

    let z_values: Vec<f64> = reps.iter().map(|r| r.z).collect();
    let (mean, var) = mean_var(&z_values);
    let sigma2 = u * u * sigma_b + v * v * sigma_a;
    let KsResult { statistic, p_value } = ks_test_normal(&z_values, -0.5 * sigma2, sigma2);

    let expansion = opts.expansion.then(|| {
        let zeta_sums: Vec<f64> = reps.iter().map(|r| r.zeta_sum.unwrap_or(f64::NAN)).collect();
        let gaps: Vec<f64> = if exact {
            reps.iter().map(|r| (r.z - r.zeta_sum.unwrap_or(f64::NAN)).abs()).collect()
        } else {
            Vec::new()
        };
        let centered_gaps: Vec<f64> = if exact {
            reps.iter().map(|r| (r.z - r.centered.unwrap_or(f64::NAN)).abs()).collect()
        } else {
            Vec::new()
        };
        ExpansionSummary {
            median_gap: median(&gaps),
            median_centered_gap: median(&centered_gaps),
            zeta_sums,
            gaps,
            centered_gaps,
        }
    });

    let (clt_sums, clt_se) = if opts.clt.is_some() {
        let mut sums = [0.0; 7];
        let mut ses = [0.0; 7];
        for j in 0..7 {
            let col: Vec<f64> = reps.iter().map(|r| r.clt.expect("clt requested")[j]).collect();
            let (m, v) = mean_var(&col);
            sums[j] = m;
            ses[j] = (v / col.len() as f64).sqrt();
        }
        (Some(sums), Some(ses))
    } else {
        (None, None)
    };

    Ok(LanReport {
        branch: if exact { "exact".into() } else { "expansion-only".into() },
        n_replications,
        u,
        v,
        mean,
        mean_se: (var / n_replications as f64).sqrt(),
        var,
        z_values,
        sigma_b,
        sigma_a,
        sigma_se,
        mean_target: -0.5 * sigma2,
        sigma2_target: sigma2,
        ks_stat: statistic,
        ks_pvalue: p_value,
        ks_alpha: opts.ks_alpha,
        expansion,
        clt_sums,
        clt_se,
        clt_targets: clt_targets(u, v, sigma_b, sigma_a),
    })
}

/// Median; NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuiltinModel, InitialLaw, Interval};

    fn theta(t1: f64, t2: f64) -> ThetaPair {
        let b = Interval::new(0.05, 5.0).unwrap();
        ThetaPair::new(t1, t2, b, b).unwrap()
    }

    fn ou(kappa: f64) -> BuiltinModel {
        BuiltinModel::mean_field_ou(kappa, InitialLaw::stationary_ou(1, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn perturbation_endpoints_and_box() {
        let p = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 2.0, 4, 0.04).unwrap();
        assert_eq!(p.theta1_at(0.0), 1.0);
        assert_eq!(p.theta2_at(0.0), 1.0);
        assert_eq!(p.plus().theta1, 1.5);
        assert!((p.plus().theta2 - 1.2).abs() < 1e-15);
        assert!(LocalPerturbation::new(theta(1.0, 1.0), 100.0, 0.0, 4, 0.04).is_err());
    }

    #[test]
    fn log_lr_hand_example() {
        // N = 1, n = 1, θ⁰ = (1, 1), κ = 0, x₀ = 1, x₁ = 0.9, Δ = 0.1, h = (1, 0)
        let grid = TrajectoryGrid::from_states(1, 1, 1, 0.1, vec![1.0, 0.9]).unwrap();
        let m = BuiltinModel::mean_field_ou(0.0, InitialLaw::Point { x: vec![1.0] }).unwrap();
        let pert = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 0.0, 1, 0.1).unwrap();
        let lr = log_lr_exact(&grid, &m, &pert).unwrap();
        let logp = |t1: f64| {
            let mean = (-t1 * 0.1f64).exp();
            let var = (1.0 - (-0.2 * t1).exp()) / (2.0 * t1);
            -0.5 * ((0.9 - mean).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
        };
        assert!((lr - (logp(2.0) - logp(1.0))).abs() < 1e-13);
        let back = log_lr_between(&grid, 0.0, &[1.0], &pert.plus(), &pert.theta0).unwrap();
        assert_eq!(back, -lr);
        let zero = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 0.0, 1, 0.1).unwrap();
        assert_eq!(log_lr_exact(&grid, &m, &zero).unwrap(), 0.0);
    }

    #[test]
    fn scalar_diffusion_cell_by_hand() {
        // a(θ2) = θ2, d = 1: integrand (1/θ2(l)³)((y − m)² − V)
        let grid = TrajectoryGrid::from_states(1, 1, 1, 0.1, vec![0.4, 0.1]).unwrap();
        let m = ou(0.0);
        let pert = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 1.0, 1, 0.1).unwrap();
        let src = MomentSource::for_model(&m);
        let got = zeta_hat_diff(&grid, &pert, &m, &src, 8).unwrap()[0];
        let (nodes, weights) = gauss_legendre_unit(8).unwrap();
        let mut expected = 0.0;
        for (l, w) in nodes.iter().zip(&weights) {
            let t2 = 1.0 + l * (0.1f64).sqrt();
            let (mean, var) = ou_moments(1.0, t2, 0.0, 0.0, 0.0, 0.4, 0.1);
            expected += w * ((0.1 - mean).powi(2) - var) / t2.powi(3);
        }
        expected /= (0.1f64).sqrt();
        assert!((got - expected).abs() < 1e-13, "{got} vs {expected}");
    }

    #[test]
    fn zero_directions_give_zero_cells() {
        let m = ou(0.3);
        let cfg = SimConfig::new(20, 5, 1.0, 1, 2, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
        let grid = simulate_particles(&m, &cfg).unwrap();
        let src = MomentSource::for_model(&m);
        let p = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 0.0, 20, 0.2).unwrap();
        assert!(zeta_hat_drift(&grid, None, &p, &m, &src, 5).unwrap().iter().all(|v| *v == 0.0));
        assert!(zeta_hat_diff(&grid, &p, &m, &src, 5).unwrap().iter().all(|v| *v == 0.0));
        let sums = clt_condition_sums(&grid, None, &p, &m, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
        assert_eq!(sums, [0.0; 7]);
        let p = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 0.0, 20, 0.2).unwrap();
        let sums = clt_condition_sums(&grid, None, &p, &m, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
        assert_eq!(&sums[3..], &[0.0; 4]);
    }

    #[test]
    fn scores_are_linear_in_their_direction() {
        // κ = 0 makes z = −x free of θ1; with moments at θ⁰ and v fixed the
        // drift cells are exactly linear in u
        let m = ou(0.0);
        let cfg = SimConfig::new(10, 4, 1.0, 1, 3, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
        let grid = simulate_particles(&m, &cfg).unwrap();
        let src = MomentSource::for_model(&m);
        let p1 = LocalPerturbation::new(theta(1.0, 1.0), 0.5, 0.7, 10, 0.25).unwrap();
        let p2 = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 0.7, 10, 0.25).unwrap();
        let (a1, _) = true_parameter_scores(&grid, None, &p1, &m, &src, 5).unwrap();
        let (a2, _) = true_parameter_scores(&grid, None, &p2, &m, &src, 5).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{x} {y}");
        }
        // the diffusion cells carry 1/θ2(l)³, so linearity in v holds to O(v√(Δ/N))
        let q1 = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 0.5, 10, 0.25).unwrap();
        let q2 = LocalPerturbation::new(theta(1.0, 1.0), 0.0, 1.0, 10, 0.25).unwrap();
        let d1 = zeta_hat_diff(&grid, &q1, &m, &src, 5).unwrap();
        let d2 = zeta_hat_diff(&grid, &q2, &m, &src, 5).unwrap();
        let rate = q2.diffusion_rate();
        let dev = d1.iter().zip(&d2).map(|(x, y)| (2.0 * x - y).abs()).fold(0.0, f64::max);
        let scale = d2.iter().map(|y| y.abs()).fold(0.0, f64::max);
        assert!(dev > 0.0 && dev < 10.0 * rate * scale, "{dev} vs {}", rate * scale);
    }

    #[test]
    fn closed_form_conditions_match_inner_monte_carlo() {
        let m = ou(0.5);
        let cfg = SimConfig::new(30, 3, 0.6, 1, 4, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
        let grid = simulate_particles(&m, &cfg).unwrap();
        let src = MomentSource::for_model(&m);
        let p = LocalPerturbation::new(theta(1.0, 1.0), 1.0, 1.0, 30, 0.2).unwrap();
        let exact = clt_condition_sums(&grid, None, &p, &m, &src, 5, ConditionalExpectation::ClosedForm).unwrap();
        let mc = clt_condition_sums(
            &grid,
            None,
            &p,
            &m,
            &src,
            5,
            ConditionalExpectation::MonteCarlo { n_inner: 40_000, seed: 1 },
        )
        .unwrap();
        for j in 0..7 {
            let tol = 0.05 * exact[j].abs().max(0.05);
            assert!((exact[j] - mc[j]).abs() < tol, "condition {j}: {} vs {}", exact[j], mc[j]);
        }
    }

    #[test]
    fn harness_with_zero_direction_is_degenerate() {
        let m = ou(0.0);
        let cfg = SimConfig::new(10, 4, 1.0, 1, 3, theta(1.0, 1.0)).with_mode(SimMode::ExactOracle);
        let opts = LanOptions { sigma: Some((0.5, 2.0)), ..LanOptions::default() };
        let r = lan_harness(&m, &cfg, 0.0, 0.0, 5, 1, &opts).unwrap();
        assert!(r.z_values.iter().all(|z| *z == 0.0));
        assert_eq!((r.ks_stat, r.ks_pvalue), (0.0, 1.0));
    }
}
