//! Fisher information by particle–time quadrature, the Gaussian
//! quasi-likelihood contrast, its minimiser and convergence-rate studies.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lan::{z_field, MomentSource};
use crate::measure::TangentMeasure;
use crate::model::{MeasureSnapshot, ModelSpec, ThetaPair};
use crate::numerics::{pairwise_sum, spd_inverse_logdet};
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::oracle::ou_z_field;
use crate::rng::derive_seed;
use crate::simulate::{simulate_particles, SimConfig, SimMode, TangentCloud, TrajectoryGrid};
use crate::stats::{jackknife_mean_se, mean_var, ols_slope};

/// `Σ = diag(Σ_b, Σ_a)` with jackknife-over-particles standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherInfo {
    pub sigma_b: f64,
    pub sigma_a: f64,
    pub se_b: f64,
    pub se_a: f64,
    pub n_particles: usize,
    pub n_steps: usize,
    /// `"tangents"` or `"oracle"`: where the z-field came from.
    pub z_source: String,
}

impl FisherInfo {
    /// The 2×2 block-diagonal matrix.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.sigma_b, 0.0], [0.0, self.sigma_a]]
    }
}

/// `Σ̂_b = (Δ/N) Σ_{k,i} zᵀ a⁻² z` and `Σ̂_a = (2Δ/N) Σ_{k,i} tr((∂a a⁻¹)²)`,
/// left-endpoint Riemann sums with z built from global tangents at `θ⁰`.
pub fn fisher_quadrature(
    grid: &TrajectoryGrid,
    tangents: &TangentCloud,
    model: &dyn ModelSpec,
    theta0: &ThetaPair,
) -> Result<FisherInfo> {
    if !tangents.is_aligned_with(grid) {
        return Err(Error::Misaligned("tangent cloud does not match the grid".into()));
    }
    let steps: Vec<(MeasureSnapshot, Vec<f64>)> =
        (0..grid.n_steps()).map(|k| (grid.snapshot(k), tangents.velocities_theta1(k))).collect();
    fisher_with(grid, model, theta0, "tangents", |k, x| {
        let (mu, v) = &steps[k];
        let tm = TangentMeasure::new(mu, v)?;
        z_field(model, theta0.theta1, x, mu, &tm)
    })
}

/// Same quadrature with the closed-form z-field of the oracle model.
pub fn fisher_quadrature_oracle(
    grid: &TrajectoryGrid,
    model: &dyn ModelSpec,
    theta0: &ThetaPair,
    kappa: f64,
    m0: &[f64],
) -> Result<FisherInfo> {
    if m0.len() != grid.dim() {
        return Err(Error::Misaligned("initial mean dimension".into()));
    }
    let times = grid.times();
    fisher_with(grid, model, theta0, "oracle", |k, x| {
        Ok(DVector::from_fn(x.len(), |c, _| ou_z_field(theta0.theta1, kappa, m0[c], times[k], x[c])))
    })
}

/// Oracle closed form when the model provides one, tangents otherwise.
pub fn fisher_for(
    grid: &TrajectoryGrid,
    tangents: Option<&TangentCloud>,
    model: &dyn ModelSpec,
    theta0: &ThetaPair,
) -> Result<FisherInfo> {
    match (MomentSource::for_model(model), tangents) {
        (MomentSource::Oracle { kappa, m0 }, _) => fisher_quadrature_oracle(grid, model, theta0, kappa, &m0),
        (MomentSource::EulerProxy, Some(t)) => fisher_quadrature(grid, t, model, theta0),
        (MomentSource::EulerProxy, None) => Err(Error::Misaligned("Fisher quadrature needs tangents".into())),
    }
}

fn fisher_with(
    grid: &TrajectoryGrid,
    model: &dyn ModelSpec,
    theta0: &ThetaPair,
    z_source: &str,
    z: impl Fn(usize, &[f64]) -> Result<DVector<f64>> + Sync,
) -> Result<FisherInfo> {
    if grid.dim() != model.dim() {
        return Err(Error::Misaligned("grid and model dimensions differ".into()));
    }
    let delta = grid.delta();
    // per-particle time integrals; Σ̂ is their mean over particles
    let per_particle: Vec<(f64, f64)> = (0..grid.n_particles())
        .into_par_iter()
        .map(|i| {
            let mut b_terms = Vec::with_capacity(grid.n_steps());
            let mut a_terms = Vec::with_capacity(grid.n_steps());
            for k in 0..grid.n_steps() {
                let x = grid.state(i, k);
                let a = model.diffusion(theta0.theta2, x);
                let ainv = a.try_inverse().ok_or(Error::Singular("diffusion"))?;
                let zk = z(k, x)?;
                let w = &ainv * &zk;
                b_terms.push(w.norm_squared());
                let da = model.d_diffusion_dtheta2(theta0.theta2, x);
                let p = &da * &ainv;
                a_terms.push(2.0 * (&p * &p).trace());
            }
            Ok((delta * pairwise_sum(&b_terms), delta * pairwise_sum(&a_terms)))
        })
        .collect::<Result<_>>()?;
    let b: Vec<f64> = per_particle.iter().map(|p| p.0).collect();
    let a: Vec<f64> = per_particle.iter().map(|p| p.1).collect();
    let n = b.len() as f64;
    Ok(FisherInfo {
        sigma_b: pairwise_sum(&b) / n,
        sigma_a: pairwise_sum(&a) / n,
        se_b: jackknife_mean_se(&b),
        se_a: jackknife_mean_se(&a),
        n_particles: grid.n_particles(),
        n_steps: grid.n_steps(),
        z_source: z_source.to_string(),
    })
}

/// Gaussian approximation of the transition used by the contrast.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    /// `N(x + Δb, Δ a aᵀ)`.
    Euler,
    /// Local linearisation of the drift around `x` with the measure frozen:
    /// mean `x + ∫₀^Δ e^{Js}ds b`, covariance `∫₀^Δ e^{Js} a aᵀ e^{Jᵀs} ds`
    /// with `J = ∇_x b`. Exact for linear drifts with a frozen measure.
    #[default]
    LocalLinear,
}

/// `(eᶻ − 1)/z`, continuous at 0.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// Per-cell statistics for scalar models with `b = θ1 g` and `a = θ2 s`.
#[derive(Clone, Copy, Debug)]
struct ScalarCell {
    dx: f64,
    g: f64,
    jg: f64,
    s2: f64,
}

enum ContrastData {
    Scalar(Vec<ScalarCell>),
    General(Vec<MeasureSnapshot>),
}

/// Quasi-likelihood contrast of a fixed grid, evaluated at many parameters.
///
/// Scalar models that declare `b = θ1 b(1, ·)` and `a = θ2 a(1, ·)` are
/// reduced once to per-cell statistics; other models re-evaluate drift and
/// diffusion on every call.
pub struct ContrastEvaluator<'a> {
    grid: &'a TrajectoryGrid,
    model: &'a dyn ModelSpec,
    kind: ContrastKind,
    data: ContrastData,
}

impl<'a> ContrastEvaluator<'a> {
    pub fn new(grid: &'a TrajectoryGrid, model: &'a dyn ModelSpec, kind: ContrastKind) -> Result<Self> {
        if grid.dim() != model.dim() {
            return Err(Error::Misaligned("grid and model dimensions differ".into()));
        }
        let traits = model.traits();
        let snapshots: Vec<MeasureSnapshot> = (0..grid.n_steps()).map(|k| grid.snapshot(k)).collect();
        let data = if grid.dim() == 1 && traits.drift_linear_in_theta1 && traits.diffusion_linear_in_theta2 {
            let mut cells = Vec::with_capacity(grid.n_particles() * grid.n_steps());
            for i in 0..grid.n_particles() {
                for (k, mu) in snapshots.iter().enumerate() {
                    let x = grid.state(i, k);
                    let s = model.diffusion(1.0, x)[(0, 0)];
                    cells.push(ScalarCell {
                        dx: grid.state(i, k + 1)[0] - x[0],
                        g: model.drift(1.0, x, mu)[0],
                        jg: model.grad_x_drift(1.0, x, mu)[(0, 0)],
                        s2: s * s,
                    });
                }
            }
            ContrastData::Scalar(cells)
        } else {
            ContrastData::General(snapshots)
        };
        Ok(ContrastEvaluator { grid, model, kind, data })
    }

    pub fn kind(&self) -> ContrastKind {
        self.kind
    }

    /// Whether the closed-form θ1 profile applies (Euler contrast, drift
    /// linear in θ1, scalar state).
    pub fn has_theta1_profile(&self) -> bool {
        self.kind == ContrastKind::Euler && matches!(self.data, ContrastData::Scalar(_))
    }

    /// Weighted least-squares vertex `argmin_θ1` at any fixed θ2.
    pub fn theta1_profile(&self) -> Option<f64> {
        match (&self.data, self.kind) {
            (ContrastData::Scalar(cells), ContrastKind::Euler) => {
                let delta = self.grid.delta();
                let num = pairwise_sum(&cells.iter().map(|c| c.dx * c.g / c.s2).collect::<Vec<_>>());
                let den = pairwise_sum(&cells.iter().map(|c| c.g * c.g / c.s2).collect::<Vec<_>>());
                (den > 0.0).then(|| num / (delta * den))
            }
            _ => None,
        }
    }

    /// Contrast value; non-finite values become [`Error::NonFiniteContrast`].
    pub fn evaluate(&self, theta1: f64, theta2: f64) -> Result<f64> {
        let value = match &self.data {
            ContrastData::Scalar(cells) => self.scalar(cells, theta1, theta2),
            ContrastData::General(snapshots) => self.general(snapshots, theta1, theta2)?,
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFiniteContrast { theta1, theta2 })
        }
    }

    fn scalar(&self, cells: &[ScalarCell], theta1: f64, theta2: f64) -> f64 {
        let delta = self.grid.delta();
        let t2sq = theta2 * theta2;
        // (jg, s2) repeat across cells for many models; reuse exp/ln then
        let mut key = (f64::NAN, f64::NAN);
        let (mut mean_factor, mut var, mut log_var) = (0.0, 0.0, 0.0);
        let terms: Vec<f64> = cells
            .iter()
            .map(|c| {
                if c.jg != key.0 || c.s2 != key.1 {
                    key = (c.jg, c.s2);
                    let (p1, p2) = match self.kind {
                        ContrastKind::Euler => (1.0, 1.0),
                        ContrastKind::LocalLinear => {
                            let j = theta1 * c.jg * delta;
                            (phi1(j), phi1(2.0 * j))
                        }
                    };
                    mean_factor = delta * theta1 * p1;
                    var = t2sq * c.s2 * p2;
                    log_var = var.ln();
                }
                let r = c.dx - mean_factor * c.g;
                r * r / (delta * var) + log_var
            })
            .collect();
        pairwise_sum(&terms)
    }

    fn general(&self, snapshots: &[MeasureSnapshot], theta1: f64, theta2: f64) -> Result<f64> {
        let grid = self.grid;
        let delta = grid.delta();
        let d = grid.dim();
        let mut terms = Vec::with_capacity(grid.n_particles() * grid.n_steps());
        for i in 0..grid.n_particles() {
            for (k, mu) in snapshots.iter().enumerate() {
                let x = grid.state(i, k);
                let y = grid.state(i, k + 1);
                let b = self.model.drift(theta1, x, mu);
                let a = self.model.diffusion(theta2, x);
                let aat = &a * a.transpose();
                let (incr, cov) = match self.kind {
                    ContrastKind::Euler => (b * delta, aat),
                    ContrastKind::LocalLinear => {
                        let jac = self.model.grad_x_drift(theta1, x, mu);
                        let (incr, cov) = local_linear_moments(&jac, &b, &aat, delta);
                        (incr, cov / delta)
                    }
                };
                let r = DVector::from_fn(d, |c, _| y[c] - x[c] - incr[c]);
                let (inv, logdet) = spd_inverse_logdet(&cov, "contrast covariance")?;
                terms.push(r.dot(&(&inv * &r)) / delta + logdet);
            }
        }
        Ok(pairwise_sum(&terms))
    }
}

/// `(∫₀^Δ e^{Js}ds b, ∫₀^Δ e^{Js} Q e^{Jᵀs} ds)` by block matrix exponentials.
fn local_linear_moments(
    jac: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    delta: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = b.len();
    let mut m = DMatrix::zeros(d + 1, d + 1);
    m.view_mut((0, 0), (d, d)).copy_from(&(jac * delta));
    m.view_mut((0, d), (d, 1)).copy_from(&(b * delta));
    let incr = m.exp().view((0, d), (d, 1)).into_owned();
    // Van Loan: exp([[-J, Q], [0, Jᵀ]] Δ) = [[·, G], [0, F]], cov = Fᵀ G
    let mut v = DMatrix::zeros(2 * d, 2 * d);
    v.view_mut((0, 0), (d, d)).copy_from(&(-jac * delta));
    v.view_mut((0, d), (d, d)).copy_from(&(q * delta));
    v.view_mut((d, d), (d, d)).copy_from(&(jac.transpose() * delta));
    let e = v.exp();
    let f = e.view((d, d), (d, d)).into_owned();
    let g = e.view((0, d), (d, d)).into_owned();
    let cov = f.transpose() * g;
    let cov = (&cov + cov.transpose()) * 0.5;
    (DVector::from_column_slice(incr.as_slice()), cov)
}

/// `Σ_{k,i} [(ΔX − Δb)ᵀ(Δ a aᵀ)⁻¹(ΔX − Δb) + log det(a aᵀ)]` at `theta`.
pub fn contrast(grid: &TrajectoryGrid, theta: &ThetaPair, model: &dyn ModelSpec) -> Result<f64> {
    contrast_with(grid, theta, model, ContrastKind::Euler)
}

pub fn contrast_with(grid: &TrajectoryGrid, theta: &ThetaPair, model: &dyn ModelSpec, kind: ContrastKind) -> Result<f64> {
    ContrastEvaluator::new(grid, model, kind)?.evaluate(theta.theta1, theta.theta2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub contrast: ContrastKind,
    pub tol: f64,
    pub max_iter: usize,
    /// Use the closed-form θ1 vertex when available.
    pub profile_theta1: bool,
    /// `(Σ_b, Σ_a)` for 95% intervals.
    pub fisher: Option<(f64, f64)>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions { contrast: ContrastKind::default(), tol: 1e-8, max_iter: 500, profile_theta1: true, fisher: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub theta_hat: ThetaPair,
    pub contrast: f64,
    pub iterations: usize,
    pub converged: bool,
    pub probes: usize,
    pub profiled: bool,
    /// 95% intervals `(lo, hi)` for θ1 and θ2 from `Σ⁻¹`.
    pub ci_theta1: Option<(f64, f64)>,
    pub ci_theta2: Option<(f64, f64)>,
}

/// Minimise the contrast over the parameter box starting from `init`.
pub fn estimate(
    grid: &TrajectoryGrid,
    model: &dyn ModelSpec,
    init: &ThetaPair,
    opts: &EstimateOptions,
) -> Result<EstimateResult> {
    init.check()?;
    let eval = ContrastEvaluator::new(grid, model, opts.contrast)?;
    estimate_with(&eval, init, opts)
}

pub fn estimate_with(eval: &ContrastEvaluator<'_>, init: &ThetaPair, opts: &EstimateOptions) -> Result<EstimateResult> {
    let (b1, b2) = (init.box1, init.box2);
    let nm = NelderMeadOptions { tol: opts.tol, max_iter: opts.max_iter, ..NelderMeadOptions::default() };
    let profile = if opts.profile_theta1 { eval.theta1_profile() } else { None };
    let (theta1, theta2, res) = match profile {
        Some(vertex) => {
            // the contrast is a parabola in θ1 with the same vertex for every θ2
            let t1 = vertex.clamp(b1.lo(), b1.hi());
            let res = nelder_mead(|p| eval.evaluate(t1, p[0]), &[init.theta2], &[b2.lo()], &[b2.hi()], nm)?;
            (t1, res.x[0], res)
        }
        None => {
            let res = nelder_mead(
                |p| eval.evaluate(p[0], p[1]),
                &[init.theta1, init.theta2],
                &[b1.lo(), b2.lo()],
                &[b1.hi(), b2.hi()],
                nm,
            )?;
            (res.x[0], res.x[1], res)
        }
    };
    let theta_hat = init.with_values(theta1, theta2)?;
    let (ci_theta1, ci_theta2) = match opts.fisher {
        Some((sb, sa)) if sb > 0.0 && sa > 0.0 => {
            let n = eval.grid.n_particles() as f64;
            let h1 = 1.96 / (n * sb).sqrt();
            let h2 = 1.96 * (eval.grid.delta() / n).sqrt() / sa.sqrt();
            (Some((theta1 - h1, theta1 + h1)), Some((theta2 - h2, theta2 + h2)))
        }
        _ => (None, None),
    };
    Ok(EstimateResult {
        theta_hat,
        contrast: res.value,
        iterations: res.iterations,
        converged: res.converged,
        probes: res.probes,
        profiled: profile.is_some(),
        ci_theta1,
        ci_theta2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    pub horizon: f64,
    pub substeps: usize,
    pub mode: SimMode,
    pub estimate: EstimateOptions,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { horizon: 1.0, substeps: 8, mode: SimMode::ExactOracle, estimate: EstimateOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n_particles: usize,
    pub n_steps: usize,
    pub rmse_theta1: f64,
    pub rmse_theta2: f64,
    /// Delta-method standard errors of the two RMSEs.
    pub se_theta1: f64,
    pub se_theta2: f64,
    /// Replications whose optimiser hit the iteration cap.
    pub not_converged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub theta0: ThetaPair,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<RateRow>,
    /// Slope of log RMSE(θ̂1) against log N.
    pub slope_theta1: f64,
    pub slope_theta1_se: f64,
    /// Slope of log RMSE(θ̂2) against log(N/Δ).
    pub slope_theta2: f64,
    pub slope_theta2_se: f64,
    /// Raw estimates per row, `(θ̂1, θ̂2, converged)`.
    pub estimates: Vec<Vec<(f64, f64, bool)>>,
}

impl RateReport {
    /// CSV with columns `N,n,rmse_theta1,rmse_theta2,se` (`se` is the
    /// standard error of `rmse_theta1`).
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "N,n,rmse_theta1,rmse_theta2,se")?;
        for r in &self.rows {
            writeln!(w, "{},{},{:?},{:?},{:?}", r.n_particles, r.n_steps, r.rmse_theta1, r.rmse_theta2, r.se_theta1)?;
        }
        Ok(())
    }
}

/// `(rmse, se)`; the standard error propagates the MC error of the mean
/// squared error through the square root.
fn rmse_with_se(errors: &[f64]) -> (f64, f64) {
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let (mse, var) = mean_var(&sq);
    let rmse = mse.sqrt();
    if sq.len() < 2 || rmse == 0.0 {
        return (rmse, 0.0);
    }
    (rmse, (var / sq.len() as f64).sqrt() / (2.0 * rmse))
}

/// RMSE of `θ̂` over `reps` fresh data sets per `N` and the log–log slopes.
pub fn rate_study(
    model: &dyn ModelSpec,
    theta0: &ThetaPair,
    ns: &[usize],
    n_of_n: impl Fn(usize) -> usize,
    reps: usize,
    seed: u64,
    opts: &RateOptions,
) -> Result<RateReport> {
    if reps == 0 {
        return Err(Error::domain("reps must be positive"));
    }
    if ns.len() < 3 {
        return Err(Error::domain("a rate study needs at least three values of N"));
    }
    let (lo, hi) = (*ns.iter().min().unwrap(), *ns.iter().max().unwrap());
    if (hi as f64) < 10.0 * lo as f64 {
        return Err(Error::domain("the values of N must span at least one decade"));
    }
    theta0.check()?;
    let init = theta0.midpoint();
    let mut rows = Vec::with_capacity(ns.len());
    let mut estimates = Vec::with_capacity(ns.len());
    for (row_idx, &n_particles) in ns.iter().enumerate() {
        let n_steps = n_of_n(n_particles);
        let row_seed = derive_seed(seed, row_idx as u64);
        let est: Vec<(f64, f64, bool)> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let cfg = SimConfig {
                    seed: derive_seed(row_seed, r as u64),
                    mode: opts.mode,
                    ..SimConfig::new(n_particles, n_steps, opts.horizon, opts.substeps, 0, *theta0)
                };
                let grid = simulate_particles(model, &cfg)?;
                let e = estimate(&grid, model, &init, &opts.estimate)?;
                Ok((e.theta_hat.theta1, e.theta_hat.theta2, e.converged))
            })
            .collect::<Result<_>>()?;
        let e1: Vec<f64> = est.iter().map(|e| e.0 - theta0.theta1).collect();
        let e2: Vec<f64> = est.iter().map(|e| e.1 - theta0.theta2).collect();
        let (rmse_theta1, se_theta1) = rmse_with_se(&e1);
        let (rmse_theta2, se_theta2) = rmse_with_se(&e2);
        rows.push(RateRow {
            n_particles,
            n_steps,
            rmse_theta1,
            rmse_theta2,
            se_theta1,
            se_theta2,
            not_converged: est.iter().filter(|e| !e.2).count(),
        });
        estimates.push(est);
    }
    let log_n: Vec<f64> = rows.iter().map(|r| (r.n_particles as f64).ln()).collect();
    let log_info: Vec<f64> =
        rows.iter().map(|r| (r.n_particles as f64 * r.n_steps as f64 / opts.horizon).ln()).collect();
    let (slope_theta1, slope_theta1_se) =
        ols_slope(&log_n, &rows.iter().map(|r| r.rmse_theta1.ln()).collect::<Vec<_>>());
    let (slope_theta2, slope_theta2_se) =
        ols_slope(&log_info, &rows.iter().map(|r| r.rmse_theta2.ln()).collect::<Vec<_>>());
    Ok(RateReport {
        theta0: *theta0,
        reps,
        seed,
        rows,
        slope_theta1,
        slope_theta1_se,
        slope_theta2,
        slope_theta2_se,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BuiltinModel, InitialLaw, Interval};

    fn theta(t1: f64, t2: f64) -> ThetaPair {
        let b = Interval::new(0.1, 3.0).unwrap();
        ThetaPair::new(t1, t2, b, b).unwrap()
    }

    fn ou_grid(n: usize, steps: usize, t2: f64, seed: u64) -> (BuiltinModel, TrajectoryGrid) {
        let m = BuiltinModel::mean_field_ou(0.0, InitialLaw::stationary_ou(1, 1.0, t2)).unwrap();
        let cfg = SimConfig::new(n, steps, 1.0, 1, seed, theta(1.0, t2)).with_mode(SimMode::ExactOracle);
        let g = simulate_particles(&m, &cfg).unwrap();
        (m, g)
    }

    #[test]
    fn diffusion_block_is_state_free_for_scalar_scale() {
        let (m, g) = ou_grid(50, 10, 0.5, 1);
        let f = fisher_quadrature_oracle(&g, &m, &theta(1.0, 0.5), 0.0, &[0.0]).unwrap();
        assert!((f.sigma_a - 8.0).abs() < 1e-12);
        assert_eq!(f.se_a, 0.0);
    }

    #[test]
    fn phi1_is_smooth_through_zero() {
        assert_eq!(phi1(0.0), 1.0);
        let a = phi1(0.99e-5);
        let b = 0.99e-5f64.exp_m1() / 0.99e-5;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn local_linear_moments_match_ou_transition() {
        let jac = DMatrix::from_element(1, 1, -1.3);
        let b = DVector::from_element(1, -1.3 * 0.7);
        let q = DMatrix::from_element(1, 1, 0.25);
        let (incr, cov) = local_linear_moments(&jac, &b, &q, 0.1);
        let mean = 0.7 * (-0.13f64).exp();
        assert!((0.7 + incr[0] - mean).abs() < 1e-14);
        let var = 0.25 * (-(-0.26f64).exp_m1()) / 2.6;
        assert!((cov[(0, 0)] - var).abs() < 1e-14);
    }

    #[test]
    fn cached_and_general_paths_agree() {
        let (m, g) = ou_grid(20, 5, 0.7, 2);
        for kind in [ContrastKind::Euler, ContrastKind::LocalLinear] {
            let fast = ContrastEvaluator::new(&g, &m, kind).unwrap();
            let snaps = (0..g.n_steps()).map(|k| g.snapshot(k)).collect();
            let slow = ContrastEvaluator { grid: &g, model: &m, kind, data: ContrastData::General(snaps) };
            for (t1, t2) in [(1.0, 0.7), (0.4, 1.9), (2.5, 0.2)] {
                let a = fast.evaluate(t1, t2).unwrap();
                let b = slow.evaluate(t1, t2).unwrap();
                assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rmse_of_single_error() {
        assert_eq!(rmse_with_se(&[-0.3]), (0.3, 0.0));
    }
}
