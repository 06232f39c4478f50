//! The McKean–Vlasov model interface and the built-in models.
//!
//! A model supplies the drift `b(θ1, x, μ)`, the diffusion `a(θ2, x)` and
//! every derivative the tangent simulator and the score expansion need,
//! including the linear functional derivative `∂_μ b(x, y, μ)` and its
//! `y`-gradient. Measures are always finite weighted point clouds
//! ([`MeasureSnapshot`]).

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::TangentMeasure;
use crate::numerics::{gauss_legendre_unit, pairwise_sum_by};
use crate::rng::seeded_rng;

/// Closed, bounded interval `[lo, hi]` with `lo < hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::domain(format!("invalid interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

impl TryFrom<(f64, f64)> for Interval {
    type Error = Error;

    fn try_from((lo, hi): (f64, f64)) -> Result<Self> {
        Interval::new(lo, hi)
    }
}

impl From<Interval> for (f64, f64) {
    fn from(i: Interval) -> Self {
        (i.lo, i.hi)
    }
}

/// The joint parameter `θ = (θ1, θ2)` together with its admissible box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaPair {
    pub theta1: f64,
    pub theta2: f64,
    pub box1: Interval,
    pub box2: Interval,
}

impl ThetaPair {
    pub fn new(theta1: f64, theta2: f64, box1: Interval, box2: Interval) -> Result<Self> {
        let t = ThetaPair { theta1, theta2, box1, box2 };
        t.check()?;
        Ok(t)
    }

    /// Same box, new values.
    pub fn with_values(&self, theta1: f64, theta2: f64) -> Result<Self> {
        ThetaPair::new(theta1, theta2, self.box1, self.box2)
    }

    pub fn check(&self) -> Result<()> {
        if !self.box1.contains(self.theta1) {
            return Err(Error::domain(format!(
                "theta1 = {} outside [{}, {}]",
                self.theta1, self.box1.lo, self.box1.hi
            )));
        }
        if !self.box2.contains(self.theta2) {
            return Err(Error::domain(format!(
                "theta2 = {} outside [{}, {}]",
                self.theta2, self.box2.lo, self.box2.hi
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> Self {
        ThetaPair { theta1: self.box1.midpoint(), theta2: self.box2.midpoint(), ..*self }
    }
}

/// A probability measure given by finitely many weighted points in `ℝ^d`.
///
/// Points are stored row-major (`len × dim`). Uniform weights are kept
/// implicit. The first moment is computed once on demand.
#[derive(Clone, Debug)]
pub struct MeasureSnapshot {
    dim: usize,
    points: Vec<f64>,
    weights: Option<Vec<f64>>,
    mean: OnceLock<DVector<f64>>,
}

impl MeasureSnapshot {
    /// Equal-weight cloud over the rows of `points`.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::domain(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        Ok(MeasureSnapshot { dim, points, weights: None, mean: OnceLock::new() })
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut m = MeasureSnapshot::uniform(dim, points)?;
        if weights.len() != m.len() {
            return Err(Error::Misaligned(format!("{} weights for {} points", weights.len(), m.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::domain("weights must be finite and non-negative"));
        }
        let total = crate::numerics::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        m.weights = Some(weights);
        Ok(m)
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        MeasureSnapshot::uniform(x.len(), x.to_vec()).expect("non-empty point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weight(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => w[j],
            None => 1.0 / self.len() as f64,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    /// Weighted first moment `⟨μ⟩`; panics on an empty snapshot (use
    /// [`mean_of`] for the checked version).
    pub fn mean(&self) -> &DVector<f64> {
        self.mean.get_or_init(|| {
            assert!(!self.is_empty(), "mean of an empty measure");
            DVector::from_fn(self.dim, |c, _| {
                pairwise_sum_by(self.len(), &|j| self.weight(j) * self.points[j * self.dim + c])
            })
        })
    }

    /// Mixture `(1 − λ) self + λ other` as an explicit weighted cloud.
    pub fn mixture(&self, other: &MeasureSnapshot, lambda: f64) -> Result<MeasureSnapshot> {
        if self.dim != other.dim {
            return Err(Error::Misaligned("mixture of measures of different dimension".into()));
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut weights: Vec<f64> = (0..self.len()).map(|j| (1.0 - lambda) * self.weight(j)).collect();
        weights.extend((0..other.len()).map(|j| lambda * other.weight(j)));
        // renormalise away rounding so the weighted constructor accepts it
        let total: f64 = crate::numerics::pairwise_sum(&weights);
        weights.iter_mut().for_each(|w| *w /= total);
        MeasureSnapshot::weighted(self.dim, points, weights)
    }
}

/// Weighted first moment of a snapshot.
pub fn mean_of(mu: &MeasureSnapshot) -> Result<DVector<f64>> {
    if mu.is_empty() {
        return Err(Error::domain("mean of an empty measure"));
    }
    Ok(mu.mean().clone())
}

/// Law of the initial state, sampled coordinatewise from standard normals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Point { x: Vec<f64> },
    /// Independent normal coordinates.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialLaw {
    /// Stationary law `N(0, θ2²/(2θ1))` of the oracle with zero initial mean.
    pub fn stationary_ou(dim: usize, theta1: f64, theta2: f64) -> Self {
        InitialLaw::Gaussian { mean: vec![0.0; dim], std: vec![theta2 / (2.0 * theta1).sqrt(); dim] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Point { x } => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            InitialLaw::Point { x } => x,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    /// Map a standard normal vector to a draw from the law.
    pub fn sample_into(&self, noise: &[f64], out: &mut [f64]) {
        match self {
            InitialLaw::Point { x } => out.copy_from_slice(x),
            InitialLaw::Gaussian { mean, std } => {
                for c in 0..out.len() {
                    out[c] = mean[c] + std[c] * noise[c];
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialLaw::Point { x } if x.is_empty() => Err(Error::domain("empty initial point")),
            InitialLaw::Gaussian { mean, std } if mean.len() != std.len() || mean.is_empty() => {
                Err(Error::domain("initial mean and std must have equal non-zero length"))
            }
            InitialLaw::Gaussian { std, .. } if std.iter().any(|s| !(*s >= 0.0)) => {
                Err(Error::domain("initial std must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// Structural facts a model declares about itself.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelTraits {
    /// `b(θ1, x, μ) = θ1 · b(1, x, μ)`.
    pub drift_linear_in_theta1: bool,
    /// `a(θ2, x) = θ2 · a(1, x)`.
    pub diffusion_linear_in_theta2: bool,
    pub measure_dependent: bool,
    /// Test stubs with a vanishing diffusion; refused unless explicitly allowed.
    pub degenerate: bool,
    /// Interaction strength when the model is the exactly solvable oracle.
    pub oracle_kappa: Option<f64>,
    pub notes: Vec<&'static str>,
}

/// Drift, diffusion and derivatives of a McKean–Vlasov model.
///
/// All callbacks are pure. `x` and `y` have length [`ModelSpec::dim`];
/// `grad_*` matrices have entry `(i, j) = ∂ f_i / ∂ v_j`.
pub trait ModelSpec: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn initial_law(&self) -> &InitialLaw;
    fn traits(&self) -> ModelTraits;

    fn drift(&self, theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DVector<f64>;
    fn diffusion(&self, theta2: f64, x: &[f64]) -> DMatrix<f64>;
    fn d_drift_dtheta1(&self, theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DVector<f64>;
    fn d_diffusion_dtheta2(&self, theta2: f64, x: &[f64]) -> DMatrix<f64>;
    fn grad_x_drift(&self, theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DMatrix<f64>;
    /// Spatial Jacobian of column `r` of the diffusion matrix.
    fn grad_x_diffusion_col(&self, theta2: f64, x: &[f64], r: usize) -> DMatrix<f64>;
    /// Linear functional derivative `∂_μ b(x, y, μ)`.
    fn lfd_drift(&self, theta1: f64, x: &[f64], y: &[f64], mu: &MeasureSnapshot) -> DVector<f64>;
    fn grad_y_lfd_drift(&self, theta1: f64, x: &[f64], y: &[f64], mu: &MeasureSnapshot) -> DMatrix<f64>;

    /// Eigenvalue bounds `[lo, hi]` of `a(θ2, ·)`, when the model declares them.
    fn ellipticity_bounds(&self, _theta2: f64) -> Option<(f64, f64)> {
        None
    }

    /// Uniform bound on `|b|_∞`, when the drift is bounded.
    fn drift_bound(&self, _theta1: f64) -> Option<f64> {
        None
    }

    /// `∫ ∂_μ b(x, y, μ) ν(dy)` for a tangent measure `ν` carried by `mu`'s
    /// points, through the particle chain rule.
    fn lfd_tangent_integral(
        &self,
        theta1: f64,
        x: &[f64],
        mu: &MeasureSnapshot,
        tangent: &TangentMeasure<'_>,
    ) -> DVector<f64> {
        tangent.integrate_matrix(|y| self.grad_y_lfd_drift(theta1, x, y, mu))
    }
}

/// The two built-in models. Both act coordinatewise in any dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum BuiltinModel {
    /// `b = θ1(κ⟨μ⟩ − x)`, `a = θ2 I`. Exactly solvable; used as the oracle.
    MeanFieldOU { kappa: f64, dim: usize, initial: InitialLaw },
    /// `b = θ1 tanh(κ⟨μ⟩ − x)`, `a = θ2(1 + ε cos(x₁)/2) I`, `0 ≤ ε < 1`.
    TanhInteraction { kappa: f64, eps: f64, dim: usize, initial: InitialLaw },
}

impl BuiltinModel {
    pub fn mean_field_ou(kappa: f64, initial: InitialLaw) -> Result<Self> {
        initial.validate()?;
        if !kappa.is_finite() {
            return Err(Error::domain("kappa must be finite"));
        }
        Ok(BuiltinModel::MeanFieldOU { kappa, dim: initial.dim(), initial })
    }

    pub fn tanh_interaction(kappa: f64, eps: f64, initial: InitialLaw) -> Result<Self> {
        initial.validate()?;
        if !kappa.is_finite() {
            return Err(Error::domain("kappa must be finite"));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::domain(format!("eps = {eps} outside [0, 1)")));
        }
        Ok(BuiltinModel::TanhInteraction { kappa, eps, dim: initial.dim(), initial })
    }

    /// Resolve a model id as used in configuration files.
    pub fn from_id(id: &str, kappa: f64, eps: f64, initial: InitialLaw) -> Result<Self> {
        match id {
            "mean_field_ou" => BuiltinModel::mean_field_ou(kappa, initial),
            "tanh_interaction" => BuiltinModel::tanh_interaction(kappa, eps, initial),
            other => Err(Error::UnsupportedModel(format!("unknown model id `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            BuiltinModel::MeanFieldOU { .. } => "mean_field_ou",
            BuiltinModel::TanhInteraction { .. } => "tanh_interaction",
        }
    }

    fn kappa(&self) -> f64 {
        match self {
            BuiltinModel::MeanFieldOU { kappa, .. } | BuiltinModel::TanhInteraction { kappa, .. } => *kappa,
        }
    }

    /// Diffusion scale `a(1, x)/I`.
    fn scale(&self, x: &[f64]) -> f64 {
        match self {
            BuiltinModel::MeanFieldOU { .. } => 1.0,
            BuiltinModel::TanhInteraction { eps, .. } => 1.0 + 0.5 * eps * x[0].cos(),
        }
    }

    /// Interaction argument `κ⟨μ⟩_c − x_c` for every coordinate.
    fn arg(&self, x: &[f64], mu: &MeasureSnapshot) -> DVector<f64> {
        let k = self.kappa();
        let m = mu.mean();
        DVector::from_fn(x.len(), |c, _| k * m[c] - x[c])
    }

    /// Derivative of the (θ1 = 1) drift with respect to its interaction argument.
    fn slope(&self, arg: f64) -> f64 {
        match self {
            BuiltinModel::MeanFieldOU { .. } => 1.0,
            BuiltinModel::TanhInteraction { .. } => 1.0 - arg.tanh().powi(2),
        }
    }

    fn profile(&self, arg: f64) -> f64 {
        match self {
            BuiltinModel::MeanFieldOU { .. } => arg,
            BuiltinModel::TanhInteraction { .. } => arg.tanh(),
        }
    }
}

impl ModelSpec for BuiltinModel {
    fn name(&self) -> &str {
        self.id()
    }

    fn dim(&self) -> usize {
        match self {
            BuiltinModel::MeanFieldOU { dim, .. } | BuiltinModel::TanhInteraction { dim, .. } => *dim,
        }
    }

    fn initial_law(&self) -> &InitialLaw {
        match self {
            BuiltinModel::MeanFieldOU { initial, .. } | BuiltinModel::TanhInteraction { initial, .. } => initial,
        }
    }

    fn traits(&self) -> ModelTraits {
        let measure_dependent = self.kappa() != 0.0;
        match self {
            BuiltinModel::MeanFieldOU { kappa, .. } => ModelTraits {
                drift_linear_in_theta1: true,
                diffusion_linear_in_theta2: true,
                measure_dependent,
                degenerate: false,
                oracle_kappa: Some(*kappa),
                notes: vec!["oracle-only, unbounded drift"],
            },
            BuiltinModel::TanhInteraction { .. } => ModelTraits {
                drift_linear_in_theta1: true,
                diffusion_linear_in_theta2: true,
                measure_dependent,
                degenerate: false,
                oracle_kappa: None,
                notes: vec![],
            },
        }
    }

    fn drift(&self, theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DVector<f64> {
        self.arg(x, mu).map(|g| theta1 * self.profile(g))
    }

    fn diffusion(&self, theta2: f64, x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len()) * (theta2 * self.scale(x))
    }

    fn d_drift_dtheta1(&self, _theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DVector<f64> {
        self.arg(x, mu).map(|g| self.profile(g))
    }

    fn d_diffusion_dtheta2(&self, _theta2: f64, x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(x.len(), x.len()) * self.scale(x)
    }

    fn grad_x_drift(&self, theta1: f64, x: &[f64], mu: &MeasureSnapshot) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.arg(x, mu).map(|g| -theta1 * self.slope(g)))
    }

    fn grad_x_diffusion_col(&self, theta2: f64, x: &[f64], r: usize) -> DMatrix<f64> {
        let d = x.len();
        let mut j = DMatrix::zeros(d, d);
        if let BuiltinModel::TanhInteraction { eps, .. } = self {
            // column r of a is scale(x)·e_r; only x₁ moves the scale
            j[(r, 0)] = -theta2 * 0.5 * eps * x[0].sin();
        }
        j
    }

    fn lfd_drift(&self, theta1: f64, x: &[f64], y: &[f64], mu: &MeasureSnapshot) -> DVector<f64> {
        let k = self.kappa();
        let arg = self.arg(x, mu);
        DVector::from_fn(x.len(), |c, _| theta1 * self.slope(arg[c]) * k * y[c])
    }

    fn grad_y_lfd_drift(&self, theta1: f64, x: &[f64], _y: &[f64], mu: &MeasureSnapshot) -> DMatrix<f64> {
        let k = self.kappa();
        DMatrix::from_diagonal(&self.arg(x, mu).map(|g| theta1 * k * self.slope(g)))
    }

    fn ellipticity_bounds(&self, theta2: f64) -> Option<(f64, f64)> {
        match self {
            BuiltinModel::MeanFieldOU { .. } => Some((theta2, theta2)),
            BuiltinModel::TanhInteraction { eps, .. } => {
                Some((theta2 * (1.0 - 0.5 * eps), theta2 * (1.0 + 0.5 * eps)))
            }
        }
    }

    fn drift_bound(&self, theta1: f64) -> Option<f64> {
        match self {
            BuiltinModel::MeanFieldOU { .. } => None,
            BuiltinModel::TanhInteraction { .. } => Some(theta1.abs()),
        }
    }

    fn lfd_tangent_integral(
        &self,
        theta1: f64,
        x: &[f64],
        mu: &MeasureSnapshot,
        tangent: &TangentMeasure<'_>,
    ) -> DVector<f64> {
        // the y-gradient does not depend on y, so only the mean velocity matters
        let k = self.kappa();
        let v = tangent.mean_velocity();
        let arg = self.arg(x, mu);
        DVector::from_fn(x.len(), |c, _| theta1 * k * self.slope(arg[c]) * v[c])
    }
}

/// Outcome of one sampled assumption check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity (error, constant, bound).
    pub worst: f64,
    pub threshold: Option<f64>,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model: String,
    pub probes: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Relative step and tolerance of the finite-difference derivative checks.
pub const FD_RELATIVE_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Tolerance of the functional-derivative quadrature check.
pub const LFD_TOLERANCE: f64 = 1e-6;

/// Spot-check the model assumptions on random inputs.
///
/// Parameters are drawn from `[0.5, 2]²`; see [`validate_model_in`] for
/// other ranges.
pub fn validate_model(model: &dyn ModelSpec, probes: usize, seed: u64) -> Result<ValidationReport> {
    let unit = Interval::new(0.5, 2.0)?;
    validate_model_in(model, unit, unit, probes, seed)
}

pub fn validate_model_in(
    model: &dyn ModelSpec,
    box1: Interval,
    box2: Interval,
    probes: usize,
    seed: u64,
) -> Result<ValidationReport> {
    use rand::RngExt;
    use crate::rng::standard_normal as normal;

    if probes == 0 {
        return Err(Error::domain("at least one probe is required"));
    }
    let d = model.dim();
    if d == 0 {
        return Err(Error::Structural { function: "dim", detail: "dimension must be positive".into() });
    }
    let mut rng = seeded_rng(seed);
    let cloud = |rng: &mut rand_chacha::ChaCha8Rng, shift: f64| -> MeasureSnapshot {
        let pts: Vec<f64> = (0..8 * d).map(|_| shift + normal(rng)).collect();
        MeasureSnapshot::uniform(d, pts).expect("well-formed cloud")
    };

    let mut fd = [0.0f64; 5];
    let mut lfd_err = 0.0f64;
    let mut ell = (f64::INFINITY, 0.0f64);
    let mut ell_violation = 0.0f64;
    let mut drift_sup_ratio = 0.0f64;
    let mut lip_x = (0.0f64, 0.0f64);
    let mut lip_mu = 0.0f64;
    let (gl_nodes, gl_weights) = gauss_legendre_unit(8)?;

    for _ in 0..probes {
        let t1 = rng.random_range(box1.lo()..=box1.hi());
        let t2 = rng.random_range(box2.lo()..=box2.hi());
        let x: Vec<f64> = (0..d).map(|_| 1.5 * normal(&mut rng)).collect();
        let x2: Vec<f64> = (0..d).map(|_| 1.5 * normal(&mut rng)).collect();
        let y: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let mu = cloud(&mut rng, 0.0);
        let mu2 = cloud(&mut rng, 0.5);

        let b = model.drift(t1, &x, &mu);
        check_vec("drift", &b, d)?;
        let a = model.diffusion(t2, &x);
        check_mat("diffusion", &a, d)?;
        let db = model.d_drift_dtheta1(t1, &x, &mu);
        check_vec("d_drift_dtheta1", &db, d)?;
        let da = model.d_diffusion_dtheta2(t2, &x);
        check_mat("d_diffusion_dtheta2", &da, d)?;
        let gb = model.grad_x_drift(t1, &x, &mu);
        check_mat("grad_x_drift", &gb, d)?;
        let lfd = model.lfd_drift(t1, &x, &y, &mu);
        check_vec("lfd_drift", &lfd, d)?;
        let gl = model.grad_y_lfd_drift(t1, &x, &y, &mu);
        check_mat("grad_y_lfd_drift", &gl, d)?;
        let ga: Vec<DMatrix<f64>> = (0..d).map(|r| model.grad_x_diffusion_col(t2, &x, r)).collect();
        for g in &ga {
            check_mat("grad_x_diffusion_col", g, d)?;
        }

        // derivatives against central differences
        let h1 = FD_RELATIVE_STEP * t1.abs().max(1.0);
        let fd_b = (model.drift(t1 + h1, &x, &mu) - model.drift(t1 - h1, &x, &mu)) / (2.0 * h1);
        fd[0] = fd[0].max(rel_err(fd_b.as_slice(), db.as_slice()));
        let h2 = FD_RELATIVE_STEP * t2.abs().max(1.0);
        let fd_a = (model.diffusion(t2 + h2, &x) - model.diffusion(t2 - h2, &x)) / (2.0 * h2);
        fd[1] = fd[1].max(rel_err(fd_a.as_slice(), da.as_slice()));
        for j in 0..d {
            let hx = FD_RELATIVE_STEP * x[j].abs().max(1.0);
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += hx;
            xm[j] -= hx;
            let col = (model.drift(t1, &xp, &mu) - model.drift(t1, &xm, &mu)) / (2.0 * hx);
            fd[2] = fd[2].max(rel_err(col.as_slice(), gb.column(j).as_slice()));
            let ap = model.diffusion(t2, &xp);
            let am = model.diffusion(t2, &xm);
            for r in 0..d {
                let fdcol: Vec<f64> = (0..d).map(|i| (ap[(i, r)] - am[(i, r)]) / (2.0 * hx)).collect();
                let an: Vec<f64> = (0..d).map(|i| ga[r][(i, j)]).collect();
                fd[3] = fd[3].max(rel_err(&fdcol, &an));
            }
            let hy = FD_RELATIVE_STEP * y[j].abs().max(1.0);
            let (mut yp, mut ym) = (y.clone(), y.clone());
            yp[j] += hy;
            ym[j] -= hy;
            let col = (model.lfd_drift(t1, &x, &yp, &mu) - model.lfd_drift(t1, &x, &ym, &mu)) / (2.0 * hy);
            fd[4] = fd[4].max(rel_err(col.as_slice(), gl.column(j).as_slice()));
        }

        // b(μ2) − b(μ) = ∫₀¹ ∫ ∂_μ b(x, y, μ_λ) (μ2 − μ)(dy) dλ
        let mut integral = DVector::zeros(d);
        for (l, w) in gl_nodes.iter().zip(&gl_weights) {
            let mix = mu.mixture(&mu2, *l)?;
            let mut inner = DVector::zeros(d);
            for j in 0..mu2.len() {
                inner += model.lfd_drift(t1, &x, mu2.point(j), &mix) * mu2.weight(j);
            }
            for j in 0..mu.len() {
                inner -= model.lfd_drift(t1, &x, mu.point(j), &mix) * mu.weight(j);
            }
            integral += inner * *w;
        }
        let diff = model.drift(t1, &x, &mu2) - &b;
        lfd_err = lfd_err.max(rel_err(diff.as_slice(), integral.as_slice()));

        // ellipticity
        if (&a - a.transpose()).abs().max() > 1e-12 * a.abs().max().max(1.0) {
            ell_violation = f64::INFINITY;
        }
        let eig = a.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        ell = (ell.0.min(lo), ell.1.max(hi));
        if let Some((blo, bhi)) = model.ellipticity_bounds(t2) {
            let slack = 1e-12 * bhi.abs().max(1.0);
            ell_violation = ell_violation.max(blo - lo - slack).max(hi - bhi - slack);
        }

        if let Some(bound) = model.drift_bound(t1) {
            drift_sup_ratio = drift_sup_ratio.max(b.amax() / bound.max(f64::MIN_POSITIVE));
        }

        // Lipschitz quotients
        let dx = DVector::from_column_slice(&x) - DVector::from_column_slice(&x2);
        let dxn = dx.norm();
        if dxn > 0.0 {
            lip_x.0 = lip_x.0.max((model.drift(t1, &x2, &mu) - &b).norm() / dxn);
            lip_x.1 = lip_x.1.max((model.diffusion(t2, &x2) - &a).norm() / dxn);
        }
        let w = crate::measure::wasserstein_sliced(&mu.clone().into(), &mu2.clone().into(), 2.0, 16, seed)?;
        if w > 0.0 {
            lip_mu = lip_mu.max(diff.norm() / w);
        }
    }

    let fd_names = [
        "fd_d_drift_dtheta1",
        "fd_d_diffusion_dtheta2",
        "fd_grad_x_drift",
        "fd_grad_x_diffusion_col",
        "fd_grad_y_lfd_drift",
    ];
    let mut checks: Vec<CheckResult> = fd_names
        .iter()
        .zip(fd)
        .map(|(name, worst)| CheckResult {
            name: name.to_string(),
            passed: worst < FD_TOLERANCE,
            worst,
            threshold: Some(FD_TOLERANCE),
            note: "max relative error against central differences".into(),
        })
        .collect();
    checks.push(CheckResult {
        name: "lfd_consistency".into(),
        passed: lfd_err < LFD_TOLERANCE,
        worst: lfd_err,
        threshold: Some(LFD_TOLERANCE),
        note: "drift increment vs lambda-integral of the functional derivative".into(),
    });
    let c = ell.1.max(1.0 / ell.0);
    checks.push(CheckResult {
        name: "ellipticity".into(),
        passed: ell.0 > 0.0 && ell_violation <= 0.0,
        worst: c,
        threshold: None,
        note: format!("observed eigenvalues in [{}, {}]", ell.0, ell.1),
    });
    let traits = model.traits();
    checks.push(match model.drift_bound(box1.hi()) {
        Some(_) => CheckResult {
            name: "bounded_drift".into(),
            passed: drift_sup_ratio <= 1.0 + 1e-12,
            worst: drift_sup_ratio,
            threshold: Some(1.0),
            note: "max |b| relative to the declared bound".into(),
        },
        None => CheckResult {
            name: "bounded_drift".into(),
            passed: true,
            worst: f64::NAN,
            threshold: None,
            note: format!("no bound declared; {}", traits.notes.join("; ")),
        },
    });
    checks.push(CheckResult {
        name: "lipschitz_x".into(),
        passed: lip_x.0.is_finite() && lip_x.1.is_finite(),
        worst: lip_x.0.max(lip_x.1),
        threshold: None,
        note: format!("drift {}, diffusion {}", lip_x.0, lip_x.1),
    });
    checks.push(CheckResult {
        name: "lipschitz_measure".into(),
        passed: lip_mu.is_finite(),
        worst: lip_mu,
        threshold: None,
        note: "drift increment per sliced W2 distance".into(),
    });
    Ok(ValidationReport { model: model.name().to_string(), probes, seed, checks })
}

fn check_vec(function: &'static str, v: &DVector<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Structural { function, detail: format!("returned length {}, expected {d}", v.len()) });
    }
    Ok(())
}

fn check_mat(function: &'static str, m: &DMatrix<f64>, d: usize) -> Result<()> {
    if m.shape() != (d, d) {
        return Err(Error::Structural {
            function,
            detail: format!("returned {}×{}, expected {d}×{d}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// Max-norm error relative to the analytic value, with a unit floor.
fn rel_err(approx: &[f64], exact: &[f64]) -> f64 {
    let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    approx.iter().zip(exact).fold(0.0f64, |m, (a, e)| m.max((a - e).abs())) / scale
}
