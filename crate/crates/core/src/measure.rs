//! Empirical measures, Wasserstein distances and tangent measures.
//!
//! Exact `W_l` is only computed in one dimension, through the quantile
//! coupling. For `d > 1` a sliced surrogate averages one-dimensional
//! distances over random directions; it is a diagnostic, not `W_l`.

use std::ops::Deref;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::MeasureSnapshot;
use crate::numerics::pairwise_sum_by;
use crate::rng::{seeded_rng, standard_normal};

/// A [`MeasureSnapshot`] with a lazily built sorted copy (for `d = 1`).
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    snapshot: MeasureSnapshot,
    sorted: OnceLock<Vec<(f64, f64)>>,
}

impl From<MeasureSnapshot> for EmpiricalMeasure {
    fn from(snapshot: MeasureSnapshot) -> Self {
        EmpiricalMeasure { snapshot, sorted: OnceLock::new() }
    }
}

impl Deref for EmpiricalMeasure {
    type Target = MeasureSnapshot;

    fn deref(&self) -> &MeasureSnapshot {
        &self.snapshot
    }
}

impl EmpiricalMeasure {
    /// Equal-weight one-dimensional measure.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Ok(MeasureSnapshot::uniform(1, values.to_vec())?.into())
    }

    pub fn snapshot(&self) -> &MeasureSnapshot {
        &self.snapshot
    }

    /// `(value, weight)` pairs in increasing order of value; `d = 1` only.
    pub fn sorted(&self) -> &[(f64, f64)] {
        self.sorted.get_or_init(|| {
            assert_eq!(self.dim(), 1, "sorted cache needs a one-dimensional measure");
            let mut v: Vec<(f64, f64)> = (0..self.len()).map(|j| (self.point(j)[0], self.weight(j))).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            v
        })
    }

    /// The measure pushed forward by `x ↦ ⟨u, x⟩`.
    pub fn project(&self, direction: &[f64]) -> EmpiricalMeasure {
        let d = self.dim();
        let values: Vec<f64> =
            (0..self.len()).map(|j| self.point(j).iter().zip(direction).map(|(a, b)| a * b).sum()).collect();
        let snapshot = if self.is_uniform() {
            MeasureSnapshot::uniform(1, values)
        } else {
            MeasureSnapshot::weighted(1, values, (0..self.len()).map(|j| self.weight(j)).collect())
        };
        debug_assert_eq!(direction.len(), d);
        snapshot.expect("projection keeps a valid layout").into()
    }
}

/// Exact `W_order` between two one-dimensional measures.
///
/// Equal-size uniform samples are matched in sorted order; anything else is
/// coupled through both quantile functions on the merged weight grid.
pub fn wasserstein_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, order: f64) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::domain("wasserstein_1d needs one-dimensional measures; use wasserstein_sliced"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("Wasserstein distance of an empty measure"));
    }
    if !(order >= 1.0) {
        return Err(Error::domain(format!("Wasserstein order {order} < 1")));
    }
    let (sa, sb) = (a.sorted(), b.sorted());
    let cost = |x: f64, y: f64| (x - y).abs().powf(order);
    let total = if a.is_uniform() && b.is_uniform() && sa.len() == sb.len() {
        pairwise_sum_by(sa.len(), &|j| cost(sa[j].0, sb[j].0)) / sa.len() as f64
    } else {
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (sa[0].1, sb[0].1);
        let mut acc = 0.0;
        while i < sa.len() && j < sb.len() {
            let m = ra.min(rb);
            acc += m * cost(sa[i].0, sb[j].0);
            ra -= m;
            rb -= m;
            if ra <= 0.0 {
                i += 1;
                if i < sa.len() {
                    ra = sa[i].1;
                }
            }
            if rb <= 0.0 {
                j += 1;
                if j < sb.len() {
                    rb = sb[j].1;
                }
            }
        }
        acc
    };
    Ok(total.powf(1.0 / order))
}

/// Average of one-dimensional `W_order` distances between the projections
/// of `a` and `b` on the given directions (normalised internally).
pub fn wasserstein_projected(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: f64,
    directions: &[Vec<f64>],
) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Misaligned(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    if directions.is_empty() {
        return Err(Error::domain("at least one direction is required"));
    }
    let mut acc = 0.0;
    for u in directions {
        if u.len() != a.dim() {
            return Err(Error::Misaligned("direction dimension".into()));
        }
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::domain("zero direction"));
        }
        let unit: Vec<f64> = u.iter().map(|v| v / norm).collect();
        acc += wasserstein_1d(&a.project(&unit), &b.project(&unit), order)?;
    }
    Ok(acc / directions.len() as f64)
}

/// Sliced Wasserstein surrogate over `n_directions` random unit directions.
pub fn wasserstein_sliced(
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
    order: f64,
    n_directions: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let d = a.dim();
    let directions: Vec<Vec<f64>> = (0..n_directions)
        .map(|_| loop {
            let u: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
            if u.iter().any(|v| *v != 0.0) {
                break u;
            }
        })
        .collect();
    wasserstein_projected(a, b, order, &directions)
}

/// A signed measure `∂_θ μ` represented by per-point velocities of the
/// points of a base measure.
#[derive(Debug)]
pub struct TangentMeasure<'a> {
    base: &'a MeasureSnapshot,
    velocities: &'a [f64],
    mean_velocity: OnceLock<DVector<f64>>,
}

impl<'a> TangentMeasure<'a> {
    /// `velocities` is row-major with one `d`-vector per base point.
    pub fn new(base: &'a MeasureSnapshot, velocities: &'a [f64]) -> Result<Self> {
        if velocities.len() != base.points().len() {
            return Err(Error::Misaligned(format!(
                "{} velocity coordinates for {} points of dimension {}",
                velocities.len(),
                base.len(),
                base.dim()
            )));
        }
        if !crate::numerics::all_finite(velocities) {
            return Err(Error::Propagation { particle: None, step: None });
        }
        Ok(TangentMeasure { base, velocities, mean_velocity: OnceLock::new() })
    }

    pub fn base(&self) -> &MeasureSnapshot {
        self.base
    }

    pub fn velocity(&self, j: usize) -> &[f64] {
        let d = self.base.dim();
        &self.velocities[j * d..(j + 1) * d]
    }

    /// `Σ_j w_j v_j`, i.e. `∫ y ∂_θ μ(dy)`.
    pub fn mean_velocity(&self) -> &DVector<f64> {
        self.mean_velocity.get_or_init(|| {
            let d = self.base.dim();
            DVector::from_fn(d, |c, _| {
                pairwise_sum_by(self.base.len(), &|j| self.base.weight(j) * self.velocities[j * d + c])
            })
        })
    }

    /// `∫ f(y) ∂_θ μ(dy) = Σ_j w_j ∇f(y_j) v_j` for vector-valued `f` given
    /// by its Jacobian.
    pub fn integrate_matrix(&self, f_grad: impl Fn(&[f64]) -> DMatrix<f64>) -> DVector<f64> {
        let d = self.base.dim();
        let mut acc = DVector::zeros(d);
        for j in 0..self.base.len() {
            let g = f_grad(self.base.point(j));
            acc += g * DVector::from_column_slice(self.velocity(j)) * self.base.weight(j);
        }
        acc
    }

    /// `∫ f(y) ∂_θ μ(dy)` for scalar `f` given by its gradient.
    pub fn integrate_scalar(&self, f_grad: impl Fn(&[f64]) -> DVector<f64>) -> f64 {
        pairwise_sum_by(self.base.len(), &|j| {
            let g = f_grad(self.base.point(j));
            self.base.weight(j) * g.iter().zip(self.velocity(j)).map(|(a, b)| a * b).sum::<f64>()
        })
    }
}

/// Particle representation of `∫ f(y) ∂_θ μ(dy)` for vector-valued `f`.
pub fn integrate_tangent(tm: &TangentMeasure<'_>, f_grad: impl Fn(&[f64]) -> DMatrix<f64>) -> DVector<f64> {
    tm.integrate_matrix(f_grad)
}
