//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use mkv_lan::measure::TangentMeasure;
use mkv_lan::model::ModelTraits;
use mkv_lan::{BuiltinModel, InitialLaw, Interval, MeasureSnapshot, ModelSpec, ThetaPair};
use nalgebra::{DMatrix, DVector};

pub fn theta(t1: f64, t2: f64) -> ThetaPair {
    ThetaPair::new(t1, t2, Interval::new(0.1, 5.0).unwrap(), Interval::new(0.1, 5.0).unwrap()).unwrap()
}

pub fn ou(kappa: f64, initial: InitialLaw) -> BuiltinModel {
    BuiltinModel::mean_field_ou(kappa, initial).unwrap()
}

pub fn stationary_ou() -> BuiltinModel {
    ou(0.0, InitialLaw::stationary_ou(1, 1.0, 1.0))
}

/// Scalar stub `b = θ1·c` (or `c` when `scaled` is false), `a = θ2·s`.
/// `s = 0` gives the degenerate stub.
pub struct Stub {
    pub c: f64,
    pub s: f64,
    pub scaled: bool,
    pub initial: InitialLaw,
}

impl Stub {
    pub fn new(c: f64, s: f64, scaled: bool, x0: f64) -> Self {
        Stub { c, s, scaled, initial: InitialLaw::Point { x: vec![x0] } }
    }
}

impl ModelSpec for Stub {
    fn name(&self) -> &str {
        "stub"
    }

    fn dim(&self) -> usize {
        1
    }

    fn initial_law(&self) -> &InitialLaw {
        &self.initial
    }

    fn traits(&self) -> ModelTraits {
        ModelTraits {
            drift_linear_in_theta1: self.scaled,
            diffusion_linear_in_theta2: true,
            degenerate: self.s == 0.0,
            ..ModelTraits::default()
        }
    }

    fn drift(&self, theta1: f64, _x: &[f64], _mu: &MeasureSnapshot) -> DVector<f64> {
        DVector::from_element(1, if self.scaled { theta1 * self.c } else { self.c })
    }

    fn diffusion(&self, theta2: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, theta2 * self.s)
    }

    fn d_drift_dtheta1(&self, _theta1: f64, _x: &[f64], _mu: &MeasureSnapshot) -> DVector<f64> {
        DVector::from_element(1, if self.scaled { self.c } else { 0.0 })
    }

    fn d_diffusion_dtheta2(&self, _theta2: f64, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.s)
    }

    fn grad_x_drift(&self, _theta1: f64, _x: &[f64], _mu: &MeasureSnapshot) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn grad_x_diffusion_col(&self, _theta2: f64, _x: &[f64], _r: usize) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn lfd_drift(&self, _theta1: f64, _x: &[f64], _y: &[f64], _mu: &MeasureSnapshot) -> DVector<f64> {
        DVector::zeros(1)
    }

    fn grad_y_lfd_drift(&self, _theta1: f64, _x: &[f64], _y: &[f64], _mu: &MeasureSnapshot) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn lfd_tangent_integral(
        &self,
        _theta1: f64,
        _x: &[f64],
        _mu: &MeasureSnapshot,
        _tangent: &TangentMeasure<'_>,
    ) -> DVector<f64> {
        DVector::zeros(1)
    }
}
