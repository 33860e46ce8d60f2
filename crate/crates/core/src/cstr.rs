//! Euler-discretized continuous stirred tank reactor.
//!
//! States are `x1` (temperature) and `x2` (concentration), the input is
//! the coolant flow rate and the output is `x2`.

use std::sync::Arc;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use crate::augment::augment_incremental;
use crate::error::Result;
use crate::model::{NonlinearPlant, Plant};
use crate::mpc::{MpcConfig, PredictionModel};
use crate::sets::BoxSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CstrParams {
    pub ts: f64,
    pub theta: f64,
    pub k: f64,
    pub m: f64,
    pub x_f: f64,
    pub x_c: f64,
    pub alpha: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        CstrParams {
            ts: 0.2,
            theta: 20.0,
            k: 300.0,
            m: 5.0,
            x_f: 0.3947,
            x_c: 0.3816,
            alpha: 0.117,
        }
    }
}

impl CstrParams {
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let rate = self.k * x1 * (-self.m / x2).exp();
        dvector![
            x1 + self.ts / self.theta * (1.0 - x1) - self.ts * rate,
            x2 + self.ts / self.theta * (self.x_f - x2) + self.ts * rate - self.ts * self.alpha * u * (x2 - self.x_c)
        ]
    }

    pub fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (x1, x2, u) = (x[0], x[1], u[0]);
        let ex = (-self.m / x2).exp();
        let d1 = self.ts * self.k * ex;
        let d2 = self.ts * self.k * x1 * ex * self.m / (x2 * x2);
        let decay = 1.0 - self.ts / self.theta;
        dmatrix![
            decay - d1, -d2;
            d1, decay + d2 - self.ts * self.alpha * u
        ]
    }

    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        dmatrix![0.0; -self.ts * self.alpha * (x[1] - self.x_c)]
    }

    /// Points `(x1, x2, u)` of the steady-state manifold, parameterized by
    /// the concentration `x2 != x_c`.
    pub fn steady_state_at(&self, x2: f64) -> (f64, f64) {
        let ex = (-self.m / x2).exp();
        let x1 = (1.0 / self.theta) / (1.0 / self.theta + self.k * ex);
        let u = ((self.x_f - x2) / self.theta + self.k * x1 * ex) / (self.alpha * (x2 - self.x_c));
        (x1, u)
    }

    pub fn plant(self) -> NonlinearPlant {
        let (p1, p2) = (self, self);
        NonlinearPlant::new(2, 1, 1, move |x, u| self.step(x, u), |x, _| dvector![x[1]])
            .expect("fixed dimensions")
            .with_jacobians(
                Arc::new(move |x, u| p1.state_jacobian(x, u)),
                Arc::new(move |x, _| p2.input_jacobian(x)),
                Arc::new(|_, _| dmatrix![0.0, 1.0]),
                Arc::new(|_, _| dmatrix![0.0]),
            )
    }
}

/// The reactor with its default constants.
pub fn cstr() -> Arc<dyn Plant> {
    Arc::new(CstrParams::default().plant())
}

pub const X0: [f64; 2] = [0.9492, 0.43];
pub const Y_R: f64 = 0.6519;
pub const INPUT_BOUNDS: [f64; 2] = [0.1, 2.0];
pub const EQUILIBRIUM_INPUT_BOUNDS: [f64; 2] = [0.11, 1.99];

/// Controller settings of the reference study.
pub fn default_config() -> MpcConfig {
    MpcConfig {
        q: DMatrix::identity(2, 2),
        r: dmatrix![0.05],
        s: dmatrix![100.0],
        horizon: 40,
        step_count: 3,
        input_set: BoxSet::interval(INPUT_BOUNDS[0], INPUT_BOUNDS[1]).expect("valid"),
        equilibrium_input_set: BoxSet::interval(EQUILIBRIUM_INPUT_BOUNDS[0], EQUILIBRIUM_INPUT_BOUNDS[1])
            .expect("valid"),
        y_r: dvector![Y_R],
        delta_u_penalty: 1.0,
    }
}

/// Incremental-input prediction model of `plant` with input bounds `u_set`.
pub fn prediction_model(plant: Arc<dyn Plant>, u_set: BoxSet) -> Result<PredictionModel> {
    Ok(PredictionModel::Incremental(augment_incremental(plant, 1.0, u_set, None)?))
}

/// Input that best holds `x` at rest, `argmin_u |f(x, u) - x|`, clipped to
/// `u_set`. The plant must be affine in `u`, as the reactor is.
pub fn resting_input(plant: &dyn Plant, x: &DVector<f64>, u_set: &BoxSet) -> DVector<f64> {
    let zero = DVector::zeros(plant.input_dim());
    let drift = plant.step(x, &zero) - x;
    let fu = plant.input_jacobian(x, &zero);
    let u = fu
        .clone()
        .svd(true, true)
        .solve(&(-drift), 1e-14)
        .unwrap_or_else(|_| u_set.center());
    u_set.project(&u)
}

/// Augmented initial state `[x0; u0]` with `u0` the resting input at `x0`.
pub fn initial_state(plant: &dyn Plant, x0: &DVector<f64>, u_set: &BoxSet) -> DVector<f64> {
    let u0 = resting_input(plant, x0, u_set);
    let n = x0.len();
    let mut z = DVector::zeros(n + u0.len());
    z.rows_mut(0, n).copy_from(x0);
    z.rows_mut(n, u0.len()).copy_from(&u0);
    z
}
