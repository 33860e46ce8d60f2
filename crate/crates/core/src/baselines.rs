//! Comparison controllers: a fixed linearization (LTI) and stage-wise
//! linearizations along the previous prediction (LTV). Both apply only
//! the first optimal input.

use nalgebra::DVector;

use crate::error::Result;
use crate::mpc::{
    reference_equilibrium, Controller, ControllerKind, MpcConfig, MpcSolution, PredictionModel,
};

/// Single solve with the prediction model linearized at `x_sr`.
pub fn solve_lti_mpc(
    config: &MpcConfig,
    prediction: &PredictionModel,
    x_sr: &DVector<f64>,
    x_t: &DVector<f64>,
    warm: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    let mut c = Controller::new(
        config.clone(),
        prediction.clone(),
        ControllerKind::Lti { point: x_sr.clone() },
    )?;
    solve_with_previous(&mut c, x_t, warm)
}

/// Single solve with stage `k` linearized at `x_bar_{k+1}` of `prev`
/// (`x_bar_N` for the last stage). Without `prev` every stage uses the
/// linearization at `x_t`.
pub fn solve_ltv_mpc(
    config: &MpcConfig,
    prediction: &PredictionModel,
    x_t: &DVector<f64>,
    prev: Option<&MpcSolution>,
) -> Result<MpcSolution> {
    let mut c = Controller::new(config.clone(), prediction.clone(), ControllerKind::Ltv)?;
    solve_with_previous(&mut c, x_t, prev)
}

fn solve_with_previous(c: &mut Controller, x_t: &DVector<f64>, prev: Option<&MpcSolution>) -> Result<MpcSolution> {
    c.set_previous(prev.cloned());
    Ok(c.solve(x_t)?.solution)
}

/// LTI controller linearized at the plant's optimal reachable equilibrium.
pub fn lti_controller(config: &MpcConfig, prediction: &PredictionModel, x0: &DVector<f64>) -> Result<Controller> {
    let point = reference_equilibrium(config, prediction, x0)?;
    Controller::new(config.clone(), prediction.clone(), ControllerKind::Lti { point })
}

pub fn ltv_controller(config: &MpcConfig, prediction: &PredictionModel) -> Result<Controller> {
    Controller::new(config.clone(), prediction.clone(), ControllerKind::Ltv)
}
