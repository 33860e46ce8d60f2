//! Closed-loop run of the reactor study.
//!
//! Usage: cstr_closed_loop [steps] [step_count] [kind] [delta_u_penalty]

use lintrack::baselines::{lti_controller, ltv_controller};
use lintrack::cstr;
use lintrack::mpc::{simulate, Controller, ControllerKind};
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map_or(Ok(600), |s| s.parse())?;
    let mut config = cstr::default_config();
    if let Some(s) = args.get(2) {
        config.step_count = s.parse()?;
    }
    let kind = args.get(3).map_or("proposed", String::as_str);
    if let Some(s) = args.get(4) {
        config.delta_u_penalty = s.parse()?;
    }
    let plant = cstr::cstr();
    let prediction = cstr::prediction_model(plant.clone(), config.input_set.clone())?;
    let x0 = cstr::initial_state(plant.as_ref(), &DVector::from_column_slice(&cstr::X0), &config.input_set);
    let mut controller = match kind {
        "lti" => lti_controller(&config, &prediction, &x0)?,
        "ltv" => ltv_controller(&config, &prediction)?,
        _ => Controller::new(config.clone(), prediction, ControllerKind::Proposed)?,
    };
    let started = std::time::Instant::now();
    let log = simulate(&mut controller, &x0, steps);
    println!("elapsed {:.2?}, failure {:?}", started.elapsed(), log.failure);
    println!("tracking cost {:.6}", log.tracking_cost());
    let last_bad = log
        .rows
        .iter()
        .filter(|r| r.y.as_ref().is_some_and(|y| (y[0] - cstr::Y_R).abs() >= 1e-3))
        .map(|r| r.t)
        .max();
    println!("last t with |y - y_r| >= 1e-3: {last_bad:?}");
    for r in log.rows.iter().step_by((steps / 12).max(1)) {
        let s = r.solve.as_ref();
        println!(
            "t={:4} x=({:.5},{:.5}) u={:.5} V={:.3e} dl={:.3e} dn={:.3e} ys={:.5}",
            r.t,
            r.x[0],
            r.x[1],
            r.u.as_ref().map_or(f64::NAN, |u| u[0]),
            s.map_or(f64::NAN, |s| s.v),
            s.map_or(f64::NAN, |s| s.dist_lin),
            s.map_or(f64::NAN, |s| s.dist_nl),
            s.map_or(f64::NAN, |s| s.y_s[0]),
        );
    }
    let worst_pred = log.diagnostics.iter().map(|d| d.prediction_error).fold(0.0, f64::max);
    println!("max first-step prediction error {worst_pred:e}");
    Ok(())
}
