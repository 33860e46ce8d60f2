//! Sampled estimates of the constants bounding the linearization error.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Plant;
use crate::sets::BoxSet;

/// Safety factor applied to the sampled maxima.
pub const INFLATION: f64 = 1.5;
/// Pairs closer than this are skipped.
pub const MIN_DISTANCE: f64 = 1e-8;
/// Errors below this multiple of machine epsilon times the magnitude of
/// the compared values are rounding, not curvature, and count as zero.
pub const ROUNDING_FLOOR: f64 = 16.0 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessEstimates {
    /// `|f(x, u) - f_lin(x, u)| <= c_x |x - x_lin|^2`
    pub c_x: f64,
    /// `|h(x, u) - h_lin(x, u)| <= c_xh |x - x_lin|^2`
    pub c_xh: f64,
    pub l_f: f64,
    pub l_h: f64,
    pub state_box: BoxSet,
    pub samples: usize,
}

/// Linearization error `(|f - f_lin|, |h - h_lin|)` of the state-only
/// linearization at `x_lin` with the input held at `u`, zero when within
/// rounding of the compared values.
pub fn linearization_error(
    plant: &dyn Plant,
    x: &DVector<f64>,
    x_lin: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, f64) {
    let dx = x - x_lin;
    // floor scaled by every term of `f(x) - f(x_lin) - J dx`
    let floored = |at: DVector<f64>, base: DVector<f64>, jdx: DVector<f64>| {
        let scale = at.norm() + base.norm() + jdx.norm();
        let e = (at - base - jdx).norm();
        if e <= ROUNDING_FLOOR * scale {
            0.0
        } else {
            e
        }
    };
    let ef = floored(plant.step(x, u), plant.step(x_lin, u), plant.state_jacobian(x_lin, u) * &dx);
    let eh = floored(
        plant.output(x, u),
        plant.output(x_lin, u),
        plant.output_state_jacobian(x_lin, u) * &dx,
    );
    (ef, eh)
}

fn sample_in(rng: &mut ChaCha8Rng, set: &BoxSet) -> DVector<f64> {
    DVector::from_iterator(
        set.dim(),
        set.lower
            .iter()
            .zip(set.upper.iter())
            .map(|(l, u)| if l < u { rng.random_range(*l..=*u) } else { *l }),
    )
}

/// Draw `(x, x_lin, u)`. Every other pair is local (`x` within 5% of the
/// box width of `x_lin`) so that the small-distance limit of the ratios,
/// where the supremum of the curvature is felt, is sampled as well.
pub fn sample_pair(
    rng: &mut ChaCha8Rng,
    state_box: &BoxSet,
    inputs: &BoxSet,
    local: bool,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let x_lin = sample_in(rng, state_box);
    let x = if local {
        let width = &state_box.upper - &state_box.lower;
        let offset = DVector::from_iterator(
            width.len(),
            width.iter().map(|w| 0.05 * w * rng.random_range(-1.0..=1.0)),
        );
        state_box.project(&(&x_lin + offset))
    } else {
        sample_in(rng, state_box)
    };
    (x, x_lin, sample_in(rng, inputs))
}

pub fn estimate_smoothness(
    plant: &dyn Plant,
    state_box: &BoxSet,
    inputs: &BoxSet,
    samples: usize,
    seed: u64,
) -> Result<SmoothnessEstimates> {
    if state_box.dim() != plant.state_dim() || inputs.dim() != plant.input_dim() {
        return Err(Error::dim("sampling boxes do not match the plant"));
    }
    if samples < 2 {
        return Err(Error::dim("at least two samples are required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut c_x, mut c_xh, mut l_f, mut l_h) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..samples {
        let (x, x_lin, u) = sample_pair(&mut rng, state_box, inputs, i % 2 == 1);
        let dist = (&x - &x_lin).norm();
        if dist <= MIN_DISTANCE {
            continue;
        }
        let (ef, eh) = linearization_error(plant, &x, &x_lin, &u);
        let df = (plant.step(&x, &u) - plant.step(&x_lin, &u)).norm();
        let dh = (plant.output(&x, &u) - plant.output(&x_lin, &u)).norm();
        for v in [ef, eh, df, dh] {
            if !v.is_finite() {
                return Err(Error::Numerical("plant evaluation while sampling".into()));
            }
        }
        c_x = c_x.max(ef / (dist * dist));
        c_xh = c_xh.max(eh / (dist * dist));
        l_f = l_f.max(df / dist);
        l_h = l_h.max(dh / dist);
    }
    Ok(SmoothnessEstimates {
        c_x: INFLATION * c_x,
        c_xh: INFLATION * c_xh,
        l_f,
        l_h,
        state_box: state_box.clone(),
        samples,
    })
}
