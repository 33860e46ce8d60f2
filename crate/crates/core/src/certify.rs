//! Grid audit of the standing assumptions and Lyapunov diagnostics of
//! closed-loop data.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::equilibria::{
    linearized_equilibrium_from_input, optimal_reachable_equilibrium_lin, sigma_min, steady_state_map,
};
use crate::error::{Error, Result};
use crate::model::{linearize, Linearization};
use crate::mpc::{MpcConfig, PredictionModel, TrajectoryLog};
use crate::sets::BoxSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Lower bound on `sigma_min([[A - I, B], [C, D]])`.
    pub sigma_s: f64,
    /// Lower bound on `sigma_min` of the controllability matrix.
    pub ctrb: f64,
    /// Lower bound on `sigma_min(I - A)`.
    pub sigma_underbar: f64,
    /// Tolerance on `|y^sr_lin - y_r|`.
    pub reach: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            sigma_s: 1e-3,
            ctrb: 1e-8,
            sigma_underbar: 1e-6,
            reach: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifyOptions {
    pub thresholds: Thresholds,
    /// Grid points per axis.
    pub grid: usize,
    /// Omit the lower face of the box, sampling `(lo, hi]`.
    pub left_open: bool,
    /// Input part of the linearization point for incremental models;
    /// defaults to the center of `U_s`.
    pub input_point: Option<DVector<f64>>,
    /// Points per axis of the `U_s` grid used for the manifold radius.
    pub manifold_samples: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            thresholds: Thresholds::default(),
            grid: 50,
            left_open: true,
            input_point: None,
            manifold_samples: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Check {
    SteadyStateMap,
    Controllability,
    NonsingularDynamics,
}

impl Check {
    pub fn label(&self) -> &'static str {
        match self {
            Check::SteadyStateMap => "a2",
            Check::Controllability => "a3",
            Check::NonsingularDynamics => "a4",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    /// Plant state of the linearization point.
    pub state: DVector<f64>,
    pub sigma_s: f64,
    pub ctrb: f64,
    pub sigma_underbar: f64,
    pub manifold_radius: f64,
    pub reachable: bool,
    pub failed: Vec<Check>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexityVerdict {
    /// `m = p` and the target is reachable at every grid point.
    Implied,
    NotEstablished,
}

impl fmt::Display for ConvexityVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConvexityVerdict::Implied => "implied",
            ConvexityVerdict::NotEstablished => "not established",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub a2_sigma_s: f64,
    pub a3_ctrb_margin: f64,
    pub a4_sigma_underbar: f64,
    pub a5_manifold_radius: f64,
    pub a7_reachable: bool,
    pub a6: ConvexityVerdict,
    pub points: Vec<GridPoint>,
    pub thresholds: Thresholds,
}

impl AssumptionReport {
    pub fn failing_points(&self) -> impl Iterator<Item = &GridPoint> {
        self.points.iter().filter(|p| !p.failed.is_empty())
    }
}

/// `[B, A B, ..., A^{n-1} B]`
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut block = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&block);
        block = a * block;
    }
    out
}

/// Grid over `set` with `per_axis` points per coordinate; `left_open`
/// drops the lower face, giving `lo + (hi - lo) k / per_axis`, `k = 1..`.
pub fn state_grid(set: &BoxSet, per_axis: usize, left_open: bool) -> Vec<DVector<f64>> {
    if !left_open {
        return set.grid(per_axis);
    }
    let shifted = BoxSet {
        lower: DVector::from_iterator(
            set.dim(),
            set.lower
                .iter()
                .zip(set.upper.iter())
                .map(|(l, u)| l + (u - l) / per_axis as f64),
        ),
        upper: set.upper.clone(),
    };
    shifted.grid(per_axis)
}

fn evaluate_point(
    prediction: &PredictionModel,
    config: &MpcConfig,
    options: &CertifyOptions,
    state: &DVector<f64>,
    input_point: &DVector<f64>,
) -> Result<GridPoint> {
    let point = prediction.steady_state_vector(state, input_point);
    let lin = linearize(prediction.model(), &point)?;
    let eq = prediction.equilibrium_model(&lin)?;
    let sigma_s = steady_state_map(&eq)?.sigma_min;
    let ctrb = sigma_min(&controllability_matrix(&lin.a, &lin.b));
    let n = eq.state_dim();
    let sigma_underbar = sigma_min(&(DMatrix::identity(n, n) - &eq.a));
    let manifold_radius = manifold_radius(&eq, &config.equilibrium_input_set, options.manifold_samples);
    let reachable = config
        .target()
        .and_then(|t| optimal_reachable_equilibrium_lin(&eq, &t, &config.equilibrium_input_set))
        .map(|best| (&best.equilibrium.y_s - &config.y_r).amax() <= options.thresholds.reach)
        .unwrap_or(false);
    let th = &options.thresholds;
    let mut failed = Vec::new();
    if !(sigma_s >= th.sigma_s) {
        failed.push(Check::SteadyStateMap);
    }
    if !(ctrb >= th.ctrb) {
        failed.push(Check::Controllability);
    }
    if !(sigma_underbar >= th.sigma_underbar) {
        failed.push(Check::NonsingularDynamics);
    }
    Ok(GridPoint {
        state: state.clone(),
        sigma_s,
        ctrb,
        sigma_underbar,
        manifold_radius,
        reachable,
        failed,
    })
}

/// Largest `|(xs, us)|` over a grid of `U_s`; infinite when `I - A` is singular.
fn manifold_radius(eq: &Linearization, us_set: &BoxSet, samples: usize) -> f64 {
    us_set
        .grid(samples.max(2))
        .iter()
        .map(|u| match linearized_equilibrium_from_input(eq, u) {
            Ok(e) => (e.x_s.norm_squared() + e.u_s.norm_squared()).sqrt(),
            Err(_) => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Evaluate the assumption margins at every grid point of `state_box`
/// (plant coordinates).
pub fn check_assumptions(
    prediction: &PredictionModel,
    state_box: &BoxSet,
    config: &MpcConfig,
    options: &CertifyOptions,
) -> Result<AssumptionReport> {
    let (n, m) = prediction.plant_dims();
    if state_box.dim() != n {
        return Err(Error::dim("certification box does not match the plant state"));
    }
    if options.grid < 2 {
        return Err(Error::Config("grid must have at least two points per axis".into()));
    }
    let input_point = options
        .input_point
        .clone()
        .unwrap_or_else(|| config.equilibrium_input_set.center());
    if input_point.len() != m {
        return Err(Error::dim("input linearization point"));
    }
    let grid = state_grid(state_box, options.grid, options.left_open);
    let points = grid
        .par_iter()
        .map(|x| evaluate_point(prediction, config, options, x, &input_point))
        .collect::<Result<Vec<_>>>()?;
    let min_of = |f: fn(&GridPoint) -> f64| points.iter().map(f).fold(f64::INFINITY, f64::min);
    let a7 = points.iter().all(|p| p.reachable);
    let a6 = if m == prediction.output_dim() && a7 {
        ConvexityVerdict::Implied
    } else {
        ConvexityVerdict::NotEstablished
    };
    Ok(AssumptionReport {
        a2_sigma_s: min_of(|p| p.sigma_s),
        a3_ctrb_margin: min_of(|p| p.ctrb),
        a4_sigma_underbar: min_of(|p| p.sigma_underbar),
        a5_manifold_radius: points.iter().map(|p| p.manifold_radius).fold(0.0, f64::max),
        a7_reachable: a7,
        a6,
        points,
        thresholds: options.thresholds,
    })
}

/// Lyapunov quantities at one solve instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    pub t: usize,
    pub v: f64,
    pub j_eq_lin: f64,
    pub dist_lin: f64,
    pub dist_nl: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LyapunovTrace {
    pub samples: Vec<LyapunovSample>,
}

impl LyapunovTrace {
    pub fn from_log(log: &TrajectoryLog) -> Self {
        LyapunovTrace {
            samples: log
                .solve_rows()
                .map(|(t, s)| LyapunovSample {
                    t,
                    v: s.v,
                    j_eq_lin: s.j_eq_lin,
                    dist_lin: s.dist_lin,
                    dist_nl: s.dist_nl,
                })
                .collect(),
        }
    }

    /// Samples with `t >= t0`.
    pub fn after(&self, t0: usize) -> Self {
        LyapunovTrace {
            samples: self.samples.iter().copied().filter(|s| s.t >= t0).collect(),
        }
    }

    /// `V(x_{t+step}) / V(x_t)` for consecutive solves.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.samples.windows(2).map(|w| w[1].v / w[0].v).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueBounds {
    /// `min V / dist_lin^2`
    pub c_l: f64,
    /// `max V / dist_lin^2` over samples with `dist_lin <= delta`; `None`
    /// when no sample is that close.
    pub c_u: Option<f64>,
    pub delta: f64,
}

/// Observed constants of the quadratic bounds on `V`.
pub fn value_bounds(trace: &LyapunovTrace) -> Result<ValueBounds> {
    let usable: Vec<&LyapunovSample> = trace
        .samples
        .iter()
        .filter(|s| s.v.is_finite() && s.dist_lin.is_finite())
        .collect();
    let first = usable.first().ok_or_else(|| Error::dim("empty Lyapunov trace"))?;
    let delta = 0.1 * first.dist_lin;
    let mut c_l = f64::INFINITY;
    let mut c_u: Option<f64> = None;
    for s in &usable {
        if s.dist_lin < 1e-9 {
            continue;
        }
        let ratio = s.v / (s.dist_lin * s.dist_lin);
        c_l = c_l.min(ratio);
        if s.dist_lin <= delta {
            c_u = Some(c_u.map_or(ratio, |c| c.max(ratio)));
        }
    }
    Ok(ValueBounds { c_l, c_u, delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// Largest ratio over valid pairs; `None` without valid pairs.
    pub c_v: Option<f64>,
    pub pairs: usize,
    /// `(t, t_next, ratio)` of pairs with ratio `>= 1`.
    pub violations: Vec<(usize, usize, f64)>,
}

/// Ratios `V(x_{t+step}) / V(x_t)` over consecutive solve instants whose
/// spacing is `step`, skipping pairs with `V(x_t) < 1e-10`.
pub fn contraction_check(trace: &LyapunovTrace, step: usize) -> ContractionReport {
    let mut c_v: Option<f64> = None;
    let mut pairs = 0;
    let mut violations = Vec::new();
    for w in trace.samples.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.t - a.t != step || !(a.v >= 1e-10) || !b.v.is_finite() {
            continue;
        }
        let ratio = b.v / a.v;
        pairs += 1;
        c_v = Some(c_v.map_or(ratio, |c| c.max(ratio)));
        if ratio >= 1.0 {
            violations.push((a.t, b.t, ratio));
        }
    }
    ContractionReport { c_v, pairs, violations }
}

/// Least-squares fit `values_i ~ C rho^i`, i.e. a line through
/// `ln(values_i)`. Nonpositive values are skipped.
pub fn exponential_fit(values: &[f64]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0 && v.is_finite())
        .map(|(i, v)| (i as f64, v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::dim("an exponential fit needs at least three positive points"));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok((intercept.exp(), slope.exp()))
}

/// Fit of the squared distances to the optimal reachable equilibrium over
/// solve instants from `t0` on.
pub fn distance_fit(trace: &LyapunovTrace, t0: usize) -> Result<(f64, f64)> {
    let sq: Vec<f64> = trace.after(t0).samples.iter().map(|s| s.dist_nl * s.dist_nl).collect();
    exponential_fit(&sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn double_integrator_is_controllable() {
        let a = dmatrix![1.0, 1.0; 0.0, 1.0];
        let b = dmatrix![0.0; 1.0];
        let c = controllability_matrix(&a, &b);
        assert_eq!(c, dmatrix![0.0, 1.0; 1.0, 1.0]);
        let expected = ((3.0 - 5f64.sqrt()) / 2.0).sqrt();
        assert!((sigma_min(&c) - expected).abs() < 1e-12);
    }

    #[test]
    fn geometric_sequence_fit() {
        let v: Vec<f64> = (0..20).map(|i| 4.0 * 0.5f64.powi(i)).collect();
        let (c, rho) = exponential_fit(&v).unwrap();
        assert!((c - 4.0).abs() < 1e-9);
        assert!((rho - 0.5).abs() < 1e-9);
        let (c, rho) = exponential_fit(&[2.0; 5]).unwrap();
        assert!((c - 2.0).abs() < 1e-12);
        assert!((rho - 1.0).abs() < 1e-12);
        assert!(exponential_fit(&[1.0, 0.5]).is_err());
    }

    fn sample(t: usize, v: f64, d: f64) -> LyapunovSample {
        LyapunovSample {
            t,
            v,
            j_eq_lin: 0.0,
            dist_lin: d,
            dist_nl: d,
        }
    }

    #[test]
    fn contraction_pairs() {
        let trace = LyapunovTrace {
            samples: vec![sample(0, 1.0, 1.0), sample(2, 0.5, 0.7), sample(4, 0.6, 0.6), sample(6, 0.0, 0.0), sample(8, 0.0, 0.0)],
        };
        let r = contraction_check(&trace, 2);
        // the last pair starts at V = 0 and is skipped
        assert_eq!(r.pairs, 3);
        assert_eq!(r.violations.len(), 1);
        assert!((r.c_v.unwrap() - 1.2).abs() < 1e-12);
        let still = LyapunovTrace {
            samples: vec![sample(0, 0.0, 0.0), sample(1, 0.0, 0.0)],
        };
        assert_eq!(contraction_check(&still, 1).c_v, None);
    }

    #[test]
    fn value_bound_ratios_skip_zero_distance() {
        let trace = LyapunovTrace {
            samples: vec![sample(0, 2.0, 1.0), sample(1, 0.02, 0.09), sample(2, 0.0, 0.0)],
        };
        let b = value_bounds(&trace).unwrap();
        assert!((b.c_l - 2.0).abs() < 1e-12);
        assert!((b.c_u.unwrap() - 0.02 / 0.0081).abs() < 1e-9);
        assert!(value_bounds(&LyapunovTrace::default()).is_err());
    }

    #[test]
    fn left_open_grid_skips_lower_face() {
        let g = state_grid(&BoxSet::from_slices(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 4, true);
        assert_eq!(g.len(), 16);
        assert!((g[0][0] - 0.25).abs() < 1e-15);
        assert_eq!(g[15][1], 1.0);
    }
}
