//! Steady states of the nonlinear plant and of its linearizations.
//!
//! Equilibria are parameterized by the equilibrium input `u_s`: for the
//! affine model `x = A x + B u + e` the state follows from `(I - A)^{-1}`,
//! for the nonlinear plant from a Newton solve of `x = f(x, u)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::model::{Linearization, Plant};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::sets::{linspace, BoxSet};

/// Threshold on `sigma_min(I - A)` below which equilibria are not unique.
pub const SINGULAR_TOL: f64 = 1e-10;
/// Threshold on `sigma_min(M)` for the steady-state output map.
pub const MAP_SINGULAR_TOL: f64 = 1e-8;
/// Residual required of nonlinear equilibria.
pub const EQUILIBRIUM_TOL: f64 = 1e-9;
/// Open-loop steps used to settle onto stable equilibria.
const SETTLE_STEPS: usize = 5000;
const NEWTON_MAX_ITER: usize = 100;
const MULTI_START: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum EquilibriumKind {
    Nonlinear,
    Linearized { point: DVector<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    pub y_s: DVector<f64>,
    pub kind: EquilibriumKind,
}

/// Output setpoint with its positive definite weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub y_r: DVector<f64>,
    pub s: DMatrix<f64>,
}

impl TargetSpec {
    pub fn new(y_r: DVector<f64>, s: DMatrix<f64>) -> Result<Self> {
        if s.shape() != (y_r.len(), y_r.len()) {
            return Err(Error::dim("S must be p x p"));
        }
        if min_eigenvalue(&s) <= 0.0 {
            return Err(Error::Config("S must be positive definite".into()));
        }
        Ok(TargetSpec { y_r, s })
    }

    /// `|| y - y_r ||_S^2`
    pub fn cost(&self, y: &DVector<f64>) -> f64 {
        let d = y - &self.y_r;
        d.dot(&(&self.s * &d))
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let (r, c) = m.shape();
    let sv = SVD::new(m.clone(), false, false).singular_values;
    if r < c {
        // fewer rows than columns: a nontrivial kernel always exists
        0.0
    } else {
        sv.min()
    }
}

/// Newton iteration on `g(x) = x - f(x, u_s)` from `x_guess`.
pub fn solve_nonlinear_equilibrium(
    plant: &dyn Plant,
    u_s: &DVector<f64>,
    x_guess: &DVector<f64>,
) -> Result<Equilibrium> {
    let n = plant.state_dim();
    if u_s.len() != plant.input_dim() || x_guess.len() != n {
        return Err(Error::dim("equilibrium input or guess has wrong length"));
    }
    let mut x = x_guess.clone();
    let residual = |x: &DVector<f64>| x - plant.step(x, u_s);
    let mut g = residual(&x);
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..NEWTON_MAX_ITER {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("equilibrium residual".into()));
        }
        let norm = g.norm();
        if norm <= 1e-2 * EQUILIBRIUM_TOL {
            break;
        }
        let jac = &eye - plant.state_jacobian(&x, u_s);
        let smin = sigma_min(&jac);
        if smin.is_nan() {
            return Err(Error::Numerical("state Jacobian along the Newton path".into()));
        }
        if !(smin >= SINGULAR_TOL) {
            return Err(Error::Singularity {
                what: "I - df/dx along the Newton path".into(),
                sigma_min: smin,
            });
        }
        let step = jac
            .lu()
            .solve(&(-&g))
            .ok_or_else(|| Error::Singularity {
                what: "I - df/dx".into(),
                sigma_min: smin,
            })?;
        // backtracking on the residual norm
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &x + &step * alpha;
            let gt = residual(&trial);
            if gt.iter().all(|v| v.is_finite()) && gt.norm() < norm {
                x = trial;
                g = gt;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if g.norm() > EQUILIBRIUM_TOL {
        return Err(Error::Convergence(format!(
            "Newton stagnated with residual {:e}",
            g.norm()
        )));
    }
    // an equilibrium with singular I - df/dx is not isolated
    let smin = sigma_min(&(&eye - plant.state_jacobian(&x, u_s)));
    if !(smin >= SINGULAR_TOL) {
        return Err(Error::Singularity {
            what: "I - df/dx at the equilibrium".into(),
            sigma_min: smin,
        });
    }
    let y_s = plant.output(&x, u_s);
    Ok(Equilibrium {
        x_s: x,
        u_s: u_s.clone(),
        y_s,
        kind: EquilibriumKind::Nonlinear,
    })
}

fn i_minus_a(lin: &Linearization) -> DMatrix<f64> {
    DMatrix::identity(lin.state_dim(), lin.state_dim()) - &lin.a
}

/// Unique equilibrium `x_s = (I - A)^{-1} (B u_s + e)` of the affine model.
pub fn linearized_equilibrium_from_input(lin: &Linearization, u_s: &DVector<f64>) -> Result<Equilibrium> {
    if u_s.len() != lin.input_dim() {
        return Err(Error::dim("equilibrium input length"));
    }
    let ima = i_minus_a(lin);
    let smin = sigma_min(&ima);
    if !(smin >= SINGULAR_TOL) {
        return Err(Error::Singularity {
            what: "I - A".into(),
            sigma_min: smin,
        });
    }
    let rhs = &lin.b * u_s + &lin.e;
    let x_s = ima.lu().solve(&rhs).ok_or_else(|| Error::Singularity {
        what: "I - A".into(),
        sigma_min: smin,
    })?;
    let y_s = &lin.c * &x_s + &lin.d * u_s + &lin.r;
    Ok(Equilibrium {
        x_s,
        u_s: u_s.clone(),
        y_s,
        kind: EquilibriumKind::Linearized {
            point: lin.point.clone(),
        },
    })
}

/// `M = [[A - I, B], [C, D]]` and the affine terms needed to invert the
/// steady-state output relation.
#[derive(Debug, Clone)]
pub struct SteadyStateMap {
    pub m: DMatrix<f64>,
    pub sigma_min: f64,
    pub e: DVector<f64>,
    pub r: DVector<f64>,
    state_dim: usize,
    point: DVector<f64>,
}

pub fn steady_state_map(lin: &Linearization) -> Result<SteadyStateMap> {
    let (n, m, p) = (lin.state_dim(), lin.input_dim(), lin.output_dim());
    let mut big = DMatrix::zeros(n + p, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(&(&lin.a - DMatrix::identity(n, n)));
    big.view_mut((0, n), (n, m)).copy_from(&lin.b);
    big.view_mut((n, 0), (p, n)).copy_from(&lin.c);
    big.view_mut((n, n), (p, m)).copy_from(&lin.d);
    if !big.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("steady-state matrix".into()));
    }
    let smin = sigma_min(&big);
    Ok(SteadyStateMap {
        m: big,
        sigma_min: smin,
        e: lin.e.clone(),
        r: lin.r.clone(),
        state_dim: n,
        point: lin.point.clone(),
    })
}

/// Steady state `(x_s, u_s)` producing output `y_s` on the linearized
/// manifold, as the least-squares solution of `M [x; u] = [-e; y_s - r]`.
pub fn apply_g_hat(map: &SteadyStateMap, y_s: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if map.sigma_min < MAP_SINGULAR_TOL {
        return Err(Error::Singularity {
            what: "steady-state map [[A - I, B], [C, D]]".into(),
            sigma_min: map.sigma_min,
        });
    }
    let n = map.state_dim;
    if y_s.len() != map.r.len() {
        return Err(Error::dim("output length"));
    }
    let mut rhs = DVector::zeros(map.m.nrows());
    rhs.rows_mut(0, n).copy_from(&(-&map.e));
    rhs.rows_mut(n, y_s.len()).copy_from(&(y_s - &map.r));
    let svd = SVD::new(map.m.clone(), true, true);
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let x = sol.rows(0, n).into_owned();
    let u = sol.rows(n, sol.len() - n).into_owned();
    Ok((x, u))
}

impl SteadyStateMap {
    pub fn point(&self) -> &DVector<f64> {
        &self.point
    }
}

#[derive(Debug, Clone)]
pub struct ReachableEquilibrium {
    pub equilibrium: Equilibrium,
    /// `|| y_s - y_r ||_S^2` at the optimum.
    pub cost: f64,
}

/// Best steady-state output of the linearized model, `min || y_s - y_r ||_S^2`
/// over `u_s` in `u_set`, with `x_s` eliminated through `(I - A)^{-1}`.
pub fn optimal_reachable_equilibrium_lin(
    lin: &Linearization,
    target: &TargetSpec,
    u_set: &BoxSet,
) -> Result<ReachableEquilibrium> {
    let (n, m, p) = (lin.state_dim(), lin.input_dim(), lin.output_dim());
    if u_set.dim() != m || target.y_r.len() != p {
        return Err(Error::dim("equilibrium input set or target"));
    }
    let ima = i_minus_a(lin);
    let smin = sigma_min(&ima);
    if !(smin >= SINGULAR_TOL) {
        return Err(Error::Singularity {
            what: "I - A".into(),
            sigma_min: smin,
        });
    }
    let lu = ima.lu();
    let sol_b = lu.solve(&lin.b).ok_or_else(|| Error::Singularity {
        what: "I - A".into(),
        sigma_min: smin,
    })?;
    let sol_e = lu.solve(&lin.e).expect("checked nonsingular");
    debug_assert_eq!(sol_b.nrows(), n);
    // y_s = G u_s + c
    let gain = &lin.c * &sol_b + &lin.d;
    let offset = &lin.c * &sol_e + &lin.r;
    let dev = &offset - &target.y_r;
    let h = (gain.transpose() * &target.s * &gain) * 2.0;
    let h = (&h + h.transpose()) * 0.5;
    let g = (gain.transpose() * &target.s * &dev) * 2.0;
    let (a_in, b_in) = u_set.as_inequalities();
    let qp = QpProblem::new(h, g, DMatrix::zeros(0, m), DVector::zeros(0), a_in, b_in)?
        .with_constant(dev.dot(&(&target.s * &dev)));
    let sol = solve_qp(&qp, None)?;
    match sol.status {
        QpStatus::Optimal => {}
        QpStatus::Infeasible => {
            return Err(Error::infeasible_at(&lin.point));
        }
        QpStatus::MaxIterations => {
            return Err(Error::Convergence("equilibrium QP iteration limit".into()));
        }
    }
    let u_s = u_set.project(&sol.z);
    let eq = linearized_equilibrium_from_input(lin, &u_s)?;
    let cost = target.cost(&eq.y_s);
    Ok(ReachableEquilibrium { equilibrium: eq, cost })
}

#[derive(Debug, Clone)]
pub struct NonlinearOptimum {
    pub equilibrium: Equilibrium,
    pub cost: f64,
    /// Two starts reached (numerically) the same cost at inputs more than
    /// `1e-3` apart.
    pub non_unique: bool,
    pub successful_starts: usize,
}

/// Best steady-state output of the nonlinear plant, found by local
/// Gauss-Newton descent in `u_s` from a grid of starts. Each start is
/// combined with every entry of `state_guesses`, and with the states the
/// plant settles to from them, to seed the equilibrium solve, so plants
/// with several equilibrium branches are covered.
pub fn optimal_reachable_equilibrium_nonlinear(
    plant: &dyn Plant,
    target: &TargetSpec,
    u_set: &BoxSet,
    state_guesses: &[DVector<f64>],
) -> Result<NonlinearOptimum> {
    let m = plant.input_dim();
    if u_set.dim() != m || target.y_r.len() != plant.output_dim() {
        return Err(Error::dim("equilibrium input set or target"));
    }
    if state_guesses.is_empty() {
        return Err(Error::dim("at least one state guess is required"));
    }
    let starts = input_grid(u_set, MULTI_START);
    let mut results: Vec<(Equilibrium, f64)> = Vec::new();
    for u0 in &starts {
        // open-loop settling reaches stable branches that Newton from the
        // given guesses may miss
        let settled: Vec<DVector<f64>> = state_guesses.iter().filter_map(|g| settle(plant, u0, g)).collect();
        for guess in state_guesses.iter().chain(settled.iter()) {
            let Ok(eq) = solve_nonlinear_equilibrium(plant, u0, guess) else {
                continue;
            };
            if let Ok(local) = descend(plant, target, u_set, eq) {
                results.push(local);
            }
        }
    }
    if results.is_empty() {
        return Err(Error::Convergence(
            "no multi-start run produced an equilibrium".into(),
        ));
    }
    // best cost; ties broken by first occurrence, which is deterministic
    let best_idx = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .expect("nonempty");
    let (best, best_cost) = results[best_idx].clone();
    let non_unique = results.iter().any(|(eq, c)| {
        (c - best_cost).abs() < 1e-6 && (&eq.u_s - &best.u_s).amax() > 1e-3
    });
    Ok(NonlinearOptimum {
        equilibrium: best,
        cost: best_cost,
        non_unique,
        successful_starts: results.len(),
    })
}

/// State reached by holding `u` from `x0` for up to `SETTLE_STEPS` steps,
/// if it stays finite.
fn settle(plant: &dyn Plant, u: &DVector<f64>, x0: &DVector<f64>) -> Option<DVector<f64>> {
    let mut x = x0.clone();
    for _ in 0..SETTLE_STEPS {
        let next = plant.step(&x, u);
        if !next.iter().all(|v| v.is_finite()) {
            return None;
        }
        let moved = (&next - &x).amax();
        x = next;
        if moved < 1e-12 {
            break;
        }
    }
    Some(x)
}

/// Up to `count` grid points in `set`, `ceil(count^(1/m))` per axis.
fn input_grid(set: &BoxSet, count: usize) -> Vec<DVector<f64>> {
    let m = set.dim();
    let per_axis = ((count as f64).powf(1.0 / m as f64).round() as usize).max(2);
    let mut pts = if m == 1 {
        linspace(set.lower[0], set.upper[0], count)
            .into_iter()
            .map(|v| DVector::from_element(1, v))
            .collect()
    } else {
        set.grid(per_axis)
    };
    pts.truncate(count.max(1));
    pts
}

/// Sensitivity `dy_s/du_s` along the nonlinear equilibrium branch.
fn output_sensitivity(plant: &dyn Plant, x: &DVector<f64>, u: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = plant.state_dim();
    let ima = DMatrix::identity(n, n) - plant.state_jacobian(x, u);
    let dx_du = ima.lu().solve(&plant.input_jacobian(x, u))?;
    Some(plant.output_state_jacobian(x, u) * dx_du + plant.output_input_jacobian(x, u))
}

/// Projected Levenberg-Marquardt descent on `|| y_s(u) - y_r ||_S^2`.
fn descend(
    plant: &dyn Plant,
    target: &TargetSpec,
    u_set: &BoxSet,
    start: Equilibrium,
) -> Result<(Equilibrium, f64)> {
    let m = plant.input_dim();
    let mut eq = start;
    let mut cost = target.cost(&eq.y_s);
    let mut damping = 1e-6;
    for _ in 0..200 {
        if cost <= 1e-24 {
            break;
        }
        let Some(jac) = output_sensitivity(plant, &eq.x_s, &eq.u_s) else {
            break;
        };
        let dev = &eq.y_s - &target.y_r;
        let jts = jac.transpose() * &target.s;
        let normal = &jts * &jac;
        let scale = normal.diagonal().amax().max(1e-12);
        let grad = &jts * &dev;
        let mut improved = false;
        while damping < 1e12 {
            let h = (&normal + DMatrix::identity(m, m) * (damping * scale)) * 2.0;
            let g = &grad * 2.0;
            let lower = &u_set.lower - &eq.u_s;
            let upper = &u_set.upper - &eq.u_s;
            let step_box = BoxSet::new(lower.inf(&upper), upper.sup(&lower))?;
            let (a_in, b_in) = step_box.as_inequalities();
            let qp = QpProblem::new(
                (&h + h.transpose()) * 0.5,
                g,
                DMatrix::zeros(0, m),
                DVector::zeros(0),
                a_in,
                b_in,
            )?;
            let sol = solve_qp(&qp, None)?;
            if sol.status != QpStatus::Optimal || sol.z.amax() < 1e-15 {
                damping *= 10.0;
                if sol.z.amax() < 1e-15 {
                    break;
                }
                continue;
            }
            let u_new = u_set.project(&(&eq.u_s + &sol.z));
            match solve_nonlinear_equilibrium(plant, &u_new, &eq.x_s) {
                Ok(trial) if (&trial.x_s - &eq.x_s).amax() < 0.5 => {
                    let c = target.cost(&trial.y_s);
                    if c < cost {
                        let small = (&trial.u_s - &eq.u_s).amax() < 1e-13;
                        eq = trial;
                        cost = c;
                        damping = (damping / 10.0).max(1e-9);
                        improved = !small;
                        break;
                    }
                    damping *= 10.0;
                }
                _ => damping *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    Ok((eq, cost))
}
