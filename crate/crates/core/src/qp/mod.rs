//! Dense convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 z' H z + g' z + c
//!     subject to  A_eq z  = b_eq
//!                 A_in z <= b_in
//! ```
//!
//! Equality constraints are eliminated with an orthonormal null-space basis
//! and the remaining inequality-constrained problem is solved with the
//! Goldfarb-Idnani dual active-set method. Equalities are therefore met to
//! rounding error, which the closed loop relies on: the first predicted
//! state must coincide with the true successor state.

mod dual;
mod nullspace;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub use dual::DualActiveSet;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    /// Constant added to the objective; does not affect the minimizer.
    pub constant: f64,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpProblem {
    /// Build and validate a problem. `H` must be symmetric positive
    /// semidefinite and there may be no more equality rows than variables.
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
    ) -> Result<Self> {
        let p = QpProblem {
            h,
            g,
            constant: 0.0,
            a_eq,
            b_eq,
            a_in,
            b_in,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unconstrained problem.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        let d = g.len();
        Self::new(
            h,
            g,
            DMatrix::zeros(0, d),
            DVector::zeros(0),
            DMatrix::zeros(0, d),
            DVector::zeros(0),
        )
    }

    pub fn with_constant(mut self, constant: f64) -> Self {
        self.constant = constant;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn num_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn num_in(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z) + self.constant
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.g.len();
        if self.h.shape() != (d, d) {
            return Err(Error::dim(format!(
                "H is {:?}, expected ({d}, {d})",
                self.h.shape()
            )));
        }
        if self.a_eq.ncols() != d || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::dim("equality block shape"));
        }
        if self.a_in.ncols() != d || self.a_in.nrows() != self.b_in.len() {
            return Err(Error::dim("inequality block shape"));
        }
        if self.a_eq.nrows() > d {
            return Err(Error::dim(format!(
                "{} equality rows exceed {d} variables",
                self.a_eq.nrows()
            )));
        }
        let finite = self.h.iter().all(|v| v.is_finite())
            && self.g.iter().all(|v| v.is_finite())
            && self.a_eq.iter().all(|v| v.is_finite())
            && self.b_eq.iter().all(|v| v.is_finite())
            && self.a_in.iter().all(|v| v.is_finite())
            && self.b_in.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("QP data".into()));
        }
        let scale = self.h.amax().max(1.0);
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Numerical(format!("H is not symmetric ({asym:e})")));
        }
        if d > 0 {
            let eig = SymmetricEigen::new(self.h.clone()).eigenvalues;
            let min = eig.min();
            if min < -1e-10 * scale {
                return Err(Error::Numerical(format!(
                    "H is not positive semidefinite (eigenvalue {min:e})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max_iterations",
        }
    }
}

impl std::str::FromStr for QpStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(QpStatus::Optimal),
            "infeasible" => Ok(QpStatus::Infeasible),
            "max_iterations" => Ok(QpStatus::MaxIterations),
            other => Err(Error::Config(format!("unknown QP status '{other}'"))),
        }
    }
}

/// KKT residuals of a primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `|| H z + g + A_eq' lambda + A_in' mu ||_inf`
    pub stationarity: f64,
    /// `|| A_eq z - b_eq ||_inf`
    pub primal_eq: f64,
    /// `max(0, max_i (A_in z - b_in)_i)`
    pub primal_in: f64,
    /// `max_i |mu_i (A_in z - b_in)_i|`
    pub complementarity: f64,
    /// `min_i mu_i` (zero when there are no inequalities)
    pub dual_min: f64,
    pub dual_feasible: bool,
}

impl KktResiduals {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_in)
            .max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_residual() <= tol && self.dual_feasible
    }
}

/// Residuals of the KKT conditions at `(z, lambda, mu)`.
pub fn verify_kkt(
    problem: &QpProblem,
    z: &DVector<f64>,
    eq_multipliers: &DVector<f64>,
    in_multipliers: &DVector<f64>,
) -> KktResiduals {
    let mut grad = &problem.h * z + &problem.g;
    if problem.num_eq() > 0 {
        grad += problem.a_eq.transpose() * eq_multipliers;
    }
    if problem.num_in() > 0 {
        grad += problem.a_in.transpose() * in_multipliers;
    }
    let primal_eq = if problem.num_eq() > 0 {
        (&problem.a_eq * z - &problem.b_eq).amax()
    } else {
        0.0
    };
    let (primal_in, complementarity, dual_min) = if problem.num_in() > 0 {
        let slack = &problem.a_in * z - &problem.b_in;
        let viol = slack.max().max(0.0);
        let comp = slack
            .iter()
            .zip(in_multipliers.iter())
            .map(|(s, m)| (s * m).abs())
            .fold(0.0, f64::max);
        (viol, comp, in_multipliers.min())
    } else {
        (0.0, 0.0, 0.0)
    };
    KktResiduals {
        stationarity: grad.amax(),
        primal_eq,
        primal_in,
        complementarity,
        dual_min,
        dual_feasible: dual_min >= -1e-8,
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub solve_time: Duration,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Feasibility tolerance on (scaled) constraint violations.
    pub feasibility_tol: f64,
    /// Relative tolerance of the KKT check, `tol * (1 + ||g||_inf)`.
    pub kkt_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            max_iterations: 10_000,
            feasibility_tol: 1e-9,
            kkt_tol: 1e-6,
        }
    }
}

/// Reusable solver. Holds only settings and counters, so one instance per
/// thread is enough.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    solves: usize,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        QpSolver { settings, solves: 0 }
    }

    pub fn solves(&self) -> usize {
        self.solves
    }

    pub fn solve(&mut self, problem: &QpProblem, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
        self.solves += 1;
        solve_with(problem, warm_start, &self.settings)
    }
}

/// Solve with default settings.
pub fn solve_qp(problem: &QpProblem, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
    solve_with(problem, warm_start, &QpSettings::default())
}

fn solve_with(
    problem: &QpProblem,
    warm_start: Option<&DVector<f64>>,
    settings: &QpSettings,
) -> Result<QpSolution> {
    let started = Instant::now();
    problem.validate()?;
    let d = problem.dim();
    if let Some(w) = warm_start {
        if w.len() != d {
            return Err(Error::dim("warm start length"));
        }
    }

    let infeasible = |iterations: usize| QpSolution {
        z: DVector::zeros(d),
        status: QpStatus::Infeasible,
        objective: f64::INFINITY,
        eq_multipliers: DVector::zeros(problem.num_eq()),
        in_multipliers: DVector::zeros(problem.num_in()),
        kkt: KktResiduals::default(),
        iterations,
        solve_time: started.elapsed(),
    };

    let space = match nullspace::EqualitySpace::new(&problem.a_eq, &problem.b_eq, settings.feasibility_tol) {
        Some(s) => s,
        None => return Ok(infeasible(0)),
    };

    // reduced problem in w, z = z0 + Z w
    let z0 = &space.particular;
    let basis = &space.basis;
    let hz0 = &problem.h * z0;
    let grad0 = &hz0 + &problem.g;
    let hb = &problem.h * basis;
    let reduced_h = {
        let m = basis.transpose() * &hb;
        (&m + m.transpose()) * 0.5
    };
    let reduced_g = basis.transpose() * &grad0;
    let reduced_a = &problem.a_in * basis;
    let reduced_b = &problem.b_in - &problem.a_in * z0;

    let warm_w = warm_start.map(|w| basis.transpose() * (w - z0));

    let mut solver = DualActiveSet::new(
        reduced_h,
        reduced_g,
        reduced_a,
        reduced_b,
        settings.feasibility_tol,
        settings.max_iterations,
    )?;
    let outcome = solver.solve(warm_w.as_ref());

    let (w, mu, status) = match outcome {
        dual::Outcome::Optimal { w, multipliers } => (w, multipliers, QpStatus::Optimal),
        dual::Outcome::Infeasible => return Ok(infeasible(solver.iterations())),
        dual::Outcome::MaxIterations { w, multipliers } => (w, multipliers, QpStatus::MaxIterations),
    };

    let z = z0 + basis * &w;
    let mut residual_grad = &problem.h * &z + &problem.g;
    if problem.num_in() > 0 {
        residual_grad += problem.a_in.transpose() * &mu;
    }
    let lambda = space.equality_multipliers(&residual_grad);
    let kkt = verify_kkt(problem, &z, &lambda, &mu);
    let objective = problem.objective(&z);
    Ok(QpSolution {
        z,
        status,
        objective,
        eq_multipliers: lambda,
        in_multipliers: mu,
        kkt,
        iterations: solver.iterations(),
        solve_time: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn kkt_tol(p: &QpProblem) -> f64 {
        1e-6 * (1.0 + p.g.amax())
    }

    #[test]
    fn unconstrained_minimum_with_constant() {
        // (z - 1)^2 = z^2 - 2 z + 1
        let p = QpProblem::unconstrained(dmatrix![2.0], dvector![-2.0])
            .unwrap()
            .with_constant(1.0);
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-12);
        assert!(s.objective.abs() < 1e-12);
    }

    #[test]
    fn active_lower_bound() {
        // min z^2 s.t. z >= 1
        let p = QpProblem::new(
            dmatrix![2.0],
            dvector![0.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            dmatrix![-1.0],
            dvector![-1.0],
        )
        .unwrap();
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-12);
        assert!((s.in_multipliers[0] - 2.0).abs() < 1e-10);
        assert!(s.kkt.within(kkt_tol(&p)));
    }

    #[test]
    fn equality_only_matches_direct_kkt_solve() {
        let h = dmatrix![4.0, 1.0, 0.0; 1.0, 3.0, 0.5; 0.0, 0.5, 2.0];
        let g = dvector![1.0, -2.0, 0.5];
        let a = dmatrix![1.0, 1.0, 1.0];
        let b = dvector![2.0];
        let p = QpProblem::new(
            h.clone(),
            g.clone(),
            a.clone(),
            b.clone(),
            DMatrix::zeros(0, 3),
            DVector::zeros(0),
        )
        .unwrap();
        let s = solve_qp(&p, None).unwrap();
        let mut kkt = DMatrix::zeros(4, 4);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&h);
        kkt.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
        kkt.view_mut((3, 0), (1, 3)).copy_from(&a);
        let rhs = dvector![-g[0], -g[1], -g[2], b[0]];
        let sol = kkt.lu().solve(&rhs).unwrap();
        for i in 0..3 {
            assert!((s.z[i] - sol[i]).abs() < 1e-9);
        }
        assert!((s.eq_multipliers[0] - sol[3]).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_box() {
        // z <= 0 and z >= 1
        let p = QpProblem::new(
            dmatrix![1.0],
            dvector![0.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            dmatrix![1.0; -1.0],
            dvector![0.0, -1.0],
        )
        .unwrap();
        assert_eq!(solve_qp(&p, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn detects_inconsistent_equalities() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            dmatrix![1.0, 1.0; 2.0, 2.0],
            dvector![1.0, 3.0],
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        assert_eq!(solve_qp(&p, None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_consistent_equalities() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            dmatrix![1.0, 1.0; 2.0, 2.0],
            dvector![1.0, 2.0],
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z - dvector![0.5, 0.5]).amax() < 1e-12);
        assert!(s.kkt.within(1e-9));
    }

    #[test]
    fn semidefinite_hessian_strictly_convex_on_nullspace() {
        // min (z1 - 3)^2 s.t. z1 - z2 = 0, z2 <= 1
        let p = QpProblem::new(
            dmatrix![2.0, 0.0; 0.0, 0.0],
            dvector![-6.0, 0.0],
            dmatrix![1.0, -1.0],
            dvector![0.0],
            dmatrix![0.0, 1.0],
            dvector![1.0],
        )
        .unwrap();
        let s = solve_qp(&p, None).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z - dvector![1.0, 1.0]).amax() < 1e-10);
        assert!(s.kkt.within(kkt_tol(&p)));
    }

    #[test]
    fn rejects_indefinite_or_asymmetric_hessian() {
        let bad = QpProblem::unconstrained(dmatrix![1.0, 0.0; 0.0, -1.0], DVector::zeros(2));
        assert!(matches!(bad, Err(Error::Numerical(_))));
        let asym = QpProblem::unconstrained(dmatrix![1.0, 0.5; 0.0, 1.0], DVector::zeros(2));
        assert!(matches!(asym, Err(Error::Numerical(_))));
        let over = QpProblem::new(
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0; 1.0],
            dvector![1.0, 1.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        );
        assert!(matches!(over, Err(Error::Dimension(_))));
    }

    #[test]
    fn perturbed_solution_has_stationarity_residual() {
        let p = QpProblem::new(
            dmatrix![3.0, 1.0; 1.0, 2.0],
            dvector![-1.0, 1.0],
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            dmatrix![1.0, 1.0],
            dvector![10.0],
        )
        .unwrap();
        let s = solve_qp(&p, None).unwrap();
        assert!(s.kkt.within(1e-6));
        let moved = &s.z + dvector![1e-2, 0.0];
        let r = verify_kkt(&p, &moved, &s.eq_multipliers, &s.in_multipliers);
        assert!(r.stationarity > 1e-4);
    }

    #[test]
    fn wrong_sign_multiplier_flags_dual_infeasibility() {
        let p = QpProblem::new(
            dmatrix![2.0],
            dvector![0.0],
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            dmatrix![-1.0],
            dvector![-1.0],
        )
        .unwrap();
        let r = verify_kkt(&p, &dvector![1.0], &DVector::zeros(0), &dvector![-2.0]);
        assert!(!r.dual_feasible);
        assert!(r.dual_min < 0.0);
    }

    #[test]
    fn warm_start_reproduces_cold_solution() {
        let p = QpProblem::new(
            dmatrix![2.0, 0.5; 0.5, 1.0],
            dvector![-4.0, -4.0],
            dmatrix![1.0, -1.0],
            dvector![0.25],
            dmatrix![1.0, 0.0; 0.0, 1.0],
            dvector![1.0, 1.0],
        )
        .unwrap();
        let cold = solve_qp(&p, None).unwrap();
        let warm = solve_qp(&p, Some(&cold.z)).unwrap();
        assert!((cold.objective - warm.objective).abs() <= 1e-7 * (1.0 + cold.objective.abs()));
        let bad_guess = solve_qp(&p, Some(&dvector![-5.0, 7.0])).unwrap();
        assert!((cold.objective - bad_guess.objective).abs() <= 1e-7 * (1.0 + cold.objective.abs()));
    }
}
