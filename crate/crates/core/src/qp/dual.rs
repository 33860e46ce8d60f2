//! Goldfarb-Idnani dual active-set method for strictly convex QPs
//!
//! ```text
//!     minimize 1/2 w' G w + a' w   subject to   C w <= b
//! ```
//!
//! The iterate is always the minimizer over the current working set, with
//! nonnegative multipliers; violated constraints are added one at a time
//! and constraints whose multiplier would turn negative are dropped. The
//! step directions are recomputed from a QR factorization of `L^{-1} N`
//! (with `G = L L'`) instead of being updated incrementally, which is
//! plenty fast for the problem sizes met here.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, QR};

use crate::error::{Error, Result};

pub(crate) enum Outcome {
    Optimal { w: DVector<f64>, multipliers: DVector<f64> },
    Infeasible,
    MaxIterations { w: DVector<f64>, multipliers: DVector<f64> },
}

pub struct DualActiveSet {
    a: DVector<f64>,
    c: DMatrix<f64>,
    b: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    row_norms: Vec<f64>,
    tol: f64,
    max_iterations: usize,
    iterations: usize,
}

struct WorkingSet {
    w: DVector<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
}

impl DualActiveSet {
    /// `G` is made positive definite with a tiny diagonal shift when it is
    /// only semidefinite.
    pub fn new(
        g: DMatrix<f64>,
        a: DVector<f64>,
        c: DMatrix<f64>,
        b: DVector<f64>,
        tol: f64,
        max_iterations: usize,
    ) -> Result<Self> {
        let k = a.len();
        let scale = g.diagonal().amax().max(1.0);
        let mut shift = 0.0;
        let chol = loop {
            let mut gg = g.clone();
            for i in 0..k {
                gg[(i, i)] += shift;
            }
            if let Some(ch) = Cholesky::new(gg) {
                break ch;
            }
            shift = if shift == 0.0 { 1e-12 * scale } else { shift * 100.0 };
            if shift > 1e-4 * scale {
                return Err(Error::Numerical(
                    "reduced Hessian is not positive definite".into(),
                ));
            }
        };
        let row_norms = (0..c.nrows()).map(|i| c.row(i).norm()).collect();
        Ok(DualActiveSet {
            a,
            c,
            b,
            chol,
            row_norms,
            tol,
            max_iterations,
            iterations: 0,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    fn l_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l_dirty().solve_lower_triangular(v).expect("cholesky factor is nonsingular")
    }

    fn l_solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.l_dirty().solve_lower_triangular(m).expect("cholesky factor is nonsingular")
    }

    fn lt_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(v)
            .expect("cholesky factor is nonsingular")
    }

    fn max_row_norm(&self) -> f64 {
        self.row_norms.iter().copied().fold(0.0, f64::max)
    }

    /// Rows that do not depend on `w` at all.
    fn is_constant_row(&self, i: usize) -> bool {
        self.row_norms[i] <= 1e-13 * self.max_row_norm().max(1.0)
    }

    /// Scaled violation of constraint `i` at `w`.
    fn violation(&self, i: usize, w: &DVector<f64>) -> f64 {
        let s = self.c.row(i).dot(&w.transpose()) - self.b[i];
        s / self.row_norms[i]
    }

    /// `L^{-1} N` with `N = -C_A'`.
    fn transformed_normals(&self, active: &[usize]) -> DMatrix<f64> {
        let k = self.a.len();
        let mut n = DMatrix::zeros(k, active.len());
        for (col, &i) in active.iter().enumerate() {
            n.set_column(col, &(-self.c.row(i).transpose()));
        }
        self.l_solve_mat(&n)
    }

    /// Minimizer with the given constraints held as equalities.
    fn equality_minimizer(&self, active: &[usize]) -> Option<(DVector<f64>, Vec<f64>)> {
        let a_t = self.l_solve(&self.a);
        if active.is_empty() {
            return Some((-self.lt_solve(&a_t), Vec::new()));
        }
        // With Nt = L^{-1} N: w = L^{-T}(Nt u - a_t) and -C_A w = -b_A
        // give Nt'Nt u = Nt' a_t - b_A.
        let nt = self.transformed_normals(active);
        let b_a = DVector::from_iterator(active.len(), active.iter().map(|&i| self.b[i]));
        let rhs = nt.transpose() * &a_t - b_a;
        let qr = QR::new(nt.clone());
        let r = qr.r();
        let y = r.transpose().solve_lower_triangular(&rhs)?;
        let u = r.solve_upper_triangular(&y)?;
        if u.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let w = self.lt_solve(&(&nt * &u - a_t));
        Some((w, u.iter().copied().collect()))
    }

    fn independent_of(&self, active: &[usize], candidate: usize) -> bool {
        let n_p = self.l_solve(&(-self.c.row(candidate).transpose()));
        if active.is_empty() {
            return n_p.norm() > 0.0;
        }
        let nt = self.transformed_normals(active);
        let r = least_squares(&nt, &n_p);
        (&n_p - &nt * r).norm() > 1e-9 * n_p.norm()
    }

    fn warm_working_set(&self, w_guess: &DVector<f64>) -> Option<WorkingSet> {
        let mut active = Vec::new();
        for i in 0..self.c.nrows() {
            if self.is_constant_row(i) {
                continue;
            }
            let s = self.violation(i, w_guess);
            if s.abs() <= 1e-7 * (1.0 + self.b[i].abs() / self.row_norms[i])
                && active.len() < self.a.len()
                && self.independent_of(&active, i)
            {
                active.push(i);
            }
        }
        let (w, mult) = self.equality_minimizer(&active)?;
        if mult.iter().any(|u| *u < 0.0) {
            return None;
        }
        Some(WorkingSet { w, active, mult })
    }

    pub(crate) fn solve(&mut self, warm: Option<&DVector<f64>>) -> Outcome {
        let r = self.c.nrows();
        for i in 0..r {
            if self.is_constant_row(i) && self.b[i] < -self.tol * (1.0 + self.b[i].abs()) {
                return Outcome::Infeasible;
            }
        }

        let mut ws = warm
            .and_then(|w| self.warm_working_set(w))
            .unwrap_or_else(|| {
                let (w, _) = self
                    .equality_minimizer(&[])
                    .expect("unconstrained minimizer exists");
                WorkingSet {
                    w,
                    active: Vec::new(),
                    mult: Vec::new(),
                }
            });

        loop {
            // most violated constraint
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..r {
                if self.is_constant_row(i) || ws.active.contains(&i) {
                    continue;
                }
                let v = self.violation(i, &ws.w);
                if v > self.tol * (1.0 + self.b[i].abs() / self.row_norms[i])
                    && worst.is_none_or(|(_, best)| v > best)
                {
                    worst = Some((i, v));
                }
            }
            let Some((p, _)) = worst else {
                self.polish(&mut ws);
                return Outcome::Optimal {
                    w: ws.w.clone(),
                    multipliers: self.expand(&ws),
                };
            };

            let mut u_p = 0.0;
            loop {
                self.iterations += 1;
                if self.iterations > self.max_iterations {
                    return Outcome::MaxIterations {
                        w: ws.w.clone(),
                        multipliers: self.expand(&ws),
                    };
                }
                let n_p = self.l_solve(&(-self.c.row(p).transpose()));
                let (z, dual_dir) = if ws.active.is_empty() {
                    (n_p.clone(), DVector::zeros(0))
                } else {
                    let nt = self.transformed_normals(&ws.active);
                    let rr = least_squares(&nt, &n_p);
                    (&n_p - &nt * &rr, rr)
                };
                // largest dual step keeping the active multipliers >= 0
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for (j, rj) in dual_dir.iter().enumerate() {
                    if *rj > 1e-14 {
                        let t = ws.mult[j] / rj;
                        if t < t1 {
                            t1 = t;
                            drop = Some(j);
                        }
                    }
                }
                let z_norm_sq = z.norm_squared();
                let dependent = z.norm() <= 1e-10 * n_p.norm();
                if dependent {
                    let Some(jdrop) = drop else {
                        return Outcome::Infeasible;
                    };
                    for (j, rj) in dual_dir.iter().enumerate() {
                        ws.mult[j] -= t1 * rj;
                    }
                    u_p += t1;
                    ws.active.remove(jdrop);
                    ws.mult.remove(jdrop);
                    continue;
                }
                let primal_dir = self.lt_solve(&z);
                let s = self.c.row(p).dot(&ws.w.transpose()) - self.b[p];
                let t2 = s / z_norm_sq;
                let t = t1.min(t2);
                ws.w += &primal_dir * t;
                for (j, rj) in dual_dir.iter().enumerate() {
                    ws.mult[j] -= t * rj;
                }
                u_p += t;
                if t2 <= t1 {
                    ws.active.push(p);
                    ws.mult.push(u_p);
                    break;
                }
                let jdrop = drop.expect("finite t1 has a blocking index");
                ws.active.remove(jdrop);
                ws.mult.remove(jdrop);
            }
        }
    }

    /// Re-solve the equality problem on the final working set to remove
    /// the rounding accumulated by the updates.
    fn polish(&self, ws: &mut WorkingSet) {
        let Some((w, mult)) = self.equality_minimizer(&ws.active) else {
            return;
        };
        let dual_ok = mult.iter().all(|u| *u >= -1e-10 * (1.0 + u.abs()));
        let primal_ok = (0..self.c.nrows()).all(|i| {
            self.is_constant_row(i)
                || self.violation(i, &w) <= self.tol * (1.0 + self.b[i].abs() / self.row_norms[i])
        });
        if dual_ok && primal_ok {
            ws.w = w;
            ws.mult = mult.into_iter().map(|u| u.max(0.0)).collect();
        }
    }

    fn expand(&self, ws: &WorkingSet) -> DVector<f64> {
        let mut mu = DVector::zeros(self.c.nrows());
        for (&i, &u) in ws.active.iter().zip(ws.mult.iter()) {
            mu[i] = u;
        }
        mu
    }
}

/// argmin ||M x - v|| for full-column-rank `M`.
fn least_squares(m: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let qr = QR::new(m.clone());
    let qtv = {
        let mut t = v.clone();
        qr.q_tr_mul(&mut t);
        t.rows(0, m.ncols()).into_owned()
    };
    qr.r()
        .solve_upper_triangular(&qtv)
        .unwrap_or_else(|| DVector::zeros(m.ncols()))
}
