//! Plant models and their affine approximations.
//!
//! A [`SystemModel`] is a control-affine plant
//!
//! ```text
//!     x+ = f0(x) + B u
//!     y  = h0(x) + D u
//! ```
//!
//! Because the input enters affinely, the linearization at `(x~, 0)` only
//! depends on the state `x~` and reproduces the nonlinear model exactly at
//! `x = x~` for every input. Plants that are not affine in the input are
//! described by [`NonlinearPlant`] and turned into a [`SystemModel`] with
//! [`crate::augment::augment_incremental`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite_mat, ensure_finite_vec, Error, Result};

pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianField = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type InputVectorField = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type InputJacobianField =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Relative/absolute step used for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference Jacobian of `f` at `x`, with per-coordinate step
/// `max(1e-6, 1e-6 |x_i|)`.
pub fn central_difference<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = FD_STEP.max(FD_STEP * x[i].abs());
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        // actual spacing after rounding of xi +/- h
        let span = (xi + h) - (xi - h);
        cols.push((fp - fm) / span);
    }
    if cols.is_empty() {
        let rows = f(x).len();
        return DMatrix::zeros(rows, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Common interface of every plant the library simulates or linearizes.
///
/// Jacobians default to central differences; implementors override them
/// when analytic expressions are available.
pub trait Plant: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference(|xx| self.step(xx, u), x)
    }

    fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference(|uu| self.step(x, uu), u)
    }

    fn output_state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference(|xx| self.output(xx, u), x)
    }

    fn output_input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        central_difference(|uu| self.output(x, uu), u)
    }
}

/// Control-affine plant `x+ = f0(x) + B u`, `y = h0(x) + D u`.
#[derive(Clone)]
pub struct SystemModel {
    state_dim: usize,
    input_dim: usize,
    output_dim: usize,
    f0: VectorField,
    b: DMatrix<f64>,
    h0: VectorField,
    d: DMatrix<f64>,
    jacobian_f0: Option<JacobianField>,
    jacobian_h0: Option<JacobianField>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .field("b", &self.b)
            .field("d", &self.d)
            .field("analytic_jacobian_f0", &self.jacobian_f0.is_some())
            .field("analytic_jacobian_h0", &self.jacobian_h0.is_some())
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        f0: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        b: DMatrix<f64>,
        h0: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        d: DMatrix<f64>,
    ) -> Result<Self> {
        let n = b.nrows();
        let m = b.ncols();
        let p = d.nrows();
        if n == 0 || m == 0 || p == 0 {
            return Err(Error::dim("state, input and output dimensions must be positive"));
        }
        if d.ncols() != m {
            return Err(Error::dim(format!(
                "D has {} columns but B has {m}",
                d.ncols()
            )));
        }
        Ok(SystemModel {
            state_dim: n,
            input_dim: m,
            output_dim: p,
            f0: Arc::new(f0),
            b,
            h0: Arc::new(h0),
            d,
            jacobian_f0: None,
            jacobian_h0: None,
        })
    }

    /// Linear plant `x+ = A x + B u + c`, `y = C x + D u + r`.
    pub fn linear(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c_off: DVector<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        r_off: DVector<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c_off.len() != n || c.ncols() != n {
            return Err(Error::dim("inconsistent linear plant matrices"));
        }
        if c.nrows() != r_off.len() {
            return Err(Error::dim("output offset length differs from C rows"));
        }
        let (a1, a2) = (a.clone(), a);
        let (c1, c2) = (c.clone(), c);
        let (co, ro) = (c_off, r_off);
        Ok(SystemModel::new(
            move |x| &a1 * x + &co,
            b,
            move |x| &c1 * x + &ro,
            d,
        )?
        .with_jacobians(Some(Arc::new(move |_| a2.clone())), Some(Arc::new(move |_| c2.clone()))))
    }

    pub fn with_jacobians(
        mut self,
        jacobian_f0: Option<JacobianField>,
        jacobian_h0: Option<JacobianField>,
    ) -> Self {
        self.jacobian_f0 = jacobian_f0;
        self.jacobian_h0 = jacobian_h0;
        self
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn f0(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f0)(x)
    }

    pub fn h0(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.h0)(x)
    }

    pub fn has_analytic_jacobians(&self) -> bool {
        self.jacobian_f0.is_some() && self.jacobian_h0.is_some()
    }

    pub fn jacobian_f0(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobian_f0 {
            Some(j) => j(x),
            None => central_difference(|xx| (self.f0)(xx), x),
        }
    }

    pub fn jacobian_h0(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.jacobian_h0 {
            Some(j) => j(x),
            None => central_difference(|xx| (self.h0)(xx), x),
        }
    }

    /// Same model with analytic Jacobians dropped, so that linearization
    /// falls back to central differences.
    pub fn without_jacobians(&self) -> Self {
        let mut m = self.clone();
        m.jacobian_f0 = None;
        m.jacobian_h0 = None;
        m
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::dim(format!(
                "state has length {} but model expects {}",
                x.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    fn check_input(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.input_dim {
            return Err(Error::dim(format!(
                "input has length {} but model expects {}",
                u.len(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

impl Plant for SystemModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f0)(x) + &self.b * u
    }
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.h0)(x) + &self.d * u
    }
    fn state_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.jacobian_f0(x)
    }
    fn input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }
    fn output_state_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.jacobian_h0(x)
    }
    fn output_input_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.d.clone()
    }
}

/// General plant `x+ = f(x, u)`, `y = h(x, u)` without affine structure in `u`.
#[derive(Clone)]
pub struct NonlinearPlant {
    state_dim: usize,
    input_dim: usize,
    output_dim: usize,
    f: InputVectorField,
    h: InputVectorField,
    jac_fx: Option<InputJacobianField>,
    jac_fu: Option<InputJacobianField>,
    jac_hx: Option<InputJacobianField>,
    jac_hu: Option<InputJacobianField>,
}

impl fmt::Debug for NonlinearPlant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearPlant")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish_non_exhaustive()
    }
}

impl NonlinearPlant {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        output_dim: usize,
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        h: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if state_dim == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::dim("state, input and output dimensions must be positive"));
        }
        Ok(NonlinearPlant {
            state_dim,
            input_dim,
            output_dim,
            f: Arc::new(f),
            h: Arc::new(h),
            jac_fx: None,
            jac_fu: None,
            jac_hx: None,
            jac_hu: None,
        })
    }

    /// Attach analytic Jacobians `(df/dx, df/du, dh/dx, dh/du)`.
    pub fn with_jacobians(
        mut self,
        fx: InputJacobianField,
        fu: InputJacobianField,
        hx: InputJacobianField,
        hu: InputJacobianField,
    ) -> Self {
        self.jac_fx = Some(fx);
        self.jac_fu = Some(fu);
        self.jac_hx = Some(hx);
        self.jac_hu = Some(hu);
        self
    }
}

impl Plant for NonlinearPlant {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.output_dim
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.f)(x, u)
    }
    fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (self.h)(x, u)
    }
    fn state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_fx {
            Some(j) => j(x, u),
            None => central_difference(|xx| (self.f)(xx, u), x),
        }
    }
    fn input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_fu {
            Some(j) => j(x, u),
            None => central_difference(|uu| (self.f)(x, uu), u),
        }
    }
    fn output_state_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_hx {
            Some(j) => j(x, u),
            None => central_difference(|xx| (self.h)(xx, u), x),
        }
    }
    fn output_input_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match &self.jac_hu {
            Some(j) => j(x, u),
            None => central_difference(|uu| (self.h)(x, uu), u),
        }
    }
}

/// Affine model `x+ = A x + B u + e`, `y = C x + D u + r` obtained at `point`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub r: DVector<f64>,
    pub point: DVector<f64>,
}

impl Linearization {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Affine output `C x + D u + r`.
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::dim("affine output: argument dimensions"));
        }
        Ok(&self.c * x + &self.d * u + &self.r)
    }
}

/// Linearize the control-affine model at `(point, 0)`.
pub fn linearize(model: &SystemModel, point: &DVector<f64>) -> Result<Linearization> {
    model.check_state(point)?;
    let a = model.jacobian_f0(point);
    let c = model.jacobian_h0(point);
    if a.shape() != (model.state_dim, model.state_dim) {
        return Err(Error::dim("Jacobian of f0 has wrong shape"));
    }
    if c.shape() != (model.output_dim, model.state_dim) {
        return Err(Error::dim("Jacobian of h0 has wrong shape"));
    }
    ensure_finite_mat(&a, "Jacobian of f0")?;
    ensure_finite_mat(&c, "Jacobian of h0")?;
    let f0 = model.f0(point);
    let h0 = model.h0(point);
    ensure_finite_vec(&f0, "f0 at linearization point")?;
    ensure_finite_vec(&h0, "h0 at linearization point")?;
    let e = f0 - &a * point;
    let r = h0 - &c * point;
    Ok(Linearization {
        a,
        b: model.b.clone(),
        e,
        c,
        d: model.d.clone(),
        r,
        point: point.clone(),
    })
}

/// One step of the nonlinear dynamics, `f0(x) + B u`.
pub fn evaluate_step(model: &SystemModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_state(x)?;
    model.check_input(u)?;
    let next = model.step(x, u);
    ensure_finite_vec(&next, "state update")?;
    Ok(next)
}

/// One step of the affine model, `A x + B u + e`.
pub fn evaluate_affine(lin: &Linearization, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != lin.state_dim() || u.len() != lin.input_dim() {
        return Err(Error::dim(format!(
            "affine step expects (x, u) of lengths ({}, {}), got ({}, {})",
            lin.state_dim(),
            lin.input_dim(),
            x.len(),
            u.len()
        )));
    }
    Ok(&lin.a * x + &lin.b * u + &lin.e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn quadratic_model() -> SystemModel {
        SystemModel::new(
            |x| dvector![x[0] * x[0] + 0.5 * x[1], (x[0] * x[1]).sin()],
            dmatrix![0.0; 1.0],
            |x| dvector![x[1] * x[1]],
            dmatrix![0.0],
        )
        .unwrap()
    }

    #[test]
    fn affine_linearization_is_itself() {
        let m = dmatrix![0.9, 0.1; -0.2, 0.7];
        let c = dvector![0.3, -1.0];
        let model = SystemModel::new(
            {
                let (m, c) = (m.clone(), c.clone());
                move |x| &m * x + &c
            },
            dmatrix![1.0; 0.5],
            |x| dvector![x[0]],
            dmatrix![0.0],
        )
        .unwrap();
        let lin = linearize(&model, &dvector![0.4, -2.0]).unwrap();
        assert_relative_eq!(lin.a, m, epsilon = 1e-9);
        assert_relative_eq!(lin.e, c, epsilon = 1e-8);
    }

    #[test]
    fn linearization_exact_at_point() {
        let model = quadratic_model();
        let pt = dvector![0.7, -0.3];
        let lin = linearize(&model, &pt).unwrap();
        for u in [-3.0, 0.0, 1.5] {
            let u = dvector![u];
            let nl = evaluate_step(&model, &pt, &u).unwrap();
            let af = evaluate_affine(&lin, &pt, &u).unwrap();
            assert!((nl - af).amax() < 1e-12);
            let yn = model.output(&pt, &u);
            let ya = lin.output(&pt, &u).unwrap();
            assert!((yn - ya).amax() < 1e-12);
        }
    }

    #[test]
    fn identity_with_zero_input_is_fixed_point() {
        let model = SystemModel::new(
            |x| x.clone(),
            DMatrix::zeros(2, 1),
            |x| dvector![x[0]],
            dmatrix![0.0],
        )
        .unwrap();
        let x = dvector![1.25, -4.0];
        assert_eq!(evaluate_step(&model, &x, &dvector![3.0]).unwrap(), x);
    }

    #[test]
    fn zero_affine_model_gives_zero() {
        let lin = Linearization {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::zeros(2, 1),
            e: DVector::zeros(2),
            c: DMatrix::zeros(1, 2),
            d: DMatrix::zeros(1, 1),
            r: DVector::zeros(1),
            point: DVector::zeros(2),
        };
        let out = evaluate_affine(&lin, &dvector![3.0, 1.0], &dvector![2.0]).unwrap();
        assert_eq!(out, DVector::zeros(2));
    }

    #[test]
    fn dimension_errors() {
        let model = quadratic_model();
        assert!(matches!(
            linearize(&model, &dvector![1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            evaluate_step(&model, &dvector![1.0, 2.0], &dvector![1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
        let lin = linearize(&model, &dvector![0.1, 0.2]).unwrap();
        assert!(matches!(
            evaluate_affine(&lin, &dvector![1.0], &dvector![1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_jacobian_is_numerical_error() {
        let model = SystemModel::new(
            |x| dvector![x[0].sqrt()],
            dmatrix![1.0],
            |x| dvector![x[0]],
            dmatrix![0.0],
        )
        .unwrap();
        assert!(matches!(
            linearize(&model, &dvector![-1.0]),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            evaluate_step(&model, &dvector![-1.0], &dvector![0.0]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn finite_differences_match_analytic() {
        let model = quadratic_model();
        let jac = |x: &DVector<f64>| {
            dmatrix![2.0 * x[0], 0.5; x[1] * (x[0] * x[1]).cos(), x[0] * (x[0] * x[1]).cos()]
        };
        for pt in [dvector![0.7, -0.3], dvector![-1.2, 2.5], dvector![1e-3, 40.0]] {
            let fd = model.jacobian_f0(&pt);
            let exact = jac(&pt);
            let scale = exact.amax().max(1.0);
            assert!((fd - exact).amax() / scale < 1e-5);
        }
    }
}
