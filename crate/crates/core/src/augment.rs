//! Incremental-input augmentation for plants that are not control-affine.
//!
//! With `z = [x; u]` and the new input `du`, the augmented dynamics
//! `z+ = [f(x, u); a u + du]` are affine in `du`, so the linearization-based
//! controller applies. The applied input becomes part of the state and the
//! input box turns into bounds on that state slice.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Linearization, Plant, SystemModel};
use crate::sets::BoxSet;

#[derive(Clone)]
pub struct AugmentedModel {
    /// Control-affine model in `z = [x; u]` with input `du`.
    pub model: SystemModel,
    pub base: Arc<dyn Plant>,
    pub a: f64,
    /// Bounds on the input slice of `z`.
    pub input_set: BoxSet,
    /// Optional bounds on the increment `du`.
    pub increment_set: Option<BoxSet>,
}

impl std::fmt::Debug for AugmentedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AugmentedModel")
            .field("base_state_dim", &self.base.state_dim())
            .field("input_dim", &self.base.input_dim())
            .field("a", &self.a)
            .field("input_set", &self.input_set)
            .field("increment_set", &self.increment_set)
            .finish()
    }
}

impl AugmentedModel {
    pub fn base_state_dim(&self) -> usize {
        self.base.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    /// `z = [x; u]`.
    pub fn join(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.base_state_dim();
        let mut z = DVector::zeros(n + u.len());
        z.rows_mut(0, n).copy_from(x);
        z.rows_mut(n, u.len()).copy_from(u);
        z
    }

    /// Split `z` into the plant state and the currently applied input.
    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.base_state_dim();
        (z.rows(0, n).into_owned(), z.rows(n, z.len() - n).into_owned())
    }

    /// Equilibrium-level linearization `x+ = A_xx x + A_xu u + e_x`,
    /// `y = C_x x + C_u u + r` of the base plant at the same point. The
    /// augmented `I - A` is singular for `a = 1`; this reduced model is
    /// what equilibrium computations use instead.
    pub fn reduce(&self, lin: &Linearization) -> Result<Linearization> {
        reduce_linearization(lin, self.base_state_dim())
    }
}

/// Build the augmented model. `a` must satisfy `|a| <= 1`.
pub fn augment_incremental(
    plant: Arc<dyn Plant>,
    a: f64,
    input_set: BoxSet,
    increment_set: Option<BoxSet>,
) -> Result<AugmentedModel> {
    if !(a.abs() <= 1.0) {
        return Err(Error::Config(format!("augmentation factor a = {a} must satisfy |a| <= 1")));
    }
    let n = plant.state_dim();
    let m = plant.input_dim();
    if input_set.dim() != m || increment_set.as_ref().is_some_and(|s| s.dim() != m) {
        return Err(Error::dim("input sets must have the plant's input dimension"));
    }
    let split = move |z: &DVector<f64>| (z.rows(0, n).into_owned(), z.rows(n, m).into_owned());

    let p = plant.clone();
    let f0 = move |z: &DVector<f64>| {
        let (x, u) = split(z);
        let mut next = DVector::zeros(n + m);
        next.rows_mut(0, n).copy_from(&p.step(&x, &u));
        next.rows_mut(n, m).copy_from(&(u * a));
        next
    };
    let p = plant.clone();
    let h0 = move |z: &DVector<f64>| {
        let (x, u) = split(z);
        p.output(&x, &u)
    };
    let p = plant.clone();
    let jf = move |z: &DVector<f64>| {
        let (x, u) = split(z);
        let mut j = DMatrix::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&p.state_jacobian(&x, &u));
        j.view_mut((0, n), (n, m)).copy_from(&p.input_jacobian(&x, &u));
        for i in 0..m {
            j[(n + i, n + i)] = a;
        }
        j
    };
    let p = plant.clone();
    let jh = move |z: &DVector<f64>| {
        let (x, u) = split(z);
        let rows = p.output_dim();
        let mut j = DMatrix::zeros(rows, n + m);
        j.view_mut((0, 0), (rows, n)).copy_from(&p.output_state_jacobian(&x, &u));
        j.view_mut((0, n), (rows, m)).copy_from(&p.output_input_jacobian(&x, &u));
        j
    };
    let mut b = DMatrix::zeros(n + m, m);
    b.view_mut((n, 0), (m, m)).fill_with_identity();
    let d = DMatrix::zeros(plant.output_dim(), m);
    let model = SystemModel::new(f0, b, h0, d)?.with_jacobians(Some(Arc::new(jf)), Some(Arc::new(jh)));
    Ok(AugmentedModel {
        model,
        base: plant,
        a,
        input_set,
        increment_set,
    })
}

/// Extract the base-plant linearization from an augmented one whose
/// first `n` states are the plant state.
pub fn reduce_linearization(lin: &Linearization, n: usize) -> Result<Linearization> {
    let total = lin.state_dim();
    if n == 0 || n >= total {
        return Err(Error::dim("base state dimension must lie strictly inside the augmented one"));
    }
    let m = total - n;
    let p = lin.output_dim();
    let ax = lin.a.view((0, 0), (n, n)).into_owned();
    let au = lin.a.view((0, n), (n, m)).into_owned();
    let cx = lin.c.view((0, 0), (p, n)).into_owned();
    let cu = lin.c.view((0, n), (p, m)).into_owned();
    Ok(Linearization {
        a: ax,
        b: au,
        e: lin.e.rows(0, n).into_owned(),
        c: cx,
        d: cu,
        r: lin.r.clone(),
        point: lin.point.clone(),
    })
}
