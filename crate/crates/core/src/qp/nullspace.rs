use nalgebra::{DMatrix, DVector, QR, SVD};

/// Affine parameterization `{z : A z = b} = {z0 + Z w}` with orthonormal `Z`.
pub(crate) struct EqualitySpace {
    pub particular: DVector<f64>,
    pub basis: DMatrix<f64>,
    /// Maps a gradient residual `r` to multipliers solving `A' lambda = -r`
    /// in the least-squares sense.
    multiplier_map: DMatrix<f64>,
}

impl EqualitySpace {
    /// Returns `None` when the equalities are inconsistent.
    pub fn new(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Option<Self> {
        let (q, d) = a.shape();
        if q == 0 {
            return Some(EqualitySpace {
                particular: DVector::zeros(d),
                basis: DMatrix::identity(d, d),
                multiplier_map: DMatrix::zeros(0, d),
            });
        }
        Self::from_qr(a, b).or_else(|| Self::from_svd(a, b, tol))
    }

    /// Householder QR of `A'`; only used when `A` has clearly full row rank.
    fn from_qr(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<Self> {
        let (q, d) = a.shape();
        let qr = QR::new(a.transpose());
        let r = qr.r();
        let diag_max = (0..q).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let diag_min = (0..q).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if diag_max == 0.0 || diag_min < 1e-10 * diag_max {
            return None;
        }
        let mut q_t = DMatrix::identity(d, d);
        qr.q_tr_mul(&mut q_t);
        let q_full = q_t.transpose();
        let range = q_full.columns(0, q).into_owned();
        let basis = q_full.columns(q, d - q).into_owned();
        // A = R' Y'  =>  z0 = Y R^{-T} b
        let rt = r.transpose();
        let y = rt.solve_lower_triangular(b)?;
        let particular = &range * y;
        // A' lambda = -g  =>  Y R lambda = -g  =>  lambda = -R^{-1} Y' g
        let r_inv = r.solve_upper_triangular(&DMatrix::identity(q, q))?;
        let multiplier_map = -(r_inv * range.transpose());
        Some(EqualitySpace {
            particular,
            basis,
            multiplier_map,
        })
    }

    fn from_svd(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Option<Self> {
        let (q, d) = a.shape();
        // pad to square so that the full right singular basis is returned
        let mut padded = DMatrix::zeros(d, d);
        padded.view_mut((0, 0), (q, d)).copy_from(a);
        let svd = SVD::new(padded, true, true);
        let u = svd.u.as_ref()?;
        let v_t = svd.v_t.as_ref()?;
        let sigma = &svd.singular_values;
        let smax = sigma.max();
        let rank = sigma.iter().filter(|s| **s > 1e-12 * smax.max(1.0)).count();
        let v = v_t.transpose();
        let v_r = v.columns(0, rank).into_owned();
        let u_r = u.view((0, 0), (q, rank)).into_owned();
        let s_inv = DMatrix::from_diagonal(&sigma.rows(0, rank).map(|s| 1.0 / s));
        let pinv = &v_r * &s_inv * u_r.transpose();
        let particular = &pinv * b;
        let resid = (a * &particular - b).amax();
        if resid > tol.max(1e-9) * (1.0 + b.amax()) {
            return None;
        }
        let basis = v.columns(rank, d - rank).into_owned();
        let multiplier_map = -pinv.transpose();
        Some(EqualitySpace {
            particular,
            basis,
            multiplier_map,
        })
    }

    pub fn equality_multipliers(&self, gradient_residual: &DVector<f64>) -> DVector<f64> {
        &self.multiplier_map * gradient_residual
    }
}
