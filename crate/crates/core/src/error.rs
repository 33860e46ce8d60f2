use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value encountered: {0}")]
    Numerical(String),

    #[error("iteration did not converge: {0}")]
    Convergence(String),

    #[error("matrix is numerically singular: {what} (sigma_min = {sigma_min:e})")]
    Singularity { what: String, sigma_min: f64 },

    /// The tracking QP has no feasible point. `time` is the closed-loop
    /// instant when raised from a simulation, `None` for a single solve.
    #[error("infeasible optimal control problem at x = {state:?}{}", time.map(|t| format!(" (t = {t})")).unwrap_or_default())]
    Infeasible {
        state: Vec<f64>,
        time: Option<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn infeasible_at(x: &DVector<f64>) -> Self {
        Error::Infeasible {
            state: x.iter().copied().collect(),
            time: None,
        }
    }

    /// Attach a closed-loop time index to an infeasibility error.
    pub fn at_time(self, t: usize) -> Self {
        match self {
            Error::Infeasible { state, .. } => Error::Infeasible {
                state,
                time: Some(t),
            },
            other => other,
        }
    }
}

pub(crate) fn ensure_finite_vec(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(what.to_string()))
    }
}

pub(crate) fn ensure_finite_mat(m: &nalgebra::DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(what.to_string()))
    }
}
