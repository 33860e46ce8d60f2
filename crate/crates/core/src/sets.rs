use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Axis-aligned box `{v : lower <= v <= upper}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box bounds have different lengths"));
        }
        if lower.is_empty() {
            return Err(Error::dim("box has dimension zero"));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::dim("box is empty (lower > upper)"));
        }
        Ok(BoxSet { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
    }

    /// The interval `[lo, hi]` in one dimension.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::from_slices(&[lo], &[hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol)
    }

    /// Smallest componentwise distance from `inner`'s faces to ours; positive
    /// iff `inner` lies in our interior.
    pub fn interior_margin(&self, inner: &BoxSet) -> f64 {
        self.lower
            .iter()
            .zip(inner.lower.iter())
            .map(|(o, i)| i - o)
            .chain(self.upper.iter().zip(inner.upper.iter()).map(|(o, i)| o - i))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(x, (l, u))| x.clamp(*l, *u)),
        )
    }

    /// Inequality rows `G v <= h` describing the box.
    pub fn as_inequalities(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.dim();
        let mut g = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            h[i] = self.upper[i];
            g[(n + i, i)] = -1.0;
            h[n + i] = -self.lower[i];
        }
        (g, h)
    }

    /// Tensor grid with `per_axis` points per coordinate, endpoints included.
    /// Points are enumerated with the first coordinate varying slowest.
    pub fn grid(&self, per_axis: usize) -> Vec<DVector<f64>> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = (0..n)
            .map(|i| linspace(self.lower[i], self.upper[i], per_axis))
            .collect();
        let total = axes.iter().map(Vec::len).product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            out.push(DVector::from_iterator(n, (0..n).map(|i| axes[i][idx[i]])));
            for i in (0..n).rev() {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    break;
                }
                idx[i] = 0;
            }
        }
        out
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn rejects_empty_box() {
        assert!(BoxSet::interval(1.0, 0.0).is_err());
        assert!(BoxSet::from_slices(&[], &[]).is_err());
    }

    #[test]
    fn interior_margin_of_nested_intervals() {
        let outer = BoxSet::interval(0.1, 2.0).unwrap();
        let inner = BoxSet::interval(0.11, 1.99).unwrap();
        assert!((outer.interior_margin(&inner) - 0.01).abs() < 1e-12);
        assert!(inner.interior_margin(&outer) < 0.0);
    }

    #[test]
    fn grid_enumerates_tensor_product() {
        let b = BoxSet::from_slices(&[0.0, 10.0], &[1.0, 12.0]).unwrap();
        let g = b.grid(3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], dvector![0.0, 10.0]);
        assert_eq!(g[1], dvector![0.0, 11.0]);
        assert_eq!(g[8], dvector![1.0, 12.0]);
    }

    #[test]
    fn inequality_rows_match_membership() {
        let b = BoxSet::from_slices(&[-1.0, 0.0], &[1.0, 2.0]).unwrap();
        let (g, h) = b.as_inequalities();
        for v in [dvector![0.0, 1.0], dvector![1.5, 1.0], dvector![0.0, -0.1]] {
            let inside = (&g * &v - &h).iter().all(|r| *r <= 0.0);
            assert_eq!(inside, b.contains(&v, 0.0));
        }
    }
}
