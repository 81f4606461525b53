//! Thomas algorithm for symmetric tridiagonal systems restricted to a
//! contiguous block of active unknowns.

use crate::error::{Error, Result};

/// Precomputed LU factors of a tridiagonal matrix on indices `first..=last`
/// of a full-length vector. Entries outside that block are forced to zero.
#[derive(Debug, Clone)]
pub struct TridiagFactor {
    first: usize,
    len: usize,
    full_len: usize,
    /// Sub-diagonal of the original matrix, `lower[k]` couples `k+1` to `k`.
    lower: Vec<f64>,
    /// Modified super-diagonal `c'_k`.
    upper: Vec<f64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<f64>,
}

impl TridiagFactor {
    /// Factor the matrix with diagonal `diag` and symmetric off-diagonal `off`
    /// (`off[k]` couples block entries `k` and `k+1`).
    pub fn new(first: usize, full_len: usize, diag: &[f64], off: &[f64]) -> Result<Self> {
        let len = diag.len();
        if len == 0 || off.len() + 1 != len || first + len > full_len {
            return Err(Error::LinearSolve("inconsistent tridiagonal block".into()));
        }
        let mut upper = vec![0.0; len];
        let mut inv_pivot = vec![0.0; len];
        let mut prev_upper = 0.0;
        for k in 0..len {
            let sub = if k > 0 { off[k - 1] } else { 0.0 };
            let pivot = diag[k] - sub * prev_upper;
            if !(pivot.abs() > 0.0) || !pivot.is_finite() {
                return Err(Error::LinearSolve(format!(
                    "zero pivot at row {}",
                    first + k
                )));
            }
            inv_pivot[k] = 1.0 / pivot;
            upper[k] = if k + 1 < len {
                off[k] * inv_pivot[k]
            } else {
                0.0
            };
            prev_upper = upper[k];
        }
        Ok(TridiagFactor {
            first,
            len,
            full_len,
            lower: off.to_vec(),
            upper,
            inv_pivot,
        })
    }

    /// Overwrite `rhs` (full length) with the solution.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        debug_assert_eq!(rhs.len(), self.full_len);
        let (f, n) = (self.first, self.len);
        for v in rhs[..f].iter_mut() {
            *v = 0.0;
        }
        for v in rhs[f + n..].iter_mut() {
            *v = 0.0;
        }
        let x = &mut rhs[f..f + n];
        x[0] *= self.inv_pivot[0];
        for k in 1..n {
            x[k] = (x[k] - self.lower[k - 1] * x[k - 1]) * self.inv_pivot[k];
        }
        for k in (0..n - 1).rev() {
            x[k] -= self.upper[k] * x[k + 1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_against_dense_product() {
        let diag = [4.0, 5.0, 6.0, 5.5];
        let off = [-1.0, 2.0, -0.5];
        let f = TridiagFactor::new(1, 6, &diag, &off).unwrap();
        let x = [0.0, 1.0, -2.0, 0.5, 3.0, 0.0];
        let mut b = vec![0.0; 6];
        for k in 0..4 {
            let i = k + 1;
            b[i] = diag[k] * x[i];
            if k > 0 {
                b[i] += off[k - 1] * x[i - 1];
            }
            if k < 3 {
                b[i] += off[k] * x[i + 1];
            }
        }
        b[0] = 7.0;
        f.solve_in_place(&mut b);
        for i in 0..6 {
            assert!((b[i] - x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_singular_block() {
        assert!(TridiagFactor::new(0, 2, &[0.0, 1.0], &[1.0]).is_err());
    }
}
