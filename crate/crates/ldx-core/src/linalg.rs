//! Small dense linear-algebra kernels.
//!
//! Everything in this crate solves systems of at most a few thousand unknowns
//! (policy evaluation, KKT systems, design matrices), so a partial-pivoting
//! LU factorization is all we need.

use ndarray::{Array1, Array2};

use crate::error::{LdxError, Result};

/// LU factorization with partial pivoting, stored in place.
pub struct LuFactor {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl LuFactor {
    /// Factor a square matrix. Fails if a pivot falls below `1e-300`
    /// (structurally singular for our purposes).
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(LdxError::Validation(format!(
                "LU expects a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut pivot = col;
            let mut best = lu[[col, col]].abs();
            for row in (col + 1)..n {
                let v = lu[[row, col]].abs();
                if v > best {
                    best = v;
                    pivot = row;
                }
            }
            if best < 1e-300 {
                return Err(LdxError::Numerical(format!(
                    "singular matrix: pivot {best:e} at column {col}"
                )));
            }
            if pivot != col {
                perm.swap(col, pivot);
                for k in 0..n {
                    let tmp = lu[[col, k]];
                    lu[[col, k]] = lu[[pivot, k]];
                    lu[[pivot, k]] = tmp;
                }
            }
            let diag = lu[[col, col]];
            for row in (col + 1)..n {
                let factor = lu[[row, col]] / diag;
                lu[[row, col]] = factor;
                for k in (col + 1)..n {
                    lu[[row, k]] -= factor * lu[[col, k]];
                }
            }
        }
        Ok(LuFactor { lu, perm })
    }

    /// Solve `A x = b` using the stored factorization.
    pub fn solve(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        let n = self.lu.nrows();
        if b.len() != n {
            return Err(LdxError::Validation(format!(
                "rhs length {} does not match system size {n}",
                b.len()
            )));
        }
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        // forward substitution (unit lower triangle)
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[[i, k]] * x[k];
            }
        }
        // back substitution
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[[i, k]] * x[k];
            }
            x[i] /= self.lu[[i, i]];
        }
        Ok(x)
    }
}

/// One-shot dense solve of `A x = b`.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    LuFactor::new(a)?.solve(b)
}
