//! Small dense linear algebra helpers.
//!
//! All systems in this crate are tiny (p is 1 + q + r, typically below 15),
//! so plain Gaussian elimination with partial pivoting is both adequate and
//! easy to audit.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
///
/// Fails with [`Error::Singular`] when a pivot falls below `1e-12` relative
/// to the largest absolute entry of `a`.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve: a is {}x{}, b has length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        // partial pivot
        let mut pivot_row = col;
        let mut pivot_val = m[[col, col]].abs();
        for row in (col + 1)..n {
            let v = m[[row, col]].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < 1e-12 * scale {
            return Err(Error::Singular(format!(
                "pivot {pivot_val:.3e} below threshold at column {col}"
            )));
        }
        if pivot_row != col {
            for j in 0..n {
                m.swap([col, j], [pivot_row, j]);
            }
            rhs.swap(col, pivot_row);
        }
        for row in (col + 1)..n {
            let factor = m[[row, col]] / m[[col, col]];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[[row, j]] -= factor * m[[col, j]];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for j in (row + 1)..n {
            acc -= m[[row, j]] * x[j];
        }
        x[row] = acc / m[[row, row]];
    }
    Ok(x)
}

/// Inverts a square matrix column by column via [`solve`].
pub fn inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        let col = solve(a, &e)?;
        for i in 0..n {
            inv[[i, j]] = col[i];
        }
    }
    Ok(inv)
}

/// Solves the normal equations `(d^T d) x = d^T y` for a least-squares fit.
pub fn least_squares(design: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let xtx = design.t().dot(design);
    let xty = design.t().dot(y);
    solve(&xtx, &xty).map_err(|_| {
        Error::Singular("rank-deficient design in least squares".to_string())
    })
}
