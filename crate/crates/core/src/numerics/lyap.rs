//! Sylvester and Lyapunov equations through the Kronecker form.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Solve A·X + X·B = C for X (A is n×n, B is m×m, C is n×m).
pub fn solve_sylvester(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.nrows(), b.nrows());
    if !a.is_square() || !b.is_square() || c.shape() != (n, m) {
        return Err(Error::Dimension("sylvester: inconsistent shapes".into()));
    }
    let nm = n * m;
    let mut k = DMatrix::zeros(nm, nm);
    // vec(A X) = (I ⊗ A) vec X, vec(X B) = (Bᵀ ⊗ I) vec X, column-major vec.
    for j in 0..m {
        for r in 0..n {
            for s in 0..n {
                k[(j * n + r, j * n + s)] += a[(r, s)];
            }
        }
        for l in 0..m {
            let blj = b[(l, j)];
            if blj != 0.0 {
                for r in 0..n {
                    k[(j * n + r, l * n + r)] += blj;
                }
            }
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(c.as_slice());
    let lu = k.lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("Sylvester operator is singular".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("Sylvester operator is singular".into()));
    }
    Ok(DMatrix::from_column_slice(n, m, x.as_slice()))
}

/// Solve Aᵀ·M + M·A = −Q.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = solve_sylvester(&a.transpose(), a, &(-q))?;
    Ok((&m + m.transpose()) * 0.5)
}
