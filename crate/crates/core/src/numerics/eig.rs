//! Eigenvalues of real square matrices.

use nalgebra::{Complex, DMatrix, Schur};

use crate::error::{Error, Result};

/// Diagonal similarity scaling by powers of two that equalises row and
/// column norms; eigenvalues are unchanged and accuracy improves for
/// badly scaled matrices.
pub fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let t = balancing_scale(m);
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * t[j] / t[i])
}

/// Diagonal T of the balancing similarity T⁻¹ M T.
pub fn balancing_scale(m: &DMatrix<f64>) -> Vec<f64> {
    const RADIX: f64 = 2.0;
    let n = m.nrows();
    let mut a = m.clone();
    let mut t = vec![1.0; n];
    for _ in 0..200 {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            while c < r / RADIX {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            while c > r * RADIX {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                t[i] *= f;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
        if done {
            break;
        }
    }
    t
}

/// All eigenvalues sorted by (real part, imaginary part).
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigenvalues: expected square, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("eigenvalues: non-finite entry".into()));
    }
    let b = balance(m);
    let schur = Schur::try_new(b, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Singular("Schur iteration did not converge".into()))?;
    let mut ev: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().cloned().collect();
    sort_spectrum(&mut ev);
    Ok(ev)
}

/// Sort by (re, im).
pub fn sort_spectrum(ev: &mut [Complex<f64>]) {
    ev.sort_by(|a, b| {
        a.re.partial_cmp(&b.re)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
    });
}

/// Largest real part.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Greedy nearest matching between two spectra; returns the largest
/// mismatch |λ − μ| / max(1, |μ|). Lengths must agree.
pub fn spectrum_mismatch(computed: &[Complex<f64>], desired: &[Complex<f64>]) -> f64 {
    if computed.len() != desired.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; computed.len()];
    let mut worst: f64 = 0.0;
    for mu in desired {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (k, lam) in computed.iter().enumerate() {
            if used[k] {
                continue;
            }
            let d = (lam - mu).norm();
            if d < best_d {
                best_d = d;
                best = Some(k);
            }
        }
        if let Some(k) = best {
            used[k] = true;
        }
        worst = worst.max(best_d / mu.norm().max(1.0));
    }
    worst
}
