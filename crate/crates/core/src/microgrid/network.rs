//! Quasi-static phasor network: bus admittance with constant-impedance
//! loads, Kron reduction onto inverter buses, and frame rotation.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Series R–L branch between two buses (zero-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
}

/// Bus admittance matrix. `loads[k]` is the series (R, X) impedance at bus k,
/// or `None` for no load. Line reactances use `omega`.
pub fn bus_admittance(n_bus: usize, branches: &[Branch], loads: &[Option<(f64, f64)>], omega: f64) -> Result<DMatrix<C64>> {
    let mut y = DMatrix::from_element(n_bus, n_bus, C64::new(0.0, 0.0));
    for br in branches {
        if br.from >= n_bus || br.to >= n_bus || br.from == br.to {
            return Err(Error::Network(format!("invalid branch {}–{}", br.from + 1, br.to + 1)));
        }
        let z = C64::new(br.r, omega * br.l);
        if z.norm() == 0.0 {
            return Err(Error::Network(format!("zero-impedance branch {}–{}", br.from + 1, br.to + 1)));
        }
        let yb = z.inv();
        y[(br.from, br.from)] += yb;
        y[(br.to, br.to)] += yb;
        y[(br.from, br.to)] -= yb;
        y[(br.to, br.from)] -= yb;
    }
    for (k, load) in loads.iter().enumerate() {
        if let Some((r, x)) = *load {
            let z = C64::new(r, x);
            if z.norm() == 0.0 {
                return Err(Error::Network(format!("short-circuit load at bus {}", k + 1)));
            }
            y[(k, k)] += z.inv();
        }
    }
    Ok(y)
}

/// Y̌ = Y_kk − Y_ke Y_ee⁻¹ Y_ek for the retained buses `keep`.
pub fn kron_reduce(y: &DMatrix<C64>, keep: &[usize]) -> Result<DMatrix<C64>> {
    let n = y.nrows();
    if !y.is_square() {
        return Err(Error::Dimension("kron_reduce: admittance must be square".into()));
    }
    if keep.iter().any(|&k| k >= n) {
        return Err(Error::Reduction("retained bus index out of range".into()));
    }
    let elim: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
    let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| y[(rows[i], cols[j])]);
    let ykk = pick(keep, keep);
    if elim.is_empty() {
        return Ok(ykk);
    }
    let yke = pick(keep, &elim);
    let yek = pick(&elim, keep);
    let yee = pick(&elim, &elim);
    let lu = yee.lu();
    let sol = lu
        .solve(&yek)
        .ok_or_else(|| Error::Reduction("eliminated block is singular".into()))?;
    if sol.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Reduction("eliminated block is singular".into()));
    }
    Ok(ykk - yke * sol)
}

/// Impedance seen between inverter buses: (Kron-reduced admittance)⁻¹.
pub fn transfer_impedance(y_red: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let z = y_red
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Network("reduced admittance is singular".into()))?;
    if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Network("reduced admittance is singular".into()));
    }
    Ok(z)
}

/// Local dq quantity rotated into the common frame by angle δ.
pub fn to_common(d: f64, q: f64, delta: f64) -> C64 {
    C64::new(d, q) * C64::from_polar(1.0, delta)
}

/// Common-frame phasor rotated into a local frame at angle δ.
pub fn to_local(v: C64, delta: f64) -> (f64, f64) {
    let z = v * C64::from_polar(1.0, -delta);
    (z.re, z.im)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bus_ohms_law() {
        let y = bus_admittance(1, &[], &[Some((30.0, 15.0))], 314.16).unwrap();
        let z = transfer_impedance(&y).unwrap();
        let v = z[(0, 0)] * C64::new(1.0, 0.0);
        assert!((v - C64::new(30.0, 15.0)).norm() < 1e-12);
    }

    #[test]
    fn zero_injection_zero_voltage() {
        let br = [Branch { from: 0, to: 1, r: 0.2, l: 1e-3 }];
        let y = bus_admittance(2, &br, &[Some((10.0, 1.0)), Some((20.0, 5.0))], 314.0).unwrap();
        let z = transfer_impedance(&y).unwrap();
        let v = &z * nalgebra::DVector::from_element(2, C64::new(0.0, 0.0));
        assert_eq!(v.norm(), 0.0);
    }

    #[test]
    fn stiff_tie_equalises_voltages() {
        let br = [Branch { from: 0, to: 1, r: 1e-9, l: 0.0 }];
        let y = bus_admittance(2, &br, &[Some((10.0, 0.0)), Some((10.0, 0.0))], 314.0).unwrap();
        let z = transfer_impedance(&y).unwrap();
        let v = &z * nalgebra::DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
        assert!((v[0] - v[1]).norm() < 1e-8);
        assert!((v[0] - C64::new(5.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn kron_examples() {
        let y = DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), C64::new(-1.0, 0.0), C64::new(-1.0, 0.0), C64::new(2.0, 0.0)]);
        assert_eq!(kron_reduce(&y, &[0, 1]).unwrap(), y);
        let r = kron_reduce(&y, &[0]).unwrap();
        assert!((r[(0, 0)] - C64::new(0.5, 0.0)).norm() < 1e-12);

        let mut bd = DMatrix::from_element(3, 3, C64::new(0.0, 0.0));
        bd[(0, 0)] = C64::new(2.0, 1.0);
        bd[(1, 1)] = C64::new(3.0, 0.0);
        bd[(1, 2)] = C64::new(-1.0, 0.0);
        bd[(2, 1)] = C64::new(-1.0, 0.0);
        bd[(2, 2)] = C64::new(4.0, 0.0);
        let r = kron_reduce(&bd, &[0, 1]).unwrap();
        assert_eq!(r[(0, 0)], C64::new(2.0, 1.0));
        assert_eq!(r[(0, 1)], C64::new(0.0, 0.0));
        assert!((r[(1, 1)] - C64::new(3.0 - 0.25, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn kron_singular_block() {
        let mut y = DMatrix::from_element(2, 2, C64::new(0.0, 0.0));
        y[(0, 0)] = C64::new(1.0, 0.0);
        assert!(matches!(kron_reduce(&y, &[0]), Err(Error::Reduction(_))));
    }

    #[test]
    fn rotation_round_trip() {
        let v = to_common(3.0, -1.0, 0.7);
        let (d, q) = to_local(v, 0.7);
        assert!((d - 3.0).abs() < 1e-12 && (q + 1.0).abs() < 1e-12);
    }
}
