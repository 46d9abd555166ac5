//! Fixed-step classical Runge–Kutta integration.

use crate::error::{Error, Result};

/// Reusable RK4 stage buffers for in-place stepping.
#[derive(Debug, Clone, Default)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self { k1: vec![0.0; n], k2: vec![0.0; n], k3: vec![0.0; n], k4: vec![0.0; n], tmp: vec![0.0; n] }
    }

    /// Advance `x` from `t` to `t + dt` in place. `f(t, x, dx)` writes the derivative.
    pub fn step<F>(&mut self, mut f: F, t: f64, x: &mut [f64], dt: f64) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = x.len();
        if self.k1.len() != n {
            *self = Self::new(n);
        }
        let h2 = 0.5 * dt;
        f(t, x, &mut self.k1)?;
        finite(&self.k1, t)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h2 * self.k1[i];
        }
        f(t + h2, &self.tmp, &mut self.k2)?;
        finite(&self.k2, t)?;
        for i in 0..n {
            self.tmp[i] = x[i] + h2 * self.k2[i];
        }
        f(t + h2, &self.tmp, &mut self.k3)?;
        finite(&self.k3, t)?;
        for i in 0..n {
            self.tmp[i] = x[i] + dt * self.k3[i];
        }
        f(t + dt, &self.tmp, &mut self.k4)?;
        finite(&self.k4, t)?;
        for i in 0..n {
            x[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        finite(x, t)
    }
}

fn finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { t })
    }
}

/// One RK4 step returning the new state.
pub fn rk4_step<F>(mut f: F, state: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    if !(dt > 0.0) {
        return Err(Error::Input(format!("rk4_step: dt must be positive, got {dt}")));
    }
    let mut x = state.to_vec();
    Rk4::new(x.len()).step(
        |t, x, dx| {
            dx.copy_from_slice(&f(t, x));
            Ok(())
        },
        t,
        &mut x,
        dt,
    )?;
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_keeps_state() {
        let x = rk4_step(|_, x| vec![0.0; x.len()], &[1.0, -2.0], 0.0, 0.1).unwrap();
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn decay_matches_exponential() {
        let x = rk4_step(|_, x| vec![-x[0]], &[1.0], 0.0, 0.1).unwrap();
        assert!((x[0] - 0.9048375).abs() < 1e-6);
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn pure_time_field_is_exact() {
        let h = 0.37;
        let x = rk4_step(|_, _| vec![1.0], &[0.0], 2.0, h).unwrap();
        assert!((x[0] - h).abs() < 1e-15);
        let x = rk4_step(|t, _| vec![4.0 * t * t * t], &[0.0], 0.0, h).unwrap();
        assert!((x[0] - h.powi(4)).abs() < 1e-14);
    }

    #[test]
    fn non_finite_stage_is_reported_with_time() {
        let r = rk4_step(|_, _| vec![f64::NAN], &[0.0], 1.5, 0.1);
        assert_eq!(r, Err(Error::Integration { t: 1.5 }));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(rk4_step(|_, _| vec![0.0], &[0.0], 0.0, 0.0).is_err());
    }
}
