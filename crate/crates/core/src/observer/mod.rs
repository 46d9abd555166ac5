//! State observers for one DG.
//!
//! The nonlinear observer is
//! x̂̇ = A x̂ + f(x̂) + B u + (L′ + L″(x̂))(y − C x̂),
//! where L′ is constant and places the spectrum of A + D − L′C on the
//! subsystem without δ, L″(x̂) cancels the estimate-dependent part of
//! ξᵀ(f(x) − f(x̂)), and D = ω_c(x̄₁₁ + x̄₁₂) on the P, Q, v_od, v_oq rows
//! dominates the remaining cross terms while |i_od| ≤ x̄₁₁, |i_oq| ≤ x̄₁₂.
//!
//! The output-injection baseline replaces f(x̂) by f evaluated on the
//! measured components and uses a constant gain.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dg::{idx, nonlinear_f, DgModel, DgParams, MEASURED, NU, NX, NY};
use crate::error::{Error, Result};
use crate::numerics::{eigenvalues, place_selector, spectral_abscissa, Rk4};

/// Rows of D carrying the bound ω_c(x̄₁₁ + x̄₁₂).
pub const D_ROWS: [usize; 4] = [idx::P, idx::Q, idx::VO_D, idx::VO_Q];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverKind {
    #[default]
    Nonlinear,
    OutputInjection,
}

#[derive(Debug, Clone)]
pub struct ObserverGain {
    /// Constant part L′ (15×10); the δ row is zero.
    pub l_const: DMatrix<f64>,
    /// Diagonal of D.
    pub d: DVector<f64>,
    pub x_bar: (f64, f64),
    pub poles: Vec<Complex<f64>>,
    /// Spectral abscissa of the reduced A + D − L′C.
    pub abscissa: f64,
    pub hurwitz: bool,
    pub params: DgParams,
    /// Frequency ω₀ of the rotation term ω₀S folded into the design model.
    pub omega_lin: f64,
}

/// Fourteen poles: −50 ± 10i and twelve reals spread over [−120, −60].
pub fn default_poles() -> Vec<Complex<f64>> {
    scaled_poles(50.0, 10.0, 60.0, 120.0)
}

/// A pair at −`pair_re` ± `pair_im`i and twelve reals on [−hi, −lo].
pub fn scaled_poles(pair_re: f64, pair_im: f64, lo: f64, hi: f64) -> Vec<Complex<f64>> {
    let mut p = vec![Complex::new(-pair_re, pair_im), Complex::new(-pair_re, -pair_im)];
    for k in 0..12 {
        p.push(Complex::new(-(lo + (hi - lo) * k as f64 / 11.0), 0.0));
    }
    p
}

fn without_delta(m: &DMatrix<f64>, rows: bool, cols: bool) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..NX).filter(|&i| i != idx::DELTA).collect();
    let r: Vec<usize> = if rows { keep.clone() } else { (0..m.nrows()).collect() };
    let c: Vec<usize> = if cols { keep } else { (0..m.ncols()).collect() };
    DMatrix::from_fn(r.len(), c.len(), |i, j| m[(r[i], c[j])])
}

/// The bound matrix D as a diagonal.
pub fn bound_matrix(p: &DgParams, x_bar11: f64, x_bar12: f64) -> DVector<f64> {
    let mut d = DVector::zeros(NX);
    for &i in &D_ROWS {
        d[i] = p.omega_c * (x_bar11 + x_bar12);
    }
    d
}

/// Design L′ for (A + D, C) with δ removed. A non-Hurwitz request is
/// placed as asked and reported through `hurwitz = false`.
pub fn design_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DgParams,
    x_bar11: f64,
    x_bar12: f64,
    desired: &[Complex<f64>],
) -> Result<ObserverGain> {
    design_gain_rotating(a, c, p, x_bar11, x_bar12, 0.0, desired)
}

/// ω₀S: the dq cross-coupling of f linearised at frequency ω₀ on the
/// (i_l, v_o, i_o) pairs.
pub fn rotation_matrix(omega0: f64) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(NX, NX);
    for d in [idx::IL_D, idx::VO_D, idx::IO_D] {
        s[(d, d + 1)] = omega0;
        s[(d + 1, d)] = -omega0;
    }
    s
}

/// As [`design_gain`], placing the spectrum of A + ω₀S + D − L′C instead.
/// The skew term dominates the error dynamics at nominal frequency and is
/// invisible to the placement when left inside f.
pub fn design_gain_rotating(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    p: &DgParams,
    x_bar11: f64,
    x_bar12: f64,
    omega0: f64,
    desired: &[Complex<f64>],
) -> Result<ObserverGain> {
    if a.shape() != (NX, NX) || c.shape() != (NY, NX) {
        return Err(Error::Dimension("design_gain expects A 15×15 and C 10×15".into()));
    }
    if !(x_bar11 >= 0.0) || !(x_bar12 >= 0.0) {
        return Err(Error::Design("state bounds must be nonnegative".into()));
    }
    let d = bound_matrix(p, x_bar11, x_bar12);
    let ad = a + DMatrix::from_diagonal(&d) + rotation_matrix(omega0);
    let ar = without_delta(&ad, true, true);
    let cr = without_delta(c, false, true);
    let lr = place_selector(&ar, &cr, desired).map_err(|e| match e {
        Error::Placement(msg) => Error::Design(format!("reduced pair (A + D, C) not assignable: {msg}")),
        other => other,
    })?;
    let mut l = DMatrix::zeros(NX, NY);
    let mut k = 0;
    for i in 0..NX {
        if i == idx::DELTA {
            continue;
        }
        l.row_mut(i).copy_from(&lr.row(k));
        k += 1;
    }
    let abscissa = spectral_abscissa(&(&ar - &lr * &cr))?;
    Ok(ObserverGain {
        l_const: l,
        d,
        x_bar: (x_bar11, x_bar12),
        poles: desired.to_vec(),
        abscissa,
        hurwitz: abscissa < 0.0,
        params: *p,
        omega_lin: omega0,
    })
}

impl ObserverGain {
    /// Reduced A + ω₀S + D − L′C (δ removed).
    pub fn reduced_matrix(&self, a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.full_matrix(a, c);
        without_delta(&m, true, true)
    }

    /// Full A + ω₀S + D − L′C.
    pub fn full_matrix(&self, a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
        a + DMatrix::from_diagonal(&self.d) + rotation_matrix(self.omega_lin) - &self.l_const * c
    }

    pub fn reduced_spectrum(&self, a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
        eigenvalues(&self.reduced_matrix(a, c))
    }
}

/// Nonzero entries of L″(x̂) as (row, output column, value), zero-based.
pub fn l2_entries(xh: &[f64], p: &DgParams) -> [(usize, usize, f64); 16] {
    let (wc, mp) = (p.omega_c, p.m_p);
    let x = |i: usize| xh[i - 1];
    // Output columns: P 0, Q 1, i_ld 2, i_lq 3, v_od 4, v_oq 5, i_od 6, i_oq 7, ω_n 8, V_n 9.
    [
        (0, 6, wc * x(9)),
        (0, 7, wc * x(10)),
        (1, 7, -wc * x(9)),
        (1, 6, wc * x(10)),
        (6, 8, x(8)),
        (7, 8, -x(7)),
        (8, 8, x(10)),
        (9, 8, -x(9)),
        (10, 8, x(12)),
        (11, 8, -x(11)),
        (0, 2, -mp * x(8)),
        (0, 3, mp * x(7)),
        (0, 4, -mp * x(10)),
        (0, 5, mp * x(9)),
        (10, 0, -mp * x(12)),
        (11, 0, mp * x(11)),
    ]
}

/// State-dependent gain L″(x̂), 15×10.
pub fn nonlinear_gain_l2(xh: &[f64], p: &DgParams) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(NX, NY);
    for (i, j, v) in l2_entries(xh, p) {
        l[(i, j)] += v;
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub x_hat: [f64; NX],
    pub r: [f64; NY],
}

impl ObserverState {
    /// Measured components copied from y, the rest zero.
    pub fn from_measurement(y: &[f64; NY]) -> Self {
        let mut x_hat = [0.0; NX];
        for (k, &s) in MEASURED.iter().enumerate() {
            x_hat[s] = y[k];
        }
        Self { x_hat, r: [0.0; NY] }
    }

    pub fn refresh_residual(&mut self, y: &[f64; NY]) {
        for (k, &s) in MEASURED.iter().enumerate() {
            self.r[k] = y[k] - self.x_hat[s];
        }
    }
}

/// Observer right-hand side for estimate `xh`, clean input `u` and output `y`.
pub fn observer_derivative(
    kind: ObserverKind,
    model: &DgModel,
    gain: &ObserverGain,
    xh: &[f64],
    u: &[f64],
    y: &[f64],
    out: &mut [f64],
) {
    let mut r = [0.0; NY];
    for (k, &s) in MEASURED.iter().enumerate() {
        r[k] = y[k] - xh[s];
    }
    match kind {
        ObserverKind::Nonlinear => {
            nonlinear_f(xh, &model.params, out);
            for (i, j, v) in l2_entries(xh, &model.params) {
                out[i] += v * r[j];
            }
        }
        ObserverKind::OutputInjection => {
            let mut xm = [0.0; NX];
            xm.copy_from_slice(&xh[..NX]);
            for (k, &s) in MEASURED.iter().enumerate() {
                xm[s] = y[k];
            }
            nonlinear_f(&xm, &model.params, out);
        }
    }
    model.add_ax(xh, out);
    model.add_bu(u, out);
    let l = &gain.l_const;
    for i in 0..NX {
        let mut acc = 0.0;
        for j in 0..NY {
            acc += l[(i, j)] * r[j];
        }
        out[i] += acc;
    }
}

/// ξᵀξ̇ − ξᵀ(A + D − L′C)ξ for the nonlinear observer at (x, x̂) under a
/// common input u. Nonpositive whenever |x₁₁| ≤ x̄₁₁ and |x₁₂| ≤ x̄₁₂.
pub fn lyapunov_slack(model: &DgModel, gain: &ObserverGain, x: &[f64], xh: &[f64], u: &[f64]) -> f64 {
    let y = model.measure(x);
    let mut dx = [0.0; NX];
    let mut dxh = [0.0; NX];
    model.derivative(x, u, &mut dx);
    observer_derivative(ObserverKind::Nonlinear, model, gain, xh, u, &y, &mut dxh);
    let xi = DVector::from_iterator(NX, (0..NX).map(|i| x[i] - xh[i]));
    let xi_dot = DVector::from_iterator(NX, (0..NX).map(|i| dx[i] - dxh[i]));
    let m = &model.a + DMatrix::from_diagonal(&gain.d) - &gain.l_const * &model.c;
    xi.dot(&xi_dot) - xi.dot(&(m * &xi))
}

fn step_kind(
    kind: ObserverKind,
    obs: &ObserverState,
    u: &[f64; NU],
    y: &[f64; NY],
    gain: &ObserverGain,
    model: &DgModel,
    t: f64,
    dt: f64,
) -> Result<ObserverState> {
    let mut x = obs.x_hat.to_vec();
    Rk4::new(NX)
        .step(
            |_, s, d| {
                observer_derivative(kind, model, gain, s, u, y, d);
                Ok(())
            },
            t,
            &mut x,
            dt,
        )
        .map_err(|_| Error::ObserverDivergence { t })?;
    let mut next = ObserverState { x_hat: [0.0; NX], r: [0.0; NY] };
    next.x_hat.copy_from_slice(&x);
    next.refresh_residual(y);
    Ok(next)
}

/// One RK4 step of the nonlinear observer with u and y held over the step.
pub fn observer_step(obs: &ObserverState, u: &[f64; NU], y: &[f64; NY], gain: &ObserverGain, model: &DgModel, t: f64, dt: f64) -> Result<ObserverState> {
    step_kind(ObserverKind::Nonlinear, obs, u, y, gain, model, t, dt)
}

/// One RK4 step of the output-injection observer.
pub fn output_injection_step(obs: &ObserverState, u: &[f64; NU], y: &[f64; NY], gain: &ObserverGain, model: &DgModel, t: f64, dt: f64) -> Result<ObserverState> {
    step_kind(ObserverKind::OutputInjection, obs, u, y, gain, model, t, dt)
}
