//! Residual evaluation, low-pass filtered thresholds, detection flags,
//! the detectability margin test and mitigation by estimate substitution.

use serde::{Deserialize, Serialize};

use crate::dg::{MEASURED, NX, NY};
use crate::error::{Error, Result};

/// r = y − ŷ and its Euclidean norm.
pub fn residual(y: &[f64], y_hat: &[f64]) -> (Vec<f64>, f64) {
    let r: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| a - b).collect();
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    (r, n)
}

/// First-order low-pass λ_f/(s + λ_f).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub lambda: f64,
    pub z: f64,
}

impl FilterState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Input(format!("filter pole must be positive, got {lambda}")));
        }
        Ok(Self { lambda, z: 0.0 })
    }

    /// Impulse response h(t) = λ e^{−λ t}.
    pub fn impulse(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.lambda * (-self.lambda * t).exp()
        }
    }
}

/// RK4 step of ż = −λ z + λ·input with the input held over the step.
pub fn filter_step(fs: FilterState, input: f64, dt: f64) -> (FilterState, f64) {
    let l = fs.lambda;
    let f = |z: f64| -l * z + l * input;
    let z = fs.z;
    let k1 = f(z);
    let k2 = f(z + 0.5 * dt * k1);
    let k3 = f(z + 0.5 * dt * k2);
    let k4 = f(z + dt * k3);
    let zn = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (FilterState { lambda: l, z: zn }, zn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    /// Bound on the model/observer mismatch contribution.
    pub chi_bar: f64,
    /// Bound on known disturbances.
    pub zeta_bar: f64,
    pub floor: f64,
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if [self.chi_bar, self.zeta_bar, self.floor].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Input("threshold bounds must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Advance the threshold filter by dt and return η = max(filtered bound, floor).
pub fn threshold(tp: &ThresholdParams, fs: &mut FilterState, dt: f64) -> f64 {
    let (next, out) = filter_step(*fs, tp.chi_bar + tp.zeta_bar, dt);
    *fs = next;
    out.max(tp.floor)
}

/// Strict exceedance |r| > η.
pub fn detect(r_norm: f64, eta: f64) -> bool {
    r_norm.abs() > eta
}

/// Per-channel exceedance against η/√p.
pub fn channel_flags(r: &[f64], eta: f64) -> Vec<bool> {
    let per = eta / (r.len() as f64).sqrt();
    r.iter().map(|v| v.abs() > per).collect()
}

/// Whether the filtered attack |∫_{T_o}^t h(t−τ)(1 − e^{−b(τ−T_o)}) a(τ) dτ|
/// exceeds 2η(t) at any grid point. Samples start at T_o with spacing dt.
pub fn detectability_margin(a: &[f64], b: f64, filter: &FilterState, eta: &[f64], dt: f64) -> Result<bool> {
    if a.is_empty() {
        return Err(Error::Input("empty attack window".into()));
    }
    if eta.len() != a.len() {
        return Err(Error::Input("attack and threshold traces differ in length".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Input("grid spacing must be positive".into()));
    }
    let w: Vec<f64> = a.iter().enumerate().map(|(k, &v)| (1.0 - (-b * k as f64 * dt).exp()) * v).collect();
    for i in 1..a.len() {
        let mut acc = 0.0;
        for k in 0..=i {
            let g = filter.impulse((i - k) as f64 * dt) * w[k];
            acc += if k == 0 || k == i { 0.5 * g } else { g };
        }
        if (acc * dt).abs() > 2.0 * eta[i] {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Replace flagged outputs by the corresponding estimate components.
pub fn mitigate(y: &[f64; NY], x_hat: &[f64; NX], flags: &[bool]) -> [f64; NY] {
    let mut out = *y;
    for (k, &s) in MEASURED.iter().enumerate() {
        if flags.get(k).copied().unwrap_or(false) {
            out[k] = x_hat[s];
        }
    }
    out
}

/// Detector configuration for a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub lambda_f: f64,
    pub floor: f64,
    /// χ̄; `None` calibrates it from an attack-free run.
    pub chi_bar: Option<f64>,
    pub zeta_bar: f64,
    /// Compare the filtered residual norm instead of the raw norm.
    pub filtered_residual: bool,
    pub mitigation: bool,
    /// χ̄ = margin × the calibration peak.
    pub calibration_margin: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { lambda_f: 100.0, floor: 1e-3, chi_bar: None, zeta_bar: 0.0, filtered_residual: false, mitigation: false, calibration_margin: 1.2 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        FilterState::new(self.lambda_f)?;
        ThresholdParams { chi_bar: self.chi_bar.unwrap_or(0.0), zeta_bar: self.zeta_bar, floor: self.floor }.validate()?;
        if !(self.calibration_margin >= 1.0) {
            return Err(Error::Input("calibration margin must be at least 1".into()));
        }
        Ok(())
    }
}

/// χ̄ from the peak of a residual trace after `transient` samples.
pub fn calibrate(residual_norms: &[f64], transient: usize, margin: f64) -> f64 {
    residual_norms.iter().skip(transient).cloned().fold(0.0, f64::max) * margin
}
