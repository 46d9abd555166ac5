//! Coupled plant, observer and attack-generator simulation.
//!
//! One outer step of length `dt` runs `substeps` RK4 steps of the stacked
//! state [plant | estimates | ζ]. Arbitrary attack samples and mitigation
//! flags are held over the outer step; the detector and the trace run at
//! the outer rate.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Broadcast, Microgrid};
use crate::attack::{synthesize_stealthy, ArbitraryAttack, ArbitraryKind, Schedule, StealthyAttackSpec, VariantChoice};
use crate::detector::{calibrate, channel_flags, detect, filter_step, DetectorConfig, FilterState, ThresholdParams};
use crate::dg::{idx, uidx, MEASURED, NU, NX, NY};
use crate::error::{Error, Result};
use crate::numerics::Rk4;
use crate::observer::{design_gain_rotating, observer_derivative, scaled_poles, ObserverGain, ObserverKind, ObserverState};

/// Plant-norm bound beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e9;

/// Outputs whose controller-internal state is reset to its estimate when
/// flagged under mitigation: P, Q, ω_n, V_n.
const RESETTABLE: [usize; 4] = [0, 1, 8, 9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub duration: f64,
    pub dt: f64,
    /// RK4 substeps per outer step.
    pub substeps: usize,
    pub seed: u64,
    /// Plant initial state; flat start when absent.
    #[serde(skip)]
    pub initial: Option<Vec<f64>>,
    /// Offset added to the initial estimates.
    #[serde(skip)]
    pub estimate_offset: Option<Vec<f64>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { duration: 1.0, dt: 1e-4, substeps: 10, seed: 0, initial: None, estimate_offset: None }
    }
}

impl SimOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Input(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt * (1.0 - 1e-9)) {
            return Err(Error::Input(format!("duration {} is shorter than dt {}", self.duration, self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::Input("substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.duration / self.dt).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserverConfig {
    pub enabled: bool,
    pub kind: ObserverKind,
    /// Complex pole pair at −re ± im·i.
    pub pole_pair: [f64; 2],
    /// Real poles spread over [−hi, −lo], given as [lo, hi].
    pub pole_range: [f64; 2],
    /// Bounds x̄₁₁, x̄₁₂ on |i_od|, |i_oq|.
    pub x_bar: [f64; 2],
    /// Fold the nominal-frequency rotation into the nonlinear observer's
    /// design model.
    pub rotating_design: bool,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self { enabled: true, kind: ObserverKind::Nonlinear, pole_pair: [150.0, 10.0], pole_range: [160.0, 400.0], x_bar: [21.0, 10.0], rotating_design: true }
    }
}

/// Per-DG observer gains for a microgrid.
#[derive(Debug, Clone)]
pub struct ObserverBundle {
    pub enabled: bool,
    pub kind: ObserverKind,
    pub gains: Vec<ObserverGain>,
}

impl ObserverBundle {
    pub fn design(mg: &Microgrid, cfg: &ObserverConfig) -> Result<Self> {
        if !cfg.enabled {
            return Ok(Self::disabled());
        }
        let [re, im] = cfg.pole_pair;
        let [lo, hi] = cfg.pole_range;
        if !(re > 0.0 && lo > 0.0 && hi >= lo) {
            return Err(Error::Design("poles must lie in the open left half-plane".into()));
        }
        let poles = scaled_poles(re, im, lo, hi);
        // The output-injection error dynamics are exactly ξ̇ = (A − LC)ξ.
        let (xb, w0) = match cfg.kind {
            ObserverKind::Nonlinear => (cfg.x_bar, if cfg.rotating_design { mg.cfg.omega_ref } else { 0.0 }),
            ObserverKind::OutputInjection => ([0.0, 0.0], 0.0),
        };
        let gains = mg
            .models
            .iter()
            .map(|m| design_gain_rotating(&m.a, &m.c, &m.params, xb[0], xb[1], w0, &poles))
            .collect::<Result<Vec<_>>>()?;
        if let Some(k) = gains.iter().position(|g| !g.hurwitz) {
            return Err(Error::Design(format!("DG{} error dynamics are not Hurwitz", k + 1)));
        }
        Ok(Self { enabled: true, kind: cfg.kind, gains })
    }

    pub fn disabled() -> Self {
        Self { enabled: false, kind: ObserverKind::Nonlinear, gains: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StealthyPlan {
    /// Victim DG (one-based).
    pub victim: usize,
    /// Corrupted input channels (one-based u indices).
    pub gamma_u: Vec<usize>,
    /// Corrupted output channels (one-based y indices).
    #[serde(default)]
    pub gamma_y: Vec<usize>,
    pub schedule: Schedule,
    pub b: f64,
    /// ‖Δz_k‖ per slot.
    pub dz_norms: Vec<f64>,
    #[serde(default)]
    pub variant: VariantChoice,
}

impl StealthyPlan {
    /// Three slots over [0.4, 0.8) s on ω_n and V_n feeds of DG4.
    pub fn benchmark() -> Self {
        Self {
            victim: 4,
            gamma_u: vec![4, 7],
            gamma_y: vec![9, 10],
            schedule: Schedule::intermittent(0.4, 0.8, 3).expect("static schedule"),
            b: 0.2,
            dz_norms: vec![0.5, 0.25, 0.125],
            variant: VariantChoice::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitraryPlan {
    pub victim: usize,
    /// Corrupted input channels (one-based u indices).
    pub channels: Vec<usize>,
    pub noise: ArbitraryKind,
    pub start: f64,
    pub end: f64,
    /// Scale samples by each channel's nominal magnitude.
    #[serde(default = "yes")]
    pub per_unit: bool,
}

fn yes() -> bool {
    true
}

impl ArbitraryPlan {
    pub fn uniform() -> Self {
        Self { victim: 4, channels: vec![4, 7], noise: ArbitraryKind::Uniform { lo: -0.01, hi: 0.01 }, start: 0.4, end: 0.8, per_unit: true }
    }

    pub fn gaussian_sine() -> Self {
        Self {
            victim: 4,
            channels: vec![4, 7],
            noise: ArbitraryKind::GaussianSine { sigma: 1e-5f64.sqrt(), amplitude: 1.0, frequency: 50.0 },
            start: 0.4,
            end: 0.8,
            per_unit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum AttackPlan {
    #[default]
    None,
    Stealthy(StealthyPlan),
    Arbitrary(ArbitraryPlan),
}

impl AttackPlan {
    pub fn victim(&self) -> Option<usize> {
        match self {
            AttackPlan::None => None,
            AttackPlan::Stealthy(p) => Some(p.victim - 1),
            AttackPlan::Arbitrary(p) => Some(p.victim - 1),
        }
    }

    /// [first activation, last deactivation) of the plan.
    pub fn window(&self) -> Option<(f64, f64)> {
        match self {
            AttackPlan::None => None,
            AttackPlan::Stealthy(p) => Some((p.schedule.first_start(), p.schedule.last_end())),
            AttackPlan::Arbitrary(p) => Some((p.start, p.end)),
        }
    }

    pub fn active(&self, t: f64) -> bool {
        match self {
            AttackPlan::None => false,
            AttackPlan::Stealthy(p) => p.schedule.active_slot(t).is_some(),
            AttackPlan::Arbitrary(p) => t >= p.start && t < p.end,
        }
    }

    pub fn validate(&self, n_dg: usize) -> Result<()> {
        let check_victim = |v: usize| {
            if v == 0 || v > n_dg {
                Err(Error::Input(format!("victim DG{v} does not exist")))
            } else {
                Ok(())
            }
        };
        let check_channels = |ch: &[usize], max: usize, what: &str| {
            if let Some(c) = ch.iter().find(|&&c| c == 0 || c > max) {
                Err(Error::Input(format!("{what} channel {c} outside 1..={max}")))
            } else {
                Ok(())
            }
        };
        match self {
            AttackPlan::None => Ok(()),
            AttackPlan::Stealthy(p) => {
                check_victim(p.victim)?;
                check_channels(&p.gamma_u, NU, "input")?;
                check_channels(&p.gamma_y, NY, "output")?;
                if p.gamma_u.is_empty() {
                    return Err(Error::Input("stealthy attack needs an input channel".into()));
                }
                p.schedule.validate()?;
                if p.dz_norms.len() != p.schedule.starts.len() {
                    return Err(Error::Input("one Δz norm per slot is required".into()));
                }
                if !(p.b > 0.0) {
                    return Err(Error::Input("envelope rate b must be positive".into()));
                }
                Ok(())
            }
            AttackPlan::Arbitrary(p) => {
                check_victim(p.victim)?;
                check_channels(&p.channels, NU, "input")?;
                p.noise.validate()?;
                if !(p.end > p.start) {
                    return Err(Error::Input("attack window must have end > start".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    AttackOn,
    AttackOff,
    AlarmOn,
    AlarmOff,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioEvent {
    pub t: f64,
    /// DG index (zero-based); `None` for plan-wide events.
    pub dg: Option<usize>,
    pub kind: EventKind,
}

/// Recorded run. Index k of every history is the state at `t[k]`, the end
/// of outer step k.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub t: Vec<f64>,
    /// states[i][k]: plant state of DG i.
    pub states: Vec<Vec<[f64; NX]>>,
    /// Empty when observers are disabled.
    pub estimates: Vec<Vec<[f64; NX]>>,
    pub r_norm: Vec<Vec<f64>>,
    /// Residual vector r = y − C x̂ per DG.
    pub residuals: Vec<Vec<[f64; NY]>>,
    pub eta: Vec<Vec<f64>>,
    pub detected: Vec<Vec<bool>>,
    pub mitigated: Vec<Vec<bool>>,
    pub attack_active: Vec<bool>,
    pub events: Vec<ScenarioEvent>,
    /// χ̄ used per DG.
    pub chi_bar: Vec<f64>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n_dg(&self) -> usize {
        self.states.len()
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.states.iter().flat_map(|h| h.last().copied().unwrap_or([0.0; NX])).collect()
    }

    /// Time of the first alarm of DG i at or after `from`.
    pub fn first_alarm(&self, i: usize, from: f64) -> Option<f64> {
        self.t.iter().zip(&self.detected[i]).find(|(t, d)| **t >= from && **d).map(|(t, _)| *t)
    }

    pub fn alarm_count(&self) -> usize {
        self.detected.iter().flatten().filter(|&&d| d).count()
    }

    fn step(&self) -> f64 {
        match self.t.as_slice() {
            [a, b, ..] => b - a,
            [a] => *a,
            [] => 0.0,
        }
    }

    /// ∫|v_od − v_ref| dt of DG i over [t0, t1), rectangle rule.
    pub fn voltage_deviation(&self, mg: &Microgrid, i: usize, t0: f64, t1: f64) -> f64 {
        let vref = mg.cfg.v_ref_volts();
        let dt = self.step();
        self.t
            .iter()
            .zip(&self.states[i])
            .filter(|(t, _)| **t >= t0 && **t < t1)
            .map(|(_, x)| (x[idx::VO_D] - vref).abs() * dt)
            .sum()
    }

    /// Earliest sample time at or after `from` from which every DG stays in
    /// band until the end of the trace.
    pub fn settling_time(&self, mg: &Microgrid, from: f64, v_frac: f64, w_tol: f64) -> Option<f64> {
        let mut settled = None;
        for (k, &t) in self.t.iter().enumerate() {
            if t < from {
                continue;
            }
            let ok = (0..self.n_dg()).all(|i| in_band(mg, i, &self.states[i][k], v_frac, w_tol));
            match (ok, settled) {
                (true, None) => settled = Some(t),
                (false, _) => settled = None,
                _ => {}
            }
        }
        settled
    }
}

/// |v_od − v_ref| < v_frac·v_ref and |ω − ω_ref| < w_tol for DG i.
pub fn in_band(mg: &Microgrid, i: usize, x: &[f64; NX], v_frac: f64, w_tol: f64) -> bool {
    let p = &mg.models[i].params;
    let vref = mg.cfg.v_ref_volts();
    let w = x[idx::OMEGA_N] - p.m_p * x[idx::P];
    (x[idx::VO_D] - vref).abs() < v_frac * vref && (w - mg.cfg.omega_ref).abs() < w_tol
}

/// Per-unit base of input channel `ch` (zero-based) at DG i: the frequency
/// or voltage reference carried through the channel's gains.
pub fn channel_scale(mg: &Microgrid, i: usize, ch: usize) -> f64 {
    let p = &mg.models[i].params;
    let deg = mg.models[i].degree.max(1.0);
    let g = if mg.cfg.pinning[i] > 0.0 { mg.cfg.pinning[i] } else { 1.0 };
    let (w, v) = (mg.cfg.omega_ref, mg.cfg.v_ref_volts());
    match ch {
        uidx::OMEGA_COM => w,
        uidx::VB_D | uidx::VB_Q => v,
        uidx::NBR_OMEGA | uidx::NBR_MP => p.c_freq * deg * w,
        uidx::REF_OMEGA => p.c_freq * g * w,
        uidx::REF_V => p.c_volt * g * v,
        _ => p.c_volt * deg * v,
    }
}

enum Attack {
    None,
    Stealthy { victim: usize, gamma_u: Vec<usize>, gamma_y: Vec<usize>, spec: Box<StealthyAttackSpec> },
    Arbitrary { victim: usize, channels: Vec<usize>, scale: Vec<f64>, gen: ArbitraryAttack, start: f64, end: f64 },
}

/// Build the stealthy attack spec that a plan induces on the victim's model.
pub fn stealthy_spec(mg: &Microgrid, plan: &StealthyPlan) -> Result<StealthyAttackSpec> {
    let m = &mg.models[plan.victim - 1];
    let gu: Vec<usize> = plan.gamma_u.iter().map(|c| c - 1).collect();
    let gy: Vec<usize> = plan.gamma_y.iter().map(|c| c - 1).collect();
    synthesize_stealthy(&m.a, &m.b, &m.c, &gu, &gy, plan.schedule.clone(), &plan.dz_norms, plan.b, plan.variant)
}

impl Attack {
    fn build(mg: &Microgrid, plan: &AttackPlan, seed: u64) -> Result<Self> {
        plan.validate(mg.n())?;
        Ok(match plan {
            AttackPlan::None => Attack::None,
            AttackPlan::Stealthy(p) => Attack::Stealthy {
                victim: p.victim - 1,
                gamma_u: p.gamma_u.iter().map(|c| c - 1).collect(),
                gamma_y: p.gamma_y.iter().map(|c| c - 1).collect(),
                spec: Box::new(stealthy_spec(mg, p)?),
            },
            AttackPlan::Arbitrary(p) => {
                let channels: Vec<usize> = p.channels.iter().map(|c| c - 1).collect();
                let scale = channels
                    .iter()
                    .map(|&c| if p.per_unit { channel_scale(mg, p.victim - 1, c) } else { 1.0 })
                    .collect();
                Attack::Arbitrary { victim: p.victim - 1, channels, scale, gen: ArbitraryAttack::new(p.noise, seed)?, start: p.start, end: p.end }
            }
        })
    }

    fn zeta_dim(&self) -> usize {
        match self {
            Attack::Stealthy { .. } => NX,
            _ => 0,
        }
    }
}

/// Quantities held constant over one outer step.
struct Held {
    /// Arbitrary corruption added to the victim's input channels.
    arbitrary: Vec<f64>,
    /// Per-DG, per-output mitigation flags.
    flags: Vec<[bool; NY]>,
}

struct Stack<'a> {
    mg: &'a Microgrid,
    obs: &'a ObserverBundle,
    attack: &'a Attack,
    n: usize,
}

impl Stack<'_> {
    fn obs_offset(&self) -> usize {
        self.n * NX
    }

    fn zeta_offset(&self) -> usize {
        if self.obs.enabled {
            2 * self.n * NX
        } else {
            self.n * NX
        }
    }

    /// Outputs as reported to the controllers and observers, before mitigation.
    fn reported(&self, t: f64, x: &[f64], ys: &mut [[f64; NY]]) -> (Vec<f64>, Vec<f64>) {
        for (i, y) in ys.iter_mut().enumerate() {
            *y = self.mg.models[i].measure(&x[i * NX..(i + 1) * NX]);
        }
        match self.attack {
            Attack::Stealthy { victim, gamma_u, gamma_y, spec } => {
                let z0 = self.zeta_offset();
                let zeta = DVector::from_column_slice(&x[z0..z0 + NX]);
                let (a, zdot) = spec.signal(t, &zeta, None);
                let ku = gamma_u.len();
                for (k, &j) in gamma_y.iter().enumerate() {
                    ys[*victim][j] += a[ku + k];
                }
                (a.as_slice()[..ku].to_vec(), zdot.as_slice().to_vec())
            }
            _ => (Vec::new(), Vec::new()),
        }
    }

    fn derivative(&self, t: f64, x: &[f64], dx: &mut [f64], held: &Held) {
        let n = self.n;
        let vb = self.mg.bus_voltages(&x[..n * NX]);
        let mut ys = vec![[0.0; NY]; n];
        let (a_u, zdot) = self.reported(t, x, &mut ys);
        let o0 = self.obs_offset();
        // Flagged channels are broadcast from the estimate; the observer
        // itself keeps correcting on what the DG reports.
        let raw = ys.clone();
        if self.obs.enabled {
            for (i, y) in ys.iter_mut().enumerate() {
                let xh = &x[o0 + i * NX..o0 + (i + 1) * NX];
                for (k, &s) in MEASURED.iter().enumerate() {
                    if held.flags[i][k] {
                        y[k] = xh[s];
                    }
                }
            }
        }
        let data: Vec<Broadcast> = (0..n).map(|j| self.mg.broadcast(j, &ys[j])).collect();
        for i in 0..n {
            let u_clean = self.mg.assemble_u_from(i, &data, vb[i]);
            let mut u = u_clean;
            match self.attack {
                Attack::Stealthy { victim, gamma_u, .. } if *victim == i => {
                    for (k, &c) in gamma_u.iter().enumerate() {
                        u[c] += a_u[k];
                    }
                }
                Attack::Arbitrary { victim, channels, .. } if *victim == i => {
                    for (k, &c) in channels.iter().enumerate() {
                        u[c] += held.arbitrary[k];
                    }
                }
                _ => {}
            }
            let m = &self.mg.models[i];
            m.derivative(&x[i * NX..(i + 1) * NX], &u, &mut dx[i * NX..(i + 1) * NX]);
            if self.obs.enabled {
                let r = o0 + i * NX..o0 + (i + 1) * NX;
                observer_derivative(self.obs.kind, m, &self.obs.gains[i], &x[r.clone()], &u_clean, &raw[i], &mut dx[r]);
            }
        }
        if !zdot.is_empty() {
            let z0 = self.zeta_offset();
            dx[z0..z0 + NX].copy_from_slice(&zdot);
        }
    }
}

/// χ̄ per DG: margin × peak residual norm of an attack-free run after
/// `transient` seconds.
pub fn calibrate_threshold(mg: &Microgrid, obs: &ObserverBundle, det: &DetectorConfig, opts: &SimOptions, transient: f64) -> Result<Vec<f64>> {
    let calm = DetectorConfig { chi_bar: Some(0.0), mitigation: false, ..*det };
    let mut o = opts.clone();
    o.estimate_offset = None;
    let tr = simulate(mg, &AttackPlan::None, obs, &calm, &o, &vec![0.0; mg.n()])?;
    let skip = tr.t.iter().position(|&t| t >= transient).unwrap_or(tr.len());
    Ok((0..mg.n()).map(|i| calibrate(&filtered(&tr.r_norm[i], det.lambda_f, opts.dt), skip, det.calibration_margin)).collect())
}

fn filtered(x: &[f64], lambda: f64, dt: f64) -> Vec<f64> {
    let mut fs = FilterState { lambda, z: 0.0 };
    x.iter()
        .map(|&v| {
            let (n, o) = filter_step(fs, v, dt);
            fs = n;
            o
        })
        .collect()
}

/// Calibration window skipped at the start of the attack-free run.
pub const CALIBRATION_TRANSIENT: f64 = 0.05;

/// Run a scenario. χ̄ is calibrated from an attack-free run with the same
/// settings when the detector leaves it unset.
pub fn run_scenario(mg: &Microgrid, plan: &AttackPlan, obs: &ObserverBundle, det: &DetectorConfig, opts: &SimOptions) -> Result<SimTrace> {
    opts.validate()?;
    det.validate()?;
    let chi = match det.chi_bar {
        Some(c) => vec![c; mg.n()],
        None if obs.enabled => calibrate_threshold(mg, obs, det, opts, CALIBRATION_TRANSIENT)?,
        None => vec![0.0; mg.n()],
    };
    simulate(mg, plan, obs, det, opts, &chi)
}

fn simulate(mg: &Microgrid, plan: &AttackPlan, obs: &ObserverBundle, det: &DetectorConfig, opts: &SimOptions, chi: &[f64]) -> Result<SimTrace> {
    opts.validate()?;
    let n = mg.n();
    if obs.enabled && obs.gains.len() != n {
        return Err(Error::Dimension(format!("{} observer gains for {} DGs", obs.gains.len(), n)));
    }
    let mut attack = Attack::build(mg, plan, opts.seed)?;

    let plant0 = match &opts.initial {
        Some(x) if x.len() == n * NX => x.clone(),
        Some(x) => return Err(Error::Dimension(format!("initial state has {} entries, expected {}", x.len(), n * NX))),
        None => mg.flat_start(),
    };
    let n_obs = if obs.enabled { n * NX } else { 0 };
    let n_zeta = attack.zeta_dim();
    let mut x = vec![0.0; n * NX + n_obs + n_zeta];
    x[..n * NX].copy_from_slice(&plant0);
    if obs.enabled {
        for i in 0..n {
            let y = mg.models[i].measure(&plant0[i * NX..(i + 1) * NX]);
            let s = ObserverState::from_measurement(&y);
            x[n * NX + i * NX..n * NX + (i + 1) * NX].copy_from_slice(&s.x_hat);
        }
        if let Some(off) = &opts.estimate_offset {
            if off.len() != n * NX {
                return Err(Error::Dimension(format!("estimate offset has {} entries, expected {}", off.len(), n * NX)));
            }
            for (k, v) in off.iter().enumerate() {
                x[n * NX + k] += v;
            }
        }
    }

    let steps = opts.steps();
    let h = opts.dt / opts.substeps as f64;
    let mut rk = Rk4::new(x.len());
    let mut trace = SimTrace {
        t: Vec::with_capacity(steps),
        states: vec![Vec::with_capacity(steps); n],
        estimates: if obs.enabled { vec![Vec::with_capacity(steps); n] } else { Vec::new() },
        r_norm: vec![Vec::with_capacity(steps); n],
        residuals: vec![Vec::with_capacity(steps); n],
        eta: vec![Vec::with_capacity(steps); n],
        detected: vec![Vec::with_capacity(steps); n],
        mitigated: vec![Vec::with_capacity(steps); n],
        attack_active: Vec::with_capacity(steps),
        events: Vec::new(),
        chi_bar: chi.to_vec(),
    };
    let tps: Vec<ThresholdParams> = chi.iter().map(|&c| ThresholdParams { chi_bar: c, zeta_bar: det.zeta_bar, floor: det.floor }).collect();
    let mut eta_f = vec![FilterState::new(det.lambda_f)?; n];
    let mut res_f = vec![FilterState::new(det.lambda_f)?; n];
    let mut held = Held { arbitrary: Vec::new(), flags: vec![[false; NY]; n] };
    let mut alarm = vec![false; n];
    let mut was_active = false;
    let mut slot_seen: Option<usize> = None;

    for step in 0..steps {
        let t0 = step as f64 * opts.dt;

        // Attack bookkeeping for this outer step.
        let active = plan.active(t0);
        if active != was_active {
            trace.events.push(ScenarioEvent { t: t0, dg: plan.victim(), kind: if active { EventKind::AttackOn } else { EventKind::AttackOff } });
            was_active = active;
        }
        match &mut attack {
            Attack::Arbitrary { channels, scale, gen, start, end, .. } => {
                held.arbitrary = if t0 >= *start && t0 < *end {
                    gen.sample(t0, channels.len()).iter().zip(scale.iter()).map(|(a, s)| a * s).collect()
                } else {
                    vec![0.0; channels.len()]
                };
            }
            Attack::Stealthy { spec, .. } => {
                let slot = spec.schedule.active_slot(t0);
                if slot.is_some() && slot != slot_seen {
                    let k = slot.unwrap_or(0);
                    let z0 = x.len() - NX;
                    x[z0..].copy_from_slice(spec.initial_state(k).as_slice());
                }
                slot_seen = slot;
            }
            Attack::None => {}
        }

        let stack = Stack { mg, obs, attack: &attack, n };
        for s in 0..opts.substeps {
            let t = t0 + s as f64 * h;
            rk.step(
                |tt, xs, d| {
                    stack.derivative(tt, xs, d, &held);
                    Ok(())
                },
                t,
                &mut x,
                h,
            )?;
        }
        let t1 = (step + 1) as f64 * opts.dt;
        let norm = x[..n * NX].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { t: t1, norm });
        }

        // Detector at the outer rate on the reported outputs.
        let mut ys = vec![[0.0; NY]; n];
        stack.reported(t1, &x, &mut ys);
        for i in 0..n {
            let (r, rn, eta, flag) = if obs.enabled {
                let xh = &x[n * NX + i * NX..n * NX + (i + 1) * NX];
                let mut r = [0.0; NY];
                for (k, &s) in MEASURED.iter().enumerate() {
                    r[k] = ys[i][k] - xh[s];
                }
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let eta = crate::detector::threshold(&tps[i], &mut eta_f[i], opts.dt);
                let (nf, rf) = filter_step(res_f[i], rn, opts.dt);
                res_f[i] = nf;
                let stat = if det.filtered_residual { rf } else { rn };
                (r, rn, eta, detect(stat, eta))
            } else {
                ([0.0; NY], 0.0, det.floor, false)
            };
            if flag != alarm[i] {
                trace.events.push(ScenarioEvent { t: t1, dg: Some(i), kind: if flag { EventKind::AlarmOn } else { EventKind::AlarmOff } });
                alarm[i] = flag;
            }
            let mut flags = [false; NY];
            if det.mitigation && flag {
                let per = channel_flags(&r, eta);
                flags.copy_from_slice(&per);
                let o = n * NX + i * NX;
                for &k in &RESETTABLE {
                    if flags[k] {
                        x[i * NX + MEASURED[k]] = x[o + MEASURED[k]];
                    }
                }
            }
            held.flags[i] = flags;
            trace.r_norm[i].push(rn);
            trace.residuals[i].push(r);
            trace.eta[i].push(eta);
            trace.detected[i].push(flag);
            trace.mitigated[i].push(flags.iter().any(|&f| f));
        }
        trace.t.push(t1);
        trace.attack_active.push(active);
        for i in 0..n {
            let mut s = [0.0; NX];
            s.copy_from_slice(&x[i * NX..(i + 1) * NX]);
            trace.states[i].push(s);
            if obs.enabled {
                let mut e = [0.0; NX];
                e.copy_from_slice(&x[n * NX + i * NX..n * NX + (i + 1) * NX]);
                trace.estimates[i].push(e);
            }
        }
    }
    Ok(trace)
}

/// Observer error ‖x − x̂‖ over every state except δ.
pub fn estimation_error(x: &[f64; NX], xh: &[f64; NX]) -> f64 {
    (0..NX).filter(|&k| k != idx::DELTA).map(|k| (x[k] - xh[k]).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgrid::MicrogridConfig;

    fn bench() -> Microgrid {
        Microgrid::new(MicrogridConfig::benchmark()).unwrap()
    }

    fn short(duration: f64) -> SimOptions {
        SimOptions { duration, ..SimOptions::default() }
    }

    #[test]
    fn one_step_is_one_record() {
        let mg = bench();
        let o = SimOptions { duration: 1e-4, ..SimOptions::default() };
        let tr = run_scenario(&mg, &AttackPlan::None, &ObserverBundle::disabled(), &DetectorConfig::default(), &o).unwrap();
        assert_eq!(tr.len(), 1);
        assert!((tr.t[0] - 1e-4).abs() < 1e-15);
        assert!(tr.states.iter().all(|h| h.len() == 1));
    }

    #[test]
    fn observers_are_passive() {
        let mg = bench();
        let o = short(0.02);
        let off = run_scenario(&mg, &AttackPlan::None, &ObserverBundle::disabled(), &DetectorConfig::default(), &o).unwrap();
        let bundle = ObserverBundle::design(&mg, &ObserverConfig::default()).unwrap();
        let on = run_scenario(&mg, &AttackPlan::None, &bundle, &DetectorConfig::default(), &o).unwrap();
        assert_eq!(off.states, on.states);
    }

    #[test]
    fn rejects_bad_options() {
        let mg = bench();
        let mut o = short(0.01);
        o.dt = 0.0;
        assert!(run_scenario(&mg, &AttackPlan::None, &ObserverBundle::disabled(), &DetectorConfig::default(), &o).is_err());
        let mut o = short(1e-5);
        o.dt = 1e-4;
        assert!(run_scenario(&mg, &AttackPlan::None, &ObserverBundle::disabled(), &DetectorConfig::default(), &o).is_err());
        let mut p = ArbitraryPlan::uniform();
        p.victim = 5;
        assert!(AttackPlan::Arbitrary(p).validate(4).is_err());
    }

    #[test]
    fn coarse_step_diverges_with_timestamp() {
        let mg = bench();
        let o = SimOptions { duration: 0.2, dt: 1e-3, substeps: 1, ..SimOptions::default() };
        match run_scenario(&mg, &AttackPlan::None, &ObserverBundle::disabled(), &DetectorConfig::default(), &o) {
            Err(Error::Divergence { t, .. }) | Err(Error::Integration { t }) => assert!(t > 0.0 && t <= 0.2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn attack_plans_round_trip() {
        for p in [AttackPlan::None, AttackPlan::Stealthy(StealthyPlan::benchmark()), AttackPlan::Arbitrary(ArbitraryPlan::uniform())] {
            let s = toml::to_string(&p).unwrap();
            let back: AttackPlan = toml::from_str(&s).unwrap();
            assert_eq!(back, p);
        }
    }
}
