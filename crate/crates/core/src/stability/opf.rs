//! Operating-limit evaluation of droop set-points and a penalty dispatch.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{certify_decay, ReducedModel, Setpoints};
use crate::error::{Error, Result};
use crate::microgrid::network::C64;
use crate::microgrid::Microgrid;

/// Quadratic generation cost α P² + β P + γ per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl CostParams {
    pub fn benchmark() -> Self {
        Self { alpha: vec![1.0e-4, 1.2e-4, 0.8e-4, 1.1e-4], beta: vec![0.020, 0.018, 0.022, 0.020], gamma: vec![0.0; 4] }
    }

    pub fn cost(&self, p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, &p)| self.alpha[i] * p * p + self.beta[i] * p + self.gamma[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpfLimits {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Bus voltage magnitude band, V.
    pub v_min: f64,
    pub v_max: f64,
    /// Apparent-power limit per line and direction, VA.
    pub line_max: f64,
    /// Accepted nodal mismatch between scheduled and required injection, VA.
    pub balance_tol: f64,
}

impl OpfLimits {
    pub fn benchmark(mg: &Microgrid) -> Self {
        let n = mg.n();
        let v = mg.cfg.v_ref_volts();
        Self {
            p_min: vec![0.0; n],
            p_max: vec![10e3; n],
            q_min: vec![-6e3; n],
            q_max: vec![6e3; n],
            v_min: 0.95 * v,
            v_max: 1.05 * v,
            line_max: 10e3,
            balance_tol: 1.0,
        }
    }

    fn clip(&self, sp: &mut Setpoints) {
        for i in 0..sp.p.len() {
            sp.p[i] = sp.p[i].clamp(self.p_min[i], self.p_max[i]);
            sp.q[i] = sp.q[i].clamp(self.q_min[i], self.q_max[i]);
            sp.v[i] = sp.v[i].clamp(self.v_min, self.v_max);
        }
    }
}

/// Slacks per constraint family; negative entries are violations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpfSlacks {
    pub balance: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub line: Vec<f64>,
    pub voltage: Vec<f64>,
}

impl OpfSlacks {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.balance.iter().chain(&self.p).chain(&self.q).chain(&self.line).chain(&self.voltage).copied()
    }

    pub fn worst(&self) -> f64 {
        self.all().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpfReport {
    pub cost: f64,
    pub slacks: OpfSlacks,
    pub feasible: bool,
    /// Decay rate −max Re λ(Â), 1/s.
    pub margin: f64,
    /// Whether the requested decay rate is certified.
    pub certified: bool,
}

/// Voltages at every bus from the DG-bus voltages of the Kron-reduced
/// network.
fn expand_voltages(mg: &Microgrid, v_dg: &[C64]) -> Result<Vec<C64>> {
    let y = mg.cfg.admittance()?;
    let nb = y.nrows();
    let keep: Vec<usize> = mg.cfg.dg_bus.iter().map(|b| b - 1).collect();
    let elim: Vec<usize> = (0..nb).filter(|k| !keep.contains(k)).collect();
    let mut v = vec![C64::new(0.0, 0.0); nb];
    for (i, &k) in keep.iter().enumerate() {
        v[k] = v_dg[i];
    }
    if elim.is_empty() {
        return Ok(v);
    }
    let yee = DMatrix::from_fn(elim.len(), elim.len(), |i, j| y[(elim[i], elim[j])]);
    let yek = DMatrix::from_fn(elim.len(), keep.len(), |i, j| y[(elim[i], keep[j])]);
    let vk = DVector::from_column_slice(v_dg);
    let ve = yee.lu().solve(&(-(yek * vk))).ok_or_else(|| Error::Network("eliminated block is singular".into()))?;
    for (i, &k) in elim.iter().enumerate() {
        v[k] = ve[i];
    }
    Ok(v)
}

/// Evaluate set-points on the network equilibrium they induce.
pub fn opf_feasibility(mg: &Microgrid, sp: &Setpoints, limits: &OpfLimits, cost: &CostParams, eta_stab: f64) -> Result<OpfReport> {
    let rm = ReducedModel::from_microgrid(mg)?;
    let op = rm.equilibrium(sp)?;
    let n = rm.n;
    let d = rm.angles(&op.x);
    let i_o: Vec<C64> = (0..n).map(|i| C64::new(op.z[i], op.z[n + i])).collect();
    let zc: Vec<C64> = (0..n).map(|i| C64::new(rm.r_c[i], rm.x_c[i])).collect();
    let v_dg: Vec<C64> = (0..n)
        .map(|i| {
            let e = sp.v[i] + rm.n_q[i] * (sp.q[i] - op.x[n + i]);
            C64::from_polar(e, d[i]) - zc[i] * i_o[i]
        })
        .collect();
    let v = expand_voltages(mg, &v_dg)?;
    let y = mg.cfg.admittance()?;
    let nb = v.len();

    let mut scheduled = vec![C64::new(0.0, 0.0); nb];
    for i in 0..n {
        scheduled[mg.cfg.dg_bus[i] - 1] += C64::new(sp.p[i], sp.q[i]) - zc[i] * i_o[i].norm_sqr();
    }
    let balance = (0..nb)
        .map(|k| {
            let mut yv = C64::new(0.0, 0.0);
            for j in 0..nb {
                yv += y[(k, j)] * v[j];
            }
            limits.balance_tol - (scheduled[k] - v[k] * yv.conj()).norm()
        })
        .collect();
    let boxed = |x: f64, lo: f64, hi: f64| (x - lo).min(hi - x);
    let p = (0..n).map(|i| boxed(sp.p[i], limits.p_min[i], limits.p_max[i])).collect();
    let q = (0..n).map(|i| boxed(sp.q[i], limits.q_min[i], limits.q_max[i])).collect();
    let voltage = v.iter().map(|v| boxed(v.norm(), limits.v_min, limits.v_max)).collect();
    let mut line = Vec::new();
    for l in &mg.cfg.lines {
        let (a, b) = (l.from - 1, l.to - 1);
        let z = C64::new(l.r, mg.cfg.omega_base * l.l);
        let i_ab = (v[a] - v[b]) / z;
        line.push(limits.line_max - (v[a] * i_ab.conj()).norm());
        line.push(limits.line_max - (v[b] * (-i_ab).conj()).norm());
    }
    let slacks = OpfSlacks { balance, p, q, line, voltage };
    let (a_hat, _) = rm.linearize(&op.x, sp)?;
    let cert = certify_decay(&a_hat, eta_stab)?;
    Ok(OpfReport {
        cost: cost.cost(&sp.p),
        feasible: slacks.worst() >= -1e-8,
        slacks,
        margin: cert.margin(),
        certified: cert.certified,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchOptions {
    pub seed: u64,
    pub max_sweeps: usize,
    /// Weight on squared slack violations.
    pub penalty: f64,
    /// Initial move in W / var / V.
    pub initial_step: f64,
    /// Smallest move before stopping.
    pub min_step: f64,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self { seed: 0, max_sweeps: 400, penalty: 1.0, initial_step: 200.0, min_step: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Move {
    P(usize),
    Q(usize),
    V(usize),
    TransferP(usize, usize),
    TransferQ(usize, usize),
}

fn apply(sp: &mut Setpoints, mv: Move, s: f64) {
    match mv {
        Move::P(i) => sp.p[i] += s,
        Move::Q(i) => sp.q[i] += s,
        Move::V(i) => sp.v[i] += s * 1e-2,
        Move::TransferP(i, j) => {
            sp.p[i] += s;
            sp.p[j] -= s;
        }
        Move::TransferQ(i, j) => {
            sp.q[i] += s;
            sp.q[j] -= s;
        }
    }
}

/// Projected pattern descent on cost plus squared-violation penalties.
/// Iterates whose decay rate is not certified at `eta_stab` are rejected
/// outright. Returns the cheapest feasible certified iterate.
pub fn dispatch(
    mg: &Microgrid,
    limits: &OpfLimits,
    cost: &CostParams,
    eta_stab: f64,
    opts: &DispatchOptions,
) -> Result<(Setpoints, OpfReport)> {
    let n = mg.n();
    let rm = ReducedModel::from_microgrid(mg)?;
    // Start from the self-consistent schedule of the nominal set-points.
    let mut sp = Setpoints::nominal(mg);
    for _ in 0..5 {
        let op = rm.equilibrium(&sp)?;
        for i in 0..n {
            sp.p[i] = op.x[i];
            sp.q[i] = op.x[n + i];
        }
        limits.clip(&mut sp);
    }

    let score = |sp: &Setpoints| -> (f64, Option<OpfReport>) {
        match opf_feasibility(mg, sp, limits, cost, eta_stab) {
            Ok(r) if r.certified => {
                let pen: f64 = r.slacks.all().map(|s| s.min(0.0).powi(2)).sum();
                (r.cost + opts.penalty * pen, Some(r))
            }
            _ => (f64::INFINITY, None),
        }
    };

    let mut moves = Vec::new();
    for i in 0..n {
        moves.extend([Move::P(i), Move::Q(i), Move::V(i)]);
        for j in i + 1..n {
            moves.extend([Move::TransferP(i, j), Move::TransferQ(i, j)]);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut j_cur, mut rep) = score(&sp);
    let mut best: Option<(Setpoints, OpfReport)> = rep.clone().filter(|r| r.feasible).map(|r| (sp.clone(), r));
    let mut worst_seen = rep.as_ref().map_or(f64::NEG_INFINITY, |r| r.slacks.worst());
    let mut step = opts.initial_step;
    for _ in 0..opts.max_sweeps {
        if step < opts.min_step {
            break;
        }
        moves.shuffle(&mut rng);
        let mut improved = false;
        for &mv in &moves {
            for s in [step, -step] {
                let mut trial = sp.clone();
                apply(&mut trial, mv, s);
                limits.clip(&mut trial);
                if trial == sp {
                    continue;
                }
                let (j, r) = score(&trial);
                if j < j_cur {
                    sp = trial;
                    j_cur = j;
                    rep = r;
                    improved = true;
                    if let Some(r) = &rep {
                        worst_seen = worst_seen.max(r.slacks.worst());
                        if r.feasible && best.as_ref().is_none_or(|(_, b)| r.cost < b.cost) {
                            best = Some((sp.clone(), r.clone()));
                        }
                    }
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best.ok_or_else(|| Error::Dispatch(format!("no feasible certified iterate; best worst-slack {worst_seen:e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgrid::MicrogridConfig;

    fn bench() -> Microgrid {
        Microgrid::new(MicrogridConfig::benchmark()).unwrap()
    }

    #[test]
    fn starved_schedule_violates_balance() {
        let mg = bench();
        let lim = OpfLimits::benchmark(&mg);
        let sp = Setpoints { p: lim.p_min.clone(), ..Setpoints::nominal(&mg) };
        let r = opf_feasibility(&mg, &sp, &lim, &CostParams::benchmark(), 0.0).unwrap();
        assert!(!r.feasible);
        assert!(r.slacks.balance.iter().any(|&s| s < -100.0));
    }

    #[test]
    fn voltage_band_violation() {
        let mg = bench();
        let lim = OpfLimits { v_min: 390.0, ..OpfLimits::benchmark(&mg) };
        let r = opf_feasibility(&mg, &Setpoints::nominal(&mg), &lim, &CostParams::benchmark(), 0.0).unwrap();
        assert!(r.slacks.voltage.iter().any(|&s| s < 0.0));
    }

    #[test]
    fn equal_split_is_cheapest() {
        let c = CostParams { alpha: vec![2e-4; 2], beta: vec![0.01; 2], gamma: vec![1.0; 2] };
        let total = 8000.0;
        let even = c.cost(&[total / 2.0; 2]);
        for k in 1..20 {
            let a = total * k as f64 / 20.0;
            if (a - total / 2.0).abs() > 1e-9 {
                assert!(even < c.cost(&[a, total - a]));
            }
        }
    }
}
