//! Bounded scenario search for damaging stealthy attacks, and
//! linearisations of simulated scenarios.

use nalgebra::{Complex, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{certify_decay, ReducedModel, Setpoints};
use crate::attack::Schedule;
use crate::detector::DetectorConfig;
use crate::dg::idx;
use crate::error::{Error, Result};
use crate::microgrid::sim::{run_scenario, AttackPlan, ObserverBundle, SimOptions, SimTrace, StealthyPlan};
use crate::microgrid::Microgrid;
use crate::numerics::eigenvalues;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBudget {
    /// Number of scenario evaluations, the base plan included.
    pub evaluations: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    /// Weight of the frequency term in the objective, V per rad/s.
    pub omega_weight: f64,
    /// Bounds on ‖Δz_k‖.
    pub dz_bounds: (f64, f64),
    /// Bounds on the envelope rate b.
    pub b_bounds: (f64, f64),
    pub max_slots: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { evaluations: 16, seed: 0, jobs: 0, omega_weight: 1.0, dz_bounds: (0.05, 2.0), b_bounds: (0.05, 0.5), max_slots: 3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchResult {
    pub plan: StealthyPlan,
    /// Σ_i ∫|v_od − v_ref| + w|ω − ω_ref| dt.
    pub objective: f64,
    /// Same integral against the attack-free run instead of the references.
    pub impact: f64,
    pub alarms: usize,
    pub evaded: bool,
}

fn omega(mg: &Microgrid, i: usize, x: &[f64]) -> f64 {
    x[idx::OMEGA_N] - mg.models[i].params.m_p * x[idx::P]
}

fn objectives(mg: &Microgrid, tr: &SimTrace, base: &SimTrace, w: f64) -> (f64, f64) {
    let dt = match tr.t.as_slice() {
        [a, b, ..] => b - a,
        _ => 0.0,
    };
    let vref = mg.cfg.v_ref_volts();
    let wref = mg.cfg.omega_ref;
    let (mut rel, mut abs) = (0.0, 0.0);
    for i in 0..tr.n_dg() {
        for (x, x0) in tr.states[i].iter().zip(&base.states[i]) {
            rel += ((x[idx::VO_D] - x0[idx::VO_D]).abs() + w * (omega(mg, i, x) - omega(mg, i, x0)).abs()) * dt;
            abs += ((x[idx::VO_D] - vref).abs() + w * (omega(mg, i, x) - wref).abs()) * dt;
        }
    }
    (rel, abs)
}

fn candidate(base: &StealthyPlan, budget: &SearchBudget, rng: &mut ChaCha8Rng) -> Result<StealthyPlan> {
    let (t0, t1) = (base.schedule.first_start(), base.schedule.last_end());
    let slots = rng.random_range(1..=budget.max_slots.max(1));
    let schedule = Schedule::intermittent(t0, t1, slots)?;
    let b = rng.random_range(budget.b_bounds.0..=budget.b_bounds.1);
    let dz_norms = (0..slots).map(|_| rng.random_range(budget.dz_bounds.0..=budget.dz_bounds.1)).collect();
    Ok(StealthyPlan { schedule, b, dz_norms, ..base.clone() })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Input(format!("thread pool: {e}")))
}

/// Evaluate `base` and `evaluations − 1` random variations of its envelope
/// rate, slot count and Δz norms; results sorted by decreasing objective.
pub fn worst_case_attack_search(
    mg: &Microgrid,
    base: &StealthyPlan,
    obs: &ObserverBundle,
    det: &DetectorConfig,
    opts: &SimOptions,
    budget: &SearchBudget,
) -> Result<Vec<SearchResult>> {
    if budget.evaluations == 0 {
        return Err(Error::Input("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut plans = vec![base.clone()];
    for _ in 1..budget.evaluations {
        plans.push(candidate(base, budget, &mut rng)?);
    }
    let reference = run_scenario(mg, &AttackPlan::None, obs, det, opts)?;
    let results: Vec<Result<SearchResult>> = pool(budget.jobs)?.install(|| {
        plans
            .into_par_iter()
            .map(|plan| {
                let tr = run_scenario(mg, &AttackPlan::Stealthy(plan.clone()), obs, det, opts)?;
                let (impact, objective) = objectives(mg, &tr, &reference, budget.omega_weight);
                let alarms = tr.alarm_count();
                Ok(SearchResult { plan, objective, impact, alarms, evaded: alarms == 0 })
            })
            .collect()
    });
    let mut out = results.into_iter().collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.objective.total_cmp(&a.objective));
    Ok(out)
}

/// Reduced state and droop set-points equivalent to the mean of a trace
/// over [t0, t1): ω = ω_n − m_P P maps to p_opf, V_n to v_opf.
pub fn trace_mean_point(mg: &Microgrid, rm: &ReducedModel, tr: &SimTrace, t0: f64, t1: f64) -> Result<(DVector<f64>, Setpoints)> {
    let ks: Vec<usize> = (0..tr.len()).filter(|&k| tr.t[k] >= t0 && tr.t[k] < t1).collect();
    if ks.is_empty() {
        return Err(Error::Input(format!("no samples in [{t0}, {t1})")));
    }
    let n = mg.n();
    let mean = |i: usize, f: &dyn Fn(&[f64; 15]) -> f64| ks.iter().map(|&k| f(&tr.states[i][k])).sum::<f64>() / ks.len() as f64;
    let mut x = DVector::zeros(rm.nx());
    let mut sp = Setpoints::nominal(mg);
    for i in 0..n {
        x[i] = mean(i, &|s| s[idx::P]);
        x[n + i] = mean(i, &|s| s[idx::Q]);
        if i > 0 {
            let d = ks.iter().map(|&k| tr.states[i][k][idx::DELTA] - tr.states[0][k][idx::DELTA]).sum::<f64>() / ks.len() as f64;
            x[2 * n + i - 1] = d;
        }
        sp.p[i] = (mean(i, &|s| s[idx::OMEGA_N]) - rm.omega_b) / rm.m_p[i];
        sp.q[i] = 0.0;
        sp.v[i] = mean(i, &|s| s[idx::V_N]);
    }
    Ok((x, sp))
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenScenario {
    pub tag: String,
    pub eigenvalues: Vec<(f64, f64)>,
    /// −max Re λ(Â).
    pub margin: f64,
}

/// Â spectra of the attack-free, stealthy, stealthy-intermittent and
/// mitigated runs, each linearised at its mean over the attack window.
pub fn eigen_scenarios(
    mg: &Microgrid,
    plan: &StealthyPlan,
    obs: &ObserverBundle,
    det: &DetectorConfig,
    opts: &SimOptions,
) -> Result<Vec<EigenScenario>> {
    let rm = ReducedModel::from_microgrid(mg)?;
    let (t0, t1) = (plan.schedule.first_start(), plan.schedule.last_end());
    let single = StealthyPlan { schedule: Schedule::window(t0, t1)?, dz_norms: vec![plan.dz_norms[0]], ..plan.clone() };
    let off = DetectorConfig { mitigation: false, ..*det };
    let on = DetectorConfig { mitigation: true, ..*det };
    let cases = [
        ("attack-free", AttackPlan::None, off),
        ("stealthy", AttackPlan::Stealthy(single), off),
        ("stealthy-intermittent", AttackPlan::Stealthy(plan.clone()), off),
        ("mitigated", AttackPlan::Stealthy(plan.clone()), on),
    ];
    cases
        .into_par_iter()
        .map(|(tag, attack, d)| {
            let tr = run_scenario(mg, &attack, obs, &d, opts)?;
            let (x, sp) = trace_mean_point(mg, &rm, &tr, t0, t1)?;
            let (a_hat, _) = rm.linearize(&x, &sp)?;
            let ev: Vec<Complex<f64>> = eigenvalues(&a_hat)?;
            let margin = certify_decay(&a_hat, 0.0)?.margin();
            Ok(EigenScenario { tag: tag.into(), eigenvalues: ev.iter().map(|z| (z.re, z.im)).collect(), margin })
        })
        .collect()
}
