//! One PASS/FAIL line per acceptance criterion. Failures make the process
//! exit nonzero only when `MGSHIELD_STRICT_ACCEPTANCE` is set, so the rest
//! of `cargo test` still runs.

use std::process::ExitCode;
use std::time::Instant;

use mgshield::attack::{channel_matrices, from_subspace, synthesize_stealthy, Schedule, VariantChoice};
use mgshield::cli::{self, ScenarioConfig};
use mgshield::dg::{idx, nonlinear_f, DgParams, NX, NY};
use mgshield::detector::DetectorConfig;
use mgshield::microgrid::sim::{estimation_error, stealthy_spec, ArbitraryPlan, StealthyPlan};
use mgshield::microgrid::{run_scenario, AttackPlan, Microgrid, MicrogridConfig, ObserverBundle, ObserverConfig, SimOptions, SimTrace};
use mgshield::numerics::{eigenvalues, SubspaceBasis};
use mgshield::observer::{l2_entries, lyapunov_slack, nonlinear_gain_l2, scaled_poles, ObserverKind};
use mgshield::stability::{certify_decay, eigen_scenarios, ReducedModel, Setpoints};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bench() -> Microgrid {
    Microgrid::new(MicrogridConfig::benchmark()).unwrap()
}

fn observers(kind: ObserverKind) -> ObserverBundle {
    ObserverBundle::design(&bench(), &ObserverConfig { kind, ..ObserverConfig::default() }).unwrap()
}

fn run(plan: &AttackPlan, obs: &ObserverBundle, mitigation: bool) -> SimTrace {
    let det = DetectorConfig { mitigation, ..DetectorConfig::default() };
    run_scenario(&bench(), plan, obs, &det, &SimOptions::default()).unwrap()
}

/// Alarm times of DG i.
fn alarm_times(tr: &SimTrace, i: usize) -> Vec<f64> {
    tr.t.iter().zip(&tr.detected[i]).filter(|(_, d)| **d).map(|(t, _)| *t).collect()
}

fn worked_example() -> Outcome {
    let clock = Instant::now();
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let v = DVector::from_vec(vec![-0.4472, 0.8944]);
    let q = DMatrix::from_row_slice(2, 2, &[0.8, -1.6, 0.4, -0.8]);
    let dz = [[-0.2236, 0.4472], [-0.1118, 0.2236], [-0.0559, 0.1118]].map(|d| DVector::from_vec(d.to_vec()));
    let (b_a, d) = channel_matrices(&b, 1, &[0], &[0]).unwrap();
    let sched = Schedule::new(vec![70.0, 72.0, 74.0], vec![1.0; 3]).unwrap();
    let v_a = SubspaceBasis::span_of(&DMatrix::from_column_slice(2, 1, v.as_slice()));
    let spec = from_subspace(&a, &b_a, &d, v_a.clone(), Some(q), sched.clone(), &[0.5, 0.25, 0.125], 0.2).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();

    let eig_err = (&spec.a_cl * &v + &v * 2.0).amax();
    let span_err = dz.iter().chain(&spec.dz).map(|z| v_a.distance(z)).fold(0.0, f64::max);
    let n: Vec<f64> = dz.iter().map(|z| z.norm()).collect();
    let ratio_err = ((n[0] / n[2] - 4.0).abs()).max((n[1] / n[2] - 2.0).abs());
    let gen: Vec<f64> = spec.dz.iter().map(|z| z.norm()).collect();
    let gen_ratio_err = ((gen[0] / gen[2] - 4.0).abs()).max((gen[1] / gen[2] - 2.0).abs());
    // Independent route: synthesis from (A, B, C) alone.
    let synth = synthesize_stealthy(&a, &b, &c, &[0], &[0], sched, &[0.5, 0.25, 0.125], 0.2, VariantChoice::Auto).unwrap();
    let synth_err = synth.v_a.distance(&v) / v.norm();
    let pass = eig_err < 1e-9 && span_err < 1e-9 && ratio_err < 1e-9 && gen_ratio_err < 1e-9 && synth_err < 1e-4 && elapsed < 1e-3;
    outcome(
        pass,
        format!(
            "eigen residual {eig_err:.1e}, span residual {span_err:.1e}, norm ratio error {:.1e}, synthesised V_a offset {synth_err:.1e}, {:.3} ms",
            ratio_err.max(gen_ratio_err),
            elapsed * 1e3
        ),
    )
}

fn attack_free() -> Outcome {
    let clock = Instant::now();
    let (mg, tr, _) = cli::simulate(&ScenarioConfig::benchmark()).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();
    let settled = tr.settling_time(&mg, 0.0, 0.01, 0.1);
    let alarms = tr.alarm_count();
    let pass = settled.is_some_and(|t| t <= 0.4) && alarms == 0 && elapsed < 30.0;
    outcome(pass, format!("in band from t = {:.4} s, {alarms} alarms, {elapsed:.1} s", settled.unwrap_or(f64::NAN)))
}

fn observer_convergence() -> Outcome {
    let mg = bench();
    let cfg = ObserverConfig::default();
    let obs = ObserverBundle::design(&mg, &cfg).unwrap();
    let poles = scaled_poles(cfg.pole_pair[0], cfg.pole_pair[1], cfg.pole_range[0], cfg.pole_range[1]);
    let slowest = poles.iter().map(|p| p.re).fold(f64::NEG_INFINITY, f64::max);
    let det = DetectorConfig { chi_bar: Some(0.0), ..DetectorConfig::default() };
    let n = mg.n();
    let results: Vec<(f64, f64, usize, f64)> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            // Offsets of norm ≤ 1 per DG in the observable coordinates.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut off = vec![0.0; n * NX];
            for i in 0..n {
                let mut d: Vec<f64> = (0..NX).map(|k| if k == idx::DELTA { 0.0 } else { rng.random_range(-1.0..1.0) }).collect();
                let scale = rng.random_range(0.0..1.0) / d.iter().map(|v| v * v).sum::<f64>().sqrt();
                d.iter_mut().for_each(|v| *v *= scale);
                off[i * NX..(i + 1) * NX].copy_from_slice(&d);
            }
            let opts = SimOptions { duration: 0.3, estimate_offset: Some(off), ..SimOptions::default() };
            let tr = run_scenario(&mg, &AttackPlan::None, &obs, &det, &opts).unwrap();
            let last = tr.len() - 1;
            let err = (0..n).map(|i| estimation_error(&tr.states[i][last], &tr.estimates[i][last])).fold(0.0, f64::max);
            // The decrease inequality presumes the output-current bounds. Its
            // tolerance is taken relative to the quadratic form it compares
            // against, which reaches 1e12 while the estimate error peaks.
            let (mut rel, mut abs, mut outside) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0usize);
            for k in 0..tr.len() {
                let x: Vec<f64> = (0..n).flat_map(|i| tr.states[i][k]).collect();
                let vb = mg.bus_voltages(&x);
                let ys: Vec<[f64; NY]> = (0..n).map(|i| mg.models[i].measure(&tr.states[i][k])).collect();
                for i in 0..n {
                    let (xs, xh) = (&tr.states[i][k], &tr.estimates[i][k]);
                    if xs[idx::IO_D].abs() > cfg.x_bar[0] || xs[idx::IO_Q].abs() > cfg.x_bar[1] {
                        outside += 1;
                        continue;
                    }
                    let (m, g) = (&mg.models[i], &obs.gains[i]);
                    let u = mg.assemble_u(i, &ys, vb[i]);
                    let s = lyapunov_slack(m, g, xs, xh, &u);
                    let xi = DVector::from_iterator(NX, (0..NX).map(|j| xs[j] - xh[j]));
                    let form = xi.dot(&((&m.a + DMatrix::from_diagonal(&g.d) - &g.l_const * &m.c) * &xi));
                    abs = abs.max(s);
                    rel = rel.max(s / form.abs().max(1.0));
                }
            }
            (err, rel, outside, abs)
        })
        .collect();
    let err = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let slack = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let outside: usize = results.iter().map(|r| r.2).sum();
    let abs = results.iter().map(|r| r.3).fold(f64::NEG_INFINITY, f64::max);
    let pass = err <= 1e-6 && slack <= 1e-6 && slowest <= -50.0;
    outcome(
        pass,
        format!(
            "max ‖ξ(0.3)‖ {err:.2e} over 100 offsets, worst relative decrease slack {slack:.1e} (absolute {abs:.1e}), slowest pole {slowest}, {outside} samples outside the current bounds skipped"
        ),
    )
}

fn cancellation() -> Outcome {
    let p = DgParams::benchmark_b();
    let c = bench().models[0].c.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    let mut f = [0.0; NX];
    let mut fh = [0.0; NX];
    for _ in 0..1000 {
        let x: Vec<f64> = (0..NX).map(|_| rng.random_range(-100.0..100.0)).collect();
        let xh: Vec<f64> = (0..NX).map(|_| rng.random_range(-100.0..100.0)).collect();
        let xi = DVector::from_iterator(NX, x.iter().zip(&xh).map(|(a, b)| a - b));
        nonlinear_f(&x, &p, &mut f);
        nonlinear_f(&xh, &p, &mut fh);
        let df = DVector::from_iterator(NX, f.iter().zip(&fh).map(|(a, b)| a - b));
        let lhs = xi.dot(&df) - xi.dot(&(nonlinear_gain_l2(&xh, &p) * &c * &xi));
        // Four-term expression in one-based state labels.
        let e = |i: usize| xi[i - 1];
        let terms = [e(1) * e(9) * x[10], e(1) * e(10) * x[11], -e(2) * e(9) * x[11], e(2) * e(10) * x[10]];
        let rhs = p.omega_c * terms.iter().sum::<f64>();
        let scale = p.omega_c * terms.iter().map(|t| t.abs()).sum::<f64>();
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-300));
    }
    let nonzero = l2_entries(&[1.0; NX], &p).len();
    outcome(worst <= 1e-9 && nonzero == 16, format!("worst relative gap {worst:.1e} over 1000 pairs, {nonzero} L″ entries"))
}

fn detection() -> Outcome {
    let obs = observers(ObserverKind::Nonlinear);
    let plans = [("uniform", ArbitraryPlan::uniform()), ("gaussian-sine", ArbitraryPlan::gaussian_sine())];
    let traces: Vec<SimTrace> = plans.par_iter().map(|(_, p)| run(&AttackPlan::Arbitrary(p.clone()), &obs, false)).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for ((name, p), tr) in plans.iter().zip(&traces) {
        let v = p.victim - 1;
        let latency = tr.first_alarm(v, p.start).map(|t| t - p.start);
        let all: Vec<f64> = (0..tr.n_dg()).flat_map(|i| alarm_times(tr, i)).collect();
        let outside = all.iter().filter(|&&t| !(0.35..=0.9).contains(&t)).count();
        let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
        pass &= latency.is_some_and(|l| l < 0.05) && outside == 0;
        parts.push(format!("{name} latency {:.4} s, alarms in [{lo:.4}, {hi:.4}] s, {outside} outside", latency.unwrap_or(f64::NAN)));
    }
    outcome(pass, parts.join("; "))
}

fn incremental_residual(free: &SimTrace, att: &SimTrace, v: usize) -> f64 {
    (0..free.len())
        .map(|k| free.residuals[v][k].iter().zip(&att.residuals[v][k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn stealthy_gap() -> Outcome {
    let mg = bench();
    let plan = StealthyPlan::benchmark();
    let v = plan.victim - 1;
    // a_u on the frequency reference, which C B_a annihilates.
    let hidden = StealthyPlan { gamma_u: vec![1], gamma_y: vec![], ..plan.clone() };
    let spec = stealthy_spec(&mg, &hidden).unwrap();
    let cba = (&mg.models[v].c * &spec.b_a).amax();
    let oi = observers(ObserverKind::OutputInjection);
    let nl = observers(ObserverKind::Nonlinear);
    let cases = [
        (AttackPlan::None, &oi),
        (AttackPlan::Stealthy(hidden), &oi),
        (AttackPlan::Stealthy(plan.clone()), &oi),
        (AttackPlan::Stealthy(plan.clone()), &nl),
    ];
    let runs: Vec<SimTrace> = cases.par_iter().map(|(p, o)| run(p, o, false)).collect();
    let hidden_incr = incremental_residual(&runs[0], &runs[1], v);
    let hidden_alarms = runs[1].alarm_count();
    let bench_incr = incremental_residual(&runs[0], &runs[2], v);
    let nl_att = &runs[3];
    let crossed = (0..nl_att.len()).any(|k| plan.schedule.active_slot(nl_att.t[k]).is_some() && nl_att.r_norm[v][k] > nl_att.eta[v][k]);
    let nl_peak = nl_att.r_norm[v].iter().cloned().fold(0.0, f64::max);
    let pass = cba == 0.0 && hidden_incr <= 1e-9 && hidden_alarms == 0 && crossed;
    outcome(
        pass,
        format!(
            "output-injection on the ker(C B_a) construction: incremental residual {hidden_incr:.1e}, {hidden_alarms} alarms; nonlinear on the benchmark plan: peak residual {nl_peak:.2e}, crossed during an active slot {crossed} (output-injection on the benchmark plan: incremental residual {bench_incr:.2e})"
        ),
    )
}

fn mitigation() -> Outcome {
    let mg = bench();
    let obs = observers(ObserverKind::Nonlinear);
    let free = run(&AttackPlan::None, &obs, false);
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, p) in [("uniform", ArbitraryPlan::uniform()), ("gaussian-sine", ArbitraryPlan::gaussian_sine())] {
        let v = p.victim - 1;
        let plan = AttackPlan::Arbitrary(p.clone());
        let pair: Vec<SimTrace> = [false, true].par_iter().map(|&m| run(&plan, &obs, m)).collect();
        let (off, on) = (&pair[0], &pair[1]);
        let lit = off.voltage_deviation(&mg, v, p.start, p.end) / on.voltage_deviation(&mg, v, p.start, p.end);
        // Impact: deviation from the attack-free trajectory.
        let impact = |tr: &SimTrace| {
            let dt = tr.t[1] - tr.t[0];
            (0..tr.len()).filter(|&k| tr.t[k] >= p.start && tr.t[k] < p.end).map(|k| (tr.states[v][k][idx::VO_D] - free.states[v][k][idx::VO_D]).abs() * dt).sum::<f64>()
        };
        let (i_off, i_on) = (impact(off), impact(on));
        let recovered = on.settling_time(&mg, p.end, 0.01, 0.1);
        pass &= lit >= 5.0 && recovered.is_some_and(|t| t <= p.end + 0.1);
        parts.push(format!(
            "{name} ratio {lit:.3} (impact {i_off:.3e} -> {i_on:.3e}, ratio {:.2}), back in band at {:.4} s",
            i_off / i_on,
            recovered.unwrap_or(f64::NAN)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn fd<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, at: &DVector<f64>, rows: usize, step: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows, at.len());
    for k in 0..at.len() {
        let h = step(k);
        let (mut a, mut b) = (at.clone(), at.clone());
        a[k] += h;
        b[k] -= h;
        j.set_column(k, &((f(&a) - f(&b)) / (2.0 * h)));
    }
    j
}

fn jacobians() -> Outcome {
    let mg = bench();
    let rm = ReducedModel::from_microgrid(&mg).unwrap();
    let n = rm.n;
    let base = rm.equilibrium(&Setpoints::nominal(&mg)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() / a.amax().max(b.amax()).max(1e-300);
    let step_x = |k: usize| if k < 2 * n { 1e-2 } else { 1e-6 };
    let (mut jac, mut schur) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let mut sp = Setpoints::nominal(&mg);
        let mut x = base.x.clone();
        for i in 0..n {
            sp.p[i] = rng.random_range(-500.0..500.0);
            sp.q[i] = rng.random_range(-300.0..300.0);
            sp.v[i] += rng.random_range(-5.0..5.0);
        }
        for k in 0..rm.nx() {
            x[k] += if k < 2 * n { rng.random_range(-200.0..200.0) } else { rng.random_range(-0.05..0.05) };
        }
        // Consistent point: z solves the algebraic equations.
        let z = rm.solve_z(&x, &sp).unwrap();
        let blk = rm.jacobians(&x, &z, &sp).unwrap();
        let fx = fd(|x| rm.reduced_derivative(x, &z, &sp).unwrap(), &x, rm.nx(), step_x);
        let gx = fd(|x| rm.algebraic_residual(x, &z, &sp).unwrap(), &x, rm.nz(), step_x);
        let fz = fd(|z| rm.reduced_derivative(&x, z, &sp).unwrap(), &z, rm.nx(), |_| 1e-4);
        let gz = fd(|z| rm.algebraic_residual(&x, z, &sp).unwrap(), &z, rm.nz(), |_| 1e-4);
        jac = jac.max(rel(&blk.fx, &fx)).max(rel(&blk.fz, &fz)).max(rel(&blk.gx, &gx)).max(rel(&blk.gz, &gz));
        let (a_hat, _) = rm.linearize(&x, &sp).unwrap();
        let dae = fd(|x| rm.reduced_derivative(x, &rm.solve_z(x, &sp).unwrap(), &sp).unwrap(), &x, rm.nx(), |k| step_x(k) * 1e-1);
        schur = schur.max(rel(&a_hat, &dae));
    }
    outcome(jac < 1e-5 && schur < 1e-6, format!("worst Jacobian gap {jac:.1e}, Schur vs DAE sensitivity {schur:.1e} over 50 points"))
}

fn stability_margins() -> Outcome {
    let mg = bench();
    let rm = ReducedModel::from_microgrid(&mg).unwrap();
    let op = rm.equilibrium(&Setpoints::nominal(&mg)).unwrap();
    let (a_hat, _) = rm.linearize(&op.x, &op.setpoints).unwrap();
    let abscissa = eigenvalues(&a_hat).unwrap().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let cert = certify_decay(&a_hat, 1.0).unwrap();
    let obs = observers(ObserverKind::Nonlinear);
    let sc = eigen_scenarios(&mg, &StealthyPlan::benchmark(), &obs, &DetectorConfig::default(), &SimOptions::default()).unwrap();
    let margin = |tag: &str| sc.iter().find(|s| s.tag == tag).unwrap().margin;
    let free = margin("attack-free");
    let attacked = ["stealthy", "stealthy-intermittent", "mitigated"].map(|t| (t, margin(t)));
    let ordered = attacked.iter().all(|(_, m)| *m < free);
    let pass = abscissa < 0.0 && cert.certified && cert.lmi_max_eig <= 1e-8 && ordered;
    let listed: Vec<String> = attacked.iter().map(|(t, m)| format!("{t} {m:.6}")).collect();
    outcome(
        pass,
        format!(
            "abscissa {abscissa:.4}, witness LMI max eigenvalue {:.2e}; window margins attack-free {free:.6}, {}",
            cert.lmi_max_eig,
            listed.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let text = include_str!("../scenarios/uniform.cfg");
    let cfg = cli::parse_config(text).unwrap();
    let bytes: Vec<Vec<u8>> = (0..2)
        .into_par_iter()
        .map(|_| {
            let (_, tr, _) = cli::simulate(&cfg).unwrap();
            let mut w = csv::Writer::from_writer(Vec::new());
            cli::write_trace(&tr, &mut w).unwrap();
            w.into_inner().unwrap()
        })
        .collect();
    outcome(bytes[0] == bytes[1], format!("{} trace bytes, identical {}", bytes[0].len(), bytes[0] == bytes[1]))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("worked attack example", worked_example),
        ("attack-free benchmark", attack_free),
        ("observer convergence", observer_convergence),
        ("cancellation identity", cancellation),
        ("detection of arbitrary attacks", detection),
        ("stealthy-intermittent gap", stealthy_gap),
        ("mitigation", mitigation),
        ("Jacobian correctness", jacobians),
        ("stability margins", stability_margins),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!("criterion {:>2} {}: {name}: {}", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed == 0 || std::env::var_os("MGSHIELD_STRICT_ACCEPTANCE").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
