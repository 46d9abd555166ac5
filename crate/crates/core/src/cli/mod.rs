//! Command implementations behind the `mgshield` binary.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use config::{override_param, parse_config, ScenarioConfig, SimSection, BENCHMARK_CFG};

use crate::dg::{idx, NX};
use crate::error::{Error, Result};
use crate::microgrid::sim::{run_scenario, AttackPlan, ObserverBundle, SimTrace, StealthyPlan};
use crate::microgrid::Microgrid;
use crate::stability::search::trace_mean_point;
use crate::stability::{certify_decay, eigen_scenarios, EigenScenario, ReducedModel};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "MGSHIELD_OUT";

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EIGEN_FILE: &str = "eigen.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Column names of the trace CSV.
pub fn trace_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "dg".into()];
    h.extend((1..=NX).map(|k| format!("x{k}")));
    h.extend(["r_norm", "eta", "detected", "mitigated"].map(String::from));
    h
}

pub const SUMMARY_HEADER: [&str; 9] =
    ["dg", "peak_vod_dev", "peak_omega_dev", "final_vod", "final_omega", "alarms", "first_alarm", "detection_latency", "eigen_margin"];

/// Failure of a command, split by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit status 2.
    Usage(String),
    /// Invalid scenario or failed run; exit status 1.
    Scenario(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Scenario(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Scenario(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Scenario(e)
    }
}

pub fn load_config(path: &Path) -> Result<(String, ScenarioConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let cfg = parse_config(&text).map_err(|e| match e {
        Error::Config { path: p, reason } => Error::Config { path: format!("{}: {p}", path.display()), reason },
        e => e,
    })?;
    Ok((text, cfg))
}

/// `--out`, then `[sim] output`, then the environment, then the working
/// directory.
pub fn output_dir(flag: Option<&Path>, cfg: &ScenarioConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.sim.output.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn create(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_trace<W: Write>(tr: &SimTrace, w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(trace_header())?;
    let mut row: Vec<String> = Vec::with_capacity(NX + 6);
    for k in 0..tr.len() {
        for i in 0..tr.n_dg() {
            row.clear();
            row.push(tr.t[k].to_string());
            row.push((i + 1).to_string());
            row.extend(tr.states[i][k].iter().map(f64::to_string));
            row.push(tr.r_norm[i].get(k).copied().unwrap_or(0.0).to_string());
            row.push(tr.eta[i].get(k).copied().unwrap_or(0.0).to_string());
            row.push(flag(tr.detected[i].get(k).copied().unwrap_or(false)).into());
            row.push(flag(tr.mitigated[i].get(k).copied().unwrap_or(false)).into());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-DG figures of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dg: usize,
    pub peak_vod_dev: f64,
    pub peak_omega_dev: f64,
    pub final_vod: f64,
    pub final_omega: f64,
    pub alarms: usize,
    pub first_alarm: Option<f64>,
    /// First alarm after attack onset, victim only.
    pub detection_latency: Option<f64>,
    pub eigen_margin: f64,
}

impl SummaryRow {
    fn record(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        vec![
            self.dg.to_string(),
            self.peak_vod_dev.to_string(),
            self.peak_omega_dev.to_string(),
            self.final_vod.to_string(),
            self.final_omega.to_string(),
            self.alarms.to_string(),
            opt(self.first_alarm),
            opt(self.detection_latency),
            self.eigen_margin.to_string(),
        ]
    }
}

/// Decay margin of Â linearised at the mean of the trace over [from, end].
pub fn trace_margin(mg: &Microgrid, tr: &SimTrace, from: f64) -> Result<f64> {
    let rm = ReducedModel::from_microgrid(mg)?;
    let end = tr.t.last().copied().unwrap_or(0.0) + 1e-12;
    let (x, sp) = trace_mean_point(mg, &rm, tr, from, end)?;
    let (a, _) = rm.linearize(&x, &sp)?;
    Ok(certify_decay(&a, 0.0)?.margin())
}

pub fn summarize(mg: &Microgrid, cfg: &ScenarioConfig, tr: &SimTrace) -> Result<Vec<SummaryRow>> {
    let vref = mg.cfg.v_ref_volts();
    let margin = trace_margin(mg, tr, cfg.sim.settle)?;
    let onset = cfg.attack.window().map(|w| w.0);
    let victim = cfg.attack.victim();
    let from = tr.t.iter().position(|&t| t >= cfg.sim.settle).unwrap_or(0);
    Ok((0..tr.n_dg())
        .map(|i| {
            let m_p = mg.models[i].params.m_p;
            let omega = |x: &[f64; NX]| x[idx::OMEGA_N] - m_p * x[idx::P];
            let hist = &tr.states[i][from..];
            let last = tr.states[i].last().copied().unwrap_or([0.0; NX]);
            let latency = match (onset, victim) {
                (Some(t0), Some(v)) if v == i => tr.first_alarm(i, t0).map(|t| t - t0),
                _ => None,
            };
            SummaryRow {
                dg: i + 1,
                peak_vod_dev: hist.iter().map(|x| (x[idx::VO_D] - vref).abs()).fold(0.0, f64::max),
                peak_omega_dev: hist.iter().map(|x| (omega(x) - mg.cfg.omega_ref).abs()).fold(0.0, f64::max),
                final_vod: last[idx::VO_D],
                final_omega: omega(&last),
                alarms: tr.detected[i].iter().filter(|&&d| d).count(),
                first_alarm: tr.first_alarm(i, 0.0),
                detection_latency: latency,
                eigen_margin: margin,
            }
        })
        .collect())
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_eigen<W: Write>(sc: &[EigenScenario], w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(["re", "im", "tag"])?;
    for s in sc {
        for (re, im) in &s.eigenvalues {
            w.write_record([re.to_string(), im.to_string(), s.tag.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Simulate the scenario and return the trace with its summary.
pub fn simulate(cfg: &ScenarioConfig) -> Result<(Microgrid, SimTrace, Vec<SummaryRow>)> {
    let mg = Microgrid::new(cfg.microgrid.clone())?;
    let obs = ObserverBundle::design(&mg, &cfg.observer)?;
    let tr = run_scenario(&mg, &cfg.attack, &obs, &cfg.detector, &cfg.sim.options())?;
    let rows = summarize(&mg, cfg, &tr)?;
    Ok((mg, tr, rows))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Input(format!("thread pool: {e}")))
}

/// The four eigenvalue scenarios, driven by the configured stealthy plan or
/// the benchmark plan when the scenario has none.
pub fn eigen_sets(cfg: &ScenarioConfig, jobs: usize) -> Result<Vec<EigenScenario>> {
    let mg = Microgrid::new(cfg.microgrid.clone())?;
    let obs = ObserverBundle::design(&mg, &cfg.observer)?;
    let plan = match &cfg.attack {
        AttackPlan::Stealthy(p) => p.clone(),
        _ => StealthyPlan::benchmark(),
    };
    pool(jobs)?.install(|| eigen_scenarios(&mg, &plan, &obs, &cfg.detector, &cfg.sim.options()))
}

/// Files written by `run`.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub trace: PathBuf,
    pub summary: PathBuf,
    pub eigen: Option<PathBuf>,
}

pub fn run(cfg: &ScenarioConfig, out: &Path, eigen: bool, jobs: usize) -> Result<(RunFiles, Vec<SummaryRow>)> {
    let (_, tr, rows) = simulate(cfg)?;
    write_trace(&tr, &mut create(out, TRACE_FILE)?)?;
    write_summary(&rows, &mut create(out, SUMMARY_FILE)?)?;
    let eigen = if eigen {
        write_eigen(&eigen_sets(cfg, jobs)?, &mut create(out, EIGEN_FILE)?)?;
        Some(out.join(EIGEN_FILE))
    } else {
        None
    };
    Ok((RunFiles { trace: out.join(TRACE_FILE), summary: out.join(SUMMARY_FILE), eigen }, rows))
}

pub fn eigen(cfg: &ScenarioConfig, out: &Path, jobs: usize) -> Result<PathBuf> {
    write_eigen(&eigen_sets(cfg, jobs)?, &mut create(out, EIGEN_FILE)?)?;
    Ok(out.join(EIGEN_FILE))
}

/// Run the scenario once per value of `param` and collect the summaries
/// into one CSV with leading `param,value` columns.
pub fn sweep(text: &str, param: &str, values: &[String], out: &Path, jobs: usize) -> std::result::Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("--values needs at least one value".into()));
    }
    let cfgs = values
        .iter()
        .map(|v| match override_param(text, param, v) {
            Err(Error::Input(m)) => Err(CliError::Usage(m)),
            r => r.map_err(CliError::Scenario),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let results: Vec<Result<Vec<SummaryRow>>> = pool(jobs)?.install(|| cfgs.par_iter().map(|c| simulate(c).map(|r| r.2)).collect());
    let mut w = create(out, SWEEP_FILE)?;
    let mut header = vec!["param", "value"];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header).map_err(Error::from)?;
    for (v, rows) in values.iter().zip(results) {
        for r in rows? {
            let mut rec = vec![param.to_string(), v.clone()];
            rec.extend(r.record());
            w.write_record(&rec).map_err(Error::from)?;
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(out.join(SWEEP_FILE))
}
