//! Multi-inverter microgrid: digraph neighbour aggregation, quasi-static
//! network coupling and the coupled scenario simulator.

pub mod network;
pub mod sim;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dg::{idx, uidx, DgModel, DgParams, NU, NX, NY};
use crate::error::{Error, Result};
pub use network::{bus_admittance, kron_reduce, to_common, to_local, transfer_impedance, Branch, C64};
pub use sim::{run_scenario, AttackPlan, EventKind, ObserverBundle, ObserverConfig, ScenarioEvent, SimOptions, SimTrace};

/// Series R–L line between two buses (one-based in the config).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub l: f64,
}

/// Constant series-impedance load at a bus (one-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub bus: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridConfig {
    pub dgs: Vec<DgParams>,
    /// a_ij: weight of data DG i receives from DG j.
    pub adjacency: Vec<Vec<f64>>,
    pub pinning: Vec<f64>,
    /// Number of electrical buses; DG i sits at bus `dg_bus[i]`.
    pub buses: usize,
    pub dg_bus: Vec<usize>,
    pub lines: Vec<LineConfig>,
    pub loads: Vec<LoadConfig>,
    /// Voltage reference in per unit of `v_base`.
    pub v_ref: f64,
    /// Volts corresponding to 1 p.u.
    pub v_base: f64,
    pub omega_ref: f64,
    /// Frequency at which line and load reactances are evaluated.
    pub omega_base: f64,
}

impl MicrogridConfig {
    /// Four inverters on a radial four-bus feeder with a directed
    /// communication ring 1→2→3→4→1 and DG1 pinned.
    pub fn benchmark() -> Self {
        let a = DgParams::benchmark_a();
        let b = DgParams::benchmark_b();
        let mut adjacency = vec![vec![0.0; 4]; 4];
        for i in 0..4 {
            adjacency[i][(i + 3) % 4] = 1.0;
        }
        Self {
            dgs: vec![a, a, b, b],
            adjacency,
            pinning: vec![1.0, 0.0, 0.0, 0.0],
            buses: 4,
            dg_bus: vec![1, 2, 3, 4],
            lines: vec![
                LineConfig { from: 1, to: 2, r: 0.23, l: 318e-6 },
                LineConfig { from: 2, to: 3, r: 0.35, l: 1847e-6 },
                LineConfig { from: 3, to: 4, r: 0.23, l: 318e-6 },
            ],
            loads: vec![
                LoadConfig { bus: 1, r: 30.0, x: 15.0 },
                LoadConfig { bus: 2, r: 20.0, x: 10.0 },
                LoadConfig { bus: 3, r: 25.0, x: 10.0 },
                LoadConfig { bus: 4, r: 25.0, x: 15.0 },
            ],
            v_ref: 1.0,
            v_base: 380.0,
            omega_ref: 314.16,
            omega_base: 314.16,
        }
    }

    pub fn n(&self) -> usize {
        self.dgs.len()
    }

    /// Voltage reference in volts.
    pub fn v_ref_volts(&self) -> f64 {
        self.v_ref * self.v_base
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let bad = |path: &str, reason: String| Err(Error::Config { path: path.into(), reason });
        if n == 0 {
            return bad("microgrid.dgs", "at least one DG is required".into());
        }
        for (i, p) in self.dgs.iter().enumerate() {
            if let Err(e) = p.validate() {
                return bad(&format!("microgrid.dgs[{i}]"), e.to_string());
            }
        }
        if self.adjacency.len() != n || self.adjacency.iter().any(|r| r.len() != n) {
            return bad("microgrid.adjacency", format!("must be {n}×{n}"));
        }
        for i in 0..n {
            if self.adjacency[i][i] != 0.0 {
                return bad("microgrid.adjacency", format!("diagonal entry {} must be zero", i + 1));
            }
            if self.adjacency[i].iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return bad("microgrid.adjacency", format!("row {} has a negative or non-finite weight", i + 1));
            }
        }
        if self.pinning.len() != n {
            return bad("microgrid.pinning", format!("expected {n} entries"));
        }
        if self.pinning.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return bad("microgrid.pinning", "gains must be nonnegative".into());
        }
        if !self.pinning.iter().any(|&g| g > 0.0) {
            return bad("microgrid.pinning", "at least one DG must be pinned to the reference".into());
        }
        if self.dg_bus.len() != n {
            return bad("microgrid.dg_bus", format!("expected {n} entries"));
        }
        if self.dg_bus.iter().any(|&b| b == 0 || b > self.buses) {
            return bad("microgrid.dg_bus", format!("bus indices must lie in 1..={}", self.buses));
        }
        let mut seen = self.dg_bus.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return bad("microgrid.dg_bus", "two DGs share a bus".into());
        }
        for (k, l) in self.lines.iter().enumerate() {
            if l.from == 0 || l.to == 0 || l.from > self.buses || l.to > self.buses || l.from == l.to {
                return bad(&format!("microgrid.lines[{k}]"), format!("invalid buses {}–{}", l.from, l.to));
            }
            if !(l.r >= 0.0) || !(l.l >= 0.0) || l.r + l.l == 0.0 {
                return bad(&format!("microgrid.lines[{k}]"), "impedance must be nonnegative and nonzero".into());
            }
        }
        for (k, l) in self.loads.iter().enumerate() {
            if l.bus == 0 || l.bus > self.buses {
                return bad(&format!("microgrid.loads[{k}]"), format!("bus {} out of range", l.bus));
            }
            if !(l.r >= 0.0) || l.r == 0.0 && l.x == 0.0 {
                return bad(&format!("microgrid.loads[{k}]"), "load impedance must be nonzero with R ≥ 0".into());
            }
        }
        // DG buses must share one electrical island.
        let mut parent: Vec<usize> = (0..self.buses).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for l in &self.lines {
            let (a, b) = (root(&mut parent, l.from - 1), root(&mut parent, l.to - 1));
            parent[a] = b;
        }
        let r0 = root(&mut parent, self.dg_bus[0] - 1);
        for &b in &self.dg_bus[1..] {
            if root(&mut parent, b - 1) != r0 {
                return bad("microgrid.lines", format!("bus {b} is not connected to bus {}", self.dg_bus[0]));
            }
        }
        for (name, v) in [("v_ref", self.v_ref), ("v_base", self.v_base), ("omega_ref", self.omega_ref), ("omega_base", self.omega_base)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(&format!("microgrid.{name}"), "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn branches(&self) -> Vec<Branch> {
        self.lines.iter().map(|l| Branch { from: l.from - 1, to: l.to - 1, r: l.r, l: l.l }).collect()
    }

    /// Per-bus load impedance, combining parallel loads at one bus.
    pub fn bus_loads(&self) -> Vec<Option<(f64, f64)>> {
        let mut y = vec![C64::new(0.0, 0.0); self.buses];
        let mut any = vec![false; self.buses];
        for l in &self.loads {
            y[l.bus - 1] += C64::new(l.r, l.x).inv();
            any[l.bus - 1] = true;
        }
        (0..self.buses)
            .map(|k| {
                any[k].then(|| {
                    let z = y[k].inv();
                    (z.re, z.im)
                })
            })
            .collect()
    }

    pub fn admittance(&self) -> Result<DMatrix<C64>> {
        bus_admittance(self.buses, &self.branches(), &self.bus_loads(), self.omega_base)
    }

    /// Kron-reduced admittance seen at the DG buses.
    pub fn reduced_admittance(&self) -> Result<DMatrix<C64>> {
        let keep: Vec<usize> = self.dg_bus.iter().map(|b| b - 1).collect();
        kron_reduce(&self.admittance()?, &keep)
    }
}

/// Network data sent by one DG to its out-neighbours.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Broadcast {
    pub omega: f64,
    pub mp_p: f64,
    pub v_od: f64,
    pub nq_q: f64,
}

/// A configured microgrid with one model per DG and the DG-bus transfer
/// impedance of the loaded network.
#[derive(Debug, Clone)]
pub struct Microgrid {
    pub cfg: MicrogridConfig,
    pub models: Vec<DgModel>,
    pub z: DMatrix<C64>,
}

impl Microgrid {
    pub fn new(cfg: MicrogridConfig) -> Result<Self> {
        cfg.validate()?;
        let models = cfg
            .dgs
            .iter()
            .enumerate()
            .map(|(i, p)| DgModel::new(*p, &cfg.adjacency[i], cfg.pinning[i]))
            .collect::<Result<Vec<_>>>()?;
        let z = transfer_impedance(&cfg.reduced_admittance()?)?;
        Ok(Self { cfg, models, z })
    }

    pub fn n(&self) -> usize {
        self.models.len()
    }

    /// Flat start: secondary set-points at their references, everything else zero.
    pub fn flat_start(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.n() * NX];
        for i in 0..self.n() {
            x[i * NX + idx::OMEGA_N] = self.cfg.omega_ref;
            x[i * NX + idx::V_N] = self.cfg.v_ref_volts();
        }
        x
    }

    /// Local-frame bus voltages for given local-frame output currents.
    pub fn solve_bus_voltages(&self, i_o: &[(f64, f64)], deltas: &[f64]) -> Vec<(f64, f64)> {
        let n = self.n();
        let inj: Vec<C64> = (0..n).map(|k| to_common(i_o[k].0, i_o[k].1, deltas[k])).collect();
        (0..n)
            .map(|i| {
                let mut v = C64::new(0.0, 0.0);
                for (j, &ij) in inj.iter().enumerate() {
                    v += self.z[(i, j)] * ij;
                }
                to_local(v, deltas[i])
            })
            .collect()
    }

    /// Bus voltages for a stacked plant state.
    pub fn bus_voltages(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let n = self.n();
        let i_o: Vec<(f64, f64)> = (0..n).map(|k| (x[k * NX + idx::IO_D], x[k * NX + idx::IO_Q])).collect();
        let deltas: Vec<f64> = (0..n).map(|k| x[k * NX + idx::DELTA]).collect();
        self.solve_bus_voltages(&i_o, &deltas)
    }

    /// Data DG j shares, computed from its (possibly corrupted) outputs.
    pub fn broadcast(&self, j: usize, y: &[f64; NY]) -> Broadcast {
        let p = &self.models[j].params;
        Broadcast { omega: y[8] - p.m_p * y[0], mp_p: p.m_p * y[0], v_od: y[4], nq_q: p.n_q * y[1] }
    }

    /// Input vector of DG i from the neighbours' outputs and its bus voltage.
    pub fn assemble_u(&self, i: usize, outputs: &[[f64; NY]], v_b: (f64, f64)) -> [f64; NU] {
        let data: Vec<Broadcast> = (0..self.n()).map(|j| self.broadcast(j, &outputs[j])).collect();
        self.assemble_u_from(i, &data, v_b)
    }

    pub fn assemble_u_from(&self, i: usize, data: &[Broadcast], v_b: (f64, f64)) -> [f64; NU] {
        let p = &self.models[i].params;
        let row = &self.cfg.adjacency[i];
        let g = self.cfg.pinning[i];
        let mut u = [0.0; NU];
        u[uidx::OMEGA_COM] = data[0].omega;
        u[uidx::VB_D] = v_b.0;
        u[uidx::VB_Q] = v_b.1;
        for (j, &a) in row.iter().enumerate() {
            if a != 0.0 {
                u[uidx::NBR_OMEGA] += a * data[j].omega;
                u[uidx::NBR_MP] += a * data[j].mp_p;
                u[uidx::NBR_VOD] += a * data[j].v_od;
                u[uidx::NBR_NQ] += a * data[j].nq_q;
            }
        }
        u[uidx::NBR_OMEGA] *= p.c_freq;
        u[uidx::NBR_MP] *= p.c_freq;
        u[uidx::NBR_VOD] *= p.c_volt;
        u[uidx::NBR_NQ] *= p.c_volt;
        u[uidx::REF_OMEGA] = p.c_freq * g * self.cfg.omega_ref;
        u[uidx::REF_V] = p.c_volt * g * self.cfg.v_ref_volts();
        u
    }

    /// Stacked attack-free plant derivative.
    pub fn plant_derivative(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n();
        let vb = self.bus_voltages(x);
        let ys: Vec<[f64; NY]> = (0..n).map(|i| self.models[i].measure(&x[i * NX..(i + 1) * NX])).collect();
        for i in 0..n {
            let u = self.assemble_u(i, &ys, vb[i]);
            self.models[i].derivative(&x[i * NX..(i + 1) * NX], &u, &mut out[i * NX..(i + 1) * NX]);
        }
    }

    /// Complex power injected by the DGs versus the power absorbed by loads
    /// and lines, both in the common frame.
    pub fn power_balance(&self, x: &[f64]) -> Result<(C64, C64)> {
        let n = self.n();
        let y_bus = self.cfg.admittance()?;
        let mut inj = DVector::from_element(self.cfg.buses, C64::new(0.0, 0.0));
        for k in 0..n {
            inj[self.cfg.dg_bus[k] - 1] = to_common(x[k * NX + idx::IO_D], x[k * NX + idx::IO_Q], x[k * NX + idx::DELTA]);
        }
        let v = y_bus
            .clone()
            .lu()
            .solve(&inj)
            .ok_or_else(|| Error::Network("bus admittance is singular".into()))?;
        let injected: C64 = (0..self.cfg.buses).map(|b| v[b] * inj[b].conj()).sum();
        let mut absorbed = C64::new(0.0, 0.0);
        for (b, load) in self.cfg.bus_loads().iter().enumerate() {
            if let Some((r, xl)) = *load {
                let i = v[b] / C64::new(r, xl);
                absorbed += C64::new(r, xl) * i.norm_sqr();
            }
        }
        for br in self.cfg.branches() {
            let z = C64::new(br.r, self.cfg.omega_base * br.l);
            let i = (v[br.from] - v[br.to]) / z;
            absorbed += z * i.norm_sqr();
        }
        Ok((injected, absorbed))
    }

    /// Attack-free plant-only integration from `x0`, returning the final state.
    pub fn settle(&self, x0: &[f64], duration: f64, dt: f64) -> Result<Vec<f64>> {
        let mut x = x0.to_vec();
        let mut rk = crate::numerics::Rk4::new(x.len());
        let steps = (duration / dt).round() as usize;
        let mut t = 0.0;
        for _ in 0..steps {
            rk.step(
                |_, s, d| {
                    self.plant_derivative(s, d);
                    Ok(())
                },
                t,
                &mut x,
                dt,
            )?;
            t += dt;
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e9 {
                return Err(Error::Divergence { t, norm });
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_validates() {
        let cfg = MicrogridConfig::benchmark();
        cfg.validate().unwrap();
        assert_eq!(cfg.n(), 4);
    }

    #[test]
    fn rejects_bad_digraph_and_network() {
        let mut c = MicrogridConfig::benchmark();
        c.pinning = vec![0.0; 4];
        assert!(c.validate().is_err());
        let mut c = MicrogridConfig::benchmark();
        c.adjacency[1][1] = 1.0;
        assert!(c.validate().is_err());
        let mut c = MicrogridConfig::benchmark();
        c.lines.remove(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn assemble_u_examples() {
        let mut cfg = MicrogridConfig::benchmark();
        let mg = Microgrid::new(cfg.clone()).unwrap();
        let mut ys = vec![[0.0; NY]; 4];
        ys[3][8] = 314.16;
        ys[0][8] = 314.16;
        let u = mg.assemble_u(0, &ys, (0.0, 0.0));
        assert!((u[uidx::NBR_OMEGA] - 9424.8).abs() < 1e-9);
        assert!((u[uidx::REF_V] - 30.0 * cfg.v_ref_volts()).abs() < 1e-9);
        assert!((u[uidx::REF_OMEGA] - 30.0 * 314.16).abs() < 1e-9);

        cfg.adjacency[2] = vec![0.0; 4];
        cfg.pinning[2] = 0.0;
        let mg = Microgrid::new(cfg).unwrap();
        let ys = vec![[7.0; NY]; 4];
        let u = mg.assemble_u(2, &ys, (1.0, 2.0));
        for k in [uidx::NBR_OMEGA, uidx::REF_OMEGA, uidx::NBR_MP, uidx::NBR_VOD, uidx::REF_V, uidx::NBR_NQ] {
            assert_eq!(u[k], 0.0);
        }
        assert_eq!((u[1], u[2]), (1.0, 2.0));
    }

    #[test]
    fn network_conserves_power() {
        let mg = Microgrid::new(MicrogridConfig::benchmark()).unwrap();
        let mut x = mg.flat_start();
        for k in 0..4 {
            x[k * NX + idx::IO_D] = 10.0 + k as f64;
            x[k * NX + idx::IO_Q] = -3.0 + 2.0 * k as f64;
            x[k * NX + idx::DELTA] = 0.05 * k as f64;
        }
        let (s_in, s_out) = mg.power_balance(&x).unwrap();
        assert!((s_in - s_out).norm() <= 1e-9 * s_in.norm());
    }
}
