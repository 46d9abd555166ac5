//! Fifteen-state averaged model of one droop-controlled inverter with
//! voltage/current loops, LC filter, output connector and distributed
//! secondary frequency/voltage integrators:
//!
//! ẋ = A x + f(x) + B u,   y = C x.
//!
//! State order (zero-based index in brackets):
//! P [0] W, Q [1] var, φ_d [2], φ_q [3], γ_d [4], γ_q [5], i_ld [6] A,
//! i_lq [7] A, v_od [8] V, v_oq [9] V, i_od [10] A, i_oq [11] A, δ [12] rad,
//! ω_n [13] rad/s, V_n [14] V.
//!
//! Input order: ω_com [0], v_bd [1], v_bq [2], c_f Σ a_ij ω_j [3],
//! c_f g ω_ref [4], c_f Σ a_ij m_Pj P_j [5], c_v Σ a_ij v_odj [6],
//! c_v g v_ref [7], c_v Σ a_ij n_Qj Q_j [8].
//!
//! Outputs are the ten measured states P, Q, i_ld, i_lq, v_od, v_oq, i_od,
//! i_oq, ω_n, V_n in that order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 15;
pub const NU: usize = 9;
pub const NY: usize = 10;

/// Zero-based state indices.
pub mod idx {
    pub const P: usize = 0;
    pub const Q: usize = 1;
    pub const PHI_D: usize = 2;
    pub const PHI_Q: usize = 3;
    pub const GAM_D: usize = 4;
    pub const GAM_Q: usize = 5;
    pub const IL_D: usize = 6;
    pub const IL_Q: usize = 7;
    pub const VO_D: usize = 8;
    pub const VO_Q: usize = 9;
    pub const IO_D: usize = 10;
    pub const IO_Q: usize = 11;
    pub const DELTA: usize = 12;
    pub const OMEGA_N: usize = 13;
    pub const V_N: usize = 14;
}

/// Zero-based input indices.
pub mod uidx {
    pub const OMEGA_COM: usize = 0;
    pub const VB_D: usize = 1;
    pub const VB_Q: usize = 2;
    pub const NBR_OMEGA: usize = 3;
    pub const REF_OMEGA: usize = 4;
    pub const NBR_MP: usize = 5;
    pub const NBR_VOD: usize = 6;
    pub const REF_V: usize = 7;
    pub const NBR_NQ: usize = 8;
}

/// State index measured by each output channel.
pub const MEASURED: [usize; NY] = [
    idx::P,
    idx::Q,
    idx::IL_D,
    idx::IL_Q,
    idx::VO_D,
    idx::VO_Q,
    idx::IO_D,
    idx::IO_Q,
    idx::OMEGA_N,
    idx::V_N,
];

/// Output channel carrying a given state, if measured.
pub fn output_of(state: usize) -> Option<usize> {
    MEASURED.iter().position(|&s| s == state)
}

/// Per-inverter constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgParams {
    /// Active-power droop, rad/(s·W).
    pub m_p: f64,
    /// Reactive-power droop, V/var.
    pub n_q: f64,
    pub r_c: f64,
    pub l_c: f64,
    pub r_f: f64,
    pub l_f: f64,
    /// Filter capacitance C_f, F.
    pub cap_f: f64,
    pub k_pv: f64,
    pub k_iv: f64,
    pub k_pc: f64,
    pub k_ic: f64,
    /// Nominal angular frequency, rad/s.
    pub omega_b: f64,
    /// Current feed-forward gain F.
    pub feedforward: f64,
    /// Power-measurement low-pass cutoff, rad/s.
    pub omega_c: f64,
    /// Secondary frequency gain c_f.
    pub c_freq: f64,
    /// Secondary voltage gain c_v.
    pub c_volt: f64,
}

impl DgParams {
    /// Units 1 and 2 of the benchmark.
    pub fn benchmark_a() -> Self {
        Self {
            m_p: 9.4e-5,
            n_q: 1.3e-3,
            r_c: 0.03,
            l_c: 0.35e-3,
            r_f: 0.1,
            l_f: 1.35e-3,
            cap_f: 50e-6,
            k_pv: 0.1,
            k_iv: 420.0,
            k_pc: 15.0,
            k_ic: 20000.0,
            omega_b: 314.16,
            feedforward: 0.75,
            omega_c: 31.41,
            c_freq: 30.0,
            c_volt: 30.0,
        }
    }

    /// Units 3 and 4 of the benchmark.
    pub fn benchmark_b() -> Self {
        Self { m_p: 12.5e-5, n_q: 1.5e-3, k_pv: 0.05, k_iv: 390.0, k_pc: 10.5, k_ic: 16000.0, ..Self::benchmark_a() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("l_f", self.l_f),
            ("cap_f", self.cap_f),
            ("l_c", self.l_c),
            ("omega_b", self.omega_b),
            ("omega_c", self.omega_c),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Input(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.m_p >= 0.0) || !(self.n_q >= 0.0) {
            return Err(Error::Input("droop coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Linear part and nonlinearity of one DG, bound to its neighbourhood
/// weights (Σ_j a_ij and g_i).
#[derive(Debug, Clone)]
pub struct DgModel {
    pub params: DgParams,
    pub degree: f64,
    pub pinning: f64,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    a_nz: Vec<(usize, usize, f64)>,
    b_nz: Vec<(usize, usize, f64)>,
}

/// Build A (15×15), B (15×9) and C (10×15).
pub fn build_matrices(
    p: &DgParams,
    adjacency_row: &[f64],
    pinning: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let s: f64 = adjacency_row.iter().sum();
    let g = pinning;
    let mut a = DMatrix::zeros(NX, NX);
    let mut set = |i: usize, j: usize, v: f64| a[(i - 1, j - 1)] = v;
    let (lf, cf, lc) = (p.l_f, p.cap_f, p.l_c);
    let (kpv, kiv, kpc, kic) = (p.k_pv, p.k_iv, p.k_pc, p.k_ic);
    let (wb, wc, ff, nq, mp) = (p.omega_b, p.omega_c, p.feedforward, p.n_q, p.m_p);

    set(1, 1, -wc);
    set(2, 2, -wc);

    set(3, 2, -nq);
    set(3, 9, -1.0);
    set(3, 15, 1.0);
    set(4, 10, -1.0);

    set(5, 2, -kpv * nq);
    set(5, 3, kiv);
    set(5, 7, -1.0);
    set(5, 9, -kpv);
    set(5, 10, -wb * cf);
    set(5, 11, ff);
    set(5, 15, kpv);

    set(6, 4, kiv);
    set(6, 8, -1.0);
    set(6, 9, wb * cf);
    set(6, 10, -kpv);
    set(6, 12, ff);

    set(7, 2, -kpc * kpv * nq / lf);
    set(7, 3, kpc * kiv / lf);
    set(7, 5, kic / lf);
    set(7, 7, -(p.r_f + kpc) / lf);
    set(7, 8, -wb);
    set(7, 9, -(1.0 + kpc * kpv) / lf);
    set(7, 10, -wb * kpc * cf / lf);
    set(7, 11, kpc * ff / lf);
    set(7, 15, kpc * kpv / lf);

    set(8, 4, kpc * kiv / lf);
    set(8, 6, kic / lf);
    set(8, 7, wb);
    set(8, 8, -(p.r_f + kpc) / lf);
    set(8, 9, wb * kpc * cf / lf);
    set(8, 10, -(kpc * kpv + 1.0) / lf);
    set(8, 12, kpc * ff / lf);

    set(9, 7, 1.0 / cf);
    set(9, 11, -1.0 / cf);
    set(10, 8, 1.0 / cf);
    set(10, 12, -1.0 / cf);

    set(11, 9, 1.0 / lc);
    set(11, 11, -p.r_c / lc);
    set(12, 10, 1.0 / lc);
    set(12, 12, -p.r_c / lc);

    set(13, 1, -mp);
    set(13, 14, 1.0);

    set(14, 1, p.c_freq * g * mp);
    set(14, 14, -p.c_freq * (s + g));

    set(15, 2, -p.c_volt * nq * s);
    set(15, 9, -p.c_volt * (s + g));

    let mut b = DMatrix::zeros(NX, NU);
    b[(10, 1)] = -1.0 / lc;
    b[(11, 2)] = -1.0 / lc;
    b[(12, 0)] = -1.0;
    for j in 3..6 {
        b[(13, j)] = 1.0;
    }
    for j in 6..9 {
        b[(14, j)] = 1.0;
    }

    let mut c = DMatrix::zeros(NY, NX);
    for (row, &col) in MEASURED.iter().enumerate() {
        c[(row, col)] = 1.0;
    }
    (a, b, c)
}

/// The bilinear nonlinearity f(x).
pub fn nonlinear_f(x: &[f64], p: &DgParams, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (wc, mp) = (p.omega_c, p.m_p);
    let slip = x[idx::OMEGA_N] - mp * x[idx::P];
    out[0] = wc * (x[8] * x[10] + x[9] * x[11]);
    out[1] = wc * (-x[8] * x[11] + x[9] * x[10]);
    out[6] = slip * x[7];
    out[7] = -slip * x[6];
    out[8] = slip * x[9];
    out[9] = -slip * x[8];
    out[10] = slip * x[11];
    out[11] = -slip * x[10];
}

impl DgModel {
    pub fn new(params: DgParams, adjacency_row: &[f64], pinning: f64) -> Result<Self> {
        params.validate()?;
        let (a, b, c) = build_matrices(&params, adjacency_row, pinning);
        let nz = |m: &DMatrix<f64>| {
            let mut v = Vec::new();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    if m[(i, j)] != 0.0 {
                        v.push((i, j, m[(i, j)]));
                    }
                }
            }
            v
        };
        let a_nz = nz(&a);
        let b_nz = nz(&b);
        Ok(Self { params, degree: adjacency_row.iter().sum(), pinning, a, b, c, a_nz, b_nz })
    }

    /// A x accumulated into `out`.
    pub fn add_ax(&self, x: &[f64], out: &mut [f64]) {
        for &(i, j, v) in &self.a_nz {
            out[i] += v * x[j];
        }
    }

    /// B u accumulated into `out`.
    pub fn add_bu(&self, u: &[f64], out: &mut [f64]) {
        for &(i, j, v) in &self.b_nz {
            out[i] += v * u[j];
        }
    }

    /// ẋ = A x + f(x) + B u written into `out`.
    pub fn derivative(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        nonlinear_f(x, &self.params, out);
        self.add_ax(x, out);
        self.add_bu(u, out);
    }

    /// y = C x.
    pub fn measure(&self, x: &[f64]) -> [f64; NY] {
        let mut y = [0.0; NY];
        for (k, &s) in MEASURED.iter().enumerate() {
            y[k] = x[s];
        }
        y
    }

    /// Inverter angular frequency ω = ω_n − m_P P.
    pub fn omega(&self, x: &[f64]) -> f64 {
        x[idx::OMEGA_N] - self.params.m_p * x[idx::P]
    }
}

/// Convenience wrapper returning A x + f(x) + B u as a vector.
pub fn dg_derivative(x: &DVector<f64>, u: &DVector<f64>, p: &DgParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    let mut f = vec![0.0; NX];
    nonlinear_f(x.as_slice(), p, &mut f);
    a * x + DVector::from_vec(f) + b * u
}
