//! Small-signal analysis on the third-order inverter model: states
//! x = [p, q, δ₂…δₙ], algebraic z = [i_od, i_oq] in the common frame.

pub mod opf;
pub mod search;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microgrid::network::C64;
use crate::microgrid::Microgrid;
use crate::numerics::{solve_lyapunov, spectral_abscissa};

pub use opf::{dispatch, opf_feasibility, CostParams, DispatchOptions, OpfLimits, OpfReport, OpfSlacks};
pub use search::{eigen_scenarios, worst_case_attack_search, EigenScenario, SearchBudget, SearchResult};

/// Droop set-points handed to the inverters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoints {
    /// p_opf, W.
    pub p: Vec<f64>,
    /// q_opf, var.
    pub q: Vec<f64>,
    /// v_opf, V.
    pub v: Vec<f64>,
}

impl Setpoints {
    /// Zero power set-points at the voltage reference.
    pub fn nominal(mg: &Microgrid) -> Self {
        let n = mg.n();
        Self { p: vec![0.0; n], q: vec![0.0; n], v: vec![mg.cfg.v_ref_volts(); n] }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.p.len() != n || self.q.len() != n || self.v.len() != n {
            return Err(Error::Dimension(format!("set-points must have {n} entries per field")));
        }
        if self.p.iter().chain(&self.q).chain(&self.v).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite set-point".into()));
        }
        Ok(())
    }
}

/// Reduced DAE data for n inverters.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub n: usize,
    pub m_p: Vec<f64>,
    pub n_q: Vec<f64>,
    pub omega_c: Vec<f64>,
    pub r_c: Vec<f64>,
    pub x_c: Vec<f64>,
    /// Real part of the Kron-reduced admittance.
    pub g: DMatrix<f64>,
    /// Imaginary part of the Kron-reduced admittance.
    pub b: DMatrix<f64>,
    pub omega_b: f64,
    /// Factor on (ω − ω_com) in the angle rows; 1 when ω is in rad/s.
    pub angle_gain: f64,
}

/// The four partial-derivative blocks at one point.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub fx: DMatrix<f64>,
    pub fz: DMatrix<f64>,
    pub gx: DMatrix<f64>,
    pub gz: DMatrix<f64>,
}

/// A consistent point of the reduced DAE.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub setpoints: Setpoints,
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y_red: DMatrix<C64>,
    /// ‖g̃(x, z)‖∞.
    pub algebraic_residual: f64,
    /// ‖f̃(x, z)‖∞.
    pub differential_residual: f64,
}

impl OperatingPoint {
    pub fn i_od(&self) -> &[f64] {
        &self.z.as_slice()[..self.setpoints.p.len()]
    }

    pub fn i_oq(&self) -> &[f64] {
        &self.z.as_slice()[self.setpoints.p.len()..]
    }
}

/// M^p: row k (k = 2…n) is −m_P1 in column 1 and m_Pk in column k.
pub fn mp_matrix(m_p: &[f64]) -> DMatrix<f64> {
    let n = m_p.len();
    let mut m = DMatrix::zeros(n.saturating_sub(1), n);
    for k in 1..n {
        m[(k - 1, 0)] = -m_p[0];
        m[(k - 1, k)] = m_p[k];
    }
    m
}

impl ReducedModel {
    pub fn from_microgrid(mg: &Microgrid) -> Result<Self> {
        let y = mg.cfg.reduced_admittance()?;
        let ps: Vec<_> = mg.models.iter().map(|m| m.params).collect();
        let omega_b = mg.cfg.omega_base;
        Ok(Self {
            n: mg.n(),
            m_p: ps.iter().map(|p| p.m_p).collect(),
            n_q: ps.iter().map(|p| p.n_q).collect(),
            omega_c: ps.iter().map(|p| p.omega_c).collect(),
            r_c: ps.iter().map(|p| p.r_c).collect(),
            x_c: ps.iter().map(|p| omega_b * p.l_c).collect(),
            g: y.map(|v| v.re),
            b: y.map(|v| v.im),
            omega_b,
            angle_gain: 1.0,
        })
    }

    pub fn nx(&self) -> usize {
        3 * self.n - 1
    }

    pub fn nz(&self) -> usize {
        2 * self.n
    }

    pub fn y_red(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.n, self.n, |i, j| C64::new(self.g[(i, j)], self.b[(i, j)]))
    }

    /// Angles of all DGs, the reference fixed at 0.
    pub fn angles(&self, x: &DVector<f64>) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        d[1..].copy_from_slice(&x.as_slice()[2 * self.n..]);
        d
    }

    /// Terminal voltage magnitude v_opf + n_Q q_opf − n_Q q.
    fn magnitude(&self, i: usize, q: f64, sp: &Setpoints) -> f64 {
        sp.v[i] + self.n_q[i] * (sp.q[i] - q)
    }

    fn check(&self, x: &DVector<f64>, z: Option<&DVector<f64>>, sp: &Setpoints) -> Result<()> {
        sp.check(self.n)?;
        if x.len() != self.nx() || z.is_some_and(|z| z.len() != self.nz()) {
            return Err(Error::Dimension(format!("reduced state needs {} entries and z {}", self.nx(), self.nz())));
        }
        Ok(())
    }

    /// f̃(x, z).
    pub fn reduced_derivative(&self, x: &DVector<f64>, z: &DVector<f64>, sp: &Setpoints) -> Result<DVector<f64>> {
        self.check(x, Some(z), sp)?;
        let n = self.n;
        let d = self.angles(x);
        let mut out = DVector::zeros(self.nx());
        for i in 0..n {
            let (p, q) = (x[i], x[n + i]);
            let e = self.magnitude(i, q, sp);
            let (id, iq) = (z[i], z[n + i]);
            let (s, c) = d[i].sin_cos();
            let wc = self.omega_c[i];
            out[i] = wc * (-p + e * (c * id + s * iq));
            out[n + i] = wc * (-q + e * (s * id - c * iq));
        }
        let w = |i: usize| self.omega_b - self.m_p[i] * (x[i] - sp.p[i]);
        for k in 1..n {
            out[2 * n + k - 1] = self.angle_gain * (w(k) - w(0));
        }
        Ok(out)
    }

    /// g̃(x, z) = z − [Re; Im]{Y̌ (v_o − z_c i_o)}.
    pub fn algebraic_residual(&self, x: &DVector<f64>, z: &DVector<f64>, sp: &Setpoints) -> Result<DVector<f64>> {
        self.check(x, Some(z), sp)?;
        let n = self.n;
        let d = self.angles(x);
        let mut wr = vec![0.0; n];
        let mut wi = vec![0.0; n];
        for j in 0..n {
            let e = self.magnitude(j, x[n + j], sp);
            let (s, c) = d[j].sin_cos();
            let (id, iq) = (z[j], z[n + j]);
            wr[j] = e * c - self.r_c[j] * id + self.x_c[j] * iq;
            wi[j] = e * s - self.x_c[j] * id - self.r_c[j] * iq;
        }
        let mut out = z.clone();
        for i in 0..n {
            for j in 0..n {
                let (g, b) = (self.g[(i, j)], self.b[(i, j)]);
                out[i] -= g * wr[j] - b * wi[j];
                out[n + i] -= g * wi[j] + b * wr[j];
            }
        }
        Ok(out)
    }

    /// Output currents consistent with x: the algebraic equations are
    /// linear in z.
    pub fn solve_z(&self, x: &DVector<f64>, sp: &Setpoints) -> Result<DVector<f64>> {
        let zero = DVector::zeros(self.nz());
        let r0 = self.algebraic_residual(x, &zero, sp)?;
        let gz = self.jacobians(x, &zero, sp)?.gz;
        let dz = gz.lu().solve(&(-r0)).ok_or_else(|| Error::Singular("∂g̃/∂z is singular".into()))?;
        Ok(dz)
    }

    /// Analytic ∂f̃/∂x, ∂f̃/∂z, ∂g̃/∂x, ∂g̃/∂z.
    pub fn jacobians(&self, x: &DVector<f64>, z: &DVector<f64>, sp: &Setpoints) -> Result<Blocks> {
        self.check(x, Some(z), sp)?;
        let n = self.n;
        let (nx, nz) = (self.nx(), self.nz());
        let d = self.angles(x);
        let col_delta = |i: usize| (i > 0).then(|| 2 * n + i - 1);
        let mut fx = DMatrix::zeros(nx, nx);
        let mut fz = DMatrix::zeros(nx, nz);
        for i in 0..n {
            let q = x[n + i];
            let e = self.magnitude(i, q, sp);
            let nq = self.n_q[i];
            let (id, iq) = (z[i], z[n + i]);
            let (s, c) = d[i].sin_cos();
            let wc = self.omega_c[i];
            fx[(i, i)] = -wc;
            fx[(i, n + i)] = -wc * nq * (c * id + s * iq);
            fx[(n + i, n + i)] = -wc - wc * nq * (s * id - c * iq);
            if let Some(k) = col_delta(i) {
                fx[(i, k)] = wc * e * (c * iq - s * id);
                fx[(n + i, k)] = wc * e * (c * id + s * iq);
            }
            fz[(i, i)] = wc * e * c;
            fz[(i, n + i)] = wc * e * s;
            fz[(n + i, i)] = wc * e * s;
            fz[(n + i, n + i)] = -wc * e * c;
        }
        let mp = mp_matrix(&self.m_p);
        fx.view_mut((2 * n, 0), (n - 1, n)).copy_from(&(mp * -self.angle_gain));

        let mut gx = DMatrix::zeros(nz, nx);
        let mut gz = DMatrix::identity(nz, nz);
        for j in 0..n {
            let e = self.magnitude(j, x[n + j], sp);
            let nq = self.n_q[j];
            let (s, c) = d[j].sin_cos();
            let (r, xc) = (self.r_c[j], self.x_c[j]);
            for i in 0..n {
                let (g, b) = (self.g[(i, j)], self.b[(i, j)]);
                gx[(i, n + j)] = nq * (g * c - b * s);
                gx[(n + i, n + j)] = nq * (g * s + b * c);
                if let Some(k) = col_delta(j) {
                    gx[(i, k)] = e * (g * s + b * c);
                    gx[(n + i, k)] = e * (b * s - g * c);
                }
                gz[(i, j)] += g * r - b * xc;
                gz[(i, n + j)] -= g * xc + b * r;
                gz[(n + i, j)] += g * xc + b * r;
                gz[(n + i, n + j)] += g * r - b * xc;
            }
        }
        Ok(Blocks { fx, fz, gx, gz })
    }

    /// Â and the blocks at (x, z(x)).
    pub fn linearize(&self, x: &DVector<f64>, sp: &Setpoints) -> Result<(DMatrix<f64>, Blocks)> {
        let z = self.solve_z(x, sp)?;
        let blocks = self.jacobians(x, &z, sp)?;
        Ok((state_matrix(&blocks)?, blocks))
    }

    /// Equilibrium for the given set-points by damped Newton on
    /// f̃(x, z(x)) = 0 with Jacobian Â.
    pub fn equilibrium(&self, sp: &Setpoints) -> Result<OperatingPoint> {
        sp.check(self.n)?;
        let n = self.n;
        let mut x = DVector::zeros(self.nx());
        x.rows_mut(0, n).copy_from_slice(&sp.p);
        x.rows_mut(n, n).copy_from_slice(&sp.q);
        let scale = DVector::from_iterator(
            self.nx(),
            (0..self.nx()).map(|k| if k < 2 * n { self.omega_c[k % n] } else { self.angle_gain.abs().max(1.0) }),
        );
        let merit = |f: &DVector<f64>| f.component_div(&scale).amax();
        let mut f = self.reduced_derivative(&x, &self.solve_z(&x, sp)?, sp)?;
        for _ in 0..100 {
            if merit(&f) < 1e-9 {
                break;
            }
            let (a_hat, _) = self.linearize(&x, sp)?;
            let dx = a_hat.lu().solve(&(-&f)).ok_or_else(|| Error::Equilibrium("singular state matrix in Newton step".into()))?;
            let mut step = 1.0;
            loop {
                let trial = &x + &dx * step;
                let ft = self.reduced_derivative(&trial, &self.solve_z(&trial, sp)?, sp)?;
                if merit(&ft) < merit(&f) || step < 1e-4 {
                    x = trial;
                    f = ft;
                    break;
                }
                step *= 0.5;
            }
        }
        if !(merit(&f) < 1e-6) {
            return Err(Error::Equilibrium(format!("Newton stalled with scaled residual {:e}", merit(&f))));
        }
        let z = self.solve_z(&x, sp)?;
        let g = self.algebraic_residual(&x, &z, sp)?;
        let differential_residual = self.reduced_derivative(&x, &z, sp)?.amax();
        Ok(OperatingPoint { setpoints: sp.clone(), x, z, y_red: self.y_red(), algebraic_residual: g.amax(), differential_residual })
    }
}

/// Â = ∂f̃/∂x − ∂f̃/∂z (∂g̃/∂z)⁻¹ ∂g̃/∂x.
pub fn state_matrix(b: &Blocks) -> Result<DMatrix<f64>> {
    let sol = b.gz.clone().lu().solve(&b.gx).ok_or_else(|| Error::Singular("∂g̃/∂z is singular".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("∂g̃/∂z is singular".into()));
    }
    Ok(&b.fx - &b.fz * sol)
}

/// Outcome of the decay-rate test ÂᵀM + MÂ ⪯ −2ηM.
#[derive(Debug, Clone)]
pub struct DecayCertificate {
    pub certified: bool,
    pub abscissa: f64,
    /// Solution of (Â + ηI)ᵀM + M(Â + ηI) = −I, normalised to ‖M‖₂ = 1.
    pub witness: Option<DMatrix<f64>>,
    /// Largest eigenvalue of ÂᵀM + MÂ + 2ηM for the witness.
    pub lmi_max_eig: f64,
}

impl DecayCertificate {
    /// −(spectral abscissa): the decay rate available.
    pub fn margin(&self) -> f64 {
        -self.abscissa
    }
}

pub fn certify_decay(a_hat: &DMatrix<f64>, eta: f64) -> Result<DecayCertificate> {
    if !(eta >= 0.0) {
        return Err(Error::Input(format!("decay rate must be nonnegative, got {eta}")));
    }
    let abscissa = spectral_abscissa(a_hat)?;
    let mut cert = DecayCertificate { certified: false, abscissa, witness: None, lmi_max_eig: f64::NAN };
    if !(abscissa < -eta) {
        return Ok(cert);
    }
    let n = a_hat.nrows();
    let shifted = a_hat + DMatrix::identity(n, n) * eta;
    let m = solve_lyapunov(&shifted, &DMatrix::identity(n, n))?;
    let norm = SymmetricEigen::new(m.clone()).eigenvalues.amax();
    let m = m / norm;
    if Cholesky::new(m.clone()).is_none() {
        return Ok(cert);
    }
    let lmi = a_hat.transpose() * &m + &m * a_hat + &m * (2.0 * eta);
    let lmi = (&lmi + lmi.transpose()) * 0.5;
    cert.lmi_max_eig = SymmetricEigen::new(lmi).eigenvalues.max();
    cert.certified = true;
    cert.witness = Some(m);
    Ok(cert)
}
