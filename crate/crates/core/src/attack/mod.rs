//! Attack generation: scheduled stealthy intermittent integrity attacks
//! built on controlled-invariant geometry, and i.i.d. stochastic attacks.
//!
//! A stealthy attack stacks input and output corruption as a = [a_u; a_y]
//! with B_a = [BΓ_u, 0] and D′ = [0, Γ_y]. In slot k it evolves as
//! ζ̇ = (A + B_a Q) ζ + B_a L_a l(t), ζ(t_k) = −Δz_k and
//! a = β(t − t_k)(Q ζ + L_a l(t)), β(s) = 1 − e^{−b s}.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::eig::balancing_scale;
use crate::numerics::subspace::{kernel_tol, orth};
use crate::numerics::{
    invariant_friend, max_controlled_invariant, subspace_intersect, unobservable_subspace,
    weakly_unobservable_subspace, SubspaceBasis,
};

/// Activation instants t_k and active durations τ_k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub starts: Vec<f64>,
    pub durations: Vec<f64>,
}

impl Schedule {
    pub fn new(starts: Vec<f64>, durations: Vec<f64>) -> Result<Self> {
        let s = Self { starts, durations };
        s.validate()?;
        Ok(s)
    }

    /// One slot active on [start, end).
    pub fn window(start: f64, end: f64) -> Result<Self> {
        Self::new(vec![start], vec![end - start])
    }

    pub fn validate(&self) -> Result<()> {
        if self.starts.is_empty() {
            return Err(Error::Input("schedule needs at least one slot".into()));
        }
        if self.starts.len() != self.durations.len() {
            return Err(Error::Input("schedule starts and durations differ in length".into()));
        }
        for k in 0..self.starts.len() {
            let tau = self.durations[k];
            if !self.starts[k].is_finite() || !tau.is_finite() || !(tau > 0.0) {
                return Err(Error::Input(format!("slot {}: duration must be positive", k + 1)));
            }
            if let Some(&next) = self.starts.get(k + 1) {
                if !(next > self.starts[k]) {
                    return Err(Error::Input(format!("slot {}: start times must increase strictly", k + 2)));
                }
                if tau > next - self.starts[k] + 1e-12 {
                    return Err(Error::Input(format!(
                        "slot {}: duration {} exceeds the gap {} to the next activation",
                        k + 1,
                        tau,
                        next - self.starts[k]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Slot whose active interval [t_k, t_k + τ_k) contains t.
    pub fn active_slot(&self, t: f64) -> Option<usize> {
        (0..self.starts.len()).find(|&k| t >= self.starts[k] && t < self.starts[k] + self.durations[k])
    }

    /// Most recent activation at or before t.
    pub fn current_slot(&self, t: f64) -> Option<usize> {
        (0..self.starts.len()).rev().find(|&k| t >= self.starts[k])
    }

    pub fn first_start(&self) -> f64 {
        self.starts[0]
    }

    pub fn last_end(&self) -> f64 {
        let k = self.starts.len() - 1;
        self.starts[k] + self.durations[k]
    }

    /// `slots` activations of equal on and off length, the last ending at `end`.
    pub fn intermittent(start: f64, end: f64, slots: usize) -> Result<Self> {
        if slots == 0 || !(end > start) {
            return Err(Error::Input("intermittent schedule needs slots ≥ 1 and end > start".into()));
        }
        let period = (end - start) / (slots as f64 - 0.5);
        let starts = (0..slots).map(|k| start + k as f64 * period).collect();
        Self::new(starts, vec![0.5 * period; slots])
    }
}

/// β(s) = 1 − e^{−b s} for s ≥ 0, zero before.
pub fn envelope(b: f64, s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        1.0 - (-b * s).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubspaceVariant {
    /// V(W_a1): the weakly unobservable subspace of the attacked pair.
    WeaklyUnobservable,
    /// V(W_a1) ∩ V(H).
    Intersection,
    /// Supplied externally.
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VariantChoice {
    /// The intersection when it yields a nonzero attack, else V(W_a1).
    #[default]
    Auto,
    WeaklyUnobservable,
    Intersection,
}

/// Default bounds c1 ≤ ‖Δz_k‖ ≤ c2.
pub const C1_DEFAULT: f64 = 1e-4;
pub const C2_DEFAULT: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct StealthyAttackSpec {
    pub v_a: SubspaceBasis,
    pub variant: SubspaceVariant,
    /// Q_k, (|K_u| + |K_y|) × n_x; shared by all slots.
    pub q: DMatrix<f64>,
    /// Columns spanning Im L_a.
    pub l_a: DMatrix<f64>,
    pub dz: Vec<DVector<f64>>,
    pub b: f64,
    pub gamma_u: Vec<usize>,
    pub gamma_y: Vec<usize>,
    pub b_a: DMatrix<f64>,
    pub d_prime: DMatrix<f64>,
    /// A + B_a Q.
    pub a_cl: DMatrix<f64>,
    pub schedule: Schedule,
}

/// B_a = [BΓ_u, 0] and D′ = [0, Γ_y].
pub fn channel_matrices(b: &DMatrix<f64>, n_y: usize, gamma_u: &[usize], gamma_y: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, ku, ky) = (b.nrows(), gamma_u.len(), gamma_y.len());
    if gamma_u.iter().any(|&j| j >= b.ncols()) || gamma_y.iter().any(|&j| j >= n_y) {
        return Err(Error::Input("attack channel index out of range".into()));
    }
    let mut b_a = DMatrix::zeros(n, ku + ky);
    for (k, &j) in gamma_u.iter().enumerate() {
        b_a.set_column(k, &b.column(j));
    }
    let mut d = DMatrix::zeros(n_y, ku + ky);
    for (k, &j) in gamma_y.iter().enumerate() {
        d[(j, ku + k)] = 1.0;
    }
    Ok((b_a, d))
}

/// Synthesise a stealthy attack for (A, B, C) on the given channels.
/// `dz_norms[k]` fixes ‖Δz_k‖; directions follow the first basis vector
/// of V_a.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_stealthy(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    gamma_u: &[usize],
    gamma_y: &[usize],
    schedule: Schedule,
    dz_norms: &[f64],
    rate: f64,
    choice: VariantChoice,
) -> Result<StealthyAttackSpec> {
    if gamma_u.is_empty() {
        return Err(Error::Synthesis("no input channel selected".into()));
    }
    schedule.validate()?;
    let n = a.nrows();
    let (b_a, d_prime) = channel_matrices(b, c.nrows(), gamma_u, gamma_y)?;

    // Balanced coordinates x = T x_s usually keep the rank tests well
    // conditioned on badly scaled models; unscaled ones are the fallback.
    let mut last = None;
    for t in [balancing_scale(a), vec![1.0; n]] {
        match synthesize_in(a, c, &b_a, &d_prime, &t, (gamma_u, gamma_y), &schedule, dz_norms, rate, choice) {
            Ok(spec) => return Ok(spec),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Synthesis("no coordinates tried".into())))
}

#[allow(clippy::too_many_arguments)]
fn synthesize_in(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    b_a: &DMatrix<f64>,
    d_prime: &DMatrix<f64>,
    t: &[f64],
    (gamma_u, gamma_y): (&[usize], &[usize]),
    schedule: &Schedule,
    dz_norms: &[f64],
    rate: f64,
    choice: VariantChoice,
) -> Result<StealthyAttackSpec> {
    let n = a.nrows();
    let ti = DMatrix::from_diagonal(&DVector::from_iterator(n, t.iter().map(|v| 1.0 / v)));
    let tm = DMatrix::from_diagonal(&DVector::from_column_slice(t));
    let as_ = &ti * a * &tm;
    let bs = &ti * b_a;
    let cs = c * &tm;

    let wu = weakly_unobservable_subspace(&as_, &bs, &cs, d_prime)?;
    let h = unobservable_subspace(&as_, &cs)?;
    let vh = max_controlled_invariant(&as_, &bs, &h)?;
    let inter = subspace_intersect(&wu, &vh)?;

    let attempt = |vs: &SubspaceBasis, variant: SubspaceVariant| -> Result<Option<StealthyAttackSpec>> {
        if vs.is_empty() {
            return Ok(None);
        }
        let v = SubspaceBasis::span_of(&(&tm * vs.matrix()));
        let qs = invariant_friend(&as_, &bs, vs)?;
        let mut q = &qs * &ti;
        let ku = gamma_u.len();
        let idle = (0..v.dim()).all(|k| (q.rows(0, ku) * v.vector(k)).amax() <= 1e-9);
        if idle {
            q += drive_term(b_a, d_prime, &v);
        }
        // Output rows cancel the stealthy direction's measured footprint.

        for (k, &j) in gamma_y.iter().enumerate() {
            q.row_mut(ku + k).copy_from(&(-c.row(j)));
        }
        let chans = (gamma_u.to_vec(), gamma_y.to_vec());
        let spec = assemble(a, b_a.clone(), d_prime.clone(), chans, v, variant, q, schedule.clone(), dz_norms, rate)?;
        let nonzero = (0..spec.v_a.dim()).any(|k| (&spec.q * spec.v_a.vector(k)).amax() > 1e-9);
        Ok(nonzero.then_some(spec))
    };

    let try_inter = || attempt(&inter, SubspaceVariant::Intersection);
    let try_wu = || attempt(&wu, SubspaceVariant::WeaklyUnobservable);
    let found = match choice {
        VariantChoice::Intersection => try_inter()?,
        VariantChoice::WeaklyUnobservable => try_wu()?,
        VariantChoice::Auto => match try_inter()? {
            Some(s) => Some(s),
            None => try_wu()?,
        },
    };
    found.ok_or_else(|| {
        Error::NoStealthyDirection(format!(
            "V(W_a1) has dimension {}, V(H) dimension {}, intersection dimension {}; none yields a nonzero attack",
            wu.dim(),
            vh.dim(),
            inter.dim()
        ))
    })
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    a: &DMatrix<f64>,
    b_a: DMatrix<f64>,
    d_prime: DMatrix<f64>,
    (gamma_u, gamma_y): (Vec<usize>, Vec<usize>),
    v_a: SubspaceBasis,
    variant: SubspaceVariant,
    q: DMatrix<f64>,
    schedule: Schedule,
    dz_norms: &[f64],
    rate: f64,
) -> Result<StealthyAttackSpec> {
    if dz_norms.len() != schedule.starts.len() {
        return Err(Error::Input(format!(
            "expected {} Δz norms, got {}",
            schedule.starts.len(),
            dz_norms.len()
        )));
    }
    let dir = v_a.vector(0);
    let dz = dz_norms.iter().map(|&s| &dir * s).collect();
    let l_a = attack_generator_basis(&b_a, &d_prime, &v_a);
    let a_cl = a + &b_a * &q;
    Ok(StealthyAttackSpec { v_a, variant, q, l_a, dz, b: rate, gamma_u, gamma_y, b_a, d_prime, a_cl, schedule })
}

/// Decay rate of the drive added when the friend is zero on V_a.
pub const DRIVE_RATE: f64 = 10.0;

/// −σ L (B_a L)ᵀ P_V / ‖B_a L‖² with L = ker(D′) ∩ B_a⁻¹(V_a): keeps V_a
/// invariant while making the attack act on it.
fn drive_term(b_a: &DMatrix<f64>, d_prime: &DMatrix<f64>, v: &SubspaceBasis) -> DMatrix<f64> {
    let l = attack_generator_basis(b_a, d_prime, v);
    if l.ncols() == 0 {
        return DMatrix::zeros(b_a.ncols(), b_a.nrows());
    }
    let bl = b_a * &l;
    let scale = bl.norm_squared();
    if scale == 0.0 {
        return DMatrix::zeros(b_a.ncols(), b_a.nrows());
    }
    &l * bl.transpose() * v.projector() * (-DRIVE_RATE / scale)
}

/// Basis of ker(D′) ∩ B_a⁻¹(V_a).
pub fn attack_generator_basis(b_a: &DMatrix<f64>, d_prime: &DMatrix<f64>, v_a: &SubspaceBasis) -> DMatrix<f64> {
    let m = b_a.ncols();
    let perp = v_a.complement_projector();
    let mut stack = DMatrix::zeros(d_prime.nrows() + b_a.nrows(), m);
    stack.view_mut((0, 0), (d_prime.nrows(), m)).copy_from(d_prime);
    stack.view_mut((d_prime.nrows(), 0), (b_a.nrows(), m)).copy_from(&(perp * b_a));
    let tol = 1e-8 * (1.0 + stack.amax());
    orth(&kernel_tol(&stack, tol))
}

/// Build a spec around a given V_a and Q (or a least-squares friend when
/// `q` is `None`), with Δz_k = dz_norms[k]·(first basis vector). Channel
/// indices are recovered from the columns of D′.
#[allow(clippy::too_many_arguments)]
pub fn from_subspace(
    a: &DMatrix<f64>,
    b_a: &DMatrix<f64>,
    d_prime: &DMatrix<f64>,
    v_a: SubspaceBasis,
    q: Option<DMatrix<f64>>,
    schedule: Schedule,
    dz_norms: &[f64],
    rate: f64,
) -> Result<StealthyAttackSpec> {
    schedule.validate()?;
    if v_a.is_empty() {
        return Err(Error::NoStealthyDirection("supplied V_a is empty".into()));
    }
    let q = match q {
        Some(q) => q,
        None => invariant_friend(a, b_a, &v_a)?,
    };
    if q.shape() != (b_a.ncols(), a.nrows()) {
        return Err(Error::Dimension("Q must be (channels × n_x)".into()));
    }
    let mut gamma_u = Vec::new();
    let mut gamma_y = Vec::new();
    for j in 0..d_prime.ncols() {
        match (0..d_prime.nrows()).find(|&i| d_prime[(i, j)] != 0.0) {
            Some(i) => gamma_y.push(i),
            None => gamma_u.push(j),
        }
    }
    assemble(a, b_a.clone(), d_prime.clone(), (gamma_u, gamma_y), v_a, SubspaceVariant::Supplied, q, schedule, dz_norms, rate)
}

impl StealthyAttackSpec {
    pub fn channels(&self) -> usize {
        self.b_a.ncols()
    }

    pub fn n_u(&self) -> usize {
        self.gamma_u.len()
    }

    pub fn n_y(&self) -> usize {
        self.gamma_y.len()
    }

    /// ζ at activation of slot k.
    pub fn initial_state(&self, k: usize) -> DVector<f64> {
        -&self.dz[k]
    }

    /// Largest distance of a basis image (A + B_a Q)v from V_a.
    pub fn invariance_error(&self) -> f64 {
        (0..self.v_a.dim())
            .map(|k| self.v_a.distance(&(&self.a_cl * self.v_a.vector(k))))
            .fold(0.0, f64::max)
    }

    /// Check Δz membership and the c1, c2 norm bounds.
    pub fn check(&self, c1: f64, c2: f64) -> Result<()> {
        for (k, dz) in self.dz.iter().enumerate() {
            if self.v_a.distance(dz) > 1e-6 {
                return Err(Error::Synthesis(format!("Δz_{} leaves V_a", k + 1)));
            }
            let nrm = dz.norm();
            if nrm < c1 || nrm > c2 {
                return Err(Error::Synthesis(format!("‖Δz_{}‖ = {nrm} outside [{c1}, {c2}]", k + 1)));
            }
        }
        let e = self.invariance_error();
        if e > 1e-8 * (1.0 + self.a_cl.amax()) {
            return Err(Error::Synthesis(format!("(A + B_a Q) V_a ⊄ V_a (error {e:e})")));
        }
        Ok(())
    }

    /// Attack value and ζ̇ at time t with l(t) = `l` (empty for zero).
    pub fn signal(&self, t: f64, zeta: &DVector<f64>, l: Option<&DVector<f64>>) -> (DVector<f64>, DVector<f64>) {
        let n = zeta.len();
        match self.schedule.active_slot(t) {
            None => (DVector::zeros(self.channels()), DVector::zeros(n)),
            Some(k) => {
                let beta = envelope(self.b, t - self.schedule.starts[k]);
                let mut drive = &self.q * zeta;
                let mut zdot = &self.a_cl * zeta;
                if let Some(l) = l {
                    let la_l = &self.l_a * l;
                    drive += &la_l;
                    zdot += &self.b_a * la_l;
                }
                (drive * beta, zdot)
            }
        }
    }
}

/// Free-function form of [`StealthyAttackSpec::signal`] with l(t) = 0.
pub fn attack_signal(spec: &StealthyAttackSpec, t: f64, zeta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    spec.signal(t, zeta, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArbitraryKind {
    Uniform { lo: f64, hi: f64 },
    GaussianSine { sigma: f64, amplitude: f64, frequency: f64 },
}

impl ArbitraryKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ArbitraryKind::Uniform { lo, hi } if !(lo < hi) => Err(Error::Input(format!("uniform bounds need lo < hi, got [{lo}, {hi}]"))),
            ArbitraryKind::GaussianSine { sigma, .. } if !(sigma >= 0.0) => Err(Error::Input("σ must be nonnegative".into())),
            _ => Ok(()),
        }
    }
}

/// Seeded generator of per-channel stochastic corruption.
#[derive(Debug, Clone)]
pub struct ArbitraryAttack {
    pub kind: ArbitraryKind,
    rng: ChaCha8Rng,
}

impl ArbitraryAttack {
    pub fn new(kind: ArbitraryKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(Self { kind, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// One sample per channel at time t.
    pub fn sample(&mut self, t: f64, channels: usize) -> Vec<f64> {
        (0..channels).map(|_| arbitrary_attack(&self.kind, t, &mut self.rng)).collect()
    }
}

/// One scalar sample of the stochastic attack at time t.
pub fn arbitrary_attack<R: Rng>(kind: &ArbitraryKind, t: f64, rng: &mut R) -> f64 {
    match *kind {
        ArbitraryKind::Uniform { lo, hi } => rng.random_range(lo..=hi),
        ArbitraryKind::GaussianSine { sigma, amplitude, frequency } => {
            if sigma == 0.0 {
                return 0.0;
            }
            let g = Normal::new(0.0, sigma).map(|d| d.sample(rng)).unwrap_or(0.0);
            g * amplitude * (2.0 * std::f64::consts::PI * frequency * t).sin()
        }
    }
}
