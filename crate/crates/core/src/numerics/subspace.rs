//! Subspace arithmetic on orthonormal bases.
//!
//! Rank decisions threshold singular values at `RANK_TOL` times the largest
//! singular value of the matrix under inspection.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of a subspace of R^ambient, stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    ambient: usize,
    vectors: DMatrix<f64>,
}

impl SubspaceBasis {
    pub fn empty(ambient: usize) -> Self {
        Self { ambient, vectors: DMatrix::zeros(ambient, 0) }
    }

    pub fn full(ambient: usize) -> Self {
        Self { ambient, vectors: DMatrix::identity(ambient, ambient) }
    }

    /// Orthonormal basis for the column span of `m`.
    pub fn span_of(m: &DMatrix<f64>) -> Self {
        Self { ambient: m.nrows(), vectors: orth(m) }
    }

    /// Span of the canonical vectors e_i for the given zero-based indices.
    pub fn coordinates(ambient: usize, idx: &[usize]) -> Self {
        let mut m = DMatrix::zeros(ambient, idx.len());
        for (k, &i) in idx.iter().enumerate() {
            m[(i, k)] = 1.0;
        }
        Self::span_of(&m)
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Basis vectors as the columns of an ambient × dim matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> DVector<f64> {
        self.vectors.column(k).into_owned()
    }

    /// Orthogonal projector onto the subspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.vectors * self.vectors.transpose()
    }

    /// Orthogonal projector onto the orthogonal complement.
    pub fn complement_projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.ambient, self.ambient) - self.projector()
    }

    /// Distance from `v` to the subspace.
    pub fn distance(&self, v: &DVector<f64>) -> f64 {
        (v - self.projector() * v).norm()
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        self.distance(v) <= tol
    }

    /// Orthonormal basis of the orthogonal complement.
    pub fn complement(&self) -> Self {
        Self { ambient: self.ambient, vectors: kernel(&self.vectors.transpose()) }
    }

    /// Sum of two subspaces.
    pub fn sum(&self, other: &Self) -> Result<Self> {
        check_ambient(self, other)?;
        let mut m = DMatrix::zeros(self.ambient, self.dim() + other.dim());
        m.columns_mut(0, self.dim()).copy_from(&self.vectors);
        m.columns_mut(self.dim(), other.dim()).copy_from(&other.vectors);
        Ok(Self::span_of(&m))
    }

    /// Preimage A⁻¹(S) = { x : A x ∈ S }, as the kernel of P_S⊥ A.
    pub fn preimage(&self, a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != self.ambient {
            return Err(Error::Dimension(format!(
                "preimage: map has {} rows, subspace lives in R^{}",
                a.nrows(),
                self.ambient
            )));
        }
        // Judged against ‖A‖: P_S⊥ A may be pure roundoff.
        let tol = RANK_TOL * a.norm();
        Ok(Self { ambient: a.ncols(), vectors: kernel_tol(&(self.complement_projector() * a), tol) })
    }

    /// Largest inner product deviation of the Gram matrix from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.transpose() * &self.vectors;
        (g - DMatrix::identity(self.dim(), self.dim())).amax()
    }
}

fn check_ambient(u: &SubspaceBasis, v: &SubspaceBasis) -> Result<()> {
    if u.ambient != v.ambient {
        return Err(Error::Dimension(format!(
            "ambient dimensions differ: {} vs {}",
            u.ambient, v.ambient
        )));
    }
    Ok(())
}

/// Singular values and right singular vectors of `m`, with Vᵀ always square.
fn full_svd(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (r, c) = m.shape();
    let square = if r < c {
        let mut p = DMatrix::zeros(c, c);
        p.rows_mut(0, r).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = square.svd(true, true);
    (svd.singular_values, svd.u.unwrap(), svd.v_t.unwrap())
}

fn threshold(sv: &DVector<f64>) -> f64 {
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    RANK_TOL * smax
}

/// Numerical rank.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = RANK_TOL * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis (columns) of the null space of `m`.
pub fn kernel(m: &DMatrix<f64>) -> DMatrix<f64> {
    kernel_with(m, None)
}

/// Null space keeping singular values at or below the absolute `tol`.
pub fn kernel_tol(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    kernel_with(m, Some(tol))
}

fn kernel_with(m: &DMatrix<f64>, tol: Option<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 || m.amax() == 0.0 {
        return DMatrix::identity(n, n);
    }
    let (sv, _, vt) = full_svd(m);
    let tol = tol.unwrap_or_else(|| threshold(&sv));
    let idx: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] <= tol).collect();
    let mut out = DMatrix::zeros(n, idx.len());
    for (j, &k) in idx.iter().enumerate() {
        out.set_column(j, &vt.row(k).transpose());
    }
    out
}

/// Orthonormal basis (columns) of the column span of `m`.
pub fn orth(m: &DMatrix<f64>) -> DMatrix<f64> {
    let r = m.nrows();
    if m.ncols() == 0 || m.amax() == 0.0 {
        return DMatrix::zeros(r, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let tol = threshold(&svd.singular_values);
    let idx: Vec<usize> =
        (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > tol).collect();
    let mut out = DMatrix::zeros(r, idx.len());
    for (j, &k) in idx.iter().enumerate() {
        out.set_column(j, &u.column(k));
    }
    out
}

/// Orthonormal basis of the span of `m` keeping singular values above `tol`.
fn orth_above(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let r = m.nrows();
    if m.ncols() == 0 || m.nrows() == 0 {
        return DMatrix::zeros(r, 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.unwrap();
    let idx: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] > tol).collect();
    let mut out = DMatrix::zeros(r, idx.len());
    for (j, &k) in idx.iter().enumerate() {
        out.set_column(j, &u.column(k));
    }
    out
}

/// Minimum-norm least-squares solution of m·x = b via the SVD pseudo-inverse.
pub fn lstsq(m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    lstsq_rel(m, b, RANK_TOL)
}

/// [`lstsq`] discarding singular values below `rel`·σ_max.
pub fn lstsq_rel(m: &DMatrix<f64>, b: &DMatrix<f64>, rel: f64) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if c == 0 {
        return DMatrix::zeros(0, b.ncols());
    }
    if m.amax() == 0.0 {
        return DMatrix::zeros(c, b.ncols());
    }
    let svd = m.clone().svd(true, true);
    let tol = rel * svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let k = svd.singular_values.len();
    let mut x = DMatrix::zeros(c, b.ncols());
    for i in 0..k {
        let s = svd.singular_values[i];
        if s <= tol {
            continue;
        }
        let coef = u.column(i).transpose() * b / s;
        x += vt.row(i).transpose() * coef;
    }
    debug_assert_eq!(x.nrows(), c);
    let _ = r;
    x
}

/// Null space of `m` as a subspace.
pub fn kernel_basis(m: &DMatrix<f64>) -> SubspaceBasis {
    SubspaceBasis { ambient: m.ncols(), vectors: kernel(m) }
}

/// Absolute singular-value cut for intersecting projector stacks.
const INTERSECT_TOL: f64 = 1e-7;

/// Intersection U ∩ V as the kernel of the stacked complement projectors.
pub fn subspace_intersect(u: &SubspaceBasis, v: &SubspaceBasis) -> Result<SubspaceBasis> {
    check_ambient(u, v)?;
    let n = u.ambient;
    if u.is_empty() || v.is_empty() {
        return Ok(SubspaceBasis::empty(n));
    }
    let mut stacked = DMatrix::zeros(2 * n, n);
    stacked.rows_mut(0, n).copy_from(&u.complement_projector());
    stacked.rows_mut(n, n).copy_from(&v.complement_projector());
    // Projectors have unit scale, so basis roundoff is judged absolutely.
    Ok(SubspaceBasis { ambient: n, vectors: kernel_tol(&stacked, INTERSECT_TOL) })
}

fn check_square(a: &DMatrix<f64>, what: &str) -> Result<usize> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("{what}: expected square, got {}×{}", a.nrows(), a.ncols())));
    }
    Ok(a.nrows())
}

/// Unobservable subspace of (C, A): the largest A-invariant subspace in ker C.
pub fn unobservable_subspace(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<SubspaceBasis> {
    let n = check_square(a, "unobservable_subspace")?;
    if c.ncols() != n {
        return Err(Error::Dimension(format!("C has {} columns, A is {n}×{n}", c.ncols())));
    }
    let k = kernel_basis(c);
    max_controlled_invariant(a, &DMatrix::zeros(n, 0), &k)
}

/// Largest (A, B)-controlled invariant subspace contained in K (ISA recursion).
pub fn max_controlled_invariant(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &SubspaceBasis,
) -> Result<SubspaceBasis> {
    let n = check_square(a, "max_controlled_invariant")?;
    if b.nrows() != n || k.ambient_dim() != n {
        return Err(Error::Dimension(format!(
            "max_controlled_invariant: A is {n}×{n}, B has {} rows, K lives in R^{}",
            b.nrows(),
            k.ambient_dim()
        )));
    }
    let im_b = SubspaceBasis::span_of(b);
    let mut v = k.clone();
    for _ in 0..=n {
        let next = subspace_intersect(k, &v.sum(&im_b)?.preimage(a)?)?;
        if next.dim() == v.dim() {
            return Ok(next);
        }
        v = next;
    }
    Ok(v)
}


/// Largest subspace V with some F such that (A + B F) V ⊆ V and
/// (C + D F) V = 0: the recursion V₀ = Rⁿ,
/// V_{k+1} = {x : ∃u, A x + B u ∈ V_k, C x + D u = 0}.
pub fn weakly_unobservable_subspace(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<SubspaceBasis> {
    let n = check_square(a, "weakly_unobservable_subspace")?;
    let (m, p) = (b.ncols(), c.nrows());
    if b.nrows() != n || c.ncols() != n || d.shape() != (p, m) {
        return Err(Error::Dimension("weakly_unobservable_subspace: inconsistent dimensions".into()));
    }
    let mut v = SubspaceBasis::full(n);
    for _ in 0..=n {
        let perp = v.complement_projector();
        let mut stack = DMatrix::zeros(n + p, n + m);
        stack.view_mut((0, 0), (n, n)).copy_from(&(&perp * a));
        stack.view_mut((0, n), (n, m)).copy_from(&(&perp * b));
        stack.view_mut((n, 0), (p, n)).copy_from(c);
        stack.view_mut((n, n), (p, m)).copy_from(d);
        let ker = kernel(&stack);
        // Kernel columns are unit vectors, so the state parts are judged
        // against an absolute tolerance.
        let next = SubspaceBasis { ambient: n, vectors: orth_above(&ker.rows(0, n).into_owned(), 1e-9) };
        if next.dim() == v.dim() {
            return Ok(next);
        }
        v = next;
    }
    Ok(v)
}

/// Relative singular-value cut used when solving for the friend.
const FRIEND_TOL: f64 = 1e-8;

/// Q such that (A + B_a Q) maps span(v) into itself.
pub fn invariant_friend(
    a: &DMatrix<f64>,
    b_a: &DMatrix<f64>,
    v: &SubspaceBasis,
) -> Result<DMatrix<f64>> {
    let n = check_square(a, "invariant_friend")?;
    if b_a.nrows() != n || v.ambient_dim() != n {
        return Err(Error::Dimension("invariant_friend: inconsistent dimensions".into()));
    }
    if v.is_empty() {
        return Err(Error::Synthesis("invariant_friend: empty subspace".into()));
    }
    let w = v.matrix();
    let (k, m) = (w.ncols(), b_a.ncols());
    let mut lhs = DMatrix::zeros(n, k + m);
    lhs.columns_mut(0, k).copy_from(w);
    lhs.columns_mut(k, m).copy_from(&(-b_a));
    let rhs = a * w;
    // Basis roundoff must not be amplified through near-collinear columns.
    let sol = lstsq_rel(&lhs, &rhs, FRIEND_TOL);
    let resid = (&lhs * &sol - &rhs).amax();
    let scale = 1.0 + a.amax() * w.amax();
    if resid > 1e-6 * scale {
        return Err(Error::Synthesis(format!(
            "subspace is not controlled invariant (residual {resid:e})"
        )));
    }
    let q_on_v = sol.rows(k, m).into_owned();
    Ok(q_on_v * w.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weakly_unobservable_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let v = weakly_unobservable_subspace(&a, &b, &c, &DMatrix::zeros(1, 1)).unwrap();
        assert!(v.is_empty());
        // A direct feedthrough can cancel any output: everything is weakly unobservable.
        let v = weakly_unobservable_subspace(&a, &b, &c, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(v.dim(), 2);
        // Without inputs it reduces to the unobservable subspace.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let v = weakly_unobservable_subspace(&a, &DMatrix::zeros(2, 0), &c, &DMatrix::zeros(1, 0)).unwrap();
        assert_eq!(v.dim(), 1);
        assert!(v.contains(&DVector::from_vec(vec![0.0, 1.0]), 1e-9));
    }


    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn kernel_examples() {
        let k = kernel_basis(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(k.dim(), 1);
        assert!((k.vector(0)[1].abs() - 1.0).abs() < 1e-12);
        let k = kernel_basis(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
        assert!(k.is_empty());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let k = kernel_basis(&m);
        assert_eq!(k.dim(), 1);
        let v = k.vector(0);
        assert!((v[0] + v[1]).abs() < 1e-12);
        assert!((v[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((&m * v).norm() < 1e-9);
    }

    #[test]
    fn intersect_examples() {
        let full = SubspaceBasis::full(3);
        let v = SubspaceBasis::span_of(&DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 0.0]));
        let r = subspace_intersect(&full, &v).unwrap();
        assert_eq!(r.dim(), 1);
        assert!(r.contains(&DVector::from_vec(vec![1.0, 2.0, 0.0]), 1e-9));

        let e1 = SubspaceBasis::coordinates(2, &[0]);
        let e2 = SubspaceBasis::coordinates(2, &[1]);
        assert!(subspace_intersect(&e1, &e2).unwrap().is_empty());

        let u = SubspaceBasis::coordinates(3, &[0, 1]);
        let w = SubspaceBasis::coordinates(3, &[1, 2]);
        let r = subspace_intersect(&u, &w).unwrap();
        assert_eq!(r.dim(), 1);
        assert!(r.contains(&e(3, 1), 1e-9));

        assert!(subspace_intersect(&e1, &u).is_err());
    }

    #[test]
    fn unobservable_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(unobservable_subspace(&a, &c).unwrap().is_empty());
        assert_eq!(unobservable_subspace(&a, &DMatrix::zeros(1, 2)).unwrap().dim(), 2);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let h = unobservable_subspace(&d, &c).unwrap();
        assert_eq!(h.dim(), 1);
        assert!(h.contains(&e(2, 1), 1e-9));
    }

    #[test]
    fn controlled_invariant_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let full = SubspaceBasis::full(2);
        assert_eq!(max_controlled_invariant(&a, &b, &full).unwrap().dim(), 2);
        let k = kernel_basis(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert!(max_controlled_invariant(&a, &b, &k).unwrap().is_empty());
        let bfull = DMatrix::identity(2, 2);
        let r = max_controlled_invariant(&a, &bfull, &k).unwrap();
        assert_eq!(r.dim(), 1);
    }

    #[test]
    fn friend_on_worked_example() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
        let b_a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let v = SubspaceBasis::span_of(&DMatrix::from_column_slice(2, 1, &[-1.0, 2.0]));
        let q = invariant_friend(&a, &b_a, &v).unwrap();
        let w = DVector::from_vec(vec![-1.0, 2.0]);
        let img = (&a + &b_a * &q) * &w;
        assert!((img + 2.0 * &w).norm() < 1e-9);
        let q0 = invariant_friend(&a, &b_a, &SubspaceBasis::full(2)).unwrap();
        let img0 = (&a + &b_a * &q0) * DMatrix::identity(2, 2);
        assert!(img0.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn friend_rejects_non_invariant() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.2, -0.1]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let v = SubspaceBasis::coordinates(2, &[1]);
        assert!(matches!(invariant_friend(&a, &b, &v), Err(Error::Synthesis(_))));
    }

    #[test]
    fn lstsq_recovers_exact_solution() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = DMatrix::from_column_slice(2, 1, &[2.0, -1.0]);
        let b = &m * &x;
        assert!((lstsq(&m, &b) - x).norm() < 1e-12);
    }
}
