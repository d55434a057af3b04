//! Matrix Lie group and Lie algebra kernels for SO(2) and SO(3).
//!
//! Elements of both groups are stored as 3×3 orthonormal matrices; an SO(2)
//! element occupies the top-left 2×2 block with a 1 in the (2,2) slot, so the
//! same matrix algebra serves both groups. Algebra elements and their duals
//! are stored as coordinate vectors under the hat isomorphism: one coordinate
//! for so(2), three for so(3).
//!
//! The pairing between a covector `c` and a vector `v` is `cᵀv` in hat
//! coordinates. The Frobenius-pairing factor 2 for skew matrices is absorbed
//! into [`trivialize_cotangent`] so that scalar adjoint equations on SO(2)
//! come out coefficient-for-coefficient.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angle at which `log` refuses to evaluate: the principal branch
/// is a diffeomorphism only strictly inside ±π.
pub const LOG_BRANCH_MARGIN: f64 = 1e-6;

/// Orthonormality drift beyond which constructors re-project onto the group.
const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Drift beyond which a matrix is rejected as not a rotation at all.
const GROUP_REJECT_TOL: f64 = 1e-3;

/// Which matrix Lie group a value belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupKind {
    So2,
    So3,
}

impl GroupKind {
    /// Dimension n of the ambient n×n matrices.
    pub fn matrix_dim(self) -> usize {
        match self {
            GroupKind::So2 => 2,
            GroupKind::So3 => 3,
        }
    }

    /// Dimension n_q = n(n−1)/2 of the Lie algebra.
    pub fn algebra_dim(self) -> usize {
        match self {
            GroupKind::So2 => 1,
            GroupKind::So3 => 3,
        }
    }
}

/// An element of SO(2) or SO(3), stored as an orthonormal matrix with unit
/// determinant. SO(2) elements are padded into the top-left block of a 3×3
/// identity so group operations are uniform across kinds.
#[derive(Clone, Debug)]
pub struct GroupElement {
    kind: GroupKind,
    m: Matrix3<f64>,
}

/// A Lie algebra element in hat coordinates (radians for rotation steps).
/// so(2) uses one coordinate, so(3) uses three.
#[derive(Clone, Debug)]
pub struct AlgebraVector {
    kind: GroupKind,
    v: Vector3<f64>,
}

/// A linear functional on the Lie algebra, with pairing `⟨c, v⟩ = cᵀv` in hat
/// coordinates.
#[derive(Clone, Debug)]
pub struct CoAlgebraVector {
    kind: GroupKind,
    c: Vector3<f64>,
}

fn pad3(kind: GroupKind, coords: &[f64]) -> Vector3<f64> {
    assert_eq!(
        coords.len(),
        kind.algebra_dim(),
        "coordinate length must match the algebra dimension"
    );
    let mut v = Vector3::zeros();
    v.rows_mut(0, coords.len()).copy_from_slice(coords);
    v
}

impl AlgebraVector {
    pub fn new(kind: GroupKind, coords: &[f64]) -> Self {
        Self {
            kind,
            v: pad3(kind, coords),
        }
    }

    pub fn zeros(kind: GroupKind) -> Self {
        Self {
            kind,
            v: Vector3::zeros(),
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// Coordinates under the hat isomorphism (length `algebra_dim`).
    pub fn coords(&self) -> &[f64] {
        &self.v.as_slice()[..self.kind.algebra_dim()]
    }

    pub fn norm(&self) -> f64 {
        self.v.norm()
    }

    pub(crate) fn padded(&self) -> Vector3<f64> {
        self.v
    }

    pub(crate) fn from_padded(kind: GroupKind, v: Vector3<f64>) -> Self {
        debug_assert!(kind != GroupKind::So2 || (v[1] == 0.0 && v[2] == 0.0));
        Self { kind, v }
    }
}

impl CoAlgebraVector {
    pub fn new(kind: GroupKind, coords: &[f64]) -> Self {
        Self {
            kind,
            c: pad3(kind, coords),
        }
    }

    pub fn zeros(kind: GroupKind) -> Self {
        Self {
            kind,
            c: Vector3::zeros(),
        }
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn coords(&self) -> &[f64] {
        &self.c.as_slice()[..self.kind.algebra_dim()]
    }

    pub fn norm(&self) -> f64 {
        self.c.norm()
    }

    /// The pairing ⟨c, v⟩ = cᵀv.
    pub fn pair(&self, v: &AlgebraVector) -> f64 {
        assert_eq!(self.kind, v.kind);
        self.c.dot(&v.v)
    }

    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn padded(&self) -> Vector3<f64> {
        self.c
    }

    pub(crate) fn from_padded(kind: GroupKind, c: Vector3<f64>) -> Self {
        Self { kind, c }
    }
}

impl GroupElement {
    /// The group identity.
    pub fn identity(kind: GroupKind) -> Self {
        Self {
            kind,
            m: Matrix3::identity(),
        }
    }

    /// Builds an element from row-major matrix entries (4 for SO(2), 9 for
    /// SO(3)), re-orthonormalizing by polar projection if the input has
    /// drifted beyond 1e−10 from the group. Inputs further than 1e−3 from a
    /// rotation are rejected.
    pub fn from_entries(kind: GroupKind, entries: &[f64]) -> Result<Self> {
        let n = kind.matrix_dim();
        assert_eq!(entries.len(), n * n, "need n×n row-major entries");
        let mut m = Matrix3::identity();
        for r in 0..n {
            for c in 0..n {
                m[(r, c)] = entries[r * n + c];
            }
        }
        Self::from_padded(kind, m)
    }

    /// Wraps a matrix without validating it. For callers that construct
    /// elements from exact closed forms; non-rotation inputs surface later as
    /// non-finite or branch-cut errors.
    pub(crate) fn from_matrix_unchecked(kind: GroupKind, m: Matrix3<f64>) -> Self {
        Self { kind, m }
    }

    pub(crate) fn from_padded(kind: GroupKind, m: Matrix3<f64>) -> Result<Self> {
        let drift = group_drift(&m);
        if !drift.is_finite() {
            return Err(Error::NonFinite("group element construction"));
        }
        if drift > GROUP_REJECT_TOL {
            return Err(Error::InvalidGroupMatrix { deviation: drift });
        }
        let mut g = Self { kind, m };
        if drift > ORTHONORMALITY_TOL {
            g.renormalize();
        }
        Ok(g)
    }

    /// A planar rotation by `angle` (counter-clockwise in the standard basis).
    pub fn so2_rotation(angle: f64) -> Self {
        exp(&AlgebraVector::new(GroupKind::So2, &[angle]))
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// The full padded 3×3 matrix (SO(2) occupies the top-left block).
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries of the n×n block.
    pub fn entries(&self) -> Vec<f64> {
        let n = self.kind.matrix_dim();
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                out.push(self.m[(r, c)]);
            }
        }
        out
    }

    /// Group multiplication `self · other`.
    pub fn mul(&self, other: &GroupElement) -> GroupElement {
        assert_eq!(self.kind, other.kind);
        GroupElement {
            kind: self.kind,
            m: self.m * other.m,
        }
    }

    /// The inverse, which for rotations is the transpose.
    pub fn inverse(&self) -> GroupElement {
        GroupElement {
            kind: self.kind,
            m: self.m.transpose(),
        }
    }

    /// Frobenius distance to another element.
    pub fn distance(&self, other: &GroupElement) -> f64 {
        (self.m - other.m).norm()
    }

    /// ‖mᵀm − I‖ + |det m − 1|, the invariant drift.
    pub fn orthonormality_drift(&self) -> f64 {
        group_drift(&self.m)
    }

    /// Projects back onto the group (polar projection via SVD), preserving
    /// the SO(2) padding exactly.
    pub fn renormalize(&mut self) {
        match self.kind {
            GroupKind::So2 => {
                let b = self.m.fixed_view::<2, 2>(0, 0).into_owned();
                let svd = b.svd(true, true);
                let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
                let mut r = u * vt;
                if r.determinant() < 0.0 {
                    let mut u2 = u;
                    u2.column_mut(1).neg_mut();
                    r = u2 * vt;
                }
                self.m = Matrix3::identity();
                self.m.fixed_view_mut::<2, 2>(0, 0).copy_from(&r);
            }
            GroupKind::So3 => {
                let svd = self.m.svd(true, true);
                let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
                let mut r = u * vt;
                if r.determinant() < 0.0 {
                    let mut u2 = u;
                    u2.column_mut(2).neg_mut();
                    r = u2 * vt;
                }
                self.m = r;
            }
        }
    }

    /// Planar rotation angle via atan2; meaningful for SO(2) only.
    pub fn so2_angle(&self) -> f64 {
        debug_assert_eq!(self.kind, GroupKind::So2);
        self.m[(1, 0)].atan2(self.m[(0, 0)])
    }
}

fn group_drift(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).norm() + (m.determinant() - 1.0).abs()
}

/// The hat isomorphism: coordinates to a skew-symmetric matrix. For SO(2) the
/// single coordinate generates the planar rotation block; for SO(3) this is
/// the cross-product matrix.
pub fn hat(kind: GroupKind, coords: &[f64]) -> Matrix3<f64> {
    let v = pad3(kind, coords);
    match kind {
        GroupKind::So2 => Matrix3::new(0.0, -v[0], 0.0, v[0], 0.0, 0.0, 0.0, 0.0, 0.0),
        GroupKind::So3 => Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0),
    }
}

/// The inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// 1e−10 in norm.
pub fn vee(kind: GroupKind, m: &Matrix3<f64>) -> Result<AlgebraVector> {
    let sym = 0.5 * (m + m.transpose());
    let deviation = sym.norm();
    if deviation > 1e-10 {
        return Err(Error::InvalidAlgebraMatrix { deviation });
    }
    Ok(vee_unchecked(kind, m))
}

pub(crate) fn vee_unchecked(kind: GroupKind, m: &Matrix3<f64>) -> AlgebraVector {
    let skew = 0.5 * (m - m.transpose());
    let v = match kind {
        GroupKind::So2 => Vector3::new(skew[(1, 0)], 0.0, 0.0),
        GroupKind::So3 => Vector3::new(skew[(2, 1)], skew[(0, 2)], skew[(1, 0)]),
    };
    AlgebraVector::from_padded(kind, v)
}

/// The exponential map: closed form for SO(2), Rodrigues for SO(3).
pub fn exp(a: &AlgebraVector) -> GroupElement {
    let m = match a.kind {
        GroupKind::So2 => {
            let t = a.v[0];
            let (s, c) = t.sin_cos();
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        }
        GroupKind::So3 => {
            let theta = a.v.norm();
            let k = hat(GroupKind::So3, a.coords());
            let (c1, c2) = if theta < 1e-4 {
                let t2 = theta * theta;
                (
                    1.0 - t2 / 6.0 + t2 * t2 / 120.0,
                    0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                )
            } else {
                (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
            };
            Matrix3::identity() + c1 * k + c2 * (k * k)
        }
    };
    GroupElement { kind: a.kind, m }
}

/// The principal-branch logarithm. Fails with [`Error::LogBranchCut`] when
/// the rotation angle reaches π − 1e−6, beyond which the exponential is no
/// longer a diffeomorphism onto its image.
pub fn log(g: &GroupElement) -> Result<AlgebraVector> {
    match g.kind {
        GroupKind::So2 => {
            let theta = g.so2_angle();
            if !theta.is_finite() {
                return Err(Error::NonFinite("log of SO(2) element"));
            }
            if theta.abs() >= std::f64::consts::PI - LOG_BRANCH_MARGIN {
                return Err(Error::LogBranchCut { angle: theta });
            }
            Ok(AlgebraVector::new(GroupKind::So2, &[theta]))
        }
        GroupKind::So3 => {
            let m = &g.m;
            // atan2 of (‖skew part‖, (tr−1)/2) conditions the angle well away
            // from both 0 and π; a Taylor branch covers the origin.
            let w = Vector3::new(
                0.5 * (m[(2, 1)] - m[(1, 2)]),
                0.5 * (m[(0, 2)] - m[(2, 0)]),
                0.5 * (m[(1, 0)] - m[(0, 1)]),
            );
            let s = w.norm();
            let c = 0.5 * (m.trace() - 1.0);
            let theta = s.atan2(c);
            if !theta.is_finite() {
                return Err(Error::NonFinite("log of SO(3) element"));
            }
            if theta >= std::f64::consts::PI - LOG_BRANCH_MARGIN {
                return Err(Error::LogBranchCut { angle: theta });
            }
            let coeff = if theta < 1e-6 {
                1.0 + theta * theta / 6.0
            } else {
                theta / s
            };
            Ok(AlgebraVector::from_padded(GroupKind::So3, coeff * w))
        }
    }
}

/// Matrix of the adjoint action `Ad_g : w ↦ vee(g · hat(w) · g⁻¹)` in hat
/// coordinates, padded to 3×3 (identity outside the algebra block).
pub(crate) fn adjoint_matrix(g: &GroupElement) -> Matrix3<f64> {
    match g.kind {
        // SO(2) is abelian: conjugation is the identity.
        GroupKind::So2 => Matrix3::identity(),
        // For rotations, R hat(w) Rᵀ = hat(Rw).
        GroupKind::So3 => g.m,
    }
}

/// The dual of the adjoint action: `⟨ad_star(g, ρ), w⟩ = ⟨ρ, Ad_g w⟩` for all
/// algebra vectors w. For SO(2) this is the identity map for every g.
pub fn ad_star(g: &GroupElement, rho: &CoAlgebraVector) -> CoAlgebraVector {
    assert_eq!(g.kind, rho.kind);
    match g.kind {
        GroupKind::So2 => rho.clone(),
        GroupKind::So3 => {
            CoAlgebraVector::from_padded(GroupKind::So3, adjoint_matrix(g).transpose() * rho.c)
        }
    }
}

/// Matrix A of `ad_a : w ↦ [a, w]` in hat coordinates.
fn ad_matrix(a: &AlgebraVector) -> Matrix3<f64> {
    match a.kind {
        GroupKind::So2 => Matrix3::zeros(),
        GroupKind::So3 => hat(GroupKind::So3, a.coords()),
    }
}

/// Applies the dual of the (left-trivialized) derivative of the exponential
/// at `a` to the covector `c`: the series Σ_{k≥0} (−ad_a*)^k c / (k+1)!,
/// truncated when a term drops below 1e−15 in norm. On an abelian algebra
/// every ad_a vanishes and the covector passes through unchanged.
pub fn dexp_dual(a: &AlgebraVector, c: &CoAlgebraVector) -> CoAlgebraVector {
    assert_eq!(a.kind, c.kind);
    if a.kind == GroupKind::So2 {
        return c.clone();
    }
    let at = ad_matrix(a).transpose();
    let mut sum = c.c;
    let mut term = c.c;
    for k in 1..60 {
        term = -(at * term) / (k as f64 + 1.0);
        sum += term;
        if term.norm() < 1e-15 {
            break;
        }
    }
    CoAlgebraVector::from_padded(a.kind, sum)
}

/// Matrix of [`dexp_dual`] acting on covector coordinates, padded to 3×3.
pub(crate) fn dexp_dual_matrix(a: &AlgebraVector) -> Matrix3<f64> {
    match a.kind {
        GroupKind::So2 => Matrix3::identity(),
        GroupKind::So3 => {
            let at = ad_matrix(a).transpose();
            let mut sum = Matrix3::identity();
            let mut term = Matrix3::identity();
            for k in 1..60 {
                term = -(at * term) / (k as f64 + 1.0);
                sum += term;
                if term.norm() < 1e-15 {
                    break;
                }
            }
            sum
        }
    }
}

/// Pulls an ambient matrix-space gradient `dF` of a scalar function at `q`
/// back to a covector on the algebra: `⟨result, w⟩ = trace(dFᵀ · q · hat(w))`,
/// which is the directional derivative of the function along the curve
/// `s ↦ q · exp(s · hat(w))`. Equivalently `vee(qᵀ dF − dFᵀ q)`; the factor 2
/// from the Frobenius pairing of skew matrices is absorbed here.
pub fn trivialize_cotangent(q: &GroupElement, df: &Matrix3<f64>) -> CoAlgebraVector {
    let a = q.m.transpose() * df;
    let v = vee_unchecked(q.kind, &(a - a.transpose()));
    CoAlgebraVector::from_padded(q.kind, v.padded())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Truncated matrix-exponential series, the independent oracle for exp.
    fn exp_series(m: &Matrix3<f64>, terms: usize) -> Matrix3<f64> {
        let mut sum = Matrix3::identity();
        let mut term = Matrix3::identity();
        for k in 1..=terms {
            term = term * m / (k as f64);
            sum += term;
        }
        sum
    }

    fn random_so3(rng: &mut impl Rng, max_angle: f64) -> GroupElement {
        let v: Vector3<f64> = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let scale = rng.gen_range(0.0..max_angle) / v.norm().max(1e-12);
        exp(&AlgebraVector::new(
            GroupKind::So3,
            (v * scale).as_slice(),
        ))
    }

    #[test]
    fn hat_so2_zero() {
        assert_eq!(hat(GroupKind::So2, &[0.0]), Matrix3::zeros());
    }

    #[test]
    fn vee_hat_roundtrip_so3() {
        let v = [1.0, 2.0, 3.0];
        let back = vee(GroupKind::So3, &hat(GroupKind::So3, &v)).unwrap();
        assert_eq!(back.coords(), &v);
    }

    #[test]
    fn hat_so3_matches_cross_product() {
        // hat((0,0,a))·e1 = (0,0,a)×e1 = (0, a, 0), a = 0.7
        let a = 0.7;
        let m = hat(GroupKind::So3, &[0.0, 0.0, a]);
        let e1 = Vector3::new(1.0, 0.0, 0.0);
        let out = m * e1;
        assert!((out - Vector3::new(0.0, a, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn vee_rejects_non_skew() {
        let mut m = hat(GroupKind::So3, &[0.1, 0.2, 0.3]);
        m[(0, 0)] = 1e-3;
        assert!(matches!(
            vee(GroupKind::So3, &m),
            Err(Error::InvalidAlgebraMatrix { .. })
        ));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        for kind in [GroupKind::So2, GroupKind::So3] {
            let g = exp(&AlgebraVector::zeros(kind));
            assert!(g.distance(&GroupElement::identity(kind)) == 0.0);
        }
    }

    #[test]
    fn exp_so2_quarter_turn_matches_series_oracle() {
        let a = AlgebraVector::new(GroupKind::So2, &[std::f64::consts::FRAC_PI_2]);
        let g = exp(&a);
        let oracle = exp_series(&hat(GroupKind::So2, a.coords()), 30);
        assert!((g.matrix() - oracle).norm() < 1e-14);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((g.matrix() - expected).norm() < 1e-15);
    }

    #[test]
    fn exp_so3_quarter_turn_matches_series_oracle() {
        let a = AlgebraVector::new(GroupKind::So3, &[0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let g = exp(&a);
        let oracle = exp_series(&hat(GroupKind::So3, a.coords()), 30);
        assert!((g.matrix() - oracle).norm() < 1e-14);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((g.matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn exp_so3_random_matches_series_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ];
            let g = exp(&AlgebraVector::new(GroupKind::So3, &v));
            let oracle = exp_series(&hat(GroupKind::So3, &v), 30);
            assert!((g.matrix() - oracle).norm() < 1e-13);
            assert!(g.orthonormality_drift() < 1e-13);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        for kind in [GroupKind::So2, GroupKind::So3] {
            let a = log(&GroupElement::identity(kind)).unwrap();
            assert_eq!(a.norm(), 0.0);
        }
    }

    #[test]
    fn log_exp_roundtrip_principal_branch() {
        let a = AlgebraVector::new(GroupKind::So3, &[0.3, 0.0, 0.0]);
        let back = log(&exp(&a)).unwrap();
        assert!((back.coords()[0] - 0.3).abs() < 1e-13);
        assert!(back.coords()[1].abs() < 1e-13 && back.coords()[2].abs() < 1e-13);
    }

    #[test]
    fn log_so2_of_momentum_step_matches_arcsin_oracle() {
        // F(ω) is the planar rotation with sin θ = hω; at h = 0.05,
        // ω = 0.0875 a high-precision arcsin gives the frozen value below.
        let (h, om): (f64, f64) = (0.05, 0.0875);
        let s = (1.0 - h * h * om * om).sqrt();
        let f = GroupElement::from_entries(GroupKind::So2, &[s, -h * om, h * om, s]).unwrap();
        let a = log(&f).unwrap();
        assert!((a.coords()[0] - 4.375013956825944e-3).abs() < 1e-16);
    }

    #[test]
    fn log_rejects_branch_cut() {
        let g = GroupElement::so2_rotation(std::f64::consts::PI - 1e-9);
        assert!(matches!(log(&g), Err(Error::LogBranchCut { .. })));
        let a = AlgebraVector::new(GroupKind::So3, &[0.0, std::f64::consts::PI - 1e-9, 0.0]);
        assert!(matches!(log(&exp(&a)), Err(Error::LogBranchCut { .. })));
    }

    #[test]
    fn ad_star_at_identity_is_identity() {
        let rho = CoAlgebraVector::new(GroupKind::So3, &[0.4, -0.2, 1.1]);
        let out = ad_star(&GroupElement::identity(GroupKind::So3), &rho);
        assert_eq!(out.coords(), rho.coords());
    }

    #[test]
    fn ad_star_so2_is_exactly_identity() {
        let rho = CoAlgebraVector::new(GroupKind::So2, &[2.5]);
        for angle in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let g = GroupElement::so2_rotation(angle);
            let out = ad_star(&g, &rho);
            assert_eq!(out.coords()[0], 2.5);
        }
    }

    #[test]
    fn ad_star_duality_against_conjugation_oracle() {
        // ⟨ad_star(g,ρ), w⟩ must equal ⟨ρ, vee(g hat(w) g⁻¹)⟩, with the right
        // side computed by direct conjugation.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let g = random_so3(&mut rng, 3.0);
            let rho = CoAlgebraVector::new(
                GroupKind::So3,
                &[
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ],
            );
            let lhs = ad_star(&g, &rho);
            for i in 0..3 {
                let mut w = [0.0; 3];
                w[i] = 1.0;
                let conj = g.matrix() * hat(GroupKind::So3, &w) * g.matrix().transpose();
                let adw = vee(GroupKind::So3, &conj).unwrap();
                let rhs = rho.pair(&adw);
                assert!((lhs.coords()[i] - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ad_star_quarter_turn_example() {
        let g = exp(&AlgebraVector::new(
            GroupKind::So3,
            &[0.0, 0.0, std::f64::consts::FRAC_PI_2],
        ));
        let e1 = CoAlgebraVector::new(GroupKind::So3, &[1.0, 0.0, 0.0]);
        let out = ad_star(&g, &e1);
        for i in 0..3 {
            let mut w = [0.0; 3];
            w[i] = 1.0;
            let conj = g.matrix() * hat(GroupKind::So3, &w) * g.matrix().transpose();
            let expected = e1.pair(&vee(GroupKind::So3, &conj).unwrap());
            assert!((out.coords()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn dexp_dual_at_zero_is_identity() {
        let z = CoAlgebraVector::new(GroupKind::So3, &[1.0, -2.0, 0.5]);
        let out = dexp_dual(&AlgebraVector::zeros(GroupKind::So3), &z);
        assert_eq!(out.coords(), z.coords());
    }

    #[test]
    fn dexp_dual_abelian_collapses_to_identity() {
        let z = CoAlgebraVector::new(GroupKind::So2, &[3.7]);
        for a in [-2.0, 0.0, 1.3] {
            let out = dexp_dual(&AlgebraVector::new(GroupKind::So2, &[a]), &z);
            assert_eq!(out.coords()[0], 3.7);
        }
    }

    #[test]
    fn dexp_dual_matches_25_term_series_oracle() {
        let a = AlgebraVector::new(GroupKind::So3, &[0.0, 0.0, 0.4]);
        let z = CoAlgebraVector::new(GroupKind::So3, &[1.0, 0.0, 0.0]);
        // Oracle: Σ_{k=0}^{25} (−1)^k (ad_a*)^k z / (k+1)!, powers and
        // factorials accumulated directly.
        let at = hat(GroupKind::So3, a.coords()).transpose();
        let mut sum = Vector3::zeros();
        let mut power = z.padded();
        let mut factorial = 1.0f64;
        for k in 0..=25usize {
            factorial *= (k + 1) as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign / factorial * power;
            power = at * power;
        }
        let out = dexp_dual(&a, &z);
        assert!((out.padded() - sum).norm() < 1e-14);
        // and the matrix route agrees
        let m = dexp_dual_matrix(&a);
        assert!((m * z.padded() - out.padded()).norm() < 1e-15);
    }

    #[test]
    fn trivialize_cotangent_zero_gradient() {
        let q = GroupElement::identity(GroupKind::So3);
        let out = trivialize_cotangent(&q, &Matrix3::zeros());
        assert_eq!(out.norm(), 0.0);
    }

    /// Central finite-difference oracle for the trivialized differential.
    fn fd_directional(
        q: &GroupElement,
        f: &dyn Fn(&GroupElement) -> f64,
        w: &[f64],
        step: f64,
    ) -> f64 {
        let dp = q.mul(&exp(&AlgebraVector::new(q.kind(), &w.iter().map(|x| x * step).collect::<Vec<_>>())));
        let dm = q.mul(&exp(&AlgebraVector::new(q.kind(), &w.iter().map(|x| -x * step).collect::<Vec<_>>())));
        (f(&dp) - f(&dm)) / (2.0 * step)
    }

    #[test]
    fn trivialize_cotangent_trace_at_identity_is_zero() {
        // f(q) = trace(q) at q = I: d/ds trace(exp(hat(w)s)) = trace(hat(w)) = 0.
        let q = GroupElement::identity(GroupKind::So2);
        let df = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let out = trivialize_cotangent(&q, &df);
        assert!(out.norm() < 1e-15);
        let fd = fd_directional(&q, &|g| g.matrix()[(0, 0)] + g.matrix()[(1, 1)], &[1.0], 1e-6);
        assert!(fd.abs() < 1e-9);
    }

    #[test]
    fn trivialize_cotangent_matches_fd_oracle() {
        // f(q) = q_00 at q = I on SO(3), all three directions checked by the
        // step-1e−6 central-difference oracle.
        let q = GroupElement::identity(GroupKind::So3);
        let mut df = Matrix3::zeros();
        df[(0, 0)] = 1.0;
        let out = trivialize_cotangent(&q, &df);
        for i in 0..3 {
            let mut w = [0.0; 3];
            w[i] = 1.0;
            let fd = fd_directional(&q, &|g| g.matrix()[(0, 0)], &w, 1e-6);
            assert!((out.coords()[i] - fd).abs() < 1e-9);
        }
        assert!(out.norm() < 1e-12); // (hat w)_11 = 0 in every direction
    }

    #[test]
    fn trivialize_cotangent_random_fd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_so3(&mut rng, 2.5);
            let c: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |g: &GroupElement| -> f64 {
                let m = g.matrix();
                let mut acc = 0.0;
                for r in 0..3 {
                    for cc in 0..3 {
                        acc += c[3 * r + cc] * m[(r, cc)];
                    }
                }
                acc
            };
            let mut df = Matrix3::zeros();
            for r in 0..3 {
                for cc in 0..3 {
                    df[(r, cc)] = c[3 * r + cc];
                }
            }
            let out = trivialize_cotangent(&q, &df);
            for i in 0..3 {
                let mut w = [0.0; 3];
                w[i] = 1.0;
                let fd = fd_directional(&q, &f, &w, 1e-6);
                assert!((out.coords()[i] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn renormalization_restores_invariants() {
        let mut g = GroupElement::so2_rotation(0.3);
        g.m[(0, 0)] += 3e-4;
        let g2 = GroupElement::from_padded(GroupKind::So2, g.m).unwrap();
        assert!(g2.orthonormality_drift() < 1e-14);
        assert_eq!(g2.matrix()[(2, 2)], 1.0);
    }

    #[test]
    fn constructor_rejects_garbage() {
        let out = GroupElement::from_entries(GroupKind::So2, &[2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(out, Err(Error::InvalidGroupMatrix { .. })));
    }

    proptest! {
        #[test]
        fn prop_exp_log_roundtrip_so3(x in -1.7f64..1.7, y in -1.7f64..1.7, z in -1.7f64..1.7) {
            let v = [x, y, z];
            let norm = (x * x + y * y + z * z).sqrt();
            prop_assume!(norm < 3.0);
            let a = AlgebraVector::new(GroupKind::So3, &v);
            let back = log(&exp(&a)).unwrap();
            let err: f64 = back
                .coords()
                .iter()
                .zip(v.iter())
                .map(|(b, o)| (b - o) * (b - o))
                .sum::<f64>()
                .sqrt();
            prop_assert!(err <= 1e-12);
        }

        #[test]
        fn prop_exp_log_roundtrip_so2(t in -3.0f64..3.0) {
            let a = AlgebraVector::new(GroupKind::So2, &[t]);
            let back = log(&exp(&a)).unwrap();
            prop_assert!((back.coords()[0] - t).abs() <= 1e-14);
        }
    }
}
