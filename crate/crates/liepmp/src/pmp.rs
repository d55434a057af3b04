//! First-order necessary conditions for optimality.
//!
//! For a problem on `G × ℝ^{n_x}` the Hamiltonian at stage t is
//!
//! ```text
//! H(ζ, ξ, q, x, u) = ν c_t(q, x, u) + ⟨ζ, log s_t(q, x)⟩ + ⟨ξ, f_t(q, x, u)⟩
//! ```
//!
//! with ν ∈ {−1, 0}. An extremal carries costates (ζᵗ, ξᵗ) whose group part
//! propagates through the dual of the adjoint action,
//!
//! ```text
//! ρ^{t−1} = ad*_{exp(−a_t)} ρᵗ + T*Φ_{q_t}(D_q H + μᵗ D_q g_t),
//! ξ^{t−1} = D_x H + μᵗ D_x g_t,          a_t = log s_t(q_t, x_t),
//! ```
//!
//! plus transversality at the final time, a non-positive-gradient condition
//! on the control, complementary slackness with non-positive multipliers μᵗ,
//! and a non-triviality gauge. Bookkeeping lives in ρ, the object the
//! coadjoint action transports; ζ is recovered as `dexp_dual(a_t, ρᵗ)`
//! wherever the Hamiltonian needs it, so no series inversion ever occurs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::lie::{
    ad_star, dexp_dual, exp, AlgebraVector, CoAlgebraVector,
    GroupElement,
};
use crate::ocp::{BoundarySpec, LieOcp, StateTrajectory};

/// Costate at one stage. `rho` is the propagated object; `zeta` is derived
/// from it at the active step direction and never stored stale.
#[derive(Clone, Debug)]
pub struct Costate {
    pub zeta: CoAlgebraVector,
    pub rho: CoAlgebraVector,
    pub xi: DVector<f64>,
}

impl Costate {
    /// Builds a costate from the propagated pair (ρ, ξ), deriving ζ at the
    /// step direction `a`.
    pub fn from_rho(a: &AlgebraVector, rho: CoAlgebraVector, xi: DVector<f64>) -> Self {
        let zeta = dexp_dual(a, &rho);
        Self { zeta, rho, xi }
    }
}

/// Constraint multipliers μᵗ (t = 1..=N, slot 0 unused) and the cost
/// multiplier ν ∈ {−1, 0}.
#[derive(Clone, Debug)]
pub struct Multipliers {
    pub mu: Vec<DVector<f64>>,
    pub nu: f64,
}

impl Multipliers {
    pub fn none(horizon: usize, nu: f64) -> Self {
        Self {
            mu: (0..=horizon).map(|_| DVector::zeros(0)).collect(),
            nu,
        }
    }

    pub fn mu_at(&self, t: usize) -> &DVector<f64> {
        &self.mu[t]
    }
}

/// A candidate extremal: states, controls, costates (t = 0..N−1),
/// multipliers, and the residual report of the first-order conditions.
pub struct ExtremalTrajectory {
    pub states: StateTrajectory,
    pub controls: Vec<DVector<f64>>,
    pub costates: Vec<Costate>,
    pub multipliers: Multipliers,
    pub report: ResidualReport,
}

/// Per-condition maximum residuals of the first-order conditions.
#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct ResidualReport {
    /// State recursion defect (group part measured in the algebra).
    pub dynamics_defect: f64,
    /// Backward adjoint recursion defect.
    pub adjoint_defect: f64,
    /// Transversality (or fixed-endpoint mismatch) residual.
    pub transversality: f64,
    /// Non-positive-gradient condition residual, maximized over stages.
    pub stationarity: f64,
    /// Fischer–Burmeister complementarity residual, maximized over (t, j).
    pub complementarity: f64,
    /// Positive part of the multipliers (must be ≤ 0).
    pub mu_positive_part: f64,
    /// ∞-norm of (ζ, ξ, μ, ν); zero violates non-triviality.
    pub nontriviality_gauge: f64,
    pub nontriviality_violated: bool,
}

impl ResidualReport {
    /// Largest residual across all conditions.
    pub fn max_residual(&self) -> f64 {
        self.dynamics_defect
            .max(self.adjoint_defect)
            .max(self.transversality)
            .max(self.stationarity)
            .max(self.complementarity)
            .max(self.mu_positive_part)
    }
}

/// The Fischer–Burmeister function φ(a, b) = a + b − √(a² + b²); zero exactly
/// on the set {a ≥ 0, b ≥ 0, ab = 0}.
pub fn fischer_burmeister(a: f64, b: f64) -> f64 {
    a + b - (a * a + b * b).sqrt()
}

/// Smoothed variant used inside Newton iterations: the parameter ε enters the
/// square root as ε², keeping the Jacobian finite at exactly-active points.
pub fn fischer_burmeister_smoothed(a: f64, b: f64, eps: f64) -> f64 {
    a + b - (a * a + b * b + eps * eps).sqrt()
}

/// All stage quantities the adjoint recursion needs at one (t, q, x, u):
/// the step direction, trivialized Jacobians, and cost gradients.
pub(crate) struct StepData {
    pub a: AlgebraVector,
    /// Trivialized Jacobian of q ↦ log s_t, n_q×n_q.
    pub l_q: DMatrix<f64>,
    /// Jacobian of x ↦ log s_t, n_q×n_x.
    pub l_x: DMatrix<f64>,
    pub f_q: DMatrix<f64>,
    pub f_x: DMatrix<f64>,
    pub f_u: DMatrix<f64>,
    pub c_q: DVector<f64>,
    pub c_x: DVector<f64>,
    pub c_u: DVector<f64>,
}

pub(crate) fn step_data(
    p: &LieOcp,
    t: usize,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<StepData> {
    let n_q = p.kind.algebra_dim();
    let a = p.step_log(t, q, x)?;
    let l_q = match &p.partials.step_log_d_q {
        Some(h) => h(t, q, x),
        None => p.fd_step_log_d_q(t, q, x)?,
    };
    let l_x = match &p.partials.step_log_d_x {
        Some(h) => h(t, q, x),
        None => p.fd_step_log_d_x(t, q, x)?,
    };
    let f_q = match &p.partials.euclid_d_q {
        Some(h) => h(t, q, x, u),
        None => fd::jacobian_q(q, p.state_dim, |qq| (p.euclid)(t, qq, x, u)),
    };
    let f_x = match &p.partials.euclid_d_x {
        Some(h) => h(t, q, x, u),
        None => fd::jacobian_x(x, p.state_dim, |xx| (p.euclid)(t, q, xx, u)),
    };
    let f_u = match &p.partials.euclid_d_u {
        Some(h) => h(t, q, x, u),
        None => fd::jacobian_x(u, p.state_dim, |uu| (p.euclid)(t, q, x, uu)),
    };
    let c_q = match &p.partials.cost_d_q {
        Some(h) => h(t, q, x, u),
        None => fd::gradient_q(q, |qq| (p.stage_cost)(t, qq, x, u)),
    };
    let c_x = match &p.partials.cost_d_x {
        Some(h) => h(t, q, x, u),
        None => fd::gradient_x(x, |xx| (p.stage_cost)(t, q, xx, u)),
    };
    let c_u = match &p.partials.cost_d_u {
        Some(h) => h(t, q, x, u),
        None => fd::gradient_x(u, |uu| (p.stage_cost)(t, q, x, uu)),
    };
    debug_assert_eq!(l_q.nrows(), n_q);
    Ok(StepData {
        a,
        l_q,
        l_x,
        f_q,
        f_x,
        f_u,
        c_q,
        c_x,
        c_u,
    })
}

/// Constraint value and Jacobians at (t, q, x), at relaxation level `relax`.
pub(crate) fn constraint_data(
    p: &LieOcp,
    t: usize,
    q: &GroupElement,
    x: &DVector<f64>,
    relax: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    match &p.constraints {
        Some(c) if (c.count)(t) > 0 => {
            let g = (c.eval)(t, q, x, relax);
            let d_q = match &c.d_q {
                Some(h) => h(t, q, x, relax),
                None => fd::jacobian_q(q, g.len(), |qq| (c.eval)(t, qq, x, relax)),
            };
            let d_x = match &c.d_x {
                Some(h) => h(t, q, x, relax),
                None => fd::jacobian_x(x, g.len(), |xx| (c.eval)(t, q, xx, relax)),
            };
            (g, d_q, d_x)
        }
        _ => (
            DVector::zeros(0),
            DMatrix::zeros(0, p.kind.algebra_dim()),
            DMatrix::zeros(0, p.state_dim),
        ),
    }
}

/// Gradients of the final cost, trivialized in q.
pub(crate) fn final_cost_grads(
    p: &LieOcp,
    q: &GroupElement,
    x: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    match &p.final_cost {
        Some(cn) => {
            let d_q = match &p.partials.final_d_q {
                Some(h) => h(q, x),
                None => fd::gradient_q(q, |qq| cn(qq, x)),
            };
            let d_x = match &p.partials.final_d_x {
                Some(h) => h(q, x),
                None => fd::gradient_x(x, |xx| cn(q, xx)),
            };
            (d_q, d_x)
        }
        None => (
            DVector::zeros(p.kind.algebra_dim()),
            DVector::zeros(p.state_dim),
        ),
    }
}

/// The stage Hamiltonian `ν c_t + ⟨ζ, log s_t(q,x)⟩ + ⟨ξ, f_t(q,x,u)⟩`.
pub fn hamiltonian(
    p: &LieOcp,
    t: usize,
    zeta: &CoAlgebraVector,
    xi: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nu: f64,
) -> Result<f64> {
    let a = p.step_log(t, q, x)?;
    let f = (p.euclid)(t, q, x, u);
    let c = (p.stage_cost)(t, q, x, u);
    let h = nu * c + zeta.pair(&a) + xi.dot(&f);
    if !h.is_finite() {
        return Err(Error::NonFinite("hamiltonian"));
    }
    Ok(h)
}

/// All five partial derivatives of the Hamiltonian at one stage point.
pub struct HamiltonianPartials {
    /// D_ζH = log s_t(q, x); independent of ζ.
    pub d_zeta: AlgebraVector,
    /// D_ξH = f_t(q, x, u).
    pub d_xi: DVector<f64>,
    /// D_xH as covector coordinates.
    pub d_x: DVector<f64>,
    /// D_uH as covector coordinates.
    pub d_u: DVector<f64>,
    /// Trivialized D_qH.
    pub d_q: CoAlgebraVector,
}

pub fn hamiltonian_partials(
    p: &LieOcp,
    t: usize,
    zeta: &CoAlgebraVector,
    xi: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nu: f64,
) -> Result<HamiltonianPartials> {
    let sd = step_data(p, t, q, x, u)?;
    let zeta_v = DVector::from_column_slice(zeta.coords());
    let d_xi = (p.euclid)(t, q, x, u);
    let d_x = nu * &sd.c_x + sd.l_x.transpose() * &zeta_v + sd.f_x.transpose() * xi;
    let d_u = nu * &sd.c_u + sd.f_u.transpose() * xi;
    let d_q_vec = nu * &sd.c_q + sd.l_q.transpose() * &zeta_v + sd.f_q.transpose() * xi;
    Ok(HamiltonianPartials {
        d_zeta: sd.a,
        d_xi,
        d_x,
        d_u,
        d_q: CoAlgebraVector::new(p.kind, d_q_vec.as_slice()),
    })
}

fn neg(a: &AlgebraVector) -> AlgebraVector {
    let coords: Vec<f64> = a.coords().iter().map(|v| -v).collect();
    AlgebraVector::new(a.kind(), &coords)
}

/// One backward step of the adjoint recursion at interior time t:
/// given (ρᵗ, ξᵗ) (ζᵗ is re-derived from ρᵗ) and μᵗ, returns (ρ^{t−1}, ξ^{t−1}).
#[allow(clippy::too_many_arguments)]
pub fn adjoint_step(
    p: &LieOcp,
    t: usize,
    costate_t: &Costate,
    mu_t: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nu: f64,
) -> Result<(CoAlgebraVector, DVector<f64>)> {
    adjoint_step_relaxed(p, t, costate_t, mu_t, q, x, u, nu, 1.0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn adjoint_step_relaxed(
    p: &LieOcp,
    t: usize,
    costate_t: &Costate,
    mu_t: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nu: f64,
    relax: f64,
) -> Result<(CoAlgebraVector, DVector<f64>)> {
    let sd = step_data(p, t, q, x, u)?;
    let zeta = dexp_dual(&sd.a, &costate_t.rho);
    let zeta_v = DVector::from_column_slice(zeta.coords());
    let (_, g_q, g_x) = constraint_data(p, t, q, x, relax);

    let transported = ad_star(&exp(&neg(&sd.a)), &costate_t.rho);
    let mut rho_prev = DVector::from_column_slice(transported.coords());
    rho_prev += nu * &sd.c_q + sd.l_q.transpose() * &zeta_v + sd.f_q.transpose() * &costate_t.xi;
    if mu_t.len() > 0 {
        rho_prev += g_q.transpose() * mu_t;
    }

    let mut xi_prev =
        nu * &sd.c_x + sd.l_x.transpose() * &zeta_v + sd.f_x.transpose() * &costate_t.xi;
    if mu_t.len() > 0 {
        xi_prev += g_x.transpose() * mu_t;
    }
    Ok((CoAlgebraVector::new(p.kind, rho_prev.as_slice()), xi_prev))
}

/// Transversality residual for a free final state:
/// `(ρ^{N−1} − T*Φ(ν D_q c_N + μᴺ D_q g_N), ξ^{N−1} − ν D_x c_N − μᴺ D_x g_N)`.
pub fn transversality_free(
    p: &LieOcp,
    costate_last: &Costate,
    mu_n: &DVector<f64>,
    q_n: &GroupElement,
    x_n: &DVector<f64>,
    nu: f64,
) -> Result<DVector<f64>> {
    if !matches!(p.boundary, BoundarySpec::FixedInitFreeFinal { .. }) {
        return Err(Error::BoundaryMismatch {
            expected: "FixedInitFreeFinal",
            found: p.boundary.variant_name(),
        });
    }
    Ok(transversality_free_vector(p, costate_last, mu_n, q_n, x_n, nu))
}

/// The orthogonality vector shared by the free and submanifold variants.
fn transversality_free_vector(
    p: &LieOcp,
    costate_last: &Costate,
    mu_n: &DVector<f64>,
    q_n: &GroupElement,
    x_n: &DVector<f64>,
    nu: f64,
) -> DVector<f64> {
    let n_q = p.kind.algebra_dim();
    let (cn_q, cn_x) = final_cost_grads(p, q_n, x_n);
    let (_, g_q, g_x) = constraint_data(p, p.horizon, q_n, x_n, 1.0);
    let mut res = DVector::zeros(n_q + p.state_dim);
    let mut rhs_q = nu * cn_q;
    let mut rhs_x = nu * cn_x;
    if mu_n.len() > 0 {
        rhs_q += g_q.transpose() * mu_n;
        rhs_x += g_x.transpose() * mu_n;
    }
    for i in 0..n_q {
        res[i] = costate_last.rho.coords()[i] - rhs_q[i];
    }
    for i in 0..p.state_dim {
        res[n_q + i] = costate_last.xi[i] - rhs_x[i];
    }
    res
}

/// Transversality residual when the final state lies on the zero set of a
/// submersion `b`: `[b(q_N, x_N); P_tan(orthogonality vector)]`, where
/// `P_tan` projects onto a numerically computed basis of `ker Db`.
pub fn transversality_submanifold(
    p: &LieOcp,
    costate_last: &Costate,
    mu_n: &DVector<f64>,
    q_n: &GroupElement,
    x_n: &DVector<f64>,
    nu: f64,
) -> Result<DVector<f64>> {
    let target = match &p.boundary {
        BoundarySpec::FixedInitSubmanifold { target, .. } => target,
        _ => {
            return Err(Error::BoundaryMismatch {
                expected: "FixedInitSubmanifold",
                found: p.boundary.variant_name(),
            })
        }
    };
    let n_q = p.kind.algebra_dim();
    let n = n_q + p.state_dim;
    let b_val = (target.eval)(q_n, x_n);
    assert_eq!(b_val.len(), target.codim, "submersion output dimension");

    let vector = transversality_free_vector(p, costate_last, mu_n, q_n, x_n, nu);
    if target.codim == 0 {
        // The whole space: every direction is tangent.
        return Ok(vector);
    }

    // Jacobian of b over (group directions, x), then the tangent space as the
    // kernel of Db via the symmetric eigendecomposition of DbᵀDb.
    let b_q = fd::jacobian_q(q_n, target.codim, |qq| (target.eval)(qq, x_n));
    let b_x = fd::jacobian_x(x_n, target.codim, |xx| (target.eval)(q_n, xx));
    let mut db = DMatrix::zeros(target.codim, n);
    db.view_mut((0, 0), (target.codim, n_q)).copy_from(&b_q);
    db.view_mut((0, n_q), (target.codim, p.state_dim))
        .copy_from(&b_x);

    let gram = db.transpose() * &db;
    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let rank_tol = 1e-20f64.max(max_ev * 1e-20).sqrt(); // singular values ~ sqrt(eigenvalues)
    let mut tangent_cols = Vec::new();
    for i in 0..n {
        if eig.eigenvalues[i].max(0.0).sqrt() <= rank_tol.max(1e-10 * max_ev.sqrt().max(1.0)) {
            tangent_cols.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    let m_f = n - target.codim;
    if tangent_cols.len() != m_f {
        // Rank deficiency of the submersion Jacobian.
        let sigma_min = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
            .sqrt();
        return Err(Error::SubmersionRankError { sigma_min });
    }

    let mut res = DVector::zeros(n);
    for i in 0..target.codim {
        res[i] = b_val[i];
    }
    for (k, col) in tangent_cols.iter().enumerate() {
        res[target.codim + k] = col.dot(&vector);
    }
    Ok(res)
}

/// The control choice returned by [`control_argmax`].
pub struct ControlChoice {
    pub u: DVector<f64>,
    /// Set when ν = 0 and some gradient component vanished: the bang-bang
    /// case split is silent there and the component was pinned to 0 (clamped
    /// to the box).
    pub singular_arc: bool,
}

/// Pointwise maximizer of the Hamiltonian over the control box.
///
/// For ν = −1 with a stage cost strictly concave in u this runs a projected
/// Newton iteration (for a separable quadratic cost it terminates in one
/// exact step, the componentwise clamp of the unconstrained stationary
/// point). For ν = 0 the Hamiltonian is linear in u and the maximizer is
/// bang-bang on the gradient sign.
pub fn control_argmax(
    p: &LieOcp,
    t: usize,
    xi: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    nu: f64,
) -> Result<ControlChoice> {
    let zeta = CoAlgebraVector::zeros(p.kind); // D_uH does not involve ζ
    let box_ = &p.control_set;
    let mut u = box_.clamp(&DVector::zeros(p.control_dim));

    if nu == 0.0 {
        let hp = hamiltonian_partials(p, t, &zeta, xi, q, x, &u, nu)?;
        let mut singular = false;
        let mut out = DVector::zeros(p.control_dim);
        for i in 0..p.control_dim {
            out[i] = if hp.d_u[i] > 0.0 {
                box_.hi[i]
            } else if hp.d_u[i] < 0.0 {
                box_.lo[i]
            } else {
                singular = true;
                0.0f64.clamp(box_.lo[i], box_.hi[i])
            };
        }
        return Ok(ControlChoice {
            u: out,
            singular_arc: singular,
        });
    }

    // Projected Newton on −H over the box.
    let grad = |uu: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(hamiltonian_partials(p, t, &zeta, xi, q, x, uu, nu)?.d_u)
    };
    let mut g = grad(&u)?;
    for _ in 0..50 {
        // Hessian of H in u by central differences of the gradient.
        let n_u = p.control_dim;
        let mut hess = DMatrix::zeros(n_u, n_u);
        let mut up = u.clone();
        for i in 0..n_u {
            let hstep = fd::euclid_step(u[i]);
            up[i] = u[i] + hstep;
            let gp = grad(&up)?;
            up[i] = u[i] - hstep;
            let gm = grad(&up)?;
            up[i] = u[i];
            hess.set_column(i, &((gp - gm) / (2.0 * hstep)));
        }
        let hess = 0.5 * (&hess + hess.transpose());
        let max_curv = hess.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if max_curv > 1e-8 {
            return Err(Error::NonConcaveHamiltonian {
                curvature: max_curv,
            });
        }
        let step = match (-hess).lu().solve(&g) {
            Some(s) => s,
            None => return Err(Error::SingularJacobian("control Hessian")),
        };
        let h_now = hamiltonian(p, t, &zeta, xi, q, x, &u, nu)?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = box_.clamp(&(&u + alpha * &step));
            let h_trial = hamiltonian(p, t, &zeta, xi, q, x, &trial, nu)?;
            if h_trial >= h_now - 1e-14 * (1.0 + h_now.abs()) {
                if (&trial - &u).norm() < 1e-16 {
                    accepted = false;
                } else {
                    u = trial;
                    accepted = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        g = grad(&u)?;
        let stat = box_stationarity(&g, &u, box_);
        if stat <= 1e-13 || !accepted {
            break;
        }
    }
    Ok(ControlChoice {
        u,
        singular_arc: false,
    })
}

fn box_stationarity(d_u: &DVector<f64>, u: &DVector<f64>, box_: &crate::ocp::ControlBox) -> f64 {
    let mut total = 0.0;
    for i in 0..u.len() {
        let up = d_u[i] * (box_.hi[i] - u[i]);
        let dn = d_u[i] * (box_.lo[i] - u[i]);
        total += up.max(dn).max(0.0);
    }
    total.max(0.0)
}

/// Residual of the non-positive-gradient condition
/// `⟨D_uH, w − u⟩ ≤ 0 for all w` in the box: the maximum of the left side
/// over the box (attained at a vertex, separable per component), floored at 0.
#[allow(clippy::too_many_arguments)]
pub fn stationarity_residual(
    p: &LieOcp,
    t: usize,
    zeta: &CoAlgebraVector,
    xi: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    nu: f64,
) -> Result<f64> {
    let hp = hamiltonian_partials(p, t, zeta, xi, q, x, u, nu)?;
    Ok(box_stationarity(&hp.d_u, u, &p.control_set))
}

/// Maximum Fischer–Burmeister residual |φ(−μᵗ_j, −gᵗ_j)| over all constrained
/// stages and components; zero iff μ ≤ 0, g ≤ 0 and μᵀg = 0 throughout.
pub fn complementarity_residual(
    p: &LieOcp,
    traj: &StateTrajectory,
    multipliers: &Multipliers,
) -> f64 {
    let mut worst = 0.0f64;
    for t in 1..=p.horizon {
        let n_g = p.constraint_count(t);
        if n_g == 0 {
            continue;
        }
        let (g, _, _) = constraint_data(p, t, &traj.q[t], &traj.x[t], 1.0);
        let mu = multipliers.mu_at(t);
        for j in 0..n_g {
            // An absent multiplier vector means μᵗ ≡ 0.
            let mu_j = if j < mu.len() { mu[j] } else { 0.0 };
            worst = worst.max(fischer_burmeister(-mu_j, -g[j]).abs());
        }
    }
    worst
}

/// Evaluates every first-order condition on a candidate extremal and reports
/// the per-condition maximum residuals.
pub fn check_extremal(
    p: &LieOcp,
    traj: &StateTrajectory,
    controls: &[DVector<f64>],
    costates: &[Costate],
    multipliers: &Multipliers,
) -> Result<ResidualReport> {
    assert_eq!(traj.len(), p.horizon + 1);
    assert_eq!(controls.len(), p.horizon);
    assert_eq!(costates.len(), p.horizon);
    let mut report = ResidualReport::default();
    let nu = multipliers.nu;

    // Dynamics defect, group part measured in the algebra.
    for t in 0..p.horizon {
        let s = p.eval_step(t, &traj.q[t], &traj.x[t])?;
        let q_pred = traj.q[t].mul(&s);
        let gap = crate::lie::log(&q_pred.inverse().mul(&traj.q[t + 1]))?;
        let x_pred = (p.euclid)(t, &traj.q[t], &traj.x[t], &controls[t]);
        let defect = gap
            .coords()
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .max((&x_pred - &traj.x[t + 1]).abs().max());
        report.dynamics_defect = report.dynamics_defect.max(defect);
    }

    // Adjoint recursion defect at interior stages.
    for t in 1..p.horizon {
        let (rho_prev, xi_prev) = adjoint_step(
            p,
            t,
            &costates[t],
            multipliers.mu_at(t),
            &traj.q[t],
            &traj.x[t],
            &controls[t],
            nu,
        )?;
        let mut defect = (&xi_prev - &costates[t - 1].xi).abs().max();
        for i in 0..p.kind.algebra_dim() {
            defect = defect.max((rho_prev.coords()[i] - costates[t - 1].rho.coords()[i]).abs());
        }
        report.adjoint_defect = report.adjoint_defect.max(defect);
    }

    // Boundary: endpoint mismatch for fixed endpoints, transversality else.
    let last = p.horizon;
    let boundary_res = match &p.boundary {
        BoundarySpec::FixedBoth { qf, xf, .. } => {
            let gap = crate::lie::log(&qf.inverse().mul(&traj.q[last]))?;
            let mut r = gap
                .coords()
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            r = r.max((&traj.x[last] - xf).abs().max());
            r
        }
        BoundarySpec::FixedInitFreeFinal { .. } => transversality_free(
            p,
            &costates[last - 1],
            multipliers.mu_at(last),
            &traj.q[last],
            &traj.x[last],
            nu,
        )?
        .abs()
        .max(),
        BoundarySpec::FixedInitSubmanifold { .. } => transversality_submanifold(
            p,
            &costates[last - 1],
            multipliers.mu_at(last),
            &traj.q[last],
            &traj.x[last],
            nu,
        )?
        .abs()
        .max(),
    };
    report.transversality = boundary_res;

    // Stationarity of the control at every stage.
    for t in 0..p.horizon {
        let r = stationarity_residual(
            p,
            t,
            &costates[t].zeta,
            &costates[t].xi,
            &traj.q[t],
            &traj.x[t],
            &controls[t],
            nu,
        )?;
        report.stationarity = report.stationarity.max(r);
    }

    // Complementary slackness and multiplier sign.
    report.complementarity = complementarity_residual(p, traj, multipliers);
    for t in 1..=p.horizon {
        for &m in multipliers.mu_at(t).iter() {
            report.mu_positive_part = report.mu_positive_part.max(m.max(0.0));
        }
    }

    // Non-triviality gauge.
    let mut gauge = nu.abs();
    for c in costates {
        gauge = gauge.max(c.xi.abs().max_or(0.0));
        for v in c.zeta.coords() {
            gauge = gauge.max(v.abs());
        }
    }
    for t in 1..=p.horizon {
        gauge = gauge.max(multipliers.mu_at(t).abs().max_or(0.0));
    }
    report.nontriviality_gauge = gauge;
    report.nontriviality_violated = gauge <= 0.0;
    Ok(report)
}

trait MaxOr {
    fn max_or(&self, default: f64) -> f64;
}

impl MaxOr for DVector<f64> {
    fn max_or(&self, default: f64) -> f64 {
        if self.is_empty() {
            default
        } else {
            self.amax()
        }
    }
}
