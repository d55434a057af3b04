//! Implicitly defined integration steps: solving `v_t(s, q, x) = 0` for the
//! step `s`, the derivatives of the resulting step map `κ_t(q, x)`, and the
//! modified adjoint recursion that carries the implicit correction terms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fd;
use crate::lie::{ad_star, dexp_dual, exp, log, AlgebraVector, CoAlgebraVector, GroupElement, GroupKind};
use crate::ocp::{ImplicitStepSpec, LieOcp, StepRule};
use crate::pmp::{constraint_data, step_data, Costate};

/// A solved implicit step.
#[derive(Clone, Debug)]
pub struct ImplicitStepSolution {
    pub s: GroupElement,
    pub newton_iters: usize,
    pub residual_norm: f64,
}

const STEP_TOL: f64 = 1e-12;
const MAX_ITERS: usize = 50;

fn residual_at(
    spec: &ImplicitStepSpec,
    t: usize,
    s: &GroupElement,
    q: &GroupElement,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let r = (spec.residual)(t, s, q, x);
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("implicit step residual"));
    }
    Ok(r)
}

/// Jacobian of the residual along the group directions of `s`.
fn residual_jacobian_s(
    spec: &ImplicitStepSpec,
    t: usize,
    s: &GroupElement,
    q: &GroupElement,
    x: &DVector<f64>,
    n_q: usize,
) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(n_q, n_q);
    for i in 0..n_q {
        let mut w = vec![0.0; n_q];
        w[i] = fd::GROUP_STEP;
        let sp = s.mul(&exp(&AlgebraVector::new(s.kind(), &w)));
        w[i] = -fd::GROUP_STEP;
        let sm = s.mul(&exp(&AlgebraVector::new(s.kind(), &w)));
        let rp = residual_at(spec, t, &sp, q, x)?;
        let rm = residual_at(spec, t, &sm, q, x)?;
        jac.set_column(i, &((rp - rm) / (2.0 * fd::GROUP_STEP)));
    }
    Ok(jac)
}

/// Solves `v_t(s, q, x) = 0` by a damped Newton iteration parametrized
/// multiplicatively in the algebra, `s ← s · exp(hat(δ))`, so every iterate
/// stays on the group.
pub fn solve_step(
    spec: &ImplicitStepSpec,
    t: usize,
    q: &GroupElement,
    x: &DVector<f64>,
    kind: GroupKind,
) -> Result<ImplicitStepSolution> {
    let n_q = kind.algebra_dim();
    let mut s = spec.initial_step.clone();
    let mut r = residual_at(spec, t, &s, q, x)?;
    let mut iters = 0;
    while r.amax() > STEP_TOL {
        if iters >= MAX_ITERS {
            return Err(Error::NoConvergence {
                iterations: iters,
                residual: r.amax(),
                hint: Some("implicit step Newton stalled; initial guess may be outside the basin".into()),
            });
        }
        let jac = residual_jacobian_s(spec, t, &s, q, x, n_q)?;
        if jac.determinant().abs() < 1e-12 {
            return Err(Error::SingularJacobian("implicit step residual in s"));
        }
        let delta = jac
            .clone()
            .lu()
            .solve(&(-&r))
            .ok_or(Error::SingularJacobian("implicit step residual in s"))?;
        // Armijo backtracking on ‖v‖.
        let base = r.norm();
        let mut alpha = 1.0;
        let mut advanced = false;
        for _ in 0..30 {
            let trial = s.mul(&exp(&AlgebraVector::new(kind, (alpha * &delta).as_slice())));
            if let Ok(rt) = residual_at(spec, t, &trial, q, x) {
                if rt.norm() <= (1.0 - 1e-4 * alpha) * base {
                    s = trial;
                    r = rt;
                    advanced = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !advanced {
            return Err(Error::NoConvergence {
                iterations: iters,
                residual: r.amax(),
                hint: Some("line search failed in the implicit step solve".into()),
            });
        }
        iters += 1;
    }
    Ok(ImplicitStepSolution {
        s,
        newton_iters: iters,
        residual_norm: r.amax(),
    })
}

/// Derivatives of the implicit step map `κ_t` at a solved step, by the
/// implicit function theorem: `D_qκ = −D_s v⁻¹ D_q v` and
/// `D_xκ = −D_s v⁻¹ D_x v`, realized as matrices in algebra coordinates.
pub fn kappa_partials(
    spec: &ImplicitStepSpec,
    t: usize,
    s: &GroupElement,
    q: &GroupElement,
    x: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kind = s.kind();
    let n_q = kind.algebra_dim();
    let d_s = residual_jacobian_s(spec, t, s, q, x, n_q)?;
    if d_s.determinant().abs() < 1e-12 {
        return Err(Error::SingularJacobian("implicit step residual in s"));
    }
    let d_q = fd::jacobian_q(q, n_q, |qq| (spec.residual)(t, s, qq, x));
    let d_x = fd::jacobian_x(x, n_q, |xx| (spec.residual)(t, s, q, xx));
    let lu = d_s.lu();
    let kq = -lu
        .solve(&d_q)
        .ok_or(Error::SingularJacobian("implicit step residual in s"))?;
    let kx = -lu
        .solve(&d_x)
        .ok_or(Error::SingularJacobian("implicit step residual in s"))?;
    Ok((kq, kx))
}

/// One backward adjoint step for an implicitly stepped problem. Relative to
/// the explicit recursion the Hamiltonian treats `s` as an independent
/// argument, so its q- and x-derivatives lose the step chain rule and the
/// correction terms `−D_sH ∘ D_s v⁻¹ ∘ D_{q,x} v` restore it:
///
/// ```text
/// ρ^{t−1} = ad*_{exp(−a)} ρᵗ + T*Φ(D_qH) − T*Φ(D_sH ∘ D_s v⁻¹ ∘ D_q v),
/// ξ^{t−1} = D_xH − D_sH ∘ D_s v⁻¹ ∘ D_x v,
/// ```
///
/// with `a = log s`. When `v` merely encodes an explicit step and the cost
/// and Euclidean dynamics do not depend on `s` beyond `⟨ζ, log s⟩`, the
/// corrections reassemble the explicit chain rule and the recursion reduces
/// to the plain adjoint step.
#[allow(clippy::too_many_arguments)]
pub fn implicit_adjoint_step(
    p: &LieOcp,
    t: usize,
    costate_t: &Costate,
    mu_t: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    s: &GroupElement,
    nu: f64,
) -> Result<(CoAlgebraVector, DVector<f64>)> {
    implicit_adjoint_step_relaxed(p, t, costate_t, mu_t, q, x, u, s, nu, 1.0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn implicit_adjoint_step_relaxed(
    p: &LieOcp,
    t: usize,
    costate_t: &Costate,
    mu_t: &DVector<f64>,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
    s: &GroupElement,
    nu: f64,
    relax: f64,
) -> Result<(CoAlgebraVector, DVector<f64>)> {
    let spec = match &p.step {
        StepRule::Implicit(spec) => spec,
        StepRule::Explicit(_) => {
            return Err(Error::BoundaryMismatch {
                expected: "an implicit step rule",
                found: "explicit step rule",
            })
        }
    };
    let n_q = p.kind.algebra_dim();
    let a = log(s)?;
    let zeta = dexp_dual(&a, &costate_t.rho);
    let zeta_v = DVector::from_column_slice(zeta.coords());

    // Stage data evaluated with s fixed: for the supported problem shape the
    // cost and Euclidean dynamics take (q, x, u) only, so their partials are
    // exactly the explicit ones but the step chain rule is absent.
    let sd = step_data_without_step_chain(p, t, q, x, u)?;
    let (_, g_q, g_x) = constraint_data(p, t, q, x, relax);

    // D_sH along group directions of s: the ⟨ζ, log s⟩ term.
    let d_s_h = {
        let mut grad = DVector::zeros(n_q);
        for i in 0..n_q {
            let mut w = vec![0.0; n_q];
            w[i] = fd::GROUP_STEP;
            let sp = s.mul(&exp(&AlgebraVector::new(p.kind, &w)));
            w[i] = -fd::GROUP_STEP;
            let sm = s.mul(&exp(&AlgebraVector::new(p.kind, &w)));
            let hp = zeta_v.dot(&DVector::from_column_slice(log(&sp)?.coords()));
            let hm = zeta_v.dot(&DVector::from_column_slice(log(&sm)?.coords()));
            grad[i] = (hp - hm) / (2.0 * fd::GROUP_STEP);
        }
        grad
    };

    let d_s = residual_jacobian_s(spec, t, s, q, x, n_q)?;
    if d_s.determinant().abs() < 1e-12 {
        return Err(Error::SingularJacobian("implicit step residual in s"));
    }
    let d_q_v = fd::jacobian_q(q, n_q, |qq| (spec.residual)(t, s, qq, x));
    let d_x_v = fd::jacobian_x(x, n_q, |xx| (spec.residual)(t, s, q, xx));
    // The row vector D_sH ∘ D_sv⁻¹, stored as a column: solve D_svᵀ w = D_sH.
    let w_vec = d_s
        .transpose()
        .lu()
        .solve(&d_s_h)
        .ok_or(Error::SingularJacobian("implicit step residual in s"))?;

    let transported = ad_star(&exp(&neg(&a)), &costate_t.rho);
    let mut rho_prev = DVector::from_column_slice(transported.coords());
    rho_prev += nu * &sd.c_q + sd.f_q.transpose() * &costate_t.xi;
    rho_prev -= d_q_v.transpose() * &w_vec;
    if mu_t.len() > 0 {
        rho_prev += g_q.transpose() * mu_t;
    }

    let mut xi_prev = nu * &sd.c_x + sd.f_x.transpose() * &costate_t.xi;
    xi_prev -= d_x_v.transpose() * &w_vec;
    if mu_t.len() > 0 {
        xi_prev += g_x.transpose() * mu_t;
    }
    Ok((CoAlgebraVector::new(p.kind, rho_prev.as_slice()), xi_prev))
}

fn neg(a: &AlgebraVector) -> AlgebraVector {
    let coords: Vec<f64> = a.coords().iter().map(|v| -v).collect();
    AlgebraVector::new(a.kind(), &coords)
}

/// Stage data for implicit problems: identical to the explicit stage data
/// except that the step chain-rule blocks are zero (s is an independent
/// variable in the implicit Hamiltonian).
fn step_data_without_step_chain(
    p: &LieOcp,
    t: usize,
    q: &GroupElement,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<crate::pmp::StepData> {
    let mut sd = step_data(p, t, q, x, u)?;
    sd.l_q.fill(0.0);
    sd.l_x.fill(0.0);
    Ok(sd)
}
