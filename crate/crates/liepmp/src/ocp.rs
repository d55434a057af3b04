//! Problem definition: dynamics split between a matrix Lie group and a
//! Euclidean space, stage and final costs, state constraints, box control
//! sets, and boundary specifications.
//!
//! A problem owns its maps as boxed closures. Maps must be pure: problems are
//! immutable after construction and shared freely across threads. Analytic
//! partial derivatives are optional hooks; whenever a hook is absent the
//! evaluation layer falls back to central finite differences with step
//! `max(1e−6, 1e−8·|x|)` (fixed 1e−6 along group directions).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fd;
use crate::implicit;
use crate::lie::{log, AlgebraVector, GroupElement, GroupKind};

pub type StepFn = Box<dyn Fn(usize, &GroupElement, &DVector<f64>) -> GroupElement + Send + Sync>;
pub type EuclidFn =
    Box<dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type StageCostFn =
    Box<dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type FinalCostFn = Box<dyn Fn(&GroupElement, &DVector<f64>) -> f64 + Send + Sync>;
pub type ResidualFn = Box<
    dyn Fn(usize, &GroupElement, &GroupElement, &DVector<f64>) -> DVector<f64> + Send + Sync,
>;

/// A componentwise box of feasible controls. Always nonempty and convex when
/// `lo ≤ hi`; [`LieOcp::validate`] reports violations.
#[derive(Clone, Debug)]
pub struct ControlBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl ControlBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    /// The symmetric box `|u_i| ≤ bound`.
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self {
            lo: DVector::from_element(dim, -bound),
            hi: DVector::from_element(dim, bound),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lo[i], self.hi[i]))
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        (0..u.len()).all(|i| u[i] >= self.lo[i] - tol && u[i] <= self.hi[i] + tol)
    }
}

/// Boundary conditions. The initial pair is always fixed; the final pair is
/// fixed, free (with transversality driven by the final cost), or constrained
/// to the zero set of a submersion.
pub enum BoundarySpec {
    FixedBoth {
        q0: GroupElement,
        x0: DVector<f64>,
        qf: GroupElement,
        xf: DVector<f64>,
    },
    FixedInitFreeFinal {
        q0: GroupElement,
        x0: DVector<f64>,
    },
    FixedInitSubmanifold {
        q0: GroupElement,
        x0: DVector<f64>,
        target: SubmanifoldSpec,
    },
}

impl BoundarySpec {
    pub fn initial(&self) -> (&GroupElement, &DVector<f64>) {
        match self {
            BoundarySpec::FixedBoth { q0, x0, .. } => (q0, x0),
            BoundarySpec::FixedInitFreeFinal { q0, x0 } => (q0, x0),
            BoundarySpec::FixedInitSubmanifold { q0, x0, .. } => (q0, x0),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            BoundarySpec::FixedBoth { .. } => "FixedBoth",
            BoundarySpec::FixedInitFreeFinal { .. } => "FixedInitFreeFinal",
            BoundarySpec::FixedInitSubmanifold { .. } => "FixedInitSubmanifold",
        }
    }
}

/// Final-state submanifold given as the zero level set of a submersion
/// `b(q, x) ∈ ℝ^{n_q + n_x − m_f}`.
pub struct SubmanifoldSpec {
    /// Codimension: number of components of `b`.
    pub codim: usize,
    pub eval: FinalConstraintFn,
}

pub type FinalConstraintFn =
    Box<dyn Fn(&GroupElement, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Explicit pointwise Hamiltonian maximizer `u*(t, q, x, ξ, ν)`, an optional
/// fast path for problems whose saturation law is known in closed form. Must
/// agree with the generic projected-Newton maximizer; `validate` checks this
/// at probe points.
pub type ControlLawFn = Box<
    dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64>
        + Send
        + Sync,
>;

/// The integration step on the group: either an explicit map `s_t(q, x)` or
/// an implicit residual `v_t(s, q, x) = 0` solved per step.
pub enum StepRule {
    Explicit(StepFn),
    Implicit(ImplicitStepSpec),
}

/// Implicitly defined integration step: `v_t(s, q, x) = 0` with an initial
/// guess for the per-step Newton solve.
pub struct ImplicitStepSpec {
    /// Residual `v_t(s, q, x) ∈ ℝ^{n_q}`, locally invertible in `s` near the
    /// solution (Newton convergence is the runtime check).
    pub residual: ResidualFn,
    /// Initial step guess s⁰.
    pub initial_step: GroupElement,
}

/// Pointwise state constraints `g_t(q, x) ≤ 0` for `t = 1..=N`.
///
/// The `relax ≥ 1` argument scales the constraint level for continuation
/// solvers; `relax = 1` is the target problem. Problems without a natural
/// relaxation may ignore the argument.
pub struct StateConstraints {
    /// Number of components n_g(t); may vary with t, 0 means unconstrained.
    pub count: Box<dyn Fn(usize) -> usize + Send + Sync>,
    /// g_t(q, x, relax).
    pub eval:
        Box<dyn Fn(usize, &GroupElement, &DVector<f64>, f64) -> DVector<f64> + Send + Sync>,
    /// Optional trivialized Jacobian wrt q: rows per component, n_g(t)×n_q.
    pub d_q: Option<
        Box<dyn Fn(usize, &GroupElement, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>,
    >,
    /// Optional Jacobian wrt x: n_g(t)×n_x.
    pub d_x: Option<
        Box<dyn Fn(usize, &GroupElement, &DVector<f64>, f64) -> DMatrix<f64> + Send + Sync>,
    >,
}

/// Optional analytic partial derivatives of the problem maps. Group
/// derivatives are trivialized: entry (k, i) differentiates component k along
/// `q · exp(s · hat(e_i))`. The step derivative hooks differentiate the
/// *logarithm* of the step, `(q, x) ↦ log s_t(q, x)`.
#[derive(Default)]
pub struct AnalyticPartials {
    pub step_log_d_q:
        Option<Box<dyn Fn(usize, &GroupElement, &DVector<f64>) -> DMatrix<f64> + Send + Sync>>,
    pub step_log_d_x:
        Option<Box<dyn Fn(usize, &GroupElement, &DVector<f64>) -> DMatrix<f64> + Send + Sync>>,
    pub euclid_d_q: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>
                + Send
                + Sync,
        >,
    >,
    pub euclid_d_x: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>
                + Send
                + Sync,
        >,
    >,
    pub euclid_d_u: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>
                + Send
                + Sync,
        >,
    >,
    pub cost_d_q: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DVector<f64>
                + Send
                + Sync,
        >,
    >,
    pub cost_d_x: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DVector<f64>
                + Send
                + Sync,
        >,
    >,
    pub cost_d_u: Option<
        Box<
            dyn Fn(usize, &GroupElement, &DVector<f64>, &DVector<f64>) -> DVector<f64>
                + Send
                + Sync,
        >,
    >,
    pub final_d_q:
        Option<Box<dyn Fn(&GroupElement, &DVector<f64>) -> DVector<f64> + Send + Sync>>,
    pub final_d_x:
        Option<Box<dyn Fn(&GroupElement, &DVector<f64>) -> DVector<f64> + Send + Sync>>,
}

/// A discrete-time optimal control problem on `G × ℝ^{n_x}`:
/// minimize `Σ_t c_t(q_t, x_t, u_t) + c_N(q_N, x_N)` subject to
/// `q_{t+1} = q_t · s_t(q_t, x_t)`, `x_{t+1} = f_t(q_t, x_t, u_t)`,
/// `u_t` in a box, `g_t(q_t, x_t) ≤ 0`, and the boundary specification.
pub struct LieOcp {
    pub kind: GroupKind,
    /// Horizon N (number of steps); states are indexed 0..=N.
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub step: StepRule,
    pub euclid: EuclidFn,
    pub stage_cost: StageCostFn,
    pub final_cost: Option<FinalCostFn>,
    pub constraints: Option<StateConstraints>,
    pub control_set: ControlBox,
    pub boundary: BoundarySpec,
    pub partials: AnalyticPartials,
    /// Optional closed-form pointwise maximizer; see [`ControlLawFn`].
    pub control_law: Option<ControlLawFn>,
}

/// States along a horizon: `q` and `x` both have length N+1.
#[derive(Clone, Debug)]
pub struct StateTrajectory {
    pub q: Vec<GroupElement>,
    pub x: Vec<DVector<f64>>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// One validation finding; an empty report means the problem is accepted.
#[derive(Debug, Clone)]
pub enum ValidationIssue {
    /// Control box has lo > hi in some component.
    ConvexityViolation { component: usize },
    /// Horizon must be at least one step.
    HorizonTooShort,
    /// A supplied analytic partial disagrees with finite differences.
    DerivativeMismatch { which: &'static str, max_rel_err: f64 },
    /// A probe trajectory left the principal branch of the logarithm.
    BranchDomainViolation { step: usize, detail: String },
    /// A map returned NaN or infinity on the probe grid.
    NonFiniteMap { which: String },
}

#[derive(Debug, Default)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl LieOcp {
    /// Number of constraint components at time t (t = 1..=N).
    pub fn constraint_count(&self, t: usize) -> usize {
        match &self.constraints {
            Some(c) => (c.count)(t),
            None => 0,
        }
    }

    /// Evaluates the integration step `s_t(q, x)`, solving the implicit
    /// residual when the step is implicit.
    pub fn eval_step(&self, t: usize, q: &GroupElement, x: &DVector<f64>) -> Result<GroupElement> {
        match &self.step {
            StepRule::Explicit(s) => {
                let g = s(t, q, x);
                if !g.matrix().iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("integration step map"));
                }
                Ok(g)
            }
            StepRule::Implicit(spec) => {
                Ok(implicit::solve_step(spec, t, q, x, self.kind)?.s)
            }
        }
    }

    /// The algebra element `a_t = log s_t(q, x)` of the current step.
    pub fn step_log(&self, t: usize, q: &GroupElement, x: &DVector<f64>) -> Result<AlgebraVector> {
        log(&self.eval_step(t, q, x)?)
    }

    /// Runs the state recursion under the given controls. Controls outside
    /// the box are clamped with a warning. Fails if any step leaves the
    /// principal branch of the logarithm.
    pub fn simulate(&self, controls: &[DVector<f64>]) -> Result<StateTrajectory> {
        assert_eq!(controls.len(), self.horizon, "need one control per step");
        let (q0, x0) = self.boundary.initial();
        let mut q = Vec::with_capacity(self.horizon + 1);
        let mut x = Vec::with_capacity(self.horizon + 1);
        q.push(q0.clone());
        x.push(x0.clone());
        let mut clamp_warned = false;
        for t in 0..self.horizon {
            let u = if self.control_set.contains(&controls[t], 0.0) {
                controls[t].clone()
            } else {
                if !clamp_warned {
                    ::log::warn!("control at step {t} outside the box; clamping");
                    clamp_warned = true;
                }
                self.control_set.clamp(&controls[t])
            };
            let qt = &q[t];
            let xt = &x[t];
            let s = self.eval_step(t, qt, xt)?;
            // Leaving the diffeomorphism domain of exp is an error, not drift.
            log(&s)?;
            let mut qn = qt.mul(&s);
            if qn.orthonormality_drift() > 1e-10 {
                qn.renormalize();
            }
            let xn = (self.euclid)(t, qt, xt, &u);
            if !xn.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("euclidean dynamics map"));
            }
            q.push(qn);
            x.push(xn);
        }
        Ok(StateTrajectory { q, x })
    }

    /// Total cost `Σ c_t + c_N` of a trajectory/control pair, after checking
    /// that the trajectory actually satisfies the recursion.
    pub fn total_cost(&self, traj: &StateTrajectory, controls: &[DVector<f64>]) -> Result<f64> {
        assert_eq!(controls.len(), self.horizon);
        assert_eq!(traj.len(), self.horizon + 1);
        for t in 0..self.horizon {
            let s = self.eval_step(t, &traj.q[t], &traj.x[t])?;
            let q_pred = traj.q[t].mul(&s);
            let x_pred = (self.euclid)(t, &traj.q[t], &traj.x[t], &controls[t]);
            let defect = q_pred.distance(&traj.q[t + 1])
                + (&x_pred - &traj.x[t + 1]).norm() / (1.0 + traj.x[t + 1].norm());
            if defect > 1e-8 {
                return Err(Error::InconsistentTrajectory { step: t, defect });
            }
        }
        let mut cost = 0.0;
        for t in 0..self.horizon {
            cost += (self.stage_cost)(t, &traj.q[t], &traj.x[t], &controls[t]);
        }
        if let Some(cn) = &self.final_cost {
            cost += cn(&traj.q[self.horizon], &traj.x[self.horizon]);
        }
        if !cost.is_finite() {
            return Err(Error::NonFinite("cost evaluation"));
        }
        Ok(cost)
    }

    /// Checks the problem invariants: box convexity, horizon length, branch
    /// domain along probe rollouts, and agreement of supplied analytic
    /// partials with finite differences (within 1e−5 relative).
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.horizon < 1 {
            report.issues.push(ValidationIssue::HorizonTooShort);
        }
        for i in 0..self.control_set.dim() {
            if self.control_set.lo[i] > self.control_set.hi[i] {
                report
                    .issues
                    .push(ValidationIssue::ConvexityViolation { component: i });
            }
        }
        if !report.is_ok() {
            return report;
        }

        // Probe rollouts: zero controls plus seeded random controls in the box.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut probes: Vec<(usize, GroupElement, DVector<f64>, DVector<f64>)> = Vec::new();
        for rollout in 0..3 {
            let controls: Vec<DVector<f64>> = (0..self.horizon)
                .map(|_| {
                    DVector::from_fn(self.control_dim, |i, _| {
                        if rollout == 0 {
                            0.0f64.clamp(self.control_set.lo[i], self.control_set.hi[i])
                        } else {
                            rng.gen_range(self.control_set.lo[i]..=self.control_set.hi[i])
                        }
                    })
                })
                .collect();
            match self.simulate(&controls) {
                Ok(traj) => {
                    let stride = (self.horizon / 4).max(1);
                    for t in (0..self.horizon).step_by(stride) {
                        probes.push((
                            t,
                            traj.q[t].clone(),
                            traj.x[t].clone(),
                            controls[t].clone(),
                        ));
                    }
                }
                Err(Error::LogBranchCut { angle }) => {
                    report.issues.push(ValidationIssue::BranchDomainViolation {
                        step: rollout,
                        detail: format!("probe rollout left the log branch (angle {angle:.4})"),
                    });
                }
                Err(e) => {
                    report
                        .issues
                        .push(ValidationIssue::NonFiniteMap { which: e.to_string() });
                }
            }
        }

        for (t, q, x, u) in &probes {
            self.check_partials_at(*t, q, x, u, &mut report);
        }

        // A supplied closed-form control law must agree with the generic
        // box-constrained maximizer.
        if let Some(law) = &self.control_law {
            let mut worst = 0.0f64;
            for (t, q, x, _) in probes.iter().take(6) {
                for _ in 0..4 {
                    let xi = DVector::from_fn(self.state_dim, |_, _| rng.gen_range(-50.0..50.0));
                    let u_law = self.control_set.clamp(&law(*t, q, x, &xi, -1.0));
                    if let Ok(choice) = crate::pmp::control_argmax(self, *t, &xi, q, x, -1.0) {
                        worst = worst.max((&u_law - &choice.u).amax());
                    }
                }
            }
            if worst > 1e-9 {
                report.issues.push(ValidationIssue::DerivativeMismatch {
                    which: "control_law",
                    max_rel_err: worst,
                });
            }
        }
        report
    }

    fn check_partials_at(
        &self,
        t: usize,
        q: &GroupElement,
        x: &DVector<f64>,
        u: &DVector<f64>,
        report: &mut ValidationReport,
    ) {
        let mut record = |which: &'static str, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>| {
            let scale = 1.0f64.max(numeric.norm());
            let rel = (analytic - numeric).norm() / scale;
            if rel > 1e-5 {
                report.issues.push(ValidationIssue::DerivativeMismatch {
                    which,
                    max_rel_err: rel,
                });
            }
        };
        let n_q = self.kind.algebra_dim();
        if let Some(hook) = &self.partials.step_log_d_q {
            if let Ok(numeric) = self.fd_step_log_d_q(t, q, x) {
                record("step_log_d_q", &hook(t, q, x), &numeric);
            }
        }
        if let Some(hook) = &self.partials.step_log_d_x {
            if let Ok(numeric) = self.fd_step_log_d_x(t, q, x) {
                record("step_log_d_x", &hook(t, q, x), &numeric);
            }
        }
        if let Some(hook) = &self.partials.euclid_d_q {
            let numeric = fd::jacobian_q(q, self.state_dim, |qq| (self.euclid)(t, qq, x, u));
            record("euclid_d_q", &hook(t, q, x, u), &numeric);
        }
        if let Some(hook) = &self.partials.euclid_d_x {
            let numeric = fd::jacobian_x(x, self.state_dim, |xx| (self.euclid)(t, q, xx, u));
            record("euclid_d_x", &hook(t, q, x, u), &numeric);
        }
        if let Some(hook) = &self.partials.euclid_d_u {
            let numeric = fd::jacobian_x(u, self.state_dim, |uu| (self.euclid)(t, q, x, uu));
            record("euclid_d_u", &hook(t, q, x, u), &numeric);
        }
        if let Some(hook) = &self.partials.cost_d_q {
            let numeric =
                DMatrix::from_column_slice(n_q, 1, fd::gradient_q(q, |qq| (self.stage_cost)(t, qq, x, u)).as_slice());
            record(
                "cost_d_q",
                &DMatrix::from_column_slice(n_q, 1, hook(t, q, x, u).as_slice()),
                &numeric,
            );
        }
        if let Some(hook) = &self.partials.cost_d_x {
            let numeric = DMatrix::from_column_slice(
                self.state_dim,
                1,
                fd::gradient_x(x, |xx| (self.stage_cost)(t, q, xx, u)).as_slice(),
            );
            record(
                "cost_d_x",
                &DMatrix::from_column_slice(self.state_dim, 1, hook(t, q, x, u).as_slice()),
                &numeric,
            );
        }
        if let Some(hook) = &self.partials.cost_d_u {
            let numeric = DMatrix::from_column_slice(
                self.control_dim,
                1,
                fd::gradient_x(u, |uu| (self.stage_cost)(t, q, x, uu)).as_slice(),
            );
            record(
                "cost_d_u",
                &DMatrix::from_column_slice(self.control_dim, 1, hook(t, q, x, u).as_slice()),
                &numeric,
            );
        }
        if let (Some(hook), Some(cn)) = (&self.partials.final_d_x, &self.final_cost) {
            let numeric = DMatrix::from_column_slice(
                self.state_dim,
                1,
                fd::gradient_x(x, |xx| cn(q, xx)).as_slice(),
            );
            record(
                "final_d_x",
                &DMatrix::from_column_slice(self.state_dim, 1, hook(q, x).as_slice()),
                &numeric,
            );
        }
        if let (Some(hook), Some(cn)) = (&self.partials.final_d_q, &self.final_cost) {
            let numeric = DMatrix::from_column_slice(
                n_q,
                1,
                fd::gradient_q(q, |qq| cn(qq, x)).as_slice(),
            );
            record(
                "final_d_q",
                &DMatrix::from_column_slice(n_q, 1, hook(q, x).as_slice()),
                &numeric,
            );
        }
    }

    /// Finite-difference Jacobian of `q ↦ log s_t(q, x)` along group
    /// directions; used when no analytic hook is supplied.
    pub(crate) fn fd_step_log_d_q(
        &self,
        t: usize,
        q: &GroupElement,
        x: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n_q = self.kind.algebra_dim();
        let mut jac = DMatrix::zeros(n_q, n_q);
        for i in 0..n_q {
            let mut w = vec![0.0; n_q];
            w[i] = fd::GROUP_STEP;
            let qp = q.mul(&crate::lie::exp(&AlgebraVector::new(self.kind, &w)));
            w[i] = -fd::GROUP_STEP;
            let qm = q.mul(&crate::lie::exp(&AlgebraVector::new(self.kind, &w)));
            let ap = self.step_log(t, &qp, x)?;
            let am = self.step_log(t, &qm, x)?;
            for k in 0..n_q {
                jac[(k, i)] = (ap.coords()[k] - am.coords()[k]) / (2.0 * fd::GROUP_STEP);
            }
        }
        Ok(jac)
    }

    /// Finite-difference Jacobian of `x ↦ log s_t(q, x)`.
    pub(crate) fn fd_step_log_d_x(
        &self,
        t: usize,
        q: &GroupElement,
        x: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n_q = self.kind.algebra_dim();
        let mut jac = DMatrix::zeros(n_q, x.len());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let h = fd::euclid_step(x[i]);
            xp[i] = x[i] + h;
            let ap = self.step_log(t, q, &xp)?;
            xp[i] = x[i] - h;
            let am = self.step_log(t, q, &xp)?;
            xp[i] = x[i];
            for k in 0..n_q {
                jac[(k, i)] = (ap.coords()[k] - am.coords()[k]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}
