//! Central finite-difference helpers shared by the derivative fallbacks.
//!
//! Euclidean directions use the step `max(1e−6, 1e−8·|x_i|)`; group
//! directions use a fixed 1e−6 step along `q · exp(s · hat(e_i))`.

use nalgebra::{DMatrix, DVector};

use crate::lie::{exp, AlgebraVector, GroupElement};

pub const GROUP_STEP: f64 = 1e-6;

pub fn euclid_step(xi: f64) -> f64 {
    1e-6f64.max(1e-8 * xi.abs())
}

/// Jacobian of a vector map wrt a Euclidean argument, column by column.
pub fn jacobian_x<F>(x: &DVector<f64>, out_dim: usize, f: F) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut jac = DMatrix::zeros(out_dim, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = euclid_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        jac.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Gradient of a scalar map wrt a Euclidean argument.
pub fn gradient_x<F>(x: &DVector<f64>, f: F) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut grad = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = euclid_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

fn shifted(q: &GroupElement, dir: usize, s: f64) -> GroupElement {
    let n_q = q.kind().algebra_dim();
    let mut w = vec![0.0; n_q];
    w[dir] = s;
    q.mul(&exp(&AlgebraVector::new(q.kind(), &w)))
}

/// Jacobian of a vector map wrt the group argument, along the left-invariant
/// directions `q · exp(s · hat(e_i))`.
pub fn jacobian_q<F>(q: &GroupElement, out_dim: usize, f: F) -> DMatrix<f64>
where
    F: Fn(&GroupElement) -> DVector<f64>,
{
    let n_q = q.kind().algebra_dim();
    let mut jac = DMatrix::zeros(out_dim, n_q);
    for i in 0..n_q {
        let fp = f(&shifted(q, i, GROUP_STEP));
        let fm = f(&shifted(q, i, -GROUP_STEP));
        jac.set_column(i, &((fp - fm) / (2.0 * GROUP_STEP)));
    }
    jac
}

/// Trivialized gradient of a scalar map wrt the group argument.
pub fn gradient_q<F>(q: &GroupElement, f: F) -> DVector<f64>
where
    F: Fn(&GroupElement) -> f64,
{
    let n_q = q.kind().algebra_dim();
    let mut grad = DVector::zeros(n_q);
    for i in 0..n_q {
        let fp = f(&shifted(q, i, GROUP_STEP));
        let fm = f(&shifted(q, i, -GROUP_STEP));
        grad[i] = (fp - fm) / (2.0 * GROUP_STEP);
    }
    grad
}
