//! Discrete-time optimal control on matrix Lie groups.
//!
//! This crate defines constrained discrete-time optimal control problems
//! whose state splits into a matrix Lie group part (SO(2) or SO(3)) and a
//! Euclidean part, evaluates the first-order necessary conditions of the
//! discrete-time maximum principle for such problems, and solves the
//! resulting two-point boundary value problems by damped-Newton multiple
//! shooting. An independent direct-transcription solver, derivative audits,
//! and a coordinate-invariance check provide verification.
//!
//! The accompanying guide under `book/` walks through the concepts; its code
//! snippets are compiled and run as doctests.
//!
//! Modules:
//! - [`lie`]: group/algebra kernels (exp, log, hat/vee, coadjoint transport).
//! - [`ocp`]: problem definition (dynamics, costs, constraints, boundaries).
//! - [`pmp`]: Hamiltonian, adjoint recursions, transversality, control law,
//!   and the full residual stack of the first-order conditions.
//! - [`implicit`]: implicitly defined integration steps and their adjoint
//!   corrections.
//! - [`shooting`]: multiple-shooting Newton solver with constraint
//!   continuation.
//! - [`verify`]: penalty-method oracle, derivative audit, equivariance check.
//! - [`demos`]: single-axis SO(2) maneuvers and an SO(3) attitude problem.

pub mod demos;
pub mod error;
mod fd;
pub mod implicit;
pub mod lie;
pub mod ocp;
pub mod pmp;
pub mod shooting;
pub mod verify;

#[cfg(doctest)]
mod book;

pub use error::{Error, Result};
