//! Multi-species Boltzmann collision operators with uncertain kernels: the
//! discrete collision operator, its linearizations and splittings, the
//! z-derivative system, and the stochastic Galerkin projection.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collision;
pub mod error;
pub mod gpc;
pub mod grid;
pub mod kernel;
pub mod linop;
pub mod quadrature;
pub mod sensitivity;
pub mod solver;

pub use error::{Error, Result};
