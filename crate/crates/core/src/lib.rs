//! Distributed nonconvex optimization via a two-layer augmented Lagrangian
//! ADMM, with approximate barrier subproblems and safeguarded Anderson
//! acceleration.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`] decomposes a problem on a digraph into the stacked coupling
//!   form `A x + B xbar + z = 0`.
//! * [`nlp`] is the agent-side equality-constrained Newton solver.
//! * [`coordinator`] holds the closed-form coordinator updates and residuals.
//! * [`anderson`] is the multi-secant acceleration state.
//! * [`driver`] runs the three algorithm variants over a [`runtime`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops follow the formulas they implement
#![allow(clippy::needless_range_loop)]

pub mod anderson;
pub mod coordinator;
pub mod driver;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod nlp;
pub mod quadratic;
pub mod runtime;
pub mod schedule;
pub mod testkit;

pub use error::{DomainError, SolveError, StructuralError};
pub use nlp::NlpError;
