//! Quadruple-tank benchmark: plant model, transcribed optimal control
//! problems, the two-subsystem decomposition and a closed-loop harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops follow the formulas they implement
#![allow(clippy::needless_range_loop)]

pub mod decomposition;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod plant;

pub use model::TankModel;
pub use ocp::{Discretization, OcpSpec};
