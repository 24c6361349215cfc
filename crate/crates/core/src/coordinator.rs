//! Closed-form coordinator updates on stacked vectors, the outer dual update,
//! and the residuals used by the stopping rules.
//!
//! The scalar kernels at the bottom are shared with the blockwise runtime so
//! that both paths produce identical floating-point results.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::graph::StackedCoupling;

/// Coordinator iterate. `x` itself lives with the agents; the coordinator
/// sees it only through `ax = A x`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterateState {
    pub ax: DVector<f64>,
    pub x_bar: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    /// Sum of agent objectives at the current `x`.
    pub objective: f64,
    /// Sum of `ln(-phi_c)` over all agents at the current `x`.
    pub log_barrier: f64,
}

impl IterateState {
    pub fn w(&self) -> DVector<f64> {
        stack_w(&self.x_bar, &self.z)
    }
}

pub fn stack_w(x_bar: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let mut w = DVector::zeros(x_bar.len() + z.len());
    w.rows_mut(0, x_bar.len()).copy_from(x_bar);
    w.rows_mut(x_bar.len(), z.len()).copy_from(z);
    w
}

pub fn split_w(w: &DVector<f64>, n_xbar: usize) -> (DVector<f64>, DVector<f64>) {
    (
        w.rows(0, n_xbar).into_owned(),
        w.rows(n_xbar, w.len() - n_xbar).into_owned(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterState {
    pub lambda: DVector<f64>,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub beta: f64,
    pub rho: f64,
    pub barrier: f64,
    pub k: usize,
    pub z_prev_norm: f64,
}

impl OuterState {
    pub fn new(rows: usize, beta: f64, barrier: f64, lambda_bounds: (f64, f64)) -> Self {
        Self {
            lambda: DVector::zeros(rows),
            lambda_lower: lambda_bounds.0,
            lambda_upper: lambda_bounds.1,
            beta,
            rho: 2.0 * beta,
            barrier,
            k: 1,
            z_prev_norm: 0.0,
        }
    }
}

/// Which branch the penalty rule took at the end of an outer round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyBranch {
    /// `||z_new|| <= omega ||z_prev||`.
    Kept,
    Amplified,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerResiduals {
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
}

/// Minimizer of the augmented Lagrangian in `x_bar`.
pub trait OverlapOracle: Send + Sync {
    fn solve(&self, coupling: &StackedCoupling, v: &DVector<f64>, rho: f64) -> DVector<f64>;
}

/// The oracle for `g = 0` on the whole space: `x_bar = -B' v / 2`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroRegularizer;

impl OverlapOracle for ZeroRegularizer {
    fn solve(&self, coupling: &StackedCoupling, v: &DVector<f64>, rho: f64) -> DVector<f64> {
        g_oracle(coupling, v, rho)
    }
}

/// `x_bar = -1/2 B' v` with `v = A x + z + y / rho`.
pub fn g_oracle(coupling: &StackedCoupling, v: &DVector<f64>, _rho: f64) -> DVector<f64> {
    coupling.b.tr_mul(v) * -0.5
}

/// `v = A x + z + y / rho`, the vector the overlap oracle averages.
pub fn oracle_input(
    ax: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    DVector::from_iterator(
        ax.len(),
        (0..ax.len()).map(|r| oracle_kernel(ax[r], z[r], y[r], rho)),
    )
}

pub fn z_update(
    coupling: &StackedCoupling,
    ax: &DVector<f64>,
    x_bar: &DVector<f64>,
    y: &DVector<f64>,
    outer: &OuterState,
) -> DVector<f64> {
    let s = ax + &coupling.b * x_bar;
    DVector::from_iterator(
        s.len(),
        (0..s.len()).map(|r| z_kernel(s[r], y[r], outer.lambda[r], outer.rho, outer.beta)),
    )
}

pub fn y_update(
    coupling: &StackedCoupling,
    ax: &DVector<f64>,
    x_bar: &DVector<f64>,
    z_new: &DVector<f64>,
    y: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    let s = ax + &coupling.b * x_bar;
    DVector::from_iterator(
        s.len(),
        (0..s.len()).map(|r| y_kernel(s[r], z_new[r], y[r], rho)),
    )
}

/// One coordinator sweep after the agents have reported `ax`.
pub fn coordinator_step(
    coupling: &StackedCoupling,
    oracle: &dyn OverlapOracle,
    ax: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    outer: &OuterState,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let v = oracle_input(ax, z, y, outer.rho);
    let x_bar = oracle.solve(coupling, &v, outer.rho);
    let z_new = z_update(coupling, ax, &x_bar, y, outer);
    let y_new = y_update(coupling, ax, &x_bar, &z_new, y, outer.rho);
    (x_bar, z_new, y_new)
}

pub fn inner_residuals(
    coupling: &StackedCoupling,
    prev_xbar: &DVector<f64>,
    prev_z: &DVector<f64>,
    next: &IterateState,
    rho: f64,
) -> InnerResiduals {
    let bdx = &coupling.b * (&next.x_bar - prev_xbar);
    let dz = &next.z - prev_z;
    let eps1 = (coupling.a.tr_mul(&(&bdx + &dz)) * rho).norm();
    let eps2 = (coupling.b.tr_mul(&dz) * rho).norm();
    let eps3 = primal_residual(coupling, next).norm();
    InnerResiduals { eps1, eps2, eps3 }
}

/// `A x + B x_bar + z`.
pub fn primal_residual(coupling: &StackedCoupling, s: &IterateState) -> DVector<f64> {
    &s.ax + &coupling.b * &s.x_bar + &s.z
}

/// Projected dual step and penalty rule. Returns the branch taken.
pub fn outer_update(
    outer: &OuterState,
    z_new: &DVector<f64>,
    omega: f64,
    gamma: f64,
) -> (OuterState, PenaltyBranch) {
    let mut next = outer.clone();
    next.lambda = DVector::from_iterator(
        z_new.len(),
        (0..z_new.len()).map(|r| {
            (outer.lambda[r] + outer.beta * z_new[r]).clamp(outer.lambda_lower, outer.lambda_upper)
        }),
    );
    let zn = z_new.norm();
    let branch = if zn > omega * outer.z_prev_norm {
        next.beta = gamma * outer.beta;
        PenaltyBranch::Amplified
    } else {
        PenaltyBranch::Kept
    };
    next.rho = 2.0 * next.beta;
    next.z_prev_norm = zn;
    next.k = outer.k + 1;
    (next, branch)
}

/// Augmented Lagrangian, with the barrier term when `with_barrier`.
pub fn augmented_lagrangian(
    coupling: &StackedCoupling,
    state: &IterateState,
    outer: &OuterState,
    with_barrier: bool,
) -> f64 {
    let r = primal_residual(coupling, state);
    let mut l = state.objective
        + state.y.dot(&r)
        + 0.5 * outer.rho * r.norm_squared()
        + outer.lambda.dot(&state.z)
        + 0.5 * outer.beta * state.z.norm_squared();
    if with_barrier {
        l -= outer.barrier * state.log_barrier;
    }
    l
}

/// `f_lower - ||lambda||^2 / (2 beta)`: holds whenever `lambda + beta z + y = 0`
/// and `rho = 2 beta`.
pub fn lagrangian_lower_bound(objective_lower: f64, outer: &OuterState) -> f64 {
    objective_lower - outer.lambda.norm_squared() / (2.0 * outer.beta)
}

/// Final tolerances `(eps1, ..., eps6)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalTolerances {
    pub stationarity: f64,
    pub dual: f64,
    pub primal: f64,
    pub nlp_stationarity: f64,
    pub nlp_equality: f64,
    pub barrier: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityVerdict {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d5: f64,
    pub d6: f64,
    pub ok: bool,
}

/// Surrogate approximate-KKT check at the end of an outer round.
///
/// `nlp_d4`/`nlp_d5` are the agents' residuals (2-norm over agents) from the
/// solve that produced `state`, `last` the residuals of the final inner step.
pub fn check_stationarity(
    coupling: &StackedCoupling,
    state: &IterateState,
    outer: &OuterState,
    nlp_d4: f64,
    nlp_d5: f64,
    last: &InnerResiduals,
    tol: &FinalTolerances,
) -> StationarityVerdict {
    let d1 = nlp_d4 + last.eps1;
    let d2 = last.eps2;
    let d3 = (&state.ax + &coupling.b * &state.x_bar).norm();
    let d6 = outer.barrier;
    let ok = d1 <= tol.stationarity
        && d2 <= tol.dual
        && d3 <= tol.primal
        && nlp_d4 <= tol.nlp_stationarity
        && nlp_d5 <= tol.nlp_equality
        && d6 <= tol.barrier;
    StationarityVerdict {
        d1,
        d2,
        d3,
        d4: nlp_d4,
        d5: nlp_d5,
        d6,
        ok,
    }
}

#[inline]
pub fn oracle_kernel(ax: f64, z: f64, y: f64, rho: f64) -> f64 {
    ax + z + y / rho
}

/// Average of the two incident rows of one overlap entry.
#[inline]
pub fn average_kernel(v_parent: f64, v_child: f64) -> f64 {
    // -1/2 * (B' v) with both B entries equal to -1
    -0.5 * (-v_parent + -v_child)
}

#[inline]
pub fn z_kernel(s: f64, y: f64, lambda: f64, rho: f64, beta: f64) -> f64 {
    -(rho / (rho + beta)) * (s + y / rho) - lambda / (rho + beta)
}

#[inline]
pub fn y_kernel(s: f64, z_new: f64, y: f64, rho: f64) -> f64 {
    y + rho * (s + z_new)
}
