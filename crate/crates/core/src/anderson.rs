//! Regularized, restarted, safeguarded Type-I Anderson acceleration for the
//! coordinator fixed-point map `w = (x_bar, z) -> h0(w)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coordinator::split_w;
use crate::graph::StackedCoupling;

/// Which quadratic term closes the Lagrangian-increase estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncreaseForm {
    /// Subtracts `||Ax + B x_bar + z_cand||^2`.
    #[default]
    CandidateSlack,
    /// Subtracts `||Ax + B x_bar + z||^2`; the exact change of the
    /// Lagrangian with `x` held fixed.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AndersonParams {
    /// Maximum secant memory.
    pub memory: usize,
    /// Regularization threshold for the secant perturbation.
    pub theta_threshold: f64,
    /// Restart when Gram-Schmidt keeps less than this fraction of a secant.
    pub restart_threshold: f64,
    /// Scale of the admissible Lagrangian increase.
    pub increase_scale: f64,
    /// Scale of the admissible step length.
    pub step_scale: f64,
    /// Decay exponent of the increase budget.
    pub decay: f64,
    pub increase_form: IncreaseForm,
}

impl Default for AndersonParams {
    fn default() -> Self {
        Self {
            memory: 10,
            theta_threshold: 0.5,
            restart_threshold: 0.05,
            increase_scale: 0.01,
            step_scale: 0.01,
            decay: 1.0,
            increase_form: IncreaseForm::CandidateSlack,
        }
    }
}

impl AndersonParams {
    pub fn validate(&self) -> Result<(), String> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.memory == 0 {
            return Err("memory must be at least 1".into());
        }
        if !(self.theta_threshold >= 0.0 && self.theta_threshold < 1.0) {
            return Err("theta_threshold must lie in [0, 1)".into());
        }
        if !open_unit(self.restart_threshold) {
            return Err("restart_threshold must lie in (0, 1)".into());
        }
        if !(self.decay > 0.0) {
            return Err("decay must be positive".into());
        }
        if self.increase_scale < 0.0 || self.step_scale < 0.0 {
            return Err("safeguard scales must be nonnegative".into());
        }
        Ok(())
    }

    /// Total admissible increase over one outer round, as a multiple of the
    /// round's Lagrangian scale: `increase_scale * zeta(1 + decay)`.
    pub fn increase_budget_factor(&self) -> f64 {
        self.increase_scale * zeta(1.0 + self.decay)
    }

    /// Natural log of the a-priori bound on `||H_inv||_2` for dimension `n`.
    pub fn inverse_bound_ln(&self, n: usize) -> f64 {
        let m = self.memory as f64;
        let theta = self.theta_threshold.max(f64::MIN_POSITIVE);
        let eta = self.restart_threshold;
        let n_f = n as f64;
        // ln(3 (1+theta+eta)^M eta^-N - 2), the inner term is astronomically large
        let ln_big = 3f64.ln() + m * (1.0 + theta + eta).ln() - n_f * eta.ln();
        let ln_inner = ln_big + (-2.0 * (-ln_big).exp()).ln_1p();
        -m * theta.ln() + (n_f - 1.0).max(0.0) * ln_inner
    }
}

/// Riemann zeta for `s > 1` (direct sum plus Euler-Maclaurin tail).
pub fn zeta(s: f64) -> f64 {
    assert!(s > 1.0, "zeta needs s > 1");
    let n = 64usize;
    let mut sum: f64 = (1..n).map(|k| (k as f64).powf(-s)).sum();
    let nf = n as f64;
    sum += nf.powf(1.0 - s) / (s - 1.0) + 0.5 * nf.powf(-s) + s * nf.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * nf.powf(-s - 3.0) / 720.0;
    sum
}

/// `phi(raw; eta)` with `sign(0) = +1`.
pub fn regularize_theta(raw: f64, eta: f64) -> f64 {
    if raw.abs() <= eta {
        let sign = if raw >= 0.0 { 1.0 } else { -1.0 };
        (eta * sign - raw) / (1.0 - raw)
    } else {
        0.0
    }
}

/// `beta ||B dx_bar||^2 + beta/2 ||dz||^2` for the first plain step of a round.
pub fn lagrangian_scale(
    coupling: &StackedCoupling,
    w0: &DVector<f64>,
    w1: &DVector<f64>,
    beta: f64,
) -> f64 {
    let nb = coupling.num_xbar();
    let (xb0, z0) = split_w(w0, nb);
    let (xb1, z1) = split_w(w1, nb);
    beta * (&coupling.b * (xb1 - xb0)).norm_squared() + 0.5 * beta * (z1 - z0).norm_squared()
}

/// Change of the augmented Lagrangian (at fixed `Ax`) when moving the
/// coordinator variables from `w` to `w_cand`, with both duals tied to the
/// slacks through `y = -lambda - beta z`.
#[allow(clippy::too_many_arguments)]
pub fn lagrangian_increase(
    coupling: &StackedCoupling,
    ax: &DVector<f64>,
    w: &DVector<f64>,
    w_cand: &DVector<f64>,
    lambda: &DVector<f64>,
    beta: f64,
    rho: f64,
    form: IncreaseForm,
) -> f64 {
    let nb = coupling.num_xbar();
    let (xb, z) = split_w(w, nb);
    let (xbc, zc) = split_w(w_cand, nb);
    let y = -lambda - &z * beta;
    let yc = -lambda - &zc * beta;
    let bxb = &coupling.b * &xb;
    let bxbc = &coupling.b * &xbc;
    let r = ax + &bxb + &z;
    let rc = ax + &bxbc + &zc;
    let subtracted = match form {
        IncreaseForm::CandidateSlack => (ax + &bxb + &zc).norm_squared(),
        IncreaseForm::Exact => r.norm_squared(),
    };
    lambda.dot(&(&zc - &z)) + 0.5 * beta * (zc.norm_squared() - z.norm_squared()) + yc.dot(&rc)
        - y.dot(&r)
        + 0.5 * rho * (rc.norm_squared() - subtracted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecantOutcome {
    Updated,
    /// Memory cleared, this secant became the first one.
    Restarted,
    /// Zero secant or vanishing denominator; nothing stored.
    Skipped,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafeguardDecision {
    pub accepted: bool,
    pub increase: f64,
    pub increase_budget: f64,
    pub step_sq: f64,
    pub step_budget: f64,
}

#[derive(Clone, Debug)]
pub struct AndersonState {
    h_inv: DMatrix<f64>,
    /// Orthogonalized secant directions since the last restart.
    orthogonal: Vec<DVector<f64>>,
    /// Raw `(dw, perturbed dh)` pairs since the last restart.
    pairs: Vec<(DVector<f64>, DVector<f64>)>,
    accepted: usize,
    scale: Option<f64>,
    restarts: usize,
    max_frobenius: f64,
}

impl AndersonState {
    pub fn new(n: usize) -> Self {
        Self {
            h_inv: DMatrix::identity(n, n),
            orthogonal: Vec::new(),
            pairs: Vec::new(),
            accepted: 0,
            scale: None,
            restarts: 0,
            max_frobenius: (n as f64).sqrt(),
        }
    }

    pub fn h_inv(&self) -> &DMatrix<f64> {
        &self.h_inv
    }

    pub fn memory_len(&self) -> usize {
        self.orthogonal.len()
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn set_scale(&mut self, l0: f64) {
        self.scale = Some(l0);
    }

    /// Largest Frobenius norm of `H_inv` seen so far (bounds the 2-norm).
    pub fn max_frobenius(&self) -> f64 {
        self.max_frobenius
    }

    /// Stored `(dw, perturbed dh)` pairs; `H_inv * dh = dw` for each.
    pub fn pairs(&self) -> &[(DVector<f64>, DVector<f64>)] {
        &self.pairs
    }

    fn restart(&mut self) {
        let n = self.h_inv.nrows();
        self.h_inv = DMatrix::identity(n, n);
        self.orthogonal.clear();
        self.pairs.clear();
        self.restarts += 1;
    }

    pub fn push_secant(
        &mut self,
        dw: &DVector<f64>,
        dh: &DVector<f64>,
        params: &AndersonParams,
    ) -> SecantOutcome {
        let dw_norm = dw.norm();
        if dw_norm == 0.0 || !dw_norm.is_finite() || !dh.iter().all(|v| v.is_finite()) {
            return SecantOutcome::Skipped;
        }
        let mut hat = dw.clone();
        for q in &self.orthogonal {
            hat -= q * (q.dot(dw) / q.norm_squared());
        }
        let mut outcome = SecantOutcome::Updated;
        if self.orthogonal.len() + 1 > params.memory
            || hat.norm() < params.restart_threshold * dw_norm
        {
            self.restart();
            hat = dw.clone();
            outcome = SecantOutcome::Restarted;
        }
        // hat' H_inv, reused in the numerator of the rank-one update
        let row = self.h_inv.tr_mul(&hat);
        let hat_sq = hat.norm_squared();
        let raw = row.dot(dh) / hat_sq;
        let theta = regularize_theta(raw, params.theta_threshold);
        let dh_t = dh * (1.0 - theta) + dw * theta;
        let denom = row.dot(&dh_t);
        if !(denom.abs() > 1e-14 * hat_sq) {
            return SecantOutcome::Skipped;
        }
        let num = dw - &self.h_inv * &dh_t;
        self.h_inv += num * row.transpose() / denom;
        self.orthogonal.push(hat);
        self.pairs.push((dw.clone(), dh_t));
        self.max_frobenius = self.max_frobenius.max(self.h_inv.norm());
        outcome
    }

    /// `w - H_inv (w - h0(w))`.
    pub fn propose(&self, w: &DVector<f64>, h0_w: &DVector<f64>) -> DVector<f64> {
        w - &self.h_inv * (w - h0_w)
    }

    /// Accept iff the increase and the squared step both fit their decaying
    /// budgets. Bumps the accepted counter on success.
    pub fn safeguard(
        &mut self,
        increase: f64,
        step_sq: f64,
        beta: f64,
        params: &AndersonParams,
    ) -> SafeguardDecision {
        let l0 = self.scale.unwrap_or(0.0);
        let r = self.accepted as f64;
        let increase_budget = l0 * params.increase_scale * (r + 1.0).powf(-(1.0 + params.decay));
        let step_budget = l0 / beta * params.step_scale / (1.0 + r).sqrt();
        let accepted = increase <= increase_budget && step_sq <= step_budget;
        if accepted {
            self.accepted += 1;
        }
        SafeguardDecision {
            accepted,
            increase,
            increase_budget,
            step_sq,
            step_budget,
        }
    }
}

/// Dense multi-secant inverse `I + (Dw - Dh)(Dw' Dh)^{-1} Dw'`.
pub fn batch_inverse(dw: &[DVector<f64>], dh: &[DVector<f64>]) -> Option<DMatrix<f64>> {
    let n = dw.first()?.len();
    let w = DMatrix::from_columns(dw);
    let h = DMatrix::from_columns(dh);
    let core = (w.transpose() * &h).try_inverse()?;
    Some(DMatrix::identity(n, n) + (&w - &h) * core * w.transpose())
}
