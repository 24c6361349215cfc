//! Agent-side solver: damped Newton on the KKT system of
//! `min chi(x) s.t. psi(x) = 0`, where `chi` carries the log-barrier of the
//! agent's inequalities and the proximal coupling term.
//!
//! A successful return satisfies three clauses: stationarity residual
//! `<= eps4`, equality residual `<= eps5`, and `chi(x) <= chi(x0)`. The last
//! one is only enforced when `x0` itself meets the equality tolerance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::error::DomainError;
use crate::graph::AgentSubproblem;
use crate::linalg::Factorization;

/// Smooth scalar objective with an optional open domain.
pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> Result<f64, DomainError>;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `None` switches the solver to SR1 updates.
    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>>;
    /// Largest `t` such that `x + s*dx` stays in the domain for all `s < t`,
    /// to first order.
    fn max_step(&self, _x: &DVector<f64>, _dx: &DVector<f64>) -> f64 {
        f64::INFINITY
    }
    /// Size of the gradient error caused by rounding in evaluating `x`'s
    /// terms. Near an active barrier this exceeds any fixed tolerance once
    /// `b` gets small, so stationarity is judged against
    /// `max(eps4, floor)`.
    fn gradient_floor(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }
    /// Multipliers implied by barrier terms; empty without barriers.
    fn ineq_multipliers(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
}

pub trait EqualityMap {
    fn len(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `sum_c nu_c * hess(psi_c)`.
    fn weighted_hessian(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Option<DMatrix<f64>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `f(x) - b * sum ln(-phi_c(x)) + rho/2 * ||x[picks] + offset||^2` for one agent.
pub struct BarrierObjective<'a> {
    agent: &'a dyn AgentSubproblem,
    barrier: f64,
    rho: f64,
    picks: Vec<usize>,
    offset: DVector<f64>,
}

impl<'a> BarrierObjective<'a> {
    /// `picks[k]` is the agent variable coupled through row `k` of the
    /// agent's stacked rows, and `offset[k]` the matching entry of
    /// `-xbar_e + z_ie + y_ie/rho`.
    pub fn new(
        agent: &'a dyn AgentSubproblem,
        barrier: f64,
        rho: f64,
        picks: Vec<usize>,
        offset: DVector<f64>,
    ) -> Self {
        assert!(barrier > 0.0, "barrier coefficient must be positive");
        assert!(rho >= 0.0, "penalty must be nonnegative");
        assert_eq!(
            picks.len(),
            offset.len(),
            "offset length must match coupled rows"
        );
        Self {
            agent,
            barrier,
            rho,
            picks,
            offset,
        }
    }

    pub fn barrier(&self) -> f64 {
        self.barrier
    }

    /// `sum ln(-phi_c(x))`, failing outside the strict interior.
    pub fn log_barrier_sum(&self, x: &DVector<f64>) -> Result<f64, DomainError> {
        log_barrier_sum(self.agent, x)
    }

    /// `D x` for this agent's coupled rows.
    pub fn coupled_values(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.picks.len(), self.picks.iter().map(|&p| x[p]))
    }
}

pub fn log_barrier_sum(agent: &dyn AgentSubproblem, x: &DVector<f64>) -> Result<f64, DomainError> {
    if agent.num_ineq() == 0 {
        return Ok(0.0);
    }
    let phi = agent.ineq(x);
    let mut s = 0.0;
    for (c, &v) in phi.iter().enumerate() {
        if !(v < 0.0) {
            return Err(DomainError(format!(
                "inequality {c} is {v:e}, barrier needs it < 0"
            )));
        }
        s += (-v).ln();
    }
    Ok(s)
}

impl SmoothObjective for BarrierObjective<'_> {
    fn dim(&self) -> usize {
        self.agent.dim()
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64, DomainError> {
        let lb = log_barrier_sum(self.agent, x)?;
        let mut prox = 0.0;
        for (k, &p) in self.picks.iter().enumerate() {
            let r = x[p] + self.offset[k];
            prox += r * r;
        }
        Ok(self.agent.objective(x) - self.barrier * lb + 0.5 * self.rho * prox)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = self.agent.objective_grad(x);
        if self.agent.num_ineq() > 0 {
            let mu = self.ineq_multipliers(x);
            g += self.agent.ineq_jac(x).tr_mul(&mu);
        }
        for (k, &p) in self.picks.iter().enumerate() {
            g[p] += self.rho * (x[p] + self.offset[k]);
        }
        g
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let mut h = self.agent.objective_hessian(x)?;
        if self.agent.num_ineq() > 0 {
            let phi = self.agent.ineq(x);
            let mu = phi.map(|v| -self.barrier / v);
            h += self.agent.ineq_hessian(x, &mu)?;
            let jac = self.agent.ineq_jac(x);
            // sum_c (b / phi_c^2) grad phi_c grad phi_c^T
            let mut scaled = jac.clone();
            for (c, mut row) in scaled.row_iter_mut().enumerate() {
                row *= self.barrier / (phi[c] * phi[c]);
            }
            h += jac.tr_mul(&scaled);
        }
        for &p in &self.picks {
            h[(p, p)] += self.rho;
        }
        Some(h)
    }

    fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        if self.agent.num_ineq() == 0 {
            return f64::INFINITY;
        }
        let phi = self.agent.ineq(x);
        let slope = self.agent.ineq_jac(x) * dx;
        let mut t = f64::INFINITY;
        for c in 0..phi.len() {
            if slope[c] > 0.0 {
                t = t.min(-phi[c] / slope[c]);
            }
        }
        t
    }

    fn ineq_multipliers(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.agent.num_ineq() == 0 {
            return DVector::zeros(0);
        }
        self.agent.ineq(x).map(|v| -self.barrier / v)
    }

    fn gradient_floor(&self, x: &DVector<f64>) -> f64 {
        if self.agent.num_ineq() == 0 {
            return 0.0;
        }
        let phi = self.agent.ineq(x);
        let jac = self.agent.ineq_jac(x);
        let abs_x = x.abs();
        let mut err = DVector::zeros(x.len());
        for (c, row) in jac.row_iter().enumerate() {
            // rounding in phi_c, amplified by d(b/phi)/dphi
            let phi_err = f64::EPSILON * (row.abs().dot(&abs_x.transpose()) + phi[c].abs());
            let gain = self.barrier / (phi[c] * phi[c]) * phi_err;
            err += row.abs().transpose() * gain;
        }
        FLOOR_SAFETY * err.norm()
    }
}

/// Multiple of the estimated rounding error treated as unresolvable.
pub const FLOOR_SAFETY: f64 = 4.0;

/// The agent's own equality constraints.
pub struct AgentEquality<'a>(pub &'a dyn AgentSubproblem);

impl EqualityMap for AgentEquality<'_> {
    fn len(&self) -> usize {
        self.0.num_eq()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0.eq(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.0.eq_jac(x)
    }
    fn weighted_hessian(&self, x: &DVector<f64>, nu: &DVector<f64>) -> Option<DMatrix<f64>> {
        if self.0.num_eq() == 0 {
            let n = self.0.dim();
            return Some(DMatrix::zeros(n, n));
        }
        self.0.eq_hessian(x, nu)
    }
}

/// Empty equality map for unconstrained subproblems.
pub struct NoEquality(pub usize);

impl EqualityMap for NoEquality {
    fn len(&self) -> usize {
        0
    }
    fn eval(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, self.0)
    }
    fn weighted_hessian(&self, _x: &DVector<f64>, _nu: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.0, self.0))
    }
}

#[derive(Clone, Debug)]
pub struct NlpOptions {
    pub max_iterations: usize,
    /// First nonzero Hessian shift; grows by `shift_growth` until the
    /// curvature test passes.
    pub initial_shift: f64,
    pub shift_growth: f64,
    pub max_shift: f64,
    /// Required `dx' W dx >= curvature * ||dx||^2`.
    pub curvature: f64,
    pub fraction_to_boundary: f64,
    pub armijo: f64,
    pub min_step: f64,
    /// Refuse converged points above `chi(x0)` (from an equality-feasible
    /// start). Standalone solves that do not feed the ADMM layer may drop it.
    pub enforce_descent: bool,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_shift: 1e-8,
            shift_growth: 10.0,
            max_shift: 1e12,
            curvature: 1e-12,
            fraction_to_boundary: 0.995,
            armijo: 1e-4,
            min_step: 1e-14,
            enforce_descent: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlpResult {
    pub x: DVector<f64>,
    /// Equality multipliers (least-squares estimate at `x`).
    pub nu: DVector<f64>,
    /// Barrier-implied inequality multipliers `-b / phi_c(x)`.
    pub mu: DVector<f64>,
    pub d4_norm: f64,
    pub d5_norm: f64,
    /// Rounding floor of the stationarity residual at `x`.
    pub d4_floor: f64,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Error)]
pub enum NlpError {
    #[error("iteration cap reached (best residuals d4={:e}, d5={:e})", best.d4_norm, best.d5_norm)]
    IterationCap { best: Box<NlpResult> },
    #[error("cannot keep the iterate strictly interior after {iterations} iterations: {detail}")]
    LostInterior { iterations: usize, detail: String },
    #[error("line search stalled after {iterations} iterations")]
    LineSearch { iterations: usize },
    #[error("KKT matrix singular after {iterations} iterations")]
    Singular { iterations: usize },
    #[error(
        "residual tolerances met only above the starting objective ({final_value:e} > {initial:e})"
    )]
    NoDescent { initial: f64, final_value: f64 },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    cons: DVector<f64>,
    jac: DMatrix<f64>,
    nu_ls: DVector<f64>,
    d4: f64,
    d5: f64,
    d4_floor: f64,
}

fn evaluate(
    obj: &dyn SmoothObjective,
    eq: &dyn EqualityMap,
    x: &DVector<f64>,
) -> Result<Eval, NlpError> {
    let value = obj.value(x)?;
    let grad = obj.gradient(x);
    let cons = eq.eval(x);
    let jac = eq.jacobian(x);
    let nu_ls = least_squares_multipliers(&grad, &jac);
    let d4 = (&grad + jac.tr_mul(&nu_ls)).norm();
    let d5 = cons.norm();
    let d4_floor = obj.gradient_floor(x);
    Ok(Eval {
        value,
        grad,
        cons,
        jac,
        nu_ls,
        d4,
        d5,
        d4_floor,
    })
}

/// `argmin_nu ||g + J' nu||` via the augmented system `[I J'; J 0]`.
pub fn least_squares_multipliers(g: &DVector<f64>, jac: &DMatrix<f64>) -> DVector<f64> {
    let (m, n) = jac.shape();
    if m == 0 {
        return DVector::zeros(0);
    }
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).fill_with_identity();
    k.view_mut((0, n), (n, m)).copy_from(&jac.transpose());
    k.view_mut((n, 0), (m, n)).copy_from(jac);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    let sol = Factorization::new(&k).map(|f| f.solve(&rhs)).or_else(|| {
        for i in 0..m {
            k[(n + i, n + i)] = -1e-10;
        }
        Factorization::new(&k).map(|f| f.solve(&rhs))
    });
    match sol {
        Some(s) if s.iter().all(|v| v.is_finite()) => s.rows(n, m).into_owned(),
        _ => DVector::zeros(m),
    }
}

fn result_from(
    x: DVector<f64>,
    e: &Eval,
    obj: &dyn SmoothObjective,
    initial: f64,
    iterations: usize,
) -> NlpResult {
    let mu = obj.ineq_multipliers(&x);
    NlpResult {
        x,
        nu: e.nu_ls.clone(),
        mu,
        d4_norm: e.d4,
        d5_norm: e.d5,
        d4_floor: e.d4_floor,
        objective_initial: initial,
        objective_final: e.value,
        iterations,
    }
}

/// Relative rounding allowance of the descent check.
pub const DESCENT_SLACK: f64 = 16.0 * f64::EPSILON;

pub fn solve_equality_nlp(
    x0: &DVector<f64>,
    obj: &dyn SmoothObjective,
    eq: &dyn EqualityMap,
    eps4: f64,
    eps5: f64,
    opts: &NlpOptions,
) -> Result<NlpResult, NlpError> {
    assert!(eps4 > 0.0 && eps5 > 0.0, "tolerances must be positive");
    let n = obj.dim();
    let m = eq.len();
    let mut x = x0.clone();
    let mut e = evaluate(obj, eq, &x)?;
    let initial = e.value;
    let start_feasible = e.d5 <= eps5;
    let meets = |e: &Eval| e.d4 <= eps4.max(e.d4_floor) && e.d5 <= eps5;
    if meets(&e) {
        return Ok(result_from(x, &e, obj, initial, 0));
    }

    let mut nu = e.nu_ls.clone();
    let mut penalty = 0.0_f64;
    let mut quasi: Option<DMatrix<f64>> = None;
    let mut best: Option<(f64, NlpResult)> = None;
    let score = |e: &Eval| (e.d4 / eps4.max(e.d4_floor)).max(e.d5 / eps5);

    for iter in 1..=opts.max_iterations {
        let w = match (obj.hessian(&x), eq.weighted_hessian(&x, &nu)) {
            (Some(h), Some(hc)) => h + hc,
            _ => quasi.get_or_insert_with(|| DMatrix::identity(n, n)).clone(),
        };

        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&e.grad));
        rhs.rows_mut(n, m).copy_from(&(-&e.cons));
        let mut shift = 0.0;
        let mut dual_reg = 0.0;
        let (dx, nu_new, kkt) = loop {
            let mut k = DMatrix::zeros(n + m, n + m);
            k.view_mut((0, 0), (n, n)).copy_from(&w);
            for i in 0..n {
                k[(i, i)] += shift;
            }
            k.view_mut((0, n), (n, m)).copy_from(&e.jac.transpose());
            k.view_mut((n, 0), (m, n)).copy_from(&e.jac);
            for i in 0..m {
                k[(n + i, n + i)] = -dual_reg;
            }
            let fact = Factorization::new(&k);
            let sol = fact
                .as_ref()
                .map(|f| f.solve(&rhs))
                .filter(|s| s.iter().all(|v| v.is_finite()));
            if let (Some(s), Some(f)) = (sol, fact) {
                let dx = s.rows(0, n).into_owned();
                let curv = dx.dot(&(&w * &dx)) + shift * dx.norm_squared();
                if curv >= opts.curvature * dx.norm_squared() || dx.norm() == 0.0 {
                    break (dx, s.rows(n, m).into_owned(), f);
                }
            } else if m > 0 && dual_reg == 0.0 {
                dual_reg = 1e-10;
                continue;
            }
            shift = if shift == 0.0 {
                opts.initial_shift
            } else {
                shift * opts.shift_growth
            };
            if shift > opts.max_shift {
                return Err(NlpError::Singular {
                    iterations: iter - 1,
                });
            }
        };

        // merit: chi + penalty * ||psi||_1
        let nu_inf = nu_new.amax();
        if penalty < nu_inf * 1.1 + 1e-8 {
            penalty = (nu_inf * 2.0).max(1e-6);
        }
        let l1 = e.cons.lp_norm(1);
        let merit0 = e.value + penalty * l1;
        let f_slope = e.grad.dot(&dx);
        let slope = f_slope - penalty * l1;

        let t_max = obj.max_step(&x, &dx);
        let mut alpha = if t_max.is_finite() {
            (opts.fraction_to_boundary * t_max).min(1.0)
        } else {
            1.0
        };
        // merit differences below this are rounding noise
        let noise = 16.0 * f64::EPSILON * merit0.abs().max(1.0);
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        let mut domain_fail = false;
        while alpha >= opts.min_step {
            let trial = &x + &dx * alpha;
            match obj.value(&trial) {
                Ok(v) => {
                    domain_fail = false;
                    let c_trial = eq.eval(&trial);
                    // once both points meet the equality tolerance, the
                    // penalty term is rounding noise and only f is tested
                    let f_only = e.d5 <= eps5 && c_trial.norm() <= eps5 && f_slope < 0.0;
                    let ok = if f_only {
                        v <= e.value + opts.armijo * alpha * f_slope + noise
                    } else {
                        let merit = v + penalty * c_trial.lp_norm(1);
                        let target = merit0 + opts.armijo * alpha * slope.min(0.0);
                        merit <= target + noise || (slope >= 0.0 && merit < merit0)
                    };
                    if ok {
                        accepted = Some((trial, alpha));
                        break;
                    }
                }
                Err(_) => domain_fail = true,
            }
            alpha *= 0.5;
        }
        if accepted.as_ref().is_none_or(|a| a.1 < 1.0) && t_max >= 1.0 && m > 0 {
            // second-order correction against constraint curvature
            let full = &x + &dx;
            let mut soc_rhs = DVector::zeros(n + m);
            soc_rhs.rows_mut(n, m).copy_from(&(-eq.eval(&full)));
            let corr = kkt.solve(&soc_rhs).rows(0, n).into_owned();
            let trial = full + &corr;
            if corr.iter().all(|v| v.is_finite()) && obj.max_step(&x, &(&trial - &x)) > 1.0 {
                if let Ok(v) = obj.value(&trial) {
                    let merit = v + penalty * eq.eval(&trial).lp_norm(1);
                    if merit <= merit0 + opts.armijo * slope.min(0.0) + noise {
                        accepted = Some((trial, 1.0));
                    }
                }
            }
        }
        let Some((x_new, alpha)) = accepted else {
            if domain_fail {
                return Err(NlpError::LostInterior {
                    iterations: iter - 1,
                    detail: "every trial step left the barrier domain".into(),
                });
            }
            return match best {
                Some((_, r)) => Err(NlpError::IterationCap { best: Box::new(r) }),
                None => Err(NlpError::LineSearch {
                    iterations: iter - 1,
                }),
            };
        };

        let nu_step = &nu + (&nu_new - &nu) * alpha;
        let e_new = evaluate(obj, eq, &x_new)?;
        if let Some(b) = quasi.as_mut() {
            let s = &x_new - &x;
            let lag_new = &e_new.grad + e_new.jac.tr_mul(&nu_step);
            let lag_old = &e.grad + e.jac.tr_mul(&nu_step);
            let yv = lag_new - lag_old;
            let r = &yv - &*b * &s;
            let denom = r.dot(&s);
            if denom.abs() > 1e-8 * r.norm() * s.norm() {
                *b += &r * r.transpose() / denom;
            }
        }
        x = x_new;
        nu = nu_step;
        e = e_new;

        if meets(&e) {
            // descent is only owed from an equality-feasible start
            if !opts.enforce_descent
                || !start_feasible
                || e.value <= initial + DESCENT_SLACK * initial.abs().max(1.0)
            {
                return Ok(result_from(x, &e, obj, initial, iter));
            }
            return Err(NlpError::NoDescent {
                initial,
                final_value: e.value,
            });
        }
        let s = score(&e);
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, result_from(x.clone(), &e, obj, initial, iter)));
        }
    }
    let (_, r) = best.expect("at least one iteration ran");
    Err(NlpError::IterationCap { best: Box::new(r) })
}
