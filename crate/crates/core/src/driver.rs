//! The three algorithm variants over a [`Runtime`].
//!
//! One code path serves all three: ELL is the approximate scheme with a fixed
//! tight agent tolerance and a fixed tiny barrier, ELLADA adds a trial wave
//! and the Anderson safeguard on top of ELLA.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::anderson::{self, AndersonParams, AndersonState};
use crate::coordinator::{
    self, augmented_lagrangian, check_stationarity, lagrangian_lower_bound, primal_residual,
    split_w, stack_w, InnerResiduals, IterateState, OuterState, PenaltyBranch, StationarityVerdict,
};
use crate::error::SolveError;
use crate::graph::{validate_problem, DistributedProblem, StackedCoupling};
use crate::nlp::NlpOptions;
use crate::runtime::{
    agent_offsets, blockwise_round, scatter_blocks, AgentReport, ExecutionMode, Runtime,
    SolveRequest, TransportKind, Wave,
};
use crate::schedule::{default_schedules, BarrierSchedule, ToleranceSchedule, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Slack penalty of the first outer round.
    pub initial_penalty: f64,
    /// Keep the penalty when `||z||` shrank by at least this factor.
    pub penalty_threshold: f64,
    pub penalty_growth: f64,
    pub dual_lower: f64,
    pub dual_upper: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub nlp_max_iterations: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            initial_penalty: 1.0,
            penalty_threshold: 0.75,
            penalty_growth: 2.0,
            dual_lower: -10.0,
            dual_upper: 10.0,
            max_inner: 2000,
            max_outer: 100,
            nlp_max_iterations: 200,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.initial_penalty > 0.0) {
            return Err("initial_penalty must be positive".into());
        }
        if !(0.0..1.0).contains(&self.penalty_threshold) {
            return Err("penalty_threshold must lie in [0, 1)".into());
        }
        if !(self.penalty_growth > 1.0) {
            return Err("penalty_growth must exceed 1".into());
        }
        if !(self.dual_lower <= 0.0 && self.dual_upper >= 0.0) {
            return Err("dual bounds must contain 0".into());
        }
        if self.max_inner == 0 || self.max_outer == 0 || self.nlp_max_iterations == 0 {
            return Err("iteration caps must be positive".into());
        }
        Ok(())
    }

    pub fn nlp_options(&self) -> NlpOptions {
        NlpOptions {
            max_iterations: self.nlp_max_iterations,
            ..NlpOptions::default()
        }
    }
}

/// Everything that defines one run apart from the problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub params: SolverParams,
    pub schedule: ToleranceSchedule,
    pub barrier: BarrierSchedule,
    pub accel: AndersonParams,
}

impl RunSpec {
    pub fn defaults(variant: Variant) -> Self {
        let (schedule, barrier) = default_schedules(variant);
        Self {
            variant,
            params: SolverParams::default(),
            schedule,
            barrier,
            accel: AndersonParams::default(),
        }
    }

    /// Defaults with [`ToleranceSchedule::equalize_finals`] applied.
    pub fn equalized(variant: Variant) -> Self {
        let mut spec = Self::defaults(variant);
        spec.schedule.equalize_finals();
        spec
    }

    pub fn validate(&self) -> Result<(), String> {
        self.params.validate()?;
        self.schedule.validate()?;
        self.barrier.validate()?;
        if self.variant == Variant::Ellada {
            self.accel.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerRecord {
    pub k: usize,
    pub r: usize,
    /// Barrier augmented Lagrangian after the step.
    pub lagrangian: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    /// Agent tolerances used for this step.
    pub eps4: f64,
    pub eps5: f64,
    pub beta: f64,
    pub rho: f64,
    pub barrier: f64,
    pub accel_accepted: bool,
    /// Newton steps of plain and trial solves in this step.
    pub nlp_iters: usize,
    pub trial_nlp_iters: usize,
    /// Achieved agent residuals, 2-norm over agents.
    pub d4: f64,
    pub d5: f64,
    /// `||lambda + beta z + y||`.
    pub dual_identity: f64,
    /// `||(Ax + B x_bar + z) + (beta / rho)(z - z_prev)||` for plain steps.
    pub link_identity: f64,
    /// `L_after - L_before + beta ||B dx_bar||^2 + beta/2 ||dz||^2`.
    pub descent_excess: f64,
    /// Estimated increase of a proposed accelerated step.
    pub candidate_increase: Option<f64>,
    pub all_fresh: bool,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub k: usize,
    pub inner_iterations: usize,
    pub z_norm: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub beta: f64,
    pub barrier: f64,
    pub branch: Option<PenaltyBranch>,
    pub verdict: StationarityVerdict,
    pub lagrangian_initial: f64,
    pub lagrangian_max: f64,
    pub lagrangian_min: f64,
    /// Minimum of the augmented Lagrangian without the barrier term; the
    /// one `lower_bound` applies to (the log terms are unbounded below).
    pub plain_lagrangian_min: f64,
    pub lower_bound: Option<f64>,
    /// Scale of admissible acceleration increases (0 without acceleration).
    pub increase_scale: f64,
    pub accepted_increase: f64,
    pub accepted_steps: usize,
    pub restarts: usize,
    pub h_inv_frobenius_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub inner: Vec<InnerRecord>,
    pub outer: Vec<OuterRecord>,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str =
        "k,r,L_b,eps1,eps2,eps3,eps4,eps5,beta,rho,b,accel_accepted,nlp_iters";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.inner {
            let _ = writeln!(
                s,
                "{},{},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
                r.k,
                r.r,
                r.lagrangian,
                r.eps1,
                r.eps2,
                r.eps3,
                r.eps4,
                r.eps5,
                r.beta,
                r.rho,
                r.barrier,
                u8::from(r.accel_accepted),
                r.nlp_iters
            );
        }
        s
    }

    pub fn total_inner(&self) -> usize {
        self.inner.len()
    }

    pub fn total_nlp_iterations(&self) -> usize {
        self.inner.iter().map(|r| r.nlp_iters).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub variant: Variant,
    /// Agent variables, aligned with the problem's agents.
    pub x: Vec<DVector<f64>>,
    pub state: IterateState,
    pub outer: OuterState,
    pub certificate: StationarityVerdict,
    pub log: IterationLog,
    pub converged: bool,
    pub init_nlp_iterations: usize,
}

impl Solution {
    pub fn total_inner(&self) -> usize {
        self.log.total_inner()
    }

    pub fn total_nlp_iterations(&self) -> usize {
        self.log.total_nlp_iterations()
    }
}

/// Optional overrides for a run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Starting points instead of the agents' declared interior points.
    pub initial: Option<Vec<DVector<f64>>>,
    pub transport: TransportKind,
    pub mode: ExecutionMode,
}

pub fn run_ell(
    problem: &DistributedProblem,
    params: &SolverParams,
    schedule: &ToleranceSchedule,
) -> Result<Solution, SolveError> {
    let mut spec = RunSpec::defaults(Variant::Ell);
    spec.params = params.clone();
    spec.schedule = schedule.clone();
    run(problem, &spec, &RunOptions::default())
}

pub fn run_ella(
    problem: &DistributedProblem,
    params: &SolverParams,
    schedule: &ToleranceSchedule,
    barrier: &BarrierSchedule,
) -> Result<Solution, SolveError> {
    let spec = RunSpec {
        variant: Variant::Ella,
        params: params.clone(),
        schedule: schedule.clone(),
        barrier: *barrier,
        accel: AndersonParams::default(),
    };
    run(problem, &spec, &RunOptions::default())
}

pub fn run_ellada(
    problem: &DistributedProblem,
    params: &SolverParams,
    schedule: &ToleranceSchedule,
    barrier: &BarrierSchedule,
    accel: &AndersonParams,
) -> Result<Solution, SolveError> {
    let spec = RunSpec {
        variant: Variant::Ellada,
        params: params.clone(),
        schedule: schedule.clone(),
        barrier: *barrier,
        accel: accel.clone(),
    };
    run(problem, &spec, &RunOptions::default())
}

/// Runs with a freshly built runtime.
pub fn run(
    problem: &DistributedProblem,
    spec: &RunSpec,
    opts: &RunOptions,
) -> Result<Solution, SolveError> {
    let diags = validate_problem(problem);
    if !diags.is_empty() {
        return Err(SolveError::Invalid(
            diags.iter().map(|d| d.to_string()).collect(),
        ));
    }
    spec.validate().map_err(SolveError::Params)?;
    let coupling = problem.assemble()?;
    let mut runtime = Runtime::new(
        problem,
        &coupling,
        opts.transport,
        opts.mode,
        &spec.params.nlp_options(),
    )?;
    let x0 = match &opts.initial {
        Some(x) => x.clone(),
        None => problem
            .agents
            .iter()
            .map(|a| {
                a.interior_point()
                    .unwrap_or_else(|| DVector::zeros(a.dim()))
            })
            .collect(),
    };
    run_with(problem, &coupling, spec, &mut runtime, x0)
}

fn aggregate(reports: &[Option<AgentReport>], f: impl Fn(&AgentReport) -> f64) -> f64 {
    reports
        .iter()
        .flatten()
        .map(|r| {
            let v = f(r);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

struct AgentView {
    /// Latest plain report per agent.
    latest: Vec<Option<AgentReport>>,
}

impl AgentView {
    fn objective(&self) -> f64 {
        self.latest.iter().flatten().map(|r| r.objective).sum()
    }
    fn log_barrier(&self) -> f64 {
        self.latest.iter().flatten().map(|r| r.log_barrier).sum()
    }
}

fn check_reports(
    problem: &DistributedProblem,
    idx: &[usize],
    reports: &[AgentReport],
) -> Result<(), SolveError> {
    for (i, rep) in idx.iter().zip(reports) {
        if let Some(msg) = &rep.failure {
            return Err(SolveError::Transport(format!(
                "agent {} failed: {msg}",
                problem.bipartite.agents[*i]
            )));
        }
    }
    Ok(())
}

/// Drives the algorithm with an existing runtime.
pub fn run_with(
    problem: &DistributedProblem,
    coupling: &StackedCoupling,
    spec: &RunSpec,
    runtime: &mut Runtime,
    x0: Vec<DVector<f64>>,
) -> Result<Solution, SolveError> {
    let clock = Instant::now();
    let n_agents = problem.agents.len();
    let mode = runtime.mode;
    let params = &spec.params;
    let sched = &spec.schedule;
    let accelerate = spec.variant == Variant::Ellada;
    let f_lower = problem.objective_lower_bound();

    let init = runtime.init(x0)?;
    check_reports(problem, &(0..n_agents).collect::<Vec<_>>(), &init)?;
    let mut ax = DVector::zeros(coupling.rows());
    for (i, rep) in init.iter().enumerate() {
        scatter_blocks(coupling, i, &rep.blocks, &mut ax);
    }
    let mut view = AgentView {
        latest: init.into_iter().map(Some).collect(),
    };

    let zeros = DVector::zeros(coupling.rows());
    let x_bar0 = coordinator::g_oracle(
        coupling,
        &coordinator::oracle_input(&ax, &zeros, &zeros, 1.0),
        1.0,
    );
    let z0 = -(&ax + &coupling.b * &x_bar0);
    let mut outer = OuterState::new(
        coupling.rows(),
        params.initial_penalty,
        spec.barrier.first(),
        (params.dual_lower, params.dual_upper),
    );
    outer.z_prev_norm = z0.norm();
    let mut state = IterateState {
        ax,
        x_bar: x_bar0,
        z: z0,
        y: zeros.clone(),
        objective: view.objective(),
        log_barrier: view.log_barrier(),
    };

    let mut log = IterationLog::default();
    let mut certificate = None;
    let n_xbar = coupling.num_xbar();
    let n_w = n_xbar + coupling.rows();

    for k in 1..=params.max_outer {
        outer.k = k;
        outer.rho = 2.0 * outer.beta;
        let tol_k = sched.outer(k);
        state.y = -&outer.lambda - &state.z * outer.beta;
        let l_start = augmented_lagrangian(coupling, &state, &outer, true);
        let mut l_prev = l_start;
        let (mut l_min, mut l_max) = (l_start, l_start);
        let mut plain_min = augmented_lagrangian(coupling, &state, &outer, false);

        let mut accel = AndersonState::new(n_w);
        let mut eps4_cur = sched.inner_start(k);
        let mut candidate: Option<DVector<f64>> = None;
        let mut w_prev: Option<DVector<f64>> = None;
        let mut h0_prev: Option<DVector<f64>> = None;
        let mut accepted_increase = 0.0;
        let mut last_res = InnerResiduals::default();
        let mut inner_done = 0;

        for r in 0..params.max_inner {
            let eps4_used = eps4_cur;
            let eps5_used = sched.pi(eps4_used);
            let w_cur = state.w();
            let trial_w = candidate.as_ref().filter(|c| **c != w_cur).cloned();

            let mut requests = Vec::new();
            let mut plain_idx = Vec::new();
            let mut trial_idx = Vec::new();
            let request =
                |wave, x_bar: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>, i: usize| {
                    SolveRequest {
                        wave,
                        rho: outer.rho,
                        barrier: outer.barrier,
                        eps4: eps4_used,
                        eps5: eps5_used,
                        offsets: agent_offsets(coupling, i, x_bar, z, y, outer.rho),
                    }
                };
            let trial_parts = trial_w.as_ref().map(|w| {
                let (xb, z) = split_w(w, n_xbar);
                let y = -&outer.lambda - &z * outer.beta;
                (xb, z, y)
            });
            // trial first: it must start from the same x as the plain solve
            if let Some((xb, z, y)) = &trial_parts {
                for i in 0..n_agents {
                    requests.push((i, request(Wave::Trial, xb, z, y, i)));
                    trial_idx.push(i);
                }
            }
            for i in 0..n_agents {
                if mode.refreshes(i, r) {
                    requests.push((i, request(Wave::Plain, &state.x_bar, &state.z, &state.y, i)));
                    plain_idx.push(i);
                }
            }
            let order: Vec<usize> = requests.iter().map(|(i, _)| *i).collect();
            let replies = runtime.solve(requests)?;
            check_reports(problem, &order, &replies)?;
            let (trial_rep, plain_rep) = replies.split_at(trial_idx.len());

            let mut ax_new = state.ax.clone();
            let mut nlp_iters = 0;
            for (&i, rep) in plain_idx.iter().zip(plain_rep) {
                scatter_blocks(coupling, i, &rep.blocks, &mut ax_new);
                nlp_iters += rep.iterations;
                view.latest[i] = Some(rep.clone());
            }
            let trial_nlp: usize = trial_rep.iter().map(|r| r.iterations).sum();

            let (xb_plain, z_plain, y_plain) =
                blockwise_round(coupling, &ax_new, &state.z, &state.y, &outer);
            let w_plain = stack_w(&xb_plain, &z_plain);
            let mut next = IterateState {
                ax: ax_new,
                x_bar: xb_plain,
                z: z_plain,
                y: y_plain,
                objective: view.objective(),
                log_barrier: view.log_barrier(),
            };

            let mut accepted = false;
            let mut candidate_increase = None;
            if accelerate {
                if r == 0 {
                    accel.set_scale(anderson::lagrangian_scale(
                        coupling, &w_cur, &w_plain, outer.beta,
                    ));
                    candidate = Some(w_plain.clone());
                } else {
                    let w_tilde = candidate
                        .clone()
                        .expect("candidate set after the first step");
                    let h0_tilde = match &trial_parts {
                        Some((_, z, y)) => {
                            let mut ax_t = next.ax.clone();
                            for (&i, rep) in trial_idx.iter().zip(trial_rep) {
                                scatter_blocks(coupling, i, &rep.blocks, &mut ax_t);
                            }
                            let (xb_t, z_t, _) = blockwise_round(coupling, &ax_t, z, y, &outer);
                            stack_w(&xb_t, &z_t)
                        }
                        // candidate equals the current iterate: the trial is the plain step
                        None => w_plain.clone(),
                    };
                    let w_old = w_prev.as_ref().unwrap();
                    let h0_old = h0_prev.as_ref().unwrap();
                    let dw = &w_tilde - w_old;
                    let dh = (&w_tilde - &h0_tilde) - (w_old - h0_old);
                    accel.push_secant(&dw, &dh, &spec.accel);
                    let proposal = accel.propose(&w_cur, &w_plain);
                    let increase = anderson::lagrangian_increase(
                        coupling,
                        &next.ax,
                        &w_plain,
                        &proposal,
                        &outer.lambda,
                        outer.beta,
                        outer.rho,
                        spec.accel.increase_form,
                    );
                    let step_sq = (&proposal - &w_cur).norm_squared();
                    let decision = accel.safeguard(increase, step_sq, outer.beta, &spec.accel);
                    candidate_increase = Some(increase);
                    if decision.accepted {
                        accepted = true;
                        accepted_increase += increase;
                        let (xb, z) = split_w(&proposal, n_xbar);
                        next.y = -&outer.lambda - &z * outer.beta;
                        next.x_bar = xb;
                        next.z = z;
                    }
                    candidate = Some(proposal);
                }
                w_prev = Some(w_cur.clone());
                h0_prev = Some(w_plain.clone());
            }

            let res =
                coordinator::inner_residuals(coupling, &state.x_bar, &state.z, &next, outer.rho);
            let l_next = augmented_lagrangian(coupling, &next, &outer, true);
            let dxb = &coupling.b * (&next.x_bar - &state.x_bar);
            let dz = &next.z - &state.z;
            let descent_excess = l_next - l_prev
                + outer.beta * dxb.norm_squared()
                + 0.5 * outer.beta * dz.norm_squared();
            let dual_identity = (&outer.lambda + &next.z * outer.beta + &next.y).norm();
            let link_identity = if accepted {
                f64::NAN
            } else {
                (primal_residual(coupling, &next) + &dz * (outer.beta / outer.rho)).norm()
            };
            let all_fresh = mode.all_fresh(n_agents, r);
            let d4 = aggregate(&view.latest, |r| r.d4);
            let d5 = aggregate(&view.latest, |r| r.d5);
            log.inner.push(InnerRecord {
                k,
                r,
                lagrangian: l_next,
                eps1: res.eps1,
                eps2: res.eps2,
                eps3: res.eps3,
                eps4: eps4_used,
                eps5: eps5_used,
                beta: outer.beta,
                rho: outer.rho,
                barrier: outer.barrier,
                accel_accepted: accepted,
                nlp_iters: nlp_iters + trial_nlp,
                trial_nlp_iters: trial_nlp,
                d4,
                d5,
                dual_identity,
                link_identity,
                descent_excess,
                candidate_increase,
                all_fresh,
                wall_time: clock.elapsed().as_secs_f64(),
            });
            l_prev = l_next;
            l_min = l_min.min(l_next);
            l_max = l_max.max(l_next);
            plain_min = plain_min.min(augmented_lagrangian(coupling, &next, &outer, false));
            state = next;
            last_res = res;
            inner_done = r + 1;
            eps4_cur = sched.inner_next(k, res.eps1);

            let met = res.eps1 <= tol_k[0]
                && res.eps2 <= tol_k[1]
                && res.eps3 <= tol_k[2]
                && eps4_used <= tol_k[3]
                && eps5_used <= tol_k[4];
            if met && all_fresh {
                break;
            }
        }

        let d4 = aggregate(&view.latest, |r| r.d4);
        let d5 = aggregate(&view.latest, |r| r.d5);
        let verdict =
            check_stationarity(coupling, &state, &outer, d4, d5, &last_res, &sched.finals);
        let schedule_done = tol_k[3] <= sched.finals.nlp_stationarity
            && tol_k[4] <= sched.finals.nlp_equality
            && outer.barrier <= sched.finals.barrier;
        let done = verdict.ok && (spec.variant == Variant::Ell || schedule_done);

        let mut rec = OuterRecord {
            k,
            inner_iterations: inner_done,
            z_norm: state.z.norm(),
            lambda_min: outer.lambda.min(),
            lambda_max: outer.lambda.max(),
            beta: outer.beta,
            barrier: outer.barrier,
            branch: None,
            verdict,
            lagrangian_initial: l_start,
            lagrangian_max: l_max,
            lagrangian_min: l_min,
            plain_lagrangian_min: plain_min,
            lower_bound: f_lower.map(|f| lagrangian_lower_bound(f, &outer)),
            increase_scale: accel.scale().unwrap_or(0.0),
            accepted_increase,
            accepted_steps: accel.accepted(),
            restarts: accel.restarts(),
            h_inv_frobenius_max: accel.max_frobenius(),
        };
        if done {
            log.outer.push(rec);
            certificate = Some(verdict);
            break;
        }
        let (next_outer, branch) = coordinator::outer_update(
            &outer,
            &state.z,
            params.penalty_threshold,
            params.penalty_growth,
        );
        rec.branch = Some(branch);
        log.outer.push(rec);
        let b_next = spec.barrier.next(tol_k[2]);
        outer = next_outer;
        outer.barrier = b_next;
    }

    let x = runtime.snapshot()?;
    let converged = certificate.is_some();
    let solution = Solution {
        variant: spec.variant,
        x,
        certificate: certificate.unwrap_or_else(|| {
            log.outer
                .last()
                .map(|o| o.verdict)
                .expect("at least one round")
        }),
        state,
        outer,
        log,
        converged,
        init_nlp_iterations: 0,
    };
    if converged {
        Ok(solution)
    } else {
        Err(SolveError::OuterCapExceeded {
            cap: params.max_outer,
            partial: Box::new(solution),
        })
    }
}
