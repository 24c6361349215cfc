//! Receding-horizon controllers and the closed-loop harness.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use ellada_core::driver::{run, RunOptions, RunSpec, Solution};
use ellada_core::graph::AgentSubproblem;
use ellada_core::nlp::{solve_equality_nlp, AgentEquality, BarrierObjective, NlpError, NlpOptions};
use ellada_core::runtime::{ExecutionMode, TransportKind};
use ellada_core::schedule::Variant;
use ellada_core::SolveError;

use crate::decomposition::{
    build_distributed, centralized_ocp, subsystem_ocp, UpstreamMode, SUBSYSTEMS,
};
use crate::model::TankModel;
use crate::ocp::{simulate_transcribed, OcpSpec, TankOcp, Trajectory};
use crate::plant;

/// Scenario start of the benchmark.
pub const BENCHMARK_START: [f64; 4] = [12.6, 12.4, 5.0, 4.5];

/// Barrier continuation for single-agent problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonolithicOptions {
    pub barrier_start: f64,
    pub barrier_end: f64,
    /// Barrier shrink factor between solves.
    pub barrier_factor: f64,
    pub stationarity: f64,
    pub equality: f64,
    pub max_newton: usize,
}

impl Default for MonolithicOptions {
    fn default() -> Self {
        Self {
            barrier_start: 0.1,
            barrier_end: 1e-8,
            barrier_factor: 0.1,
            stationarity: 1e-8,
            equality: 1e-9,
            max_newton: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicSolution {
    pub x: DVector<f64>,
    pub newton_iterations: usize,
}

/// Solves one agent subproblem alone, following the barrier down to
/// `barrier_end` and warm-starting each solve from the previous one.
pub fn solve_monolithic(
    ocp: &TankOcp,
    opts: &MonolithicOptions,
) -> Result<MonolithicSolution, NlpError> {
    let nlp = NlpOptions {
        max_iterations: opts.max_newton,
        // a reference solve, not an agent step of the ADMM layer
        enforce_descent: false,
        ..NlpOptions::default()
    };
    let mut x = ocp
        .interior_point()
        .expect("tank subproblems carry a warm start");
    let mut b = opts.barrier_start;
    let mut total = 0;
    loop {
        let obj = BarrierObjective::new(ocp, b, 0.0, Vec::new(), DVector::zeros(0));
        let last = b <= opts.barrier_end;
        let eps4 = if last {
            opts.stationarity
        } else {
            b.max(opts.stationarity)
        };
        let res = solve_equality_nlp(&x, &obj, &AgentEquality(ocp), eps4, opts.equality, &nlp)?;
        total += res.iterations;
        x = res.x;
        if last {
            break;
        }
        b = (b * opts.barrier_factor).max(opts.barrier_end);
    }
    Ok(MonolithicSolution {
        x,
        newton_iterations: total,
    })
}

/// Warm trajectory: the transcribed dynamics from `h` under `inputs`.
pub fn warm_start(
    model: &TankModel,
    spec: &OcpSpec,
    h: &Vector4<f64>,
    inputs: &[Vector2<f64>],
) -> Trajectory {
    simulate_transcribed(model, spec, h, inputs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CentralizedSolution {
    pub trajectory: Trajectory,
    pub newton_iterations: usize,
}

pub fn solve_centralized(
    model: &TankModel,
    spec: &OcpSpec,
    h_now: &Vector4<f64>,
    warm_inputs: &[Vector2<f64>],
    opts: &MonolithicOptions,
) -> Result<CentralizedSolution, TankError> {
    let warm = warm_start(model, spec, h_now, warm_inputs);
    let ocp = centralized_ocp(model, spec, h_now, &warm)?;
    let sol = solve_monolithic(&ocp, opts).map_err(|e| TankError::Nlp(e.to_string()))?;
    let levels = (0..spec.points())
        .map(|pt| Vector4::from_fn(|t, _| sol.x[ocp.level_index(t, pt).unwrap()]))
        .collect();
    let inputs = (0..spec.horizon)
        .map(|j| Vector2::from_fn(|p, _| sol.x[ocp.input_index(p, j).unwrap()]))
        .collect();
    Ok(CentralizedSolution {
        trajectory: Trajectory { levels, inputs },
        newton_iterations: sol.newton_iterations,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum TankError {
    #[error(transparent)]
    Ocp(#[from] crate::ocp::OcpError),
    #[error(transparent)]
    Decomposition(#[from] crate::decomposition::DecompositionError),
    #[error("local solve failed: {0}")]
    Nlp(String),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Domain(#[from] ellada_core::DomainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Centralized,
    /// Upstream levels frozen at the current measurement.
    Decentralized,
    /// Upstream levels frozen at the owner's previous prediction.
    Feedforward,
    /// Coupled subsystems solved by the distributed algorithm.
    Distributed,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::Centralized,
        ControllerKind::Decentralized,
        ControllerKind::Feedforward,
        ControllerKind::Distributed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Centralized => "centralized",
            ControllerKind::Decentralized => "decentralized",
            ControllerKind::Feedforward => "feedforward",
            ControllerKind::Distributed => "distributed",
        }
    }
}

/// Closed-loop scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: TankModel,
    pub ocp: OcpSpec,
    pub initial: [f64; 4],
    pub steps: usize,
    pub plant_tolerance: f64,
    pub monolithic: MonolithicOptions,
    pub solver: RunSpec,
    pub transport: TransportKind,
    pub mode: ExecutionMode,
    /// Zero the logged solve times for byte-identical output.
    pub record_time: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            model: TankModel::default(),
            ocp: OcpSpec::default(),
            initial: BENCHMARK_START,
            steps: 40,
            plant_tolerance: 1e-10,
            monolithic: MonolithicOptions::default(),
            // the default ELLADA finals leave ~1e-2 cm between distributed and
            // centralized trajectories
            solver: RunSpec::equalized(Variant::Ellada),
            transport: TransportKind::Inline,
            mode: ExecutionMode::Synchronous,
            record_time: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: f64,
    pub levels: [f64; 4],
    pub inputs: [f64; 2],
    /// Inner iterations (distributed) or Newton steps (single-agent solves).
    pub solve_iters: usize,
    pub solve_time: f64,
}

/// Work summary of one distributed solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedStats {
    pub outer: usize,
    pub inner: usize,
    pub nlp_iterations: usize,
    pub accepted_accel: usize,
}

impl DistributedStats {
    pub fn of(sol: &Solution) -> Self {
        Self {
            outer: sol.log.outer.len(),
            inner: sol.total_inner(),
            nlp_iterations: sol.total_nlp_iterations(),
            accepted_accel: sol.log.inner.iter().filter(|r| r.accel_accepted).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopLog {
    pub controller: ControllerKind,
    pub records: Vec<SampleRecord>,
    /// Level after the last applied input.
    pub final_levels: [f64; 4],
    pub distributed: Vec<DistributedStats>,
    pub failure: Option<String>,
}

impl ClosedLoopLog {
    pub const CSV_HEADER: &'static str = "t,h1,h2,h3,h4,v1,v2,solve_iters,solve_time";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{},{:.6}",
                r.t,
                r.levels[0],
                r.levels[1],
                r.levels[2],
                r.levels[3],
                r.inputs[0],
                r.inputs[1],
                r.solve_iters,
                r.solve_time
            );
        }
        s
    }

    /// `sum_k q ||h_k - h_ss||^2 + r ||v_k - v_ss||^2` over the logged instants.
    pub fn quadratic_cost(&self, model: &TankModel, spec: &OcpSpec) -> f64 {
        let hs = spec.setpoint(model);
        self.records
            .iter()
            .map(|r| {
                let dh: f64 = (0..4).map(|i| (r.levels[i] - hs[i]).powi(2)).sum();
                let dv: f64 = (0..2)
                    .map(|p| (r.inputs[p] - spec.setpoint_input[p]).powi(2))
                    .sum();
                spec.state_weight * dh + spec.input_weight * dv
            })
            .sum()
    }

    /// Mean distance to the setpoint levels over the last quarter of the run.
    pub fn ultimate_deviation(&self, model: &TankModel, spec: &OcpSpec) -> f64 {
        let hs = spec.setpoint(model);
        let mut levels: Vec<[f64; 4]> = self.records.iter().map(|r| r.levels).collect();
        levels.push(self.final_levels);
        let n = levels.len();
        let tail = &levels[n - (n / 4).max(1)..];
        tail.iter()
            .map(|h| (0..4).map(|i| (h[i] - hs[i]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / tail.len() as f64
    }
}

/// Shift a plan by one interval, repeating the last input.
fn shift<T: Copy>(plan: &[T]) -> Vec<T> {
    let mut out: Vec<T> = plan.iter().skip(1).copied().collect();
    out.push(*plan.last().unwrap());
    out
}

struct Plan {
    inputs: [f64; 2],
    /// Full predicted trajectory, used for warm starts and feedforward.
    prediction: Trajectory,
    iterations: usize,
    distributed: Option<DistributedStats>,
}

struct ControllerState {
    warm_inputs: Vec<Vector2<f64>>,
    last_prediction: Option<Trajectory>,
}

fn frozen_from(
    pred: &Option<Trajectory>,
    spec: &OcpSpec,
    tank: usize,
    h_now: &Vector4<f64>,
) -> Vec<f64> {
    match pred {
        None => vec![h_now[tank]; spec.points()],
        Some(p) => {
            let s = spec.discretization.stages();
            let mut v: Vec<f64> = p.levels.iter().skip(s).map(|h| h[tank]).collect();
            let last = *v.last().unwrap();
            v.resize(spec.points(), last);
            v
        }
    }
}

fn plan_step(
    sc: &Scenario,
    kind: ControllerKind,
    h_now: &Vector4<f64>,
    st: &ControllerState,
) -> Result<Plan, TankError> {
    let spec = &sc.ocp;
    let model = &sc.model;
    match kind {
        ControllerKind::Centralized => {
            let sol = solve_centralized(model, spec, h_now, &st.warm_inputs, &sc.monolithic)?;
            let v = sol.trajectory.inputs[0];
            Ok(Plan {
                inputs: [v[0], v[1]],
                prediction: sol.trajectory,
                iterations: sol.newton_iterations,
                distributed: None,
            })
        }
        ControllerKind::Decentralized | ControllerKind::Feedforward => {
            let warm = warm_start(model, spec, h_now, &st.warm_inputs);
            let mut prediction = warm.clone();
            let mut inputs = [0.0; 2];
            let mut iterations = 0;
            for sub in &SUBSYSTEMS {
                let frozen = match kind {
                    ControllerKind::Decentralized => vec![h_now[sub.upstream]; spec.points()],
                    _ => frozen_from(&st.last_prediction, spec, sub.upstream, h_now),
                };
                let ocp =
                    subsystem_ocp(model, spec, sub, h_now, &warm, UpstreamMode::Frozen(frozen))?;
                let sol = solve_monolithic(&ocp, &sc.monolithic)
                    .map_err(|e| TankError::Nlp(e.to_string()))?;
                iterations += sol.newton_iterations;
                for &t in &sub.tanks {
                    for (pt, v) in ocp.levels_of(&sol.x, t).into_iter().enumerate() {
                        prediction.levels[pt][t] = v;
                    }
                }
                let own = ocp.inputs_of(&sol.x, sub.pump);
                for (j, v) in own.iter().enumerate() {
                    prediction.inputs[j][sub.pump] = *v;
                }
                inputs[sub.pump] = own[0];
            }
            Ok(Plan {
                inputs,
                prediction,
                iterations,
                distributed: None,
            })
        }
        ControllerKind::Distributed => {
            let warm = warm_start(model, spec, h_now, &st.warm_inputs);
            let dec = build_distributed(model, spec, h_now, &warm)?;
            let opts = RunOptions {
                initial: Some(dec.initial_points()),
                transport: sc.transport,
                mode: sc.mode,
            };
            let sol = run(&dec.problem, &sc.solver, &opts)?;
            Ok(Plan {
                inputs: dec.first_inputs(&sol.x),
                prediction: dec.trajectory(&sol.x),
                iterations: sol.total_inner(),
                distributed: Some(DistributedStats::of(&sol)),
            })
        }
    }
}

/// Runs `steps` sampling instants of `kind` on the plant. A controller failure
/// ends the log early with a failure marker.
pub fn closed_loop(sc: &Scenario, kind: ControllerKind) -> ClosedLoopLog {
    let spec = &sc.ocp;
    let v_ss = Vector2::from(spec.setpoint_input);
    let mut st = ControllerState {
        warm_inputs: vec![v_ss; spec.horizon],
        last_prediction: None,
    };
    let mut h = Vector4::from(sc.initial);
    let mut log = ClosedLoopLog {
        controller: kind,
        records: Vec::new(),
        final_levels: sc.initial,
        distributed: Vec::new(),
        failure: None,
    };
    for k in 0..sc.steps {
        let clock = Instant::now();
        let plan = match plan_step(sc, kind, &h, &st) {
            Ok(p) => p,
            Err(e) => {
                log.failure = Some(format!("step {k}: {e}"));
                break;
            }
        };
        let elapsed = if sc.record_time {
            clock.elapsed().as_secs_f64()
        } else {
            0.0
        };
        log.records.push(SampleRecord {
            t: k as f64 * spec.dt,
            levels: [h[0], h[1], h[2], h[3]],
            inputs: plan.inputs,
            solve_iters: plan.iterations,
            solve_time: elapsed,
        });
        if let Some(d) = plan.distributed {
            log.distributed.push(d);
        }
        let v = Vector2::from(plan.inputs);
        match plant::integrate(&sc.model, &h, &v, spec.dt, sc.plant_tolerance) {
            Ok(r) => h = r.state,
            Err(e) => {
                log.failure = Some(format!("step {k}: plant: {e}"));
                break;
            }
        }
        log.final_levels = [h[0], h[1], h[2], h[3]];
        st.warm_inputs = shift(&plan.prediction.inputs);
        st.last_prediction = Some(plan.prediction);
    }
    log
}

/// Agents of the distributed problem at `h_now` with a steady-input warm start.
pub fn distributed_problem_at(
    model: &TankModel,
    spec: &OcpSpec,
    h_now: &Vector4<f64>,
) -> Result<crate::decomposition::TankDecomposition, TankError> {
    let v_ss = Vector2::from(spec.setpoint_input);
    let warm = warm_start(model, spec, h_now, &vec![v_ss; spec.horizon]);
    Ok(build_distributed(model, spec, h_now, &warm)?)
}

/// Open-loop distributed solve at `h_now`.
pub fn solve_distributed(
    model: &TankModel,
    spec: &OcpSpec,
    h_now: &Vector4<f64>,
    run_spec: &RunSpec,
    transport: TransportKind,
    mode: ExecutionMode,
) -> Result<Solution, TankError> {
    let dec = distributed_problem_at(model, spec, h_now)?;
    let opts = RunOptions {
        initial: Some(dec.initial_points()),
        transport,
        mode,
    };
    Ok(run(&dec.problem, run_spec, &opts)?)
}
