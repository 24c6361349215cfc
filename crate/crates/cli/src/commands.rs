//! The two subcommands and the files they write.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector4};
use serde::Serialize;

use ellada_core::coordinator::StationarityVerdict;
use ellada_core::driver::{run, IterationLog, RunOptions, Solution};
use ellada_core::error::{SolveError, StructuralError};
use ellada_core::graph::DistributedProblem;
use ellada_core::quadratic::{generated_qp, QuadraticProblemSpec};
use ellada_tank::mpc::{
    closed_loop as simulate, distributed_problem_at, ClosedLoopLog, ControllerKind, TankError,
};

use crate::config::{self, ConfigError, ProblemKind, RunConfig};
use crate::plot::{self, Chart, Panel, PlotError, Series};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("problem: {0}")]
    Structural(#[from] StructuralError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Tank(#[from] TankError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

pub enum Outcome {
    Complete,
    /// Artifacts written but the run did not finish as asked.
    Stopped(String),
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Creates the output directory and echoes the resolved configuration.
pub fn prepare_output(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
        path: cfg.out.display().to_string(),
        source,
    })?;
    write(&cfg.out, "config.json", to_json(cfg))?;
    Ok(())
}

struct Instance {
    problem: DistributedProblem,
    initial: Option<Vec<DVector<f64>>>,
}

fn instance(cfg: &RunConfig) -> Result<Instance, CliError> {
    Ok(match cfg.problem {
        ProblemKind::Tank => {
            let h = Vector4::from(cfg.tank.initial);
            let dec = distributed_problem_at(&cfg.tank.model, &cfg.tank.ocp, &h)?;
            let initial = Some(dec.initial_points());
            Instance {
                problem: dec.problem,
                initial,
            }
        }
        ProblemKind::Qp => Instance {
            problem: generated_qp(&cfg.qp, cfg.seed)?,
            initial: None,
        },
        ProblemKind::File => {
            let path = cfg.problem_file.as_deref().expect("validated");
            let spec: QuadraticProblemSpec = config::read_json(path)?;
            Instance {
                problem: spec.build()?,
                initial: None,
            }
        }
    })
}

#[derive(Serialize)]
struct SolveSummary {
    problem: ProblemKind,
    variant: &'static str,
    status: &'static str,
    converged: bool,
    certified: bool,
    /// Terminal residuals of the stationarity check.
    residuals: StationarityVerdict,
    outer_iterations: usize,
    total_inner_iterations: usize,
    total_nlp_iterations: usize,
    trial_nlp_iterations: usize,
    init_nlp_iterations: usize,
    accepted_accelerations: usize,
    objective: f64,
    final_penalty: f64,
}

const OUTER_HEADER: &str = "k,inner,z_norm,lambda_min,lambda_max,beta,b,branch,d1,d2,d3,d4,d5,d6,ok,\
L_initial,L_max,L_min,L_plain_min,lower_bound,increase_scale,accepted_increase,accepted_steps,restarts,h_inv_frobenius_max";

fn outer_csv(log: &IterationLog) -> String {
    let mut s = format!("{OUTER_HEADER}\n");
    for o in &log.outer {
        let v = &o.verdict;
        let branch = match o.branch {
            Some(b) => format!("{b:?}").to_lowercase(),
            None => String::new(),
        };
        let lower = o
            .lower_bound
            .map(|b| format!("{b:.12e}"))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},\
             {:.12e},{:.12e},{:.12e},{:.12e},{},{:.6e},{:.6e},{},{},{:.6e}",
            o.k,
            o.inner_iterations,
            o.z_norm,
            o.lambda_min,
            o.lambda_max,
            o.beta,
            o.barrier,
            branch,
            v.d1,
            v.d2,
            v.d3,
            v.d4,
            v.d5,
            v.d6,
            u8::from(v.ok),
            o.lagrangian_initial,
            o.lagrangian_max,
            o.lagrangian_min,
            o.plain_lagrangian_min,
            lower,
            o.increase_scale,
            o.accepted_increase,
            o.accepted_steps,
            o.restarts,
            o.h_inv_frobenius_max
        );
    }
    s
}

fn solution_csv(x: &[DVector<f64>]) -> String {
    let mut s = String::from("agent,index,value\n");
    for (i, xi) in x.iter().enumerate() {
        for (j, v) in xi.iter().enumerate() {
            let _ = writeln!(s, "{i},{j},{v:.12e}");
        }
    }
    s
}

/// Lagrangian and residual traces against the running inner step.
fn traces(title: &str, log: &IterationLog) -> Chart {
    let step = |f: fn(&ellada_core::driver::InnerRecord) -> f64| -> Vec<(f64, f64)> {
        log.inner
            .iter()
            .enumerate()
            .map(|(j, r)| (j as f64, f(r)))
            .collect()
    };
    let lagrangian = Panel {
        title: "barrier augmented Lagrangian".into(),
        x_label: "inner iteration".into(),
        y_label: "L_b".into(),
        series: vec![Series {
            label: "L_b".into(),
            points: step(|r| r.lagrangian),
        }],
        log_y: false,
    };
    let residuals = Panel {
        title: "inner residuals".into(),
        x_label: "inner iteration".into(),
        y_label: "residual".into(),
        series: vec![
            Series {
                label: "eps1".into(),
                points: step(|r| r.eps1),
            },
            Series {
                label: "eps2".into(),
                points: step(|r| r.eps2),
            },
            Series {
                label: "eps3".into(),
                points: step(|r| r.eps3),
            },
        ],
        log_y: true,
    };
    plot::line_chart(title, &[lagrangian, residuals], 2)
}

fn write_solve_logs(dir: &Path, prefix: &str, sol: &Solution) -> Result<(), CliError> {
    write(dir, &format!("{prefix}iterations.csv"), sol.log.to_csv())?;
    write(dir, &format!("{prefix}outer.csv"), outer_csv(&sol.log))?;
    Ok(())
}

pub fn solve(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let inst = instance(cfg)?;
    let opts = RunOptions {
        initial: inst.initial,
        transport: cfg.transport,
        mode: cfg.mode,
    };
    let (sol, capped) = match run(&inst.problem, &cfg.run_spec(), &opts) {
        Ok(sol) => (sol, None),
        Err(SolveError::OuterCapExceeded { cap, partial }) => (*partial, Some(cap)),
        Err(e) => return Err(e.into()),
    };
    let certified = sol.converged && sol.certificate.ok;
    let status = match (capped, certified) {
        (Some(_), _) => "outer_cap_exceeded",
        (None, true) => "certified",
        (None, false) => "not_certified",
    };
    write_solve_logs(&cfg.out, "", &sol)?;
    write(&cfg.out, "solution.csv", solution_csv(&sol.x))?;
    let summary = SolveSummary {
        problem: cfg.problem,
        variant: sol.variant.name(),
        status,
        converged: sol.converged,
        certified,
        residuals: sol.certificate,
        outer_iterations: sol.log.outer.len(),
        total_inner_iterations: sol.total_inner(),
        total_nlp_iterations: sol.total_nlp_iterations(),
        trial_nlp_iterations: sol.log.inner.iter().map(|r| r.trial_nlp_iters).sum(),
        init_nlp_iterations: sol.init_nlp_iterations,
        accepted_accelerations: sol.log.inner.iter().filter(|r| r.accel_accepted).count(),
        objective: sol.state.objective,
        final_penalty: sol.outer.beta,
    };
    write(&cfg.out, "summary.json", to_json(&summary))?;
    plot::save(
        &traces(&format!("{} traces", sol.variant.name()), &sol.log),
        &cfg.out.join("traces"),
        cfg.plot,
    )?;
    Ok(match capped {
        Some(cap) => Outcome::Stopped(format!(
            "outer iteration cap of {cap} reached; partial log written"
        )),
        None if !certified => {
            Outcome::Stopped("finished without a stationarity certificate".into())
        }
        None => Outcome::Complete,
    })
}

#[derive(Serialize)]
struct ControllerSummary {
    controller: ControllerKind,
    samples: usize,
    quadratic_cost: f64,
    ultimate_deviation: f64,
    final_levels: [f64; 4],
    total_solve_iterations: usize,
    /// Totals over the distributed solves (distributed controller only).
    distributed_outer: usize,
    distributed_inner: usize,
    distributed_nlp_iterations: usize,
    failure: Option<String>,
}

fn comparison(cfg: &RunConfig, logs: &[ClosedLoopLog]) -> Chart {
    let hs = cfg.tank.ocp.setpoint(&cfg.tank.model);
    let end = logs
        .iter()
        .filter_map(|l| l.records.last())
        .map(|r| r.t)
        .fold(0.0, f64::max);
    let panel = |title: String,
                 unit: &str,
                 value: &dyn Fn(&ellada_tank::mpc::SampleRecord) -> f64,
                 target: f64| Panel {
        title,
        x_label: "t (s)".into(),
        y_label: unit.into(),
        series: logs
            .iter()
            .map(|l| Series {
                label: l.controller.name().into(),
                points: l.records.iter().map(|r| (r.t, value(r))).collect(),
            })
            .chain(std::iter::once(Series {
                label: "setpoint".into(),
                points: vec![(0.0, target), (end, target)],
            }))
            .collect(),
        log_y: false,
    };
    let mut panels: Vec<Panel> = (0..4)
        .map(|i| {
            panel(
                format!("h{}", i + 1),
                "level (cm)",
                &move |r| r.levels[i],
                hs[i],
            )
        })
        .collect();
    for p in 0..2 {
        let target = cfg.tank.ocp.setpoint_input[p];
        panels.push(panel(
            format!("v{}", p + 1),
            "input (V)",
            &move |r| r.inputs[p],
            target,
        ));
    }
    plot::line_chart("Closed-loop trajectories", &panels, 3)
}

fn effort(cfg: &RunConfig, logs: &[ClosedLoopLog]) -> Vec<Chart> {
    let names: Vec<String> = logs
        .iter()
        .map(|l| l.controller.name().to_string())
        .collect();
    let mean = |l: &ClosedLoopLog, f: &dyn Fn(&ellada_tank::mpc::SampleRecord) -> f64| {
        l.records.iter().map(f).sum::<f64>() / l.records.len().max(1) as f64
    };
    let iters: Vec<f64> = logs
        .iter()
        .map(|l| mean(l, &|r| r.solve_iters as f64))
        .collect();
    let mut charts = vec![plot::bar_chart(
        "Solver work per sample",
        "Newton steps / inner iterations",
        &names,
        &[("iterations".into(), iters)],
    )];
    if cfg.tank.record_time {
        let ms: Vec<f64> = logs
            .iter()
            .map(|l| mean(l, &|r| 1e3 * r.solve_time))
            .collect();
        charts.push(plot::bar_chart(
            "Solve time per sample",
            "mean time (ms)",
            &names,
            &[("time".into(), ms)],
        ));
    }
    charts
}

pub fn closed_loop(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let scenario = cfg.scenario();
    let logs: Vec<ClosedLoopLog> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .tank
            .controllers
            .iter()
            .map(|&kind| {
                let sc = &scenario;
                s.spawn(move || simulate(sc, kind))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("controller thread panicked"))
            .collect()
    });

    let (model, ocp) = (&cfg.tank.model, &cfg.tank.ocp);
    let mut summaries = Vec::new();
    for log in &logs {
        write(
            &cfg.out,
            &format!("trajectory_{}.csv", log.controller.name()),
            log.to_csv(),
        )?;
        summaries.push(ControllerSummary {
            controller: log.controller,
            samples: log.records.len(),
            quadratic_cost: log.quadratic_cost(model, ocp),
            ultimate_deviation: log.ultimate_deviation(model, ocp),
            final_levels: log.final_levels,
            total_solve_iterations: log.records.iter().map(|r| r.solve_iters).sum(),
            distributed_outer: log.distributed.iter().map(|d| d.outer).sum(),
            distributed_inner: log.distributed.iter().map(|d| d.inner).sum(),
            distributed_nlp_iterations: log.distributed.iter().map(|d| d.nlp_iterations).sum(),
            failure: log.failure.clone(),
        });
    }
    write(&cfg.out, "summary.json", to_json(&summaries))?;

    // the distributed controller's first solve, logged in full
    let mut first = None;
    if cfg.tank.controllers.contains(&ControllerKind::Distributed) {
        let inst = instance(&RunConfig {
            problem: ProblemKind::Tank,
            problem_file: None,
            ..cfg.clone()
        })?;
        let opts = RunOptions {
            initial: inst.initial,
            transport: cfg.transport,
            mode: cfg.mode,
        };
        match run(&inst.problem, &cfg.run_spec(), &opts) {
            Ok(sol) => first = Some(sol),
            Err(SolveError::OuterCapExceeded { partial, .. }) => first = Some(*partial),
            // the closed-loop log already records this failure
            Err(_) => {}
        }
    }
    if let Some(sol) = &first {
        write_solve_logs(&cfg.out, "first_solve_", sol)?;
    }

    let mut charts = vec![comparison(cfg, &logs)];
    if let Some(sol) = &first {
        charts.push(traces(
            &format!("First distributed solve ({})", sol.variant.name()),
            &sol.log,
        ));
    }
    charts.extend(effort(cfg, &logs));
    plot::save(
        &Chart::stack(&charts),
        &cfg.out.join("comparison"),
        cfg.plot,
    )?;

    let failed: Vec<String> = logs
        .iter()
        .filter_map(|l| {
            l.failure
                .as_ref()
                .map(|f| format!("{} failed: {f}", l.controller.name()))
        })
        .collect();
    Ok(if failed.is_empty() {
        Outcome::Complete
    } else {
        Outcome::Stopped(failed.join("; "))
    })
}
