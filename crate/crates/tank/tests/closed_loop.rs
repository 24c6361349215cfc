use nalgebra::Vector2;

use ellada_core::driver::RunSpec;
use ellada_core::runtime::{ExecutionMode, TransportKind};
use ellada_core::schedule::Variant;
use ellada_tank::mpc::{
    closed_loop, solve_distributed, ClosedLoopLog, ControllerKind, MonolithicOptions, Scenario,
};

fn at_rest(steps: usize) -> Scenario {
    let sc = Scenario::default();
    let h = sc.ocp.setpoint(&sc.model);
    Scenario {
        initial: [h[0], h[1], h[2], h[3]],
        steps,
        record_time: false,
        ..sc
    }
}

#[test]
fn every_controller_holds_the_equilibrium() {
    let sc = at_rest(3);
    let v_ss = Vector2::from(sc.ocp.setpoint_input);
    let h_ss = sc.ocp.setpoint(&sc.model);
    for kind in ControllerKind::ALL {
        let log = closed_loop(&sc, kind);
        assert!(log.failure.is_none(), "{kind:?}: {:?}", log.failure);
        assert_eq!(log.records.len(), 3);
        for r in &log.records {
            assert!(
                (Vector2::from(r.inputs) - v_ss).amax() <= 1e-3,
                "{kind:?} {:?}",
                r.inputs
            );
            let dev = (0..4)
                .map(|i| (r.levels[i] - h_ss[i]).abs())
                .fold(0.0, f64::max);
            assert!(dev <= 1e-3, "{kind:?} drifted {dev:e}");
        }
        assert_eq!(
            log.distributed.len(),
            if kind == ControllerKind::Distributed {
                3
            } else {
                0
            }
        );
    }
}

#[test]
fn csv_log_is_complete_and_repeatable() {
    let sc = Scenario {
        steps: 4,
        record_time: false,
        ..Scenario::default()
    };
    let a = closed_loop(&sc, ControllerKind::Decentralized);
    let b = closed_loop(&sc, ControllerKind::Decentralized);
    let csv = a.to_csv();
    assert_eq!(csv, b.to_csv());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ClosedLoopLog::CSV_HEADER);
    assert_eq!(lines.len(), 5);
    for (k, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 9);
        assert_eq!(f[0].parse::<f64>().unwrap(), 10.0 * k as f64);
        assert_eq!(f[8].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn controller_failure_truncates_the_log() {
    let sc = Scenario {
        steps: 5,
        monolithic: MonolithicOptions {
            max_newton: 1,
            ..MonolithicOptions::default()
        },
        ..Scenario::default()
    };
    let log = closed_loop(&sc, ControllerKind::Centralized);
    assert!(log.records.is_empty());
    assert!(log.failure.as_deref().unwrap().starts_with("step 0"));
}

#[test]
fn cost_and_deviation_vanish_at_rest() {
    let sc = at_rest(2);
    let log = closed_loop(&sc, ControllerKind::Centralized);
    assert!(log.quadratic_cost(&sc.model, &sc.ocp) < 1e-8);
    assert!(log.ultimate_deviation(&sc.model, &sc.ocp) < 1e-4);
}

#[test]
fn threaded_distributed_solve_matches_inline() {
    let sc = Scenario::default();
    let h = nalgebra::Vector4::from(sc.initial);
    let spec = RunSpec::equalized(Variant::Ellada);
    let inline = solve_distributed(
        &sc.model,
        &sc.ocp,
        &h,
        &spec,
        TransportKind::Inline,
        ExecutionMode::Synchronous,
    )
    .unwrap();
    let threads = solve_distributed(
        &sc.model,
        &sc.ocp,
        &h,
        &spec,
        TransportKind::Threads,
        ExecutionMode::Synchronous,
    )
    .unwrap();
    assert!(inline.converged && inline.certificate.ok);
    assert_eq!(inline.x, threads.x);
}
