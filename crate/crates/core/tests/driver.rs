use ellada_core::anderson::AndersonParams;
use ellada_core::driver::{run, run_ell, IterationLog, RunOptions, RunSpec, SolverParams};
use ellada_core::nlp::{solve_equality_nlp, AgentEquality, BarrierObjective, NlpOptions};
use ellada_core::quadratic::{
    chain_problem, generated_qp, generated_qp_agents, GeneratedQp, QuadraticAgent,
};
use ellada_core::schedule::{default_schedules, Variant};
use ellada_core::testkit;
use nalgebra::{DMatrix, DVector};

/// Monolithic KKT solve of a chained QP, ignoring the (inactive) boxes.
fn monolithic(agents: &[QuadraticAgent], overlap: usize) -> Vec<DVector<f64>> {
    let n = agents[0].q.len();
    let total = n * agents.len();
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        for r in 0..a.e.nrows() {
            rows.push(((0..n).map(|j| (i * n + j, a.e[(r, j)])).collect(), a.d[r]));
        }
    }
    for i in 1..agents.len() {
        for k in 0..overlap {
            rows.push((
                vec![((i - 1) * n + n - overlap + k, 1.0), (i * n + k, -1.0)],
                0.0,
            ));
        }
    }
    let m = rows.len();
    let mut kkt = DMatrix::zeros(total + m, total + m);
    let mut rhs = DVector::zeros(total + m);
    for (i, a) in agents.iter().enumerate() {
        kkt.view_mut((i * n, i * n), (n, n)).copy_from(&a.p);
        rhs.rows_mut(i * n, n).copy_from(&(-&a.q));
    }
    for (r, (coef, d)) in rows.iter().enumerate() {
        for &(c, v) in coef {
            kkt[(total + r, c)] = v;
            kkt[(c, total + r)] = v;
        }
        rhs[total + r] = *d;
    }
    let sol = kkt.lu().solve(&rhs).unwrap();
    (0..agents.len())
        .map(|i| sol.rows(i * n, n).into_owned())
        .collect()
}

fn max_gap(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v).amax())
        .fold(0.0, f64::max)
}

#[test]
fn ell_matches_monolithic_qp() {
    let cfg = GeneratedQp::default();
    let agents = generated_qp_agents(&cfg, 7).unwrap();
    let reference = monolithic(&agents, cfg.overlap);
    assert!(
        reference.iter().all(|x| x.amax() < 0.5 * cfg.bound),
        "boxes must be inactive"
    );
    let problem = chain_problem(agents, cfg.overlap).unwrap();
    let (mut schedule, _) = default_schedules(Variant::Ell);
    // the default finals only certify a 1e-3 primal residual
    schedule.finals.stationarity = 1e-7;
    schedule.finals.dual = 1e-7;
    schedule.finals.primal = 1e-7;
    let params = SolverParams {
        initial_penalty: 20.0,
        ..SolverParams::default()
    };
    let sol = run_ell(&problem, &params, &schedule).unwrap();
    eprintln!("outer {} inner {}", sol.log.outer.len(), sol.total_inner());
    let gap = max_gap(&sol.x, &reference);
    assert!(gap < 1e-6, "gap {gap:e}");
}

#[test]
fn all_variants_reach_certificate_on_qp() {
    let cfg = GeneratedQp::default();
    let agents = generated_qp_agents(&cfg, 3).unwrap();
    let reference = monolithic(&agents, cfg.overlap);
    let problem = chain_problem(agents, cfg.overlap).unwrap();
    for v in [Variant::Ella, Variant::Ellada] {
        let sol = run(&problem, &RunSpec::defaults(v), &RunOptions::default()).unwrap();
        eprintln!(
            "{v:?}: outer {} inner {} gap {:e}",
            sol.log.outer.len(),
            sol.total_inner(),
            max_gap(&sol.x, &reference)
        );
        assert!(sol.certificate.ok);
    }
}

fn bits(x: &[DVector<f64>]) -> Vec<u64> {
    x.iter()
        .flat_map(|v| v.iter().map(|e| e.to_bits()))
        .collect()
}

#[test]
fn ella_on_the_ell_schedule_is_ell() {
    let problem = generated_qp(&GeneratedQp::default(), 5).unwrap();
    let ell = run(
        &problem,
        &RunSpec::defaults(Variant::Ell),
        &RunOptions::default(),
    )
    .unwrap();
    let (schedule, barrier) = default_schedules(Variant::Ell);
    let spec = RunSpec {
        schedule,
        barrier,
        ..RunSpec::defaults(Variant::Ella)
    };
    let ella = run(&problem, &spec, &RunOptions::default()).unwrap();
    assert_eq!(ella.total_inner(), ell.total_inner());
    assert_eq!(bits(&ella.x), bits(&ell.x));
}

#[test]
fn closed_safeguard_reduces_ellada_to_ella() {
    let problem = generated_qp(&GeneratedQp::default(), 6).unwrap();
    let ella = run(
        &problem,
        &RunSpec::defaults(Variant::Ella),
        &RunOptions::default(),
    )
    .unwrap();
    let spec = RunSpec {
        accel: AndersonParams {
            increase_scale: 0.0,
            step_scale: 0.0,
            ..AndersonParams::default()
        },
        ..RunSpec::defaults(Variant::Ellada)
    };
    let closed = run(&problem, &spec, &RunOptions::default()).unwrap();
    assert!(closed.log.inner.iter().all(|r| !r.accel_accepted));
    assert_eq!(closed.total_inner(), ella.total_inner());
    assert_eq!(bits(&closed.x), bits(&ella.x));
    // the only extra work is the trial solves
    let plain: usize = closed
        .log
        .inner
        .iter()
        .map(|r| r.nlp_iters - r.trial_nlp_iters)
        .sum();
    assert_eq!(plain, ella.total_nlp_iterations());
}

#[test]
fn decoupled_agents_solve_independently() {
    let problem = testkit::random_problem(12, 3, 0);
    let sol = run(
        &problem,
        &RunSpec::defaults(Variant::Ell),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(sol.converged);
    assert_eq!(sol.log.outer.len(), 1);
    for (agent, x) in problem.agents.iter().zip(&sol.x) {
        let obj = BarrierObjective::new(agent.as_ref(), 1e-8, 0.0, vec![], DVector::zeros(0));
        let alone = solve_equality_nlp(
            &agent.interior_point().unwrap(),
            &obj,
            &AgentEquality(agent.as_ref()),
            1e-10,
            1e-10,
            &NlpOptions::default(),
        )
        .unwrap();
        assert!((x - alone.x).amax() < 1e-7);
    }
}

fn assert_log_complete(log: &IterationLog, ell: bool) {
    assert!(!log.inner.is_empty());
    let per_round: usize = log.outer.iter().map(|o| o.inner_iterations).sum();
    assert_eq!(per_round, log.inner.len());
    for rec in &log.inner {
        for v in [
            rec.lagrangian,
            rec.eps1,
            rec.eps2,
            rec.eps3,
            rec.eps4,
            rec.eps5,
            rec.beta,
            rec.barrier,
        ] {
            assert!(v.is_finite());
        }
        assert_eq!(rec.rho, 2.0 * rec.beta);
        assert!(
            rec.dual_identity <= 1e-10,
            "dual identity {:e}",
            rec.dual_identity
        );
        if !rec.accel_accepted {
            assert!(
                rec.link_identity <= 1e-8,
                "link identity {:e}",
                rec.link_identity
            );
            if ell {
                assert!(
                    rec.descent_excess <= 1e-8 * rec.lagrangian.abs().max(1.0),
                    "descent {:e}",
                    rec.descent_excess
                );
            }
        }
    }
    for w in log.outer.windows(2) {
        assert!(w[1].beta >= w[0].beta);
        assert!(w[1].lambda_max <= 10.0 && w[1].lambda_min >= -10.0);
    }
    for o in &log.outer {
        if let Some(lb) = o.lower_bound {
            assert!(
                o.plain_lagrangian_min >= lb - 1e-9 * lb.abs().max(1.0),
                "round {}",
                o.k
            );
        }
    }
    let csv = log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(IterationLog::CSV_HEADER));
    assert_eq!(lines.count(), log.inner.len());
}

#[test]
fn logs_are_complete_and_identities_hold() {
    let problem = generated_qp(&GeneratedQp::default(), 8).unwrap();
    for v in [Variant::Ell, Variant::Ella, Variant::Ellada] {
        let sol = run(&problem, &RunSpec::defaults(v), &RunOptions::default()).unwrap();
        assert_log_complete(&sol.log, v == Variant::Ell);
    }
}

#[test]
fn invalid_specs_are_refused() {
    let problem = generated_qp(&GeneratedQp::default(), 1).unwrap();
    let mut spec = RunSpec::defaults(Variant::Ellada);
    spec.accel.memory = 0;
    assert!(run(&problem, &spec, &RunOptions::default()).is_err());
    let mut spec = RunSpec::defaults(Variant::Ella);
    spec.params.penalty_growth = 1.0;
    assert!(run(&problem, &spec, &RunOptions::default()).is_err());
}
