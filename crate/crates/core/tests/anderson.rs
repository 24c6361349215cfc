use ellada_core::anderson::{
    batch_inverse, lagrangian_increase, lagrangian_scale, regularize_theta, zeta, AndersonParams,
    AndersonState, IncreaseForm, SecantOutcome,
};
use ellada_core::coordinator::{augmented_lagrangian, split_w, stack_w, IterateState, OuterState};
use ellada_core::testkit;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn unregularized(memory: usize) -> AndersonParams {
    AndersonParams {
        memory,
        theta_threshold: 0.0,
        restart_threshold: 1e-3,
        ..AndersonParams::default()
    }
}

/// `m` secants of a linear residual map `I + 0.3 R`.
fn secant_batch(seed: u64, n: usize, m: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut rng = testkit::rng(seed);
    let jac = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
    let dw: Vec<DVector<f64>> = (0..m)
        .map(|_| testkit::random_vec(&mut rng, n, 1.0))
        .collect();
    let dh = dw.iter().map(|d| &jac * d).collect();
    (dw, dh)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn incremental_inverse_matches_batch_formula(seed in any::<u64>(), n in 2usize..12, m_frac in 0.0f64..1.0) {
        let m = 1 + ((n.min(10) - 1) as f64 * m_frac) as usize;
        let (dw, dh) = secant_batch(seed, n, m);
        let params = unregularized(10);
        let mut state = AndersonState::new(n);
        for (w, h) in dw.iter().zip(&dh) {
            prop_assert_eq!(state.push_secant(w, h, &params), SecantOutcome::Updated);
        }
        prop_assert_eq!(state.restarts(), 0);
        let batch = batch_inverse(&dw, &dh).expect("full rank");
        let gap = (state.h_inv() - &batch).amax();
        prop_assert!(gap <= 1e-10 * batch.amax().max(1.0), "gap {gap:e}");
    }

    #[test]
    fn secants_in_memory_hold_and_inverse_stays_bounded(seed in any::<u64>(), n in 2usize..8, pushes in 1usize..30) {
        let params = AndersonParams { memory: 4, ..AndersonParams::default() };
        let mut rng = testkit::rng(seed);
        let mut state = AndersonState::new(n);
        for _ in 0..pushes {
            let dw = testkit::random_vec(&mut rng, n, 1.0);
            let dh = testkit::random_vec(&mut rng, n, 1.0);
            state.push_secant(&dw, &dh, &params);
            prop_assert!(state.memory_len() <= params.memory);
            for (w, h) in state.pairs() {
                let err = (state.h_inv() * h - w).amax();
                prop_assert!(err <= 1e-8 * (1.0 + state.h_inv().amax()), "secant error {err:e}");
            }
            // the Frobenius norm bounds the 2-norm
            prop_assert!(state.h_inv().norm().ln() <= params.inverse_bound_ln(n));
        }
        prop_assert!(state.max_frobenius().ln() <= params.inverse_bound_ln(n));
    }
}

#[test]
fn theta_examples() {
    assert_eq!(regularize_theta(0.0, 0.5), 0.5);
    assert_eq!(regularize_theta(0.9, 0.5), 0.0);
    assert!((regularize_theta(-0.25, 0.5) + 0.2).abs() < 1e-15);
    assert_eq!(regularize_theta(-0.9, 0.5), 0.0);
}

#[test]
fn identity_secant_keeps_identity() {
    let mut state = AndersonState::new(3);
    let d = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    state.push_secant(&d, &d, &AndersonParams::default());
    assert!((state.h_inv() - DMatrix::identity(3, 3)).amax() < 1e-15);
}

#[test]
fn restart_on_overflowing_memory() {
    let params = AndersonParams {
        memory: 3,
        ..AndersonParams::default()
    };
    let (dw, dh) = secant_batch(9, 6, 4);
    let mut state = AndersonState::new(6);
    for k in 0..3 {
        assert_eq!(
            state.push_secant(&dw[k], &dh[k], &params),
            SecantOutcome::Updated
        );
    }
    assert_eq!(state.memory_len(), 3);
    assert_eq!(
        state.push_secant(&dw[3], &dh[3], &params),
        SecantOutcome::Restarted
    );
    // memory cleared, then the overflowing secant is kept as the first one
    assert_eq!(state.restarts(), 1);
    assert_eq!(state.memory_len(), 1);
    let fresh = batch_inverse(
        &dw[3..],
        &state.pairs()[0..1]
            .iter()
            .map(|p| p.1.clone())
            .collect::<Vec<_>>(),
    );
    assert!((state.h_inv() - fresh.unwrap()).amax() < 1e-12);
}

#[test]
fn restart_on_dependent_secant() {
    let params = AndersonParams::default();
    let mut state = AndersonState::new(3);
    let d = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    state.push_secant(&d, &(&d * 2.0), &params);
    let nearly = DVector::from_vec(vec![1.0, 0.01, 0.0]);
    assert_eq!(
        state.push_secant(&nearly, &(&nearly * 2.0), &params),
        SecantOutcome::Restarted
    );
    assert_eq!(
        state.push_secant(&DVector::zeros(3), &d, &params),
        SecantOutcome::Skipped
    );
}

#[test]
fn linear_toy_map_is_solved_by_secants() {
    // h0(w) = w / 2: residual g(w) = w - h0(w) = w / 2, fixed point 0
    let h0 = |w: &DVector<f64>| w * 0.5;
    let params = AndersonParams::default();
    let mut state = AndersonState::new(2);
    let mut w = DVector::from_vec(vec![4.0, -1.0]);
    assert_eq!(state.propose(&w, &h0(&w)), h0(&w));
    for step in [
        DVector::from_vec(vec![1.0, 0.0]),
        DVector::from_vec(vec![0.0, 1.0]),
    ] {
        let next = &w + &step;
        let dh = (&next - h0(&next)) - (&w - h0(&w));
        state.push_secant(&(&next - &w), &dh, &params);
        w = next;
    }
    assert_eq!(state.propose(&w, &h0(&w)), DVector::zeros(2));
    assert_eq!(
        state.propose(&DVector::zeros(2), &DVector::zeros(2)),
        DVector::zeros(2)
    );
}

#[test]
fn scale_examples() {
    let c = testkit::random_problem(11, 2, 1).assemble().unwrap();
    let (nb, m) = (c.num_xbar(), c.rows());
    let w0 = DVector::zeros(nb + m);
    assert_eq!(lagrangian_scale(&c, &w0, &w0, 1.0), 0.0);
    // ||B dxbar||^2 = 2 ||dxbar||^2 = 4 and ||dz||^2 = 4
    let mut dx = DVector::zeros(nb);
    dx[0] = 2f64.sqrt();
    let mut dz = DVector::zeros(m);
    dz[0] = 2.0;
    let w1 = stack_w(&dx, &dz);
    assert!((lagrangian_scale(&c, &w0, &w1, 1.0) - 6.0).abs() < 1e-14);
    assert!((lagrangian_scale(&c, &w0, &w1, 2.0) - 12.0).abs() < 1e-14);
}

#[test]
fn exact_increase_matches_lagrangian_difference() {
    for seed in 0..20 {
        let mut rng = testkit::rng(seed);
        let c = testkit::random_problem(seed, 3, 4).assemble().unwrap();
        let (nb, m) = (c.num_xbar(), c.rows());
        let mut outer = OuterState::new(m, rng.random_range(0.5..4.0), 0.0, (-10.0, 10.0));
        outer.lambda = testkit::random_vec(&mut rng, m, 3.0);
        let ax = &c.a * testkit::random_vec(&mut rng, c.num_x(), 1.0);
        let w = testkit::random_vec(&mut rng, nb + m, 1.0);
        let cand = testkit::random_vec(&mut rng, nb + m, 1.0);
        let state_at = |v: &DVector<f64>| {
            let (x_bar, z) = split_w(v, nb);
            let y = -(&outer.lambda + &z * outer.beta);
            IterateState {
                ax: ax.clone(),
                x_bar,
                z,
                y,
                objective: 0.0,
                log_barrier: 0.0,
            }
        };
        let direct = augmented_lagrangian(&c, &state_at(&cand), &outer, false)
            - augmented_lagrangian(&c, &state_at(&w), &outer, false);
        let exact = lagrangian_increase(
            &c,
            &ax,
            &w,
            &cand,
            &outer.lambda,
            outer.beta,
            outer.rho,
            IncreaseForm::Exact,
        );
        assert!(
            (direct - exact).abs() < 1e-10 * direct.abs().max(1.0),
            "{direct} vs {exact}"
        );

        // the candidate-slack form swaps the subtracted residual to use the candidate slack
        let (xb, _) = split_w(&w, nb);
        let (_, zc) = split_w(&cand, nb);
        let (_, z) = split_w(&w, nb);
        let swap = 0.5
            * outer.rho
            * ((&ax + &c.b * &xb + &z).norm_squared() - (&ax + &c.b * &xb + &zc).norm_squared());
        let candidate = lagrangian_increase(
            &c,
            &ax,
            &w,
            &cand,
            &outer.lambda,
            outer.beta,
            outer.rho,
            IncreaseForm::CandidateSlack,
        );
        assert!((candidate - (exact + swap)).abs() < 1e-10 * candidate.abs().max(1.0));
    }
}

#[test]
fn safeguard_examples() {
    let params = AndersonParams::default();
    let mut state = AndersonState::new(2);
    state.set_scale(0.0);
    assert!(!state.safeguard(1e-12, 1e-12, 1.0, &params).accepted);
    assert!(state.safeguard(0.0, 0.0, 1.0, &params).accepted);

    let mut state = AndersonState::new(2);
    let l0 = 8.0;
    state.set_scale(l0);
    for _ in 0..3 {
        assert!(state.safeguard(0.0, 0.0, 2.0, &params).accepted);
    }
    let d = state.safeguard(f64::INFINITY, 0.0, 2.0, &params);
    assert!(!d.accepted);
    assert!((d.increase_budget - l0 * params.increase_scale / 16.0).abs() < 1e-15);
    assert!((d.step_budget - l0 / 2.0 * params.step_scale / 2.0).abs() < 1e-15);
    assert_eq!(state.accepted(), 3);
}

#[test]
fn cumulative_budget_is_zeta_bounded() {
    let params = AndersonParams::default();
    let mut state = AndersonState::new(1);
    state.set_scale(1.0);
    let mut total = 0.0;
    for _ in 0..10_000 {
        let budget = state
            .safeguard(f64::INFINITY, 0.0, 1.0, &params)
            .increase_budget;
        assert!(state.safeguard(budget, 0.0, 1.0, &params).accepted);
        total += budget;
    }
    assert!(total <= params.increase_budget_factor());
    assert!((zeta(2.0) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
}
