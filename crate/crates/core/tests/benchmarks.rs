use jump_smp::benchmarks::*;
use jump_smp::forward::{estimate_cost, solve_with_feedback, Ensemble};
use jump_smp::problem::{validate, FeedbackControl, LatticeSpec};

#[test]
fn every_instance_passes_validation() {
    for (name, _) in list_benchmarks() {
        let b = benchmark(name).unwrap();
        let report = validate(&b.problem, &LatticeSpec::default());
        assert!(report.passed(), "{name}: {:?}", report.clauses.iter().filter(|c| !c.pass).collect::<Vec<_>>());
    }
}

#[test]
fn registry_contains_required_instances_and_rejects_unknown() {
    let names: Vec<&str> = list_benchmarks().iter().map(|b| b.0).collect();
    for n in ["lq_jump", "bangbang", "deterministic_adjoint"] {
        assert!(names.contains(&n));
    }
    assert!(benchmark("nope").is_err());
}

/// Stored reference costs against an independent run with the stored path count.
#[test]
fn reference_costs_reproduce() {
    for name in ["lq_jump", "lq_jump_mp", "bangbang"] {
        let b = benchmark(name).unwrap();
        let ens = Ensemble::new(b.oracle.seed ^ 0x5555, b.oracle.paths, b.oracle.base_steps);
        let c = estimate_cost(&b.problem, &b.reference_control, &ens).unwrap();
        let se = (c.se.powi(2) + b.reference_cost.se.powi(2)).sqrt();
        assert!((c.mean - b.reference_cost.mean).abs() <= 3.0 * se, "{name}: {c:?} vs {:?}", b.reference_cost);
    }
}

#[test]
fn deterministic_adjoint_cost_matches_hand_value() {
    // u = 0.2: E X_t = 0.2t, so J = 0.5·0.04 + ∫0.2t dt + G·0.2.
    let b = deterministic_adjoint(1.5).unwrap();
    assert!((b.reference_cost.mean - (0.02 + 0.1 + 0.2 * 1.5)).abs() < 1e-15);
    let c = estimate_cost(&b.problem, &b.reference_control, &Ensemble::new(4, 20_000, 64)).unwrap();
    assert!(c.within(b.reference_cost.mean, 3.0), "{c:?}");
}

#[test]
fn stationary_riccati_cost_is_s_x0_squared() {
    let p = lq_jump_mp_params().unwrap();
    let b = lq_jump_mp().unwrap();
    let exact = p.gt * p.x0 * p.x0;
    // Euler bias at 256 steps is O(Δt).
    let dt = p.horizon / b.oracle.base_steps as f64;
    assert!((b.reference_cost.mean - exact).abs() <= 3.0 * b.reference_cost.se + dt, "{:?} vs {exact}", b.reference_cost);
}

#[test]
fn bangbang_reference_is_locally_optimal() {
    let b = bangbang(BangBang::default()).unwrap();
    let FeedbackControl::Threshold { theta, .. } = b.reference_control else { panic!("threshold rule expected") };
    assert_eq!(theta, 0.0);
    let ens = Ensemble::new(31, 20_000, 128);
    let at = estimate_cost(&b.problem, &threshold_policy(theta), &ens).unwrap().mean;
    for shifted in [theta - 0.2, theta + 0.2] {
        let c = estimate_cost(&b.problem, &threshold_policy(shifted), &ens).unwrap().mean;
        assert!(c >= at, "cost at {shifted}: {c} < {at}");
    }
}

#[test]
fn control_without_effect_leaves_state_unchanged() {
    let params = LqParams { b: 0.0, d: 0.0, eta: 0.0, ..LqParams::default() };
    let problem = params.problem("flat").unwrap();
    let ens = Ensemble::new(8, 200, 64);
    let base = ens.map(&problem, |_, n| Ok(solve_with_feedback(&problem, &FeedbackControl::linear(0.0), n)?.0)).unwrap();
    for k in [-1.0, 0.5, 2.0] {
        let other = ens.map(&problem, |_, n| Ok(solve_with_feedback(&problem, &FeedbackControl::linear(k), n)?.0)).unwrap();
        assert_eq!(base, other);
    }
    // Only r·u² depends on the gain, so u ≡ 0 is optimal.
    let c0 = estimate_cost(&problem, &FeedbackControl::linear(0.0), &ens).unwrap().mean;
    for k in [-0.5, 0.5] {
        assert!(estimate_cost(&problem, &FeedbackControl::linear(k), &ens).unwrap().mean > c0);
    }
}

#[test]
fn diffusion_lq_riccati_beats_constant_gains() {
    let params = LqParams { gamma: 0.0, eta: 0.0, rate: 0.0, ..LqParams::default() };
    let problem = params.problem("diffusion_lq").unwrap();
    let ens = Ensemble::new(12, 10_000, 128);
    let riccati = estimate_cost(&problem, &params.riccati_feedback(512).unwrap(), &ens).unwrap();
    let (kappa, best_const) = gain_search(&problem, &ens, 0.0, 3.0, 1e-3).unwrap();
    assert!(riccati.mean <= best_const.mean + 1e-9, "Riccati {riccati:?} vs constant {kappa}: {best_const:?}");
    // Non-default parameters go through the search oracle.
    let b = lq_jump(params).unwrap();
    let FeedbackControl::Linear { gain, .. } = b.reference_control else { panic!() };
    assert!((gain - kappa).abs() < 0.2, "{gain} vs {kappa}");
}

#[test]
fn invalid_lq_parameters_rejected() {
    assert!(lq_jump(LqParams { r: 0.0, ..LqParams::default() }).is_err());
    assert!(lq_jump(LqParams { qf: -1.0, ..LqParams::default() }).is_err());
    assert!(lq_jump(LqParams { gt: -1.0, ..LqParams::default() }).is_err());
}
