use proptest::prelude::*;

use jump_smp::benchmarks::{lq_jump, nonlinear_jump, LqParams};
use jump_smp::calculus::*;
use jump_smp::driver::{refine_grid, sample_noise, MarkSpace};
use jump_smp::forward::{solve_with_feedback, Ensemble};
use jump_smp::maximum_principle::deficiency;
use jump_smp::rng::SeedSpec;
use jump_smp::variation::{naive_spike_control, spike_control, SpikeSpec};

fn marks() -> MarkSpace {
    MarkSpace::new([("a", 1.5), ("b", 2.5)]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn refined_grid_is_sorted_and_holds_every_jump(
        steps in 1usize..40,
        raw in prop::collection::btree_set(1u32..10_000, 0..12),
    ) {
        let mesh: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        let jumps: Vec<(f64, usize)> = raw.iter().map(|&r| (r as f64 / 10_000.0, (r % 2) as usize)).collect();
        let g = refine_grid(&mesh, &jumps).unwrap();
        prop_assert!(g.times().windows(2).all(|w| w[0] < w[1]));
        for &(t, e) in &jumps {
            let i = g.index_of(t).unwrap();
            prop_assert_eq!(g.mark_at(i), Some(e));
        }
        prop_assert_eq!(g.marks().iter().filter(|m| m.is_some()).count(), jumps.len());
        prop_assert_eq!(g.base_indices().len(), steps + 1);
    }

    #[test]
    fn sampled_noise_is_reproducible_from_its_seed(master in any::<u64>(), path in 0u64..1000) {
        let a = sample_noise(SeedSpec::new(master, path), &marks(), 1.0, 16).unwrap();
        let b = sample_noise(SeedSpec::new(master, path), &marks(), 1.0, 16).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.brownian_increments.len(), a.grid.intervals());
        for ev in &a.jump_events {
            prop_assert_eq!(a.grid.time(ev.index), ev.time);
        }
    }

    #[test]
    fn bracket_is_jump_integral_of_square(seed in any::<u64>(), c0 in -2.0f64..2.0, c1 in -2.0f64..2.0) {
        let noise = sample_noise(SeedSpec::new(seed, 0), &marks(), 1.0, 32).unwrap();
        let h = MarkedIntegrand::from_fn(&noise.grid, 2, |i, e| c0 + c1 * noise.grid.time(i) * (e as f64 + 1.0));
        let bracket = bracket_of_jump_integral(&h, &noise).unwrap();
        let squared = jump_integral_n(&h.map(|v| v * v), &noise).unwrap();
        for (a, b) in bracket.values.iter().zip(&squared.values) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn integrand_vanishing_off_the_jump_graph_has_zero_compensated_integral(seed in any::<u64>(), c in -3.0f64..3.0) {
        // H is nonzero at jump nodes only; its predictable version is zero.
        let noise = sample_noise(SeedSpec::new(seed, 1), &marks(), 1.0, 32).unwrap();
        let h = MarkedIntegrand::from_fn(&noise.grid, 2, |i, _| if noise.grid.is_jump(i) { c } else { 0.0 });
        let pred = MarkedIntegrand::constant(&noise.grid, 2, 0.0);
        let comp = compensated_jump_integral(&h, &pred, &noise, &marks()).unwrap();
        let n = jump_integral_n(&h, &noise).unwrap();
        prop_assert_eq!(comp.values, n.values);
        prop_assert!(compensator(&pred, &marks(), &noise.grid).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn graph_excluding_spike_keeps_jump_controls(
        seed in any::<u64>(),
        t_bar in 0.0f64..0.7,
        eps in 0.01f64..0.3,
        v in -2.0f64..2.0,
    ) {
        let b = lq_jump(LqParams::default()).unwrap();
        let noise = Ensemble::new(seed, 1, 32).noise(&b.problem, 0).unwrap();
        let (x, u) = solve_with_feedback(&b.problem, &b.reference_control, &noise).unwrap();
        let spec = SpikeSpec::constant(t_bar, eps, v);
        let excluding = spike_control(&u, &spec, &noise, &x);
        let naive = naive_spike_control(&u, &spec, &noise, &x);
        prop_assert_eq!(&excluding.jump_values, &u.jump_values);
        prop_assert_eq!(&excluding.compensator_values, &u.compensator_values);
        prop_assert_eq!(&excluding.values, &naive.values);
        for i in 0..noise.grid.len() {
            let t = noise.grid.time(i);
            if t < t_bar || t >= t_bar + eps {
                prop_assert_eq!(excluding.values[i], u.values[i]);
                prop_assert_eq!(naive.jump_values[i], u.jump_values[i]);
            }
        }
    }

    #[test]
    fn deficiency_vanishes_at_the_reference_control(
        t in 0.0f64..1.0,
        x in -3.0f64..3.0,
        u in -2.0f64..2.0,
        p in -3.0f64..3.0,
        q in -3.0f64..3.0,
        big_p in -3.0f64..3.0,
    ) {
        for b in [lq_jump(LqParams::default()).unwrap(), nonlinear_jump().unwrap()] {
            prop_assert_eq!(deficiency(&b.problem, t, x, u, u, p, q, big_p), 0.0);
        }
    }
}

#[test]
fn ensemble_output_is_independent_of_pool_size() {
    let b = lq_jump(LqParams::default()).unwrap();
    let ens = Ensemble::new(77, 64, 32);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| ens.map(&b.problem, |_, n| Ok(solve_with_feedback(&b.problem, &b.reference_control, n)?.0)).unwrap())
    };
    assert_eq!(run(1), run(3));
}
