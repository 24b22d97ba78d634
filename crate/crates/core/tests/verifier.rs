mod common;

use common::random_net;
use lograsm::certificate::{
    log_expectation_upper, pointwise_rasm_check, rounding_pad, CellChecker, CertMode, Condition, Spec, Status,
};
use lograsm::fixtures::{toy_certificate, toy_policy};
use lograsm::interval::IntervalBox;
use lograsm::system::{benchmark, contracting_toy, make_partition};
use lograsm::verifier::{initial_grid, refine_cell, verify, GridCell, Verdict, VerifierConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn covered(cells: &[GridCell], x: &[f64]) -> bool {
    cells.iter().any(|c| c.cell().contains(x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn initial_grid_covers_the_space(seed in any::<u64>(), d in 1usize..=3, tau in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..0.0)).collect();
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.05..2.0)).collect();
        let space = IntervalBox::from_bounds(&lo, &hi).unwrap();
        let cells = initial_grid(&space, tau, 1_000_000).unwrap();
        for c in &cells {
            prop_assert!(space.contains(&c.center));
        }
        for _ in 0..200 {
            prop_assert!(covered(&cells, &space.sample(&mut rng)));
        }
        prop_assert!(covered(&cells, &lo) && covered(&cells, &hi));
    }

    #[test]
    fn refinement_covers_the_parent_with_smaller_cells(seed in any::<u64>(), d in 1usize..=3, frac in 0.01f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parent = GridCell { center: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(), tau: 0.3, generation: 2 };
        let kids = refine_cell(&parent, frac * parent.tau).unwrap();
        for k in &kids {
            prop_assert!(k.tau <= frac * parent.tau + 1e-15 && k.tau <= parent.tau / 2.0 + 1e-15);
            prop_assert_eq!(k.generation, 3);
            prop_assert!(parent.cell().contains_box(&IntervalBox::around(&k.center, k.tau / d as f64 * (1.0 - 1e-9))));
        }
        let pc = parent.cell();
        for _ in 0..100 {
            prop_assert!(covered(&kids, &pc.sample(&mut rng)));
        }
    }

    #[test]
    fn smaller_mesh_never_worsens_a_cell(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = benchmark("linear-sys").unwrap();
        let v = random_net(&[2, 6, 1], 1.0, &mut rng);
        let pi = random_net(&[2, 4, 1], 0.5, &mut rng);
        let noise = make_partition(2, 3).unwrap();
        let spec = Spec::new(0.9, CertMode::LogRasm).unwrap();
        let checker = CellChecker::new(&v, &pi, &sys, &noise, spec, 3.0).unwrap();
        let x = sys.state_space.sample(&mut rng);
        let coarse = checker.check_cell(&x, 0.2).unwrap();
        let fine = checker.check_cell(&x, 0.05).unwrap();
        for f in &fine.verdicts {
            if let Some(c) = coarse.verdicts.iter().find(|c| c.condition == f.condition) {
                prop_assert!(f.margin >= c.margin - 1e-12);
            }
        }
    }
}

#[test]
fn refinement_rejects_meshes_at_or_above_the_parent() {
    let parent = GridCell { center: vec![0.0], tau: 0.1, generation: 0 };
    assert!(refine_cell(&parent, 0.1).is_err());
    assert!(refine_cell(&parent, 0.0).is_err());
}

#[test]
fn expectation_upper_bounds_a_monte_carlo_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (name, mode) in [("linear-sys", CertMode::LogRasm), ("pendulum", CertMode::Rasm), ("triple-integrator", CertMode::LogRasm)] {
        let sys = benchmark(name).unwrap();
        let d = sys.state_dim();
        let v = random_net(&[d, 8, 1], 1.0, &mut rng);
        let pi = random_net(&[d, 8, sys.action_dim()], 0.5, &mut rng);
        let noise = make_partition(sys.noise_dim, 6).unwrap();
        for _ in 0..10 {
            let x = sys.state_space.sample(&mut rng);
            // The verifier pads the bound before use; successors that all clamp to one state
            // give a zero standard error, so the comparison is down to rounding.
            let raw = log_expectation_upper(&v, &pi, &sys, &noise, mode, &x).unwrap();
            let ub = raw + rounding_pad(raw);
            let mc = pointwise_rasm_check(&v, &pi, &sys, mode, &x, 20_000, rng.random()).unwrap();
            assert!(ub >= mc.estimate - 4.0 * mc.std_err, "{name}: {ub} < {}", mc.estimate);
        }
    }
}

fn toy_outcome(threads: usize) -> lograsm::verifier::VerifierOutcome {
    let sys = contracting_toy(0.01).unwrap();
    let spec = Spec::new(0.9, CertMode::LogRasm).unwrap();
    let noise = sys.default_noise().unwrap();
    let cfg = VerifierConfig::for_system(&sys);
    let (v, pi) = (toy_certificate(), toy_policy());
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| verify(&v, &pi, &sys, &noise, spec, &cfg).unwrap())
}

#[test]
fn verification_does_not_depend_on_thread_count() {
    let a = toy_outcome(1);
    let b = toy_outcome(3);
    assert_eq!(a.verdict, Verdict::Verified);
    assert_eq!(a.verdict, b.verdict);
    assert_eq!(a.records, b.records);
    assert_eq!(a.stats.cells_checked, b.stats.cells_checked);
}

#[test]
fn verified_fixture_decreases_in_simulation() {
    let sys = contracting_toy(0.01).unwrap();
    let spec = Spec::new(0.9, CertMode::LogRasm).unwrap();
    let (v, pi) = (toy_certificate(), toy_policy());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = sys.state_space.sample(&mut rng);
        let vx = v.eval_scalar(&x).unwrap();
        if sys.target.contains(&x) || vx >= spec.threshold {
            continue;
        }
        let r = pointwise_rasm_check(&v, &pi, &sys, CertMode::LogRasm, &x, 2_000, 9).unwrap();
        assert!(r.decrease() > 0.0, "x = {x:?}: {r:?}");
    }
}

#[test]
fn broken_certificate_yields_counterexamples() {
    // V = 6 - 10|x| is positive on the initial set and far below the threshold near the walls.
    let sys = contracting_toy(0.01).unwrap();
    let spec = Spec::new(0.9, CertMode::LogRasm).unwrap();
    let noise = sys.default_noise().unwrap();
    let mut layers = toy_certificate().layers().to_vec();
    let last = layers.last_mut().unwrap();
    last.weights.mapv_inplace(|w| -w);
    last.bias[0] = 6.0;
    let v = lograsm::nn::Network::new(layers).unwrap();
    let out = verify(&v, &toy_policy(), &sys, &noise, spec, &VerifierConfig::for_system(&sys)).unwrap();
    assert_eq!(out.verdict, Verdict::Counterexamples);
    assert!(!out.counterexamples.init.is_empty());
    assert!(!out.counterexamples.unsafe_set.is_empty());
    assert!(out.records.iter().any(|r| r.status == Status::HardViolation && r.cond == Condition::Unsafe));
    for x in &out.counterexamples.unsafe_set {
        assert!(sys.unsafe_set.intersects(&IntervalBox::around(x, 0.01)));
    }
}
