mod common;

use pitwi::cube;
use pitwi::episode::Inference;
use pitwi::harness::smooth_series;
use pitwi::induction::{generate_masks, grad_log_likelihood, log_likelihood, optimize_weights, OptimizerConfig, Reparameterization};
use pitwi::pattern::{impute, impute_closure, mixture, GateMode, ImputationConfig, PatternLibrary};
use pitwi::world::{Domain, FactSource, Value, VariableId};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gate() -> impl Strategy<Value = GateMode> {
    prop_oneof![Just(GateMode::Consistent), Just(GateMode::Strict)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn mixtures_are_normalised(seed: u64, gate in gate(), p in 0.0..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, gate);
        let world = common::random_world(&mut rng, p);
        for v in world.unknown_vars() {
            let m = mixture(v, &world, &lib).unwrap();
            prop_assert!((m.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(m.probabilities.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn scaling_weights_changes_nothing(seed: u64, c in 1e-6..1e6f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, GateMode::Consistent);
        let world = common::random_world(&mut rng, 0.4);
        let mut scaled = lib.clone();
        scaled.set_weights(&lib.weights().iter().map(|w| w * c).collect::<Vec<_>>()).unwrap();
        for v in world.unknown_vars() {
            let a = mixture(v, &world, &lib).unwrap();
            let b = mixture(v, &world, &scaled).unwrap();
            for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn higher_tau_imputes_a_subset(seed: u64, t1 in 0.5..1.0f64, t2 in 0.5..1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, GateMode::Consistent);
        let world = common::random_world(&mut rng, 0.4);
        for v in world.unknown_vars() {
            let at = |tau| impute(v, &mut world.clone(), &lib, &ImputationConfig::new(tau).unwrap()).unwrap();
            if let Some(fact) = at(hi) {
                prop_assert_eq!(at(lo), Some(fact));
            }
        }
    }

    #[test]
    fn strict_active_sets_are_within_consistent_ones(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lib = common::random_library(&mut rng, GateMode::Consistent);
        let world = common::random_world(&mut rng, 0.6);
        for v in world.unknown_vars().collect::<Vec<_>>() {
            lib.set_gate_mode(GateMode::Consistent);
            let loose = pitwi::pattern::active_set(v, &world, &lib).unwrap();
            lib.set_gate_mode(GateMode::Strict);
            let strict = pitwi::pattern::active_set(v, &world, &lib).unwrap();
            prop_assert!(strict.iter().all(|i| loose.contains(i)));
        }
    }

    #[test]
    fn closure_never_touches_revealed_facts(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, GateMode::Consistent);
        let mut world = common::random_world(&mut rng, 0.5);
        let before: Vec<_> = world.revealed_facts().collect();
        let unknown: Vec<VariableId> = world.unknown_vars().collect();
        let added = impute_closure(&mut world, &lib, &ImputationConfig::new(0.9).unwrap(), &unknown).unwrap();
        prop_assert_eq!(world.revealed_facts().collect::<Vec<_>>(), before);
        for f in added {
            prop_assert_eq!(f.source, FactSource::Imputed);
            prop_assert!(!world.is_revealed(f.variable));
        }
    }

    #[test]
    fn reveals_override_imputations(seed: u64, var in 0u32..64, a in 0u8..2, b in 0u8..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = common::random_world(&mut rng, 0.0);
        world.insert_imputed(VariableId(var), Value(a)).unwrap();
        world.insert_revealed(VariableId(var), Value(b)).unwrap();
        prop_assert_eq!(world.merged(VariableId(var)), Some(Value(b)));
        prop_assert_eq!(world.effective_source(VariableId(var)), Some(FactSource::Revealed));
        prop_assert!(world.insert_imputed(VariableId(var), Value(a)).is_err());
        prop_assert_eq!(world.known_count(), 1);
    }

    #[test]
    fn masks_partition_merged_facts(seed: u64, fraction in 0.05..0.95f64, count in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = common::random_world(&mut rng, 0.5);
        prop_assume!(world.known_count() >= 2);
        let samples = generate_masks(&world, fraction, count, seed).unwrap();
        prop_assert_eq!(samples.len(), count);
        let mut all: Vec<_> = world.merged_facts().collect();
        all.sort_by_key(|f| f.variable);
        for s in samples {
            prop_assert!(!s.hidden.is_empty());
            prop_assert!(s.hidden.iter().all(|f| !s.visible.is_known(f.variable)));
            let mut union: Vec<_> = s.visible.merged_facts().chain(s.hidden).collect();
            union.sort_by_key(|f| f.variable);
            prop_assert_eq!(&union, &all);
        }
    }

    #[test]
    fn gradient_matches_finite_differences(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, GateMode::Consistent);
        let data = common::random_dataset(&mut rng);
        let w = lib.weights();
        let g = grad_log_likelihood(&w, &data, &lib).unwrap();
        for i in 0..w.len() {
            let h = 1e-5 * w[i];
            let mut up = w.clone();
            let mut down = w.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (log_likelihood(&up, &data, &lib).unwrap() - log_likelihood(&down, &data, &lib).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(fd.abs()).max(1e-8), "entry {}: {} vs {}", i, g[i], fd);
        }
    }

    #[test]
    fn optimizer_never_lowers_likelihood(seed: u64, softplus: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lib = common::random_library(&mut rng, GateMode::Consistent);
        let data = common::random_dataset(&mut rng);
        let mut config = OptimizerConfig::for_domain(Domain::Lake);
        if softplus {
            config.reparameterization = Reparameterization::Softplus;
        }
        let r = optimize_weights(&lib, &data, &config).unwrap();
        prop_assert!(r.ll_after >= r.ll_before);
        prop_assert!(r.trace.windows(2).all(|p| p[1] >= p[0]));
        prop_assert!(r.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
    }

    #[test]
    fn smoothing_keeps_constants_and_bounds(values in prop::collection::vec(-100.0..100.0f64, 1..60), c in -10.0..10.0f64) {
        let flat = smooth_series(&vec![c; values.len()], 2.0).unwrap();
        prop_assert!(flat.iter().all(|v| (v - c).abs() < 1e-9));
        let s = smooth_series(&values, 2.0).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.iter().all(|v| *v >= lo - 1e-9 && *v <= hi + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A correct corner library can only save reveals on the same state and
    /// reveal order.
    #[test]
    fn cube_inference_never_costs_reveals(state_seed: u64, reveal_seed: u64) {
        let state = cube::scramble_dataset(state_seed, 1, 20).remove(0).state;
        let mut lib = PatternLibrary::new(Domain::Cube, 0.001, GateMode::Strict).unwrap();
        for m in cube::ground_truth_library([&state]) {
            lib.add_macro(&m, 1.0).unwrap();
        }
        let inference = Inference { library: &lib, imputation: ImputationConfig::new(0.99).unwrap(), full_closure: false };
        let with = cube::run_episode(&state, Some(inference), reveal_seed, false);
        let without = cube::run_episode(&state, None, reveal_seed, false);
        prop_assert!(with.success && without.success);
        prop_assert!(with.ledger.reveal_count <= without.ledger.reveal_count);
        prop_assert!(with.ledger.reveal_count >= 46);
    }
}
