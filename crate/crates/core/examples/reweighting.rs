//! Learn pattern weights from masked replays. The library holds every true
//! corner pattern and a wrong twin of each; maximum likelihood on held-out
//! facelets pushes the twins' weights towards zero.

use pitwi::cube;
use pitwi::episode::Inference;
use pitwi::induction::{build_dataset, optimize_weights, MaskConfig, OptimizerConfig, ReplayBuffer};
use pitwi::pattern::{ImputationConfig, PatternLibrary};
use pitwi::world::{Domain, Value};

fn main() {
    let records = cube::scramble_dataset(42, 20, 20);
    let mut library = PatternLibrary::empty(Domain::Cube);
    for m in cube::ground_truth_library(records.iter().map(|r| &r.state)) {
        library.add_macro(&m, 1.0).unwrap();
    }
    let truth = library.len();
    for p in library.patterns().to_vec() {
        let mut twin = p.clone();
        twin.prediction = Value((p.prediction.0 + 1) % 6);
        library.add(twin).unwrap();
    }

    // Replays come from blind episodes, so every stored fact is revealed.
    let mut replay = ReplayBuffer::new();
    for (i, r) in records.iter().enumerate() {
        let out = cube::run_episode(&r.state, None, i as u64, false);
        replay.push(i, out.success, out.world);
    }
    let data = build_dataset(&replay, &MaskConfig::default(), 0).unwrap();
    let fit = optimize_weights(&library, &data, &OptimizerConfig::for_domain(Domain::Cube)).unwrap();
    println!("{} masked samples; log-likelihood {:.2} -> {:.2} in {} iterations", data.len(), fit.ll_before, fit.ll_after, fit.iterations);
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    println!("mean weight: true patterns {:.3e}, twins {:.3e}", mean(&fit.weights[..truth]), mean(&fit.weights[truth..]));

    let before = library.clone();
    library.set_weights(&fit.weights).unwrap();
    let imputation = ImputationConfig::for_domain(Domain::Cube);
    for (label, lib) in [("uniform", &before), ("fitted", &library)] {
        let reveals: u64 = records
            .iter()
            .enumerate()
            .map(|(i, r)| cube::run_episode(&r.state, Some(Inference { library: lib, imputation, full_closure: false }), i as u64, false).ledger.reveal_count)
            .sum();
        println!("{label:>7} weights: {:.2} reveals per state", reveals as f64 / records.len() as f64);
    }
}
