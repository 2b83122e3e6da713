//! Train a Crafter library online on 64x64 maps, freeze it, and evaluate it
//! on 128x128 maps.

use pitwi::harness::{run_experiment, run_ood, Ablation, ExperimentConfig, LibrarySource};
use pitwi::world::Domain;

fn main() {
    let mut train = ExperimentConfig::for_domain(Domain::Crafter);
    train.seeds = vec![0];
    train.trials = 1;
    train.episodes = 30;
    train.initial_library = LibrarySource::GroundTruth;
    let trained = run_experiment(&train).expect("training run");
    let library = &trained.artifacts[0].final_library;
    println!("trained on 64x64: {:.2} reveals per episode, {} patterns", trained.report.aggregates.mean_reveals, library.len());

    let mut eval = train.clone();
    eval.map_size = 128;
    eval.episodes = 10;
    eval.ablation = Ablation::NoInference;
    let blind = run_experiment(&eval).expect("blind run").report.aggregates.mean_reveals;
    eval.ablation = Ablation::Full;
    let frozen = run_ood(&eval, library).expect("frozen run").report.aggregates.mean_reveals;
    println!("128x128: blind {blind:.2} reveals, frozen library {frozen:.2} ({:.1}% fewer)", 100.0 * (1.0 - frozen / blind));
}
