//! Run all three ablations on the lake and write each run directory, the
//! same thing `pitwi run` does from the command line.

use pitwi::harness::{audit_run_dir, run_experiment, write_run_dir, Ablation, ExperimentConfig};
use pitwi::world::Domain;

fn main() {
    let out = std::env::temp_dir().join("pitwi-experiment");
    for ablation in [Ablation::NoInference, Ablation::NoReweight, Ablation::Full] {
        let mut config = ExperimentConfig::for_domain(Domain::Lake);
        config.seeds = vec![0];
        config.trials = 1;
        config.ablation = ablation;
        let run = run_experiment(&config).expect("run");
        let dir = out.join(format!("{ablation:?}").to_lowercase());
        write_run_dir(&dir, &run).expect("write");
        let a = &run.report.aggregates;
        println!(
            "{ablation:?}: planning {:.1}%, grounding {:.2}%, {:.2} reveals, {:.0} total input tokens per episode; audit problems {}",
            100.0 * a.planning_accuracy,
            100.0 * a.grounding_accuracy,
            a.mean_reveals,
            a.total_in,
            audit_run_dir(&dir).expect("audit").len()
        );
    }
    println!("run directories under {}", out.display());
}
