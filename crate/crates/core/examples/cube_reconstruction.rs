//! Reconstruct scrambled cube states facelet by facelet. A corner library
//! fills in the third facelet of a corner once two are known.

use pitwi::cube;
use pitwi::episode::Inference;
use pitwi::pattern::{ImputationConfig, PatternLibrary};
use pitwi::world::Domain;

fn main() {
    let records = cube::scramble_dataset(42, 10, 20);
    let mut library = PatternLibrary::empty(Domain::Cube);
    for m in cube::ground_truth_library(records.iter().map(|r| &r.state)) {
        library.add_macro(&m, 1.0).unwrap();
    }
    let inference = Inference { library: &library, imputation: ImputationConfig::for_domain(Domain::Cube), full_closure: false };
    for (i, r) in records.iter().enumerate() {
        let blind = cube::run_episode(&r.state, None, i as u64, false);
        let guided = cube::run_episode(&r.state, Some(inference), i as u64, false);
        println!(
            "state {i}: blind {} reveals, with corners {} reveals ({} imputed), reconstructed {}",
            blind.ledger.reveal_count,
            guided.ledger.reveal_count,
            guided.world.effective_imputed_count(),
            guided.success
        );
    }
}
