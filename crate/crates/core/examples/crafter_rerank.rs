//! Collect the diamond on one generated Crafter map, with and without
//! reranking reveals by a mined cross-pattern library.

use pitwi::crafter::{self, Quota};
use pitwi::episode::Inference;
use pitwi::pattern::{ImputationConfig, PatternLibrary};
use pitwi::world::Domain;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let map = crafter::generate_world(seed, 64, &Quota::default()).expect("map");
    println!("map {seed}: spawn {:?}, {} diamonds", map.spawn, map.count(crafter::DIAMOND));

    // Mined from maps that never appear in evaluation.
    let mut library = PatternLibrary::empty(Domain::Crafter);
    for m in crafter::mine_cross_macros((0..10).map(|i| (1u64 << 40) + i), 64, 1) {
        library.add_macro(&m, 1.0).unwrap();
    }
    println!("library: {} cross patterns", library.len());
    let inference = Inference { library: &library, imputation: ImputationConfig::for_domain(Domain::Crafter), full_closure: false };

    for (label, outcome) in [("blind", crafter::run_episode(&map, None, false)), ("reranked", crafter::run_episode(&map, Some(inference), false))] {
        println!("{label:>8}: success {}, {} reveals, {:?}", outcome.success, outcome.ledger.reveal_count, outcome.failure);
    }
}
