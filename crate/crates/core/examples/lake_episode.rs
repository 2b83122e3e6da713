//! Plan across one generated lake map, first revealing cells blindly and
//! then with the generator's templates imputing the rest.

use pitwi::episode::Inference;
use pitwi::lake::{self, GenerationMethod};
use pitwi::pattern::{ImputationConfig, PatternLibrary};
use pitwi::world::Domain;

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let templates = lake::default_templates();
    let map = lake::generate_map(&templates, 16, lake::min_path_for(16), seed, GenerationMethod::Reject).expect("map");
    println!("map {seed}: start {:?}, goal {:?}, shortest path {:?}", map.start, map.goal, map.shortest_path());

    let mut library = PatternLibrary::empty(Domain::Lake);
    for m in lake::template_macros(&templates) {
        library.add_macro(&m, 1.0).unwrap();
    }
    let inference = Inference { library: &library, imputation: ImputationConfig::for_domain(Domain::Lake), full_closure: false };

    for (label, outcome) in [("blind", lake::run_episode(&map, None, false)), ("templates", lake::run_episode(&map, Some(inference), false))] {
        println!(
            "{label:>9}: success {}, {} reveals, {} imputed, {} input tokens",
            outcome.success,
            outcome.ledger.reveal_count,
            outcome.world.effective_imputed_count(),
            outcome.ledger.perception_in
        );
    }
}
