//! Build the proposer prompt from lake replays and parse a reply. Set
//! PITWI_ENDPOINT, PITWI_MODEL and PITWI_API_KEY to send it to a
//! chat-completion endpoint instead of the scripted reply.

use pitwi::induction::proposal::{extract_proposal_context, parse_response, render_prompt, render_response, Proposer, ProposerSpec};
use pitwi::induction::ReplayBuffer;
use pitwi::lake::{self, GenerationMethod};
use pitwi::pattern::PatternLibrary;
use pitwi::world::Domain;

fn main() {
    let templates = lake::default_templates();
    let mut replay = ReplayBuffer::new();
    for s in 0..5 {
        let map = lake::generate_map(&templates, 16, 25, s, GenerationMethod::Reject).unwrap();
        let out = lake::run_episode(&map, None, false);
        replay.push(s as usize, out.success, out.world);
    }
    let extracted = extract_proposal_context(&replay, Domain::Lake, 0).expect("enough revealed cells");
    let prompt = render_prompt(&extracted.context, 10);
    println!("prompt from {} replays, {} chars:\n{}\n", extracted.used.len(), prompt.len(), &prompt[..prompt.len().min(600)]);

    let spec = match (std::env::var("PITWI_ENDPOINT"), std::env::var("PITWI_MODEL")) {
        (Ok(endpoint), Ok(model)) => ProposerSpec::Remote { endpoint, model, api_key_env: "PITWI_API_KEY".into() },
        _ => ProposerSpec::Scripted { responses: vec![render_response(Domain::Lake, &lake::template_macros(&templates[..2]))] },
    };
    let mut proposer = Proposer::from_spec(&spec, Vec::new());
    let out = proposer.propose(&extracted.context, &PatternLibrary::empty(Domain::Lake), 10);
    println!("proposed {} macros, rejected {:?}, error {:?}, tokens {} in / {} out", out.macros.len(), out.rejected, out.error, out.input_tokens, out.output_tokens);

    let reply = r#"{"patterns": [
        [["SAFE", "SAFE"], ["SAFE", "SAFE"]],
        [["SAFE", "HOLE", "HOLE", "SAFE"], ["SAFE", "SAFE", "SAFE", "SAFE"], ["SAFE", "SAFE", "SAFE", "SAFE"], ["HOLE", "HOLE", "HOLE", "HOLE"]]
    ]}"#;
    let parsed = parse_response(Domain::Lake, reply, 10).unwrap();
    println!("strict parse keeps {} of 2 items: {:?}", parsed.macros.len(), parsed.rejected);
}
