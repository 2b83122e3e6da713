//! Turning replay contents into proposer prompts, and proposer responses
//! into macro patterns.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ReplayBuffer;
use crate::cube;
use crate::pattern::{MacroPattern, PatternLibrary};
use crate::world::{Domain, Layout, Value, WorldModel};

const LAKE_PROMPT: &str = include_str!("../../assets/prompts/lake.txt");
const CRAFTER_PROMPT: &str = include_str!("../../assets/prompts/crafter.txt");
const CUBE_PROMPT: &str = include_str!("../../assets/prompts/cube.txt");

pub const MINIMAPS_PER_PROMPT: usize = 5;
pub const LAKE_MIN_REVEALED: usize = 8;
pub const CRAFTER_TILE: usize = 15;
pub const CRAFTER_MIN_OVERLAP: usize = 3;
pub const CUBE_MAX_EXAMPLES: usize = 10;

/// Macros requested per trigger.
pub fn patterns_per_trigger(domain: Domain) -> usize {
    match domain {
        Domain::Lake | Domain::Crafter => 10,
        Domain::Cube => 3,
    }
}

/// Episodes between induction triggers.
pub fn proposal_period(domain: Domain) -> usize {
    match domain {
        Domain::Lake | Domain::Crafter => 5,
        Domain::Cube => 10,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeMinimap {
    pub episode_id: usize,
    pub row: usize,
    pub col: usize,
    pub cells: [[Option<Value>; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrafterTile {
    pub episode_id: usize,
    /// Half-open column and row ranges in map coordinates.
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub cells: Vec<Vec<Option<Value>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeExample {
    pub episode_id: usize,
    pub success: bool,
    pub tokens: Vec<[Option<Value>; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum ProposalContext {
    Lake { minimaps: Vec<LakeMinimap> },
    Crafter { tiles: Vec<CrafterTile> },
    Cube { examples: Vec<CubeExample>, summary: Vec<(usize, [Value; 3], usize)> },
}

/// A context together with the replay indices it drew from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedContext {
    pub context: ProposalContext,
    pub used: Vec<usize>,
}

fn revealed_cell(world: &WorldModel, r: usize, c: usize) -> Option<Value> {
    world.revealed(world.layout().var(r, c))
}

fn grid_dims(world: &WorldModel) -> (usize, usize) {
    match world.layout() {
        Layout::Grid { rows, cols } => (rows, cols),
        Layout::Cube => (0, 0),
    }
}

/// Tile starts covering `len` cells with windows of `tile`, consecutive
/// windows overlapping by at least `min_overlap`, using the fewest windows
/// and spreading them evenly so the largest overlap is as small as possible.
pub fn tile_starts(len: usize, tile: usize, min_overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - min_overlap;
    let n = (len - min_overlap).div_ceil(stride);
    let span = len - tile;
    (0..n).map(|i| (i * span) / (n - 1)).collect()
}

/// Build the proposer context for the next trigger, or `None` when nothing
/// qualifies and the round should be skipped.
pub fn extract_proposal_context(buffer: &ReplayBuffer, domain: Domain, seed: u64) -> Option<ExtractedContext> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match domain {
        Domain::Lake => {
            let mut pool = Vec::new();
            for (b, e) in buffer.entries().iter().enumerate() {
                let (rows, cols) = grid_dims(&e.world);
                for br in (0..rows / 4).map(|i| i * 4) {
                    for bc in (0..cols / 4).map(|i| i * 4) {
                        let mut cells = [[None; 4]; 4];
                        let mut n = 0;
                        for (r, row) in cells.iter_mut().enumerate() {
                            for (c, cell) in row.iter_mut().enumerate() {
                                *cell = revealed_cell(&e.world, br + r, bc + c);
                                n += cell.is_some() as usize;
                            }
                        }
                        if n >= LAKE_MIN_REVEALED {
                            pool.push((b, LakeMinimap { episode_id: e.episode_id, row: br, col: bc, cells }));
                        }
                    }
                }
            }
            if pool.is_empty() {
                return None;
            }
            let picks = pick(&mut rng, pool);
            let used = dedup_sorted(picks.iter().map(|p| p.0));
            Some(ExtractedContext {
                context: ProposalContext::Lake { minimaps: picks.into_iter().map(|p| p.1).collect() },
                used,
            })
        }
        Domain::Crafter => {
            let mut pool = Vec::new();
            for (b, e) in buffer.entries().iter().enumerate() {
                let (rows, cols) = grid_dims(&e.world);
                let mut bbox: Option<(usize, usize, usize, usize)> = None;
                for f in e.world.revealed_facts() {
                    let (r, c) = e.world.layout().coords(f.variable);
                    bbox = Some(match bbox {
                        None => (r, r + 1, c, c + 1),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r + 1), c0.min(c), c1.max(c + 1)),
                    });
                }
                let Some((r0, r1, c0, c1)) = bbox else { continue };
                debug_assert!(r1 <= rows && c1 <= cols);
                for dy in tile_starts(r1 - r0, CRAFTER_TILE, CRAFTER_MIN_OVERLAP) {
                    for dx in tile_starts(c1 - c0, CRAFTER_TILE, CRAFTER_MIN_OVERLAP) {
                        let (y0, x0) = (r0 + dy, c0 + dx);
                        let (y1, x1) = ((y0 + CRAFTER_TILE).min(r1), (x0 + CRAFTER_TILE).min(c1));
                        let cells = (y0..y1).map(|r| (x0..x1).map(|c| revealed_cell(&e.world, r, c)).collect()).collect();
                        pool.push((b, CrafterTile { episode_id: e.episode_id, x: (x0, x1), y: (y0, y1), cells }));
                    }
                }
            }
            if pool.is_empty() {
                return None;
            }
            let picks = pick(&mut rng, pool);
            let used = dedup_sorted(picks.iter().map(|p| p.0));
            Some(ExtractedContext {
                context: ProposalContext::Crafter { tiles: picks.into_iter().map(|p| p.1).collect() },
                used,
            })
        }
        Domain::Cube => {
            let unreflected = || buffer.entries().iter().enumerate().filter(|(_, e)| !e.reflected);
            let mut chosen: Vec<usize> = unreflected().filter(|(_, e)| !e.success).map(|(i, _)| i).collect();
            chosen.extend(unreflected().filter(|(_, e)| e.success).map(|(i, _)| i));
            chosen.truncate(CUBE_MAX_EXAMPLES);
            if chosen.is_empty() {
                return None;
            }
            let mut summary: BTreeMap<(usize, [Value; 3]), usize> = BTreeMap::new();
            let examples: Vec<CubeExample> = chosen
                .iter()
                .map(|&i| {
                    let e = &buffer.entries()[i];
                    let tokens: Vec<[Option<Value>; 3]> = (0..8)
                        .map(|corner| {
                            let slots = cube::corner_map().facelets[corner];
                            let t = slots.map(|f| e.world.revealed(crate::world::VariableId(f as u32)));
                            if let [Some(a), Some(b), Some(c)] = t {
                                *summary.entry((corner, [a, b, c])).or_insert(0) += 1;
                            }
                            t
                        })
                        .collect();
                    CubeExample { episode_id: e.episode_id, success: e.success, tokens }
                })
                .collect();
            let summary = summary.into_iter().map(|((c, t), n)| (c, t, n)).collect();
            Some(ExtractedContext { context: ProposalContext::Cube { examples, summary }, used: chosen })
        }
    }
}

fn pick<T>(rng: &mut ChaCha8Rng, mut pool: Vec<T>) -> Vec<T> {
    if pool.len() <= MINIMAPS_PER_PROMPT {
        return pool;
    }
    let mut idx = sample(rng, pool.len(), MINIMAPS_PER_PROMPT).into_vec();
    idx.sort_unstable();
    let mut out = Vec::with_capacity(idx.len());
    for i in idx.into_iter().rev() {
        out.push(pool.swap_remove(i));
    }
    out.reverse();
    out
}

fn dedup_sorted(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn cell_label(domain: Domain, v: Option<Value>) -> &'static str {
    match v {
        Some(v) => domain.values().name(v),
        None if domain == Domain::Lake => "UNKNOWN",
        None => "unknown",
    }
}

fn render_rows(domain: Domain, rows: impl Iterator<Item = Vec<Option<Value>>>) -> String {
    rows.map(|row| row.iter().map(|v| cell_label(domain, *v)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Split a template into the instructions and the per-example section,
/// which starts at the line holding `{i}`.
fn split_template(template: &str) -> (&str, &str) {
    let at = template.find("{i}").expect("template has an example section");
    let line_start = template[..at].rfind('\n').map_or(0, |p| p + 1);
    template.split_at(line_start)
}

/// Fill the domain's prompt template with the context.
pub fn render_prompt(context: &ProposalContext, k: usize) -> String {
    match context {
        ProposalContext::Lake { minimaps } => {
            let (head, example) = split_template(LAKE_PROMPT);
            let mut out = head.replace("{K}", &k.to_string());
            for (i, m) in minimaps.iter().enumerate() {
                let block = render_rows(Domain::Lake, m.cells.iter().map(|r| r.to_vec()));
                out.push_str(&example.replace("{i}", &(i + 1).to_string()).replace("{PARTIAL_MAP_BLOCK}", &block));
                out.push('\n');
            }
            out
        }
        ProposalContext::Crafter { tiles } => {
            let (head, example) = split_template(CRAFTER_PROMPT);
            let mut out = head.replace("{K}", &k.to_string());
            for (i, t) in tiles.iter().enumerate() {
                let block = render_rows(Domain::Crafter, t.cells.iter().cloned());
                out.push_str(
                    &example
                        .replace("{i}", &(i + 1).to_string())
                        .replace("{episode_id}", &t.episode_id.to_string())
                        .replace("{bbox_xmin}", &t.x.0.to_string())
                        .replace("{bbox_xmax}", &t.x.1.to_string())
                        .replace("{bbox_ymin}", &t.y.0.to_string())
                        .replace("{bbox_ymax}", &t.y.1.to_string())
                        .replace("{PARTIAL_MAP_BLOCK}", &block),
                );
                out.push('\n');
            }
            out
        }
        ProposalContext::Cube { examples, summary } => {
            let map = cube::corner_map();
            let faces = ["U", "R", "F", "D", "L", "B"];
            let mapping = map
                .names
                .iter()
                .zip(&map.facelets)
                .map(|(name, slots)| {
                    let stickers: Vec<String> = slots.iter().map(|&f| format!("{}({})", f, faces[f / 9])).collect();
                    format!("{name}: {}", stickers.join(" "))
                })
                .collect::<Vec<_>>()
                .join("\n");
            let replay = examples
                .iter()
                .map(|e| {
                    let tokens: Vec<String> = e
                        .tokens
                        .iter()
                        .enumerate()
                        .map(|(c, t)| format!("{}:{}", map.names[c], cube::render_token(t)))
                        .collect();
                    let status = if e.success { "success" } else { "failure" };
                    format!("episode={} status={} CORNERS_8: {}", e.episode_id, status, tokens.join(" "))
                })
                .collect::<Vec<_>>()
                .join("\n");
            let dedup = summary
                .iter()
                .map(|(c, t, n)| format!("{}:{} x{}", map.names[*c], cube::render_token(&t.map(Some)), n))
                .collect::<Vec<_>>()
                .join("\n");
            CUBE_PROMPT
                .replace("{corner_cubie_names}", &map.names.join(", "))
                .replace("{corner_cubie_to_sticker_mapping}", &mapping)
                .replace("{replay_examples}", &replay)
                .replace("{deduplicated_corner_token_summary}", &dedup)
                .replace("{patterns_per_trigger}", &k.to_string())
        }
    }
}

impl ProposalContext {
    pub fn domain(&self) -> Domain {
        match self {
            ProposalContext::Lake { .. } => Domain::Lake,
            ProposalContext::Crafter { .. } => Domain::Crafter,
            ProposalContext::Cube { .. } => Domain::Cube,
        }
    }

    /// How strongly the context supports a macro: matching minimaps for the
    /// lake, fully revealed matching crosses for crafter, token multiplicity
    /// for the cube.
    pub fn support(&self, m: &MacroPattern) -> usize {
        match (self, m) {
            (ProposalContext::Lake { minimaps }, MacroPattern::GridBlock { cells }) => minimaps
                .iter()
                .filter(|mm| {
                    let mut known = 0;
                    for r in 0..4 {
                        for c in 0..4 {
                            if let Some(v) = mm.cells[r][c] {
                                if v != cells[r][c] {
                                    return false;
                                }
                                known += 1;
                            }
                        }
                    }
                    known > 0
                })
                .count(),
            (ProposalContext::Crafter { tiles }, MacroPattern::Cross { center, top, bottom, left, right }) => {
                let want = [Some(*center), Some(*top), Some(*bottom), Some(*left), Some(*right)];
                tiles
                    .iter()
                    .map(|t| {
                        let h = t.cells.len();
                        let w = t.cells.first().map_or(0, |r| r.len());
                        let mut n = 0;
                        for r in 1..h.saturating_sub(1) {
                            for c in 1..w.saturating_sub(1) {
                                let got = [t.cells[r][c], t.cells[r - 1][c], t.cells[r + 1][c], t.cells[r][c - 1], t.cells[r][c + 1]];
                                n += (got == want) as usize;
                            }
                        }
                        n
                    })
                    .sum()
            }
            (ProposalContext::Cube { summary, .. }, MacroPattern::Corner { corner, token }) => summary
                .iter()
                .find(|(c, t, _)| *c == *corner as usize && t == token)
                .map_or(0, |s| s.2),
            _ => 0,
        }
    }
}

/// Rough token count for text that never went through a real tokenizer.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub macros: Vec<MacroPattern>,
    pub rejected: Vec<String>,
}

/// Parse a proposer reply. The reply must be a JSON object with a
/// `"patterns"` array and nothing else around it; individual bad items are
/// dropped with their reason, and at most `k` macros are kept.
pub fn parse_response(domain: Domain, text: &str, k: usize) -> Result<ParsedResponse, String> {
    let doc: serde_json::Value = serde_json::from_str(text.trim()).map_err(|e| format!("response is not JSON: {e}"))?;
    let items = doc
        .get("patterns")
        .and_then(|p| p.as_array())
        .ok_or_else(|| "response has no \"patterns\" array".to_string())?;
    let mut out = ParsedResponse { macros: Vec::new(), rejected: Vec::new() };
    for (i, item) in items.iter().enumerate() {
        match MacroPattern::from_json(domain, item) {
            Ok(m) if out.macros.len() < k => out.macros.push(m),
            Ok(_) => out.rejected.push(format!("pattern {i}: beyond the limit of {k}")),
            Err(e) => out.rejected.push(format!("pattern {i}: {e}")),
        }
    }
    Ok(out)
}

/// Render macros in the proposer response format.
pub fn render_response(domain: Domain, macros: &[MacroPattern]) -> String {
    let items: Vec<serde_json::Value> = macros.iter().map(|m| m.to_json(domain)).collect();
    serde_json::json!({ "patterns": items }).to_string()
}

/// Proposer choice as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProposerSpec {
    /// Ground-truth macro set of the environment, ranked by support.
    Oracle,
    /// Fixed replies, consumed in order; later triggers get no reply.
    Scripted { responses: Vec<String> },
    /// Chat-completion endpoint.
    Remote {
        endpoint: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
}

fn default_key_env() -> String {
    "PITWI_API_KEY".to_string()
}

#[derive(Debug, Clone)]
pub enum Proposer {
    Oracle { macros: Vec<MacroPattern> },
    Scripted { responses: Vec<String>, next: usize },
    Remote { endpoint: String, model: String, api_key_env: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutcome {
    pub macros: Vec<MacroPattern>,
    pub rejected: Vec<String>,
    pub error: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl Proposer {
    /// `oracle_macros` is only used for [`ProposerSpec::Oracle`].
    pub fn from_spec(spec: &ProposerSpec, oracle_macros: Vec<MacroPattern>) -> Self {
        match spec {
            ProposerSpec::Oracle => Proposer::Oracle { macros: oracle_macros },
            ProposerSpec::Scripted { responses } => Proposer::Scripted { responses: responses.clone(), next: 0 },
            ProposerSpec::Remote { endpoint, model, api_key_env } => Proposer::Remote {
                endpoint: endpoint.clone(),
                model: model.clone(),
                api_key_env: api_key_env.clone(),
            },
        }
    }

    pub fn propose(&mut self, context: &ProposalContext, library: &PatternLibrary, k: usize) -> ProposalOutcome {
        let domain = context.domain();
        let prompt = render_prompt(context, k);
        let (reply, input_tokens, output_tokens) = match self {
            Proposer::Oracle { macros } => {
                let mut ranked: Vec<(usize, usize)> = macros
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| !library.contains_macro(m))
                    .map(|(i, m)| (context.support(m), i))
                    .collect();
                ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                let chosen: Vec<MacroPattern> = ranked.iter().take(k).map(|&(_, i)| macros[i].clone()).collect();
                let reply = render_response(domain, &chosen);
                let (i, o) = (estimate_tokens(&prompt), estimate_tokens(&reply));
                (Ok(reply), i, o)
            }
            Proposer::Scripted { responses, next } => {
                let reply = responses.get(*next).cloned();
                *next += 1;
                match reply {
                    Some(r) => {
                        let o = estimate_tokens(&r);
                        (Ok(r), estimate_tokens(&prompt), o)
                    }
                    None => (Err("scripted proposer has no reply left".to_string()), 0, 0),
                }
            }
            Proposer::Remote { endpoint, model, api_key_env } => match call_remote(endpoint, model, api_key_env, &prompt) {
                Ok((text, i, o)) => {
                    let i = i.unwrap_or_else(|| estimate_tokens(&prompt));
                    let o = o.unwrap_or_else(|| estimate_tokens(&text));
                    (Ok(text), i, o)
                }
                Err(e) => (Err(e), 0, 0),
            },
        };
        let mut outcome = ProposalOutcome { input_tokens, output_tokens, ..Default::default() };
        match reply.and_then(|r| parse_response(domain, &r, k)) {
            Ok(parsed) => {
                outcome.macros = parsed.macros;
                outcome.rejected = parsed.rejected;
            }
            Err(e) => {
                log::warn!("proposal round yielded nothing: {e}");
                outcome.error = Some(e);
            }
        }
        for r in &outcome.rejected {
            log::info!("rejected proposed macro: {r}");
        }
        outcome
    }
}

type RemoteReply = (String, Option<u64>, Option<u64>);

fn call_remote(endpoint: &str, model: &str, key_env: &str, prompt: &str) -> Result<RemoteReply, String> {
    let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build();
    let mut req = agent.post(endpoint).set("Content-Type", "application/json");
    if let Ok(key) = std::env::var(key_env) {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let body = serde_json::json!({
        "model": model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": 0,
    });
    let resp: serde_json::Value = req
        .send_json(body)
        .map_err(|e| format!("request to {endpoint} failed: {e}"))?
        .into_json()
        .map_err(|e| format!("endpoint reply is not JSON: {e}"))?;
    let text = resp
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or("endpoint reply has no choices[0].message.content")?
        .to_string();
    let usage = |k: &str| resp.pointer(&format!("/usage/{k}")).and_then(|v| v.as_u64());
    Ok((text, usage("prompt_tokens"), usage("completion_tokens")))
}
