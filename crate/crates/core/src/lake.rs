//! FrozenLake: template-stamped maps, the LazySP controller, and plan
//! certification against the hidden map.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{EpisodeOutcome, Inference, TraceEvent, Tracer};
use crate::pattern::{impute_closure, MacroPattern};
use crate::world::{reveal, Domain, GroundTruthInstance, Layout, RevealBudget, TaskPayload, TokenLedger, Value, VariableId, WorldModel};

pub const SAFE: Value = Value(0);
pub const HOLE: Value = Value(1);

/// Rejected maps tolerated before generation gives up.
pub const MAX_REJECTIONS: usize = 10_000;
/// Start/goal draws tried on one map before it is discarded.
pub const PAIRS_PER_MAP: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum LakeError {
    #[error("map size {0} is not a positive multiple of 4")]
    BadSize(usize),
    #[error("template set is empty")]
    NoTemplates,
    #[error("no map with a shortest path of at least {min_path} after {rejections} rejections")]
    Exhausted { min_path: usize, rejections: usize },
    #[error("no path from start to goal even treating unknown cells as safe")]
    Infeasible,
    #[error("template {0}: {1}")]
    BadTemplate(usize, String),
    #[error(transparent)]
    World(#[from] crate::world::WorldError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LakeTemplate {
    pub name: String,
    pub rows: [String; 4],
}

impl LakeTemplate {
    pub fn cells(&self) -> [[Value; 4]; 4] {
        let mut out = [[SAFE; 4]; 4];
        for (r, row) in self.rows.iter().enumerate() {
            for (c, ch) in row.chars().take(4).enumerate() {
                out[r][c] = if ch == 'H' { HOLE } else { SAFE };
            }
        }
        out
    }

    pub fn to_macro(&self) -> MacroPattern {
        MacroPattern::GridBlock { cells: self.cells() }
    }

    fn validate(&self, i: usize) -> Result<(), LakeError> {
        for row in &self.rows {
            if row.len() != 4 || row.chars().any(|c| c != 'S' && c != 'H') {
                return Err(LakeError::BadTemplate(i, format!("row `{row}` must be four of S/H")));
            }
        }
        Ok(())
    }
}

pub fn default_templates() -> Vec<LakeTemplate> {
    serde_json::from_str(include_str!("../assets/lake_templates.json")).expect("bundled templates parse")
}

pub fn template_macros(templates: &[LakeTemplate]) -> Vec<MacroPattern> {
    templates.iter().map(LakeTemplate::to_macro).collect()
}

pub type Cell = (usize, usize);

/// A generated map: the hidden grid plus the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LakeMapRepr", into = "LakeMapRepr")]
pub struct LakeInstance {
    pub size: usize,
    pub grid: Vec<Value>,
    pub start: Cell,
    pub goal: Cell,
    pub seed: u64,
    /// Template index stamped into each aligned block, row-major.
    pub template_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LakeMapRepr {
    size: usize,
    grid: Vec<Vec<String>>,
    start: Cell,
    goal: Cell,
    seed: u64,
    template_ids: Vec<usize>,
}

impl From<LakeInstance> for LakeMapRepr {
    fn from(m: LakeInstance) -> Self {
        let names = Domain::Lake.values();
        LakeMapRepr {
            size: m.size,
            grid: m.grid.chunks(m.size).map(|row| row.iter().map(|v| names.name(*v).to_string()).collect()).collect(),
            start: m.start,
            goal: m.goal,
            seed: m.seed,
            template_ids: m.template_ids,
        }
    }
}

impl TryFrom<LakeMapRepr> for LakeInstance {
    type Error = String;

    fn try_from(r: LakeMapRepr) -> Result<Self, String> {
        let names = Domain::Lake.values();
        if r.grid.len() != r.size || r.grid.iter().any(|row| row.len() != r.size) {
            return Err(format!("grid must be {0}x{0}", r.size));
        }
        let grid = r
            .grid
            .iter()
            .flatten()
            .map(|s| names.parse(s).ok_or_else(|| format!("cell `{s}` must be SAFE or HOLE")))
            .collect::<Result<_, _>>()?;
        if r.start.0 >= r.size || r.start.1 >= r.size || r.goal.0 >= r.size || r.goal.1 >= r.size {
            return Err("start and goal must lie on the grid".into());
        }
        Ok(LakeInstance { size: r.size, grid, start: r.start, goal: r.goal, seed: r.seed, template_ids: r.template_ids })
    }
}

impl LakeInstance {
    pub fn layout(&self) -> Layout {
        Layout::Grid { rows: self.size, cols: self.size }
    }

    pub fn cell(&self, (r, c): Cell) -> Value {
        self.grid[r * self.size + c]
    }

    pub fn to_instance(&self) -> GroundTruthInstance {
        let layout = self.layout();
        GroundTruthInstance {
            domain: Domain::Lake,
            layout,
            assignment: self.grid.clone(),
            task: TaskPayload::Lake { start: layout.var(self.start.0, self.start.1), goal: layout.var(self.goal.0, self.goal.1) },
        }
    }

    /// True shortest path length in moves, if the goal is reachable.
    pub fn shortest_path(&self) -> Option<usize> {
        bfs(self.size, self.goal, |p| self.cell(p) == SAFE)[self.start.0 * self.size + self.start.1]
    }
}

/// Distances to `from` over cells accepted by `passable`; `from` itself is
/// always accepted.
fn bfs(size: usize, from: Cell, passable: impl Fn(Cell) -> bool) -> Vec<Option<usize>> {
    let mut dist = vec![None; size * size];
    dist[from.0 * size + from.1] = Some(0);
    let mut queue = VecDeque::from([from]);
    while let Some(p) = queue.pop_front() {
        let d = dist[p.0 * size + p.1].unwrap();
        for q in neighbors(size, p) {
            if dist[q.0 * size + q.1].is_none() && passable(q) {
                dist[q.0 * size + q.1] = Some(d + 1);
                queue.push_back(q);
            }
        }
    }
    dist
}

/// 4-neighbours in increasing (row, col) order.
fn neighbors(size: usize, (r, c): Cell) -> impl Iterator<Item = Cell> {
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push((r - 1, c));
    }
    if c > 0 {
        out.push((r, c - 1));
    }
    if c + 1 < size {
        out.push((r, c + 1));
    }
    if r + 1 < size {
        out.push((r + 1, c));
    }
    out.into_iter()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMethod {
    Reject,
    Allpairs,
}

pub fn min_path_for(size: usize) -> usize {
    if size >= 32 {
        50
    } else {
        25
    }
}

fn stamp(templates: &[LakeTemplate], size: usize, rng: &mut ChaCha8Rng) -> (Vec<Value>, Vec<usize>) {
    let blocks = size / 4;
    let mut grid = vec![SAFE; size * size];
    let mut ids = Vec::with_capacity(blocks * blocks);
    for br in 0..blocks {
        for bc in 0..blocks {
            let t = rng.gen_range(0..templates.len());
            ids.push(t);
            let cells = templates[t].cells();
            for (r, row) in cells.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    grid[(br * 4 + r) * size + bc * 4 + c] = *v;
                }
            }
        }
    }
    (grid, ids)
}

/// Stamp every aligned block with a uniformly chosen template and pick a
/// start/goal pair whose true shortest path is at least `min_path`.
pub fn generate_map(
    templates: &[LakeTemplate],
    size: usize,
    min_path: usize,
    seed: u64,
    method: GenerationMethod,
) -> Result<LakeInstance, LakeError> {
    if size == 0 || size % 4 != 0 {
        return Err(LakeError::BadSize(size));
    }
    if templates.is_empty() {
        return Err(LakeError::NoTemplates);
    }
    for (i, t) in templates.iter().enumerate() {
        t.validate(i)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REJECTIONS {
        let (grid, template_ids) = stamp(templates, size, &mut rng);
        let safe: Vec<Cell> = (0..size * size).filter(|&i| grid[i] == SAFE).map(|i| (i / size, i % size)).collect();
        if safe.len() < 2 {
            continue;
        }
        let passable = |p: Cell| grid[p.0 * size + p.1] == SAFE;
        let pair = match method {
            GenerationMethod::Reject => (0..PAIRS_PER_MAP).find_map(|_| {
                let s = *safe.choose(&mut rng).unwrap();
                let g = *safe.choose(&mut rng).unwrap();
                let d = bfs(size, g, passable)[s.0 * size + s.1];
                (s != g && d.is_some_and(|d| d >= min_path)).then_some((s, g))
            }),
            GenerationMethod::Allpairs => {
                let mut pairs = Vec::new();
                for &g in &safe {
                    let dist = bfs(size, g, passable);
                    for &s in &safe {
                        if dist[s.0 * size + s.1].is_some_and(|d| d >= min_path) {
                            pairs.push((s, g));
                        }
                    }
                }
                pairs.choose(&mut rng).copied()
            }
        };
        if let Some((start, goal)) = pair {
            return Ok(LakeInstance { size, grid, start, goal, seed, template_ids });
        }
    }
    Err(LakeError::Exhausted { min_path, rejections: MAX_REJECTIONS })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathPlan {
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Up,
    Down,
    Left,
    Right,
}

impl PathPlan {
    pub fn len(&self) -> usize {
        self.cells.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn moves(&self) -> Vec<Move> {
        self.cells
            .windows(2)
            .map(|w| match (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize) {
                (-1, 0) => Move::Up,
                (1, 0) => Move::Down,
                (0, -1) => Move::Left,
                _ => Move::Right,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LazyStep {
    Done(PathPlan),
    Next(VariableId),
}

/// One LazySP round: plan optimistically over the merged model and either
/// certify the plan or name the first unknown cell on it.
pub fn lazysp_step(world: &WorldModel, start: Cell, goal: Cell) -> Result<LazyStep, LakeError> {
    let plan = optimistic_path(world, start, goal)?;
    let layout = world.layout();
    for &(r, c) in &plan.cells {
        if (r, c) == start || (r, c) == goal {
            continue;
        }
        let v = layout.var(r, c);
        if !world.is_known(v) {
            return Ok(LazyStep::Next(v));
        }
    }
    Ok(LazyStep::Done(plan))
}

/// Shortest path treating unknown cells as safe and merged holes as blocked;
/// ties go to the smallest (row, col) successor.
pub fn optimistic_path(world: &WorldModel, start: Cell, goal: Cell) -> Result<PathPlan, LakeError> {
    let Layout::Grid { rows: size, .. } = world.layout() else {
        return Err(LakeError::Infeasible);
    };
    let layout = world.layout();
    let open = |p: Cell| p == start || p == goal || world.merged(layout.var(p.0, p.1)) != Some(HOLE);
    let dist = bfs(size, goal, open);
    let mut at = start;
    let Some(mut d) = dist[at.0 * size + at.1] else {
        return Err(LakeError::Infeasible);
    };
    let mut cells = vec![at];
    while d > 0 {
        at = neighbors(size, at)
            .find(|q| dist[q.0 * size + q.1] == Some(d - 1))
            .expect("BFS distances descend to the goal");
        cells.push(at);
        d -= 1;
    }
    Ok(PathPlan { cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionFailure {
    HoleHit,
    Suboptimal,
}

/// Walk the plan on the hidden map. Success needs every cell safe and the
/// length to match the true shortest path.
pub fn execute_plan(plan: &PathPlan, truth: &LakeInstance) -> Result<(), ExecutionFailure> {
    if plan.cells.iter().any(|&p| truth.cell(p) == HOLE) {
        return Err(ExecutionFailure::HoleHit);
    }
    if Some(plan.len()) != truth.shortest_path() {
        return Err(ExecutionFailure::Suboptimal);
    }
    Ok(())
}

/// Unknown cells in the aligned blocks the plan passes through.
fn closure_candidates(world: &WorldModel, plan: &PathPlan, full: bool) -> Vec<VariableId> {
    if full {
        return world.unknown_vars().collect();
    }
    let Layout::Grid { rows, cols } = world.layout() else { return Vec::new() };
    let mut blocks: Vec<Cell> = plan.cells.iter().map(|&(r, c)| (r / 4, c / 4)).collect();
    blocks.sort_unstable();
    blocks.dedup();
    let mut out = Vec::new();
    for (br, bc) in blocks {
        for r in br * 4..(br * 4 + 4).min(rows) {
            for c in bc * 4..(bc * 4 + 4).min(cols) {
                let v = world.layout().var(r, c);
                if !world.is_known(v) {
                    out.push(v);
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Ground the map lazily until LazySP certifies a plan, then execute it.
pub fn run_episode(map: &LakeInstance, inference: Option<Inference<'_>>, trace: bool) -> EpisodeOutcome {
    let truth = map.to_instance();
    let mut world = truth.empty_world();
    let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Lake));
    let mut tracer = Tracer::new(trace);
    let failure = loop {
        let step = match lazysp_step(&world, map.start, map.goal) {
            Ok(s) => s,
            Err(e) => break Some(e.to_string()),
        };
        let next = match step {
            LazyStep::Done(plan) => {
                break execute_plan(&plan, map).err().map(|f| format!("{f:?}").to_lowercase());
            }
            LazyStep::Next(v) => v,
        };
        if let Some(inf) = inference {
            let plan = optimistic_path(&world, map.start, map.goal).expect("just planned");
            let cands = closure_candidates(&world, &plan, inf.full_closure);
            let added = impute_closure(&mut world, inf.library, &inf.imputation, &cands).expect("candidates are unknown");
            for f in &added {
                tracer.push(|| TraceEvent::Impute { var: f.variable, value: f.value });
            }
            if !added.is_empty() {
                continue;
            }
        }
        let fact = reveal(&truth, next, &mut world, &mut ledger).expect("next cell is unrevealed");
        tracer.push(|| TraceEvent::Reveal { var: fact.variable, value: fact.value });
    };
    EpisodeOutcome { world, ledger, success: failure.is_none(), failure, trace: tracer.events }
}
