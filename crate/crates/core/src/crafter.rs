//! Crafter without mobs, survival stats or daylight: noise-based world
//! generation with resource quotas, the crafting rules, and an agent that
//! works through the fourteen achievements while revealing the map one cell
//! at a time.

use std::collections::{BTreeMap, VecDeque};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{EpisodeOutcome, Inference, TraceEvent, Tracer};
use crate::pattern::{impute_closure, MacroPattern};
use crate::world::{reveal, Domain, GroundTruthInstance, Layout, RevealBudget, TaskPayload, TokenLedger, Value, VariableId, WorldModel};

pub const GRASS: Value = Value(0);
pub const SAND: Value = Value(1);
pub const WATER: Value = Value(2);
pub const TREE: Value = Value(3);
pub const STONE: Value = Value(4);
pub const COAL: Value = Value(5);
pub const IRON: Value = Value(6);
pub const DIAMOND: Value = Value(7);
pub const LAVA: Value = Value(8);
pub const PATH: Value = Value(9);

pub const MAX_REJECTIONS: usize = 1_000;
const MAX_ACTIONS: usize = 200_000;

fn material_name(v: Value) -> &'static str {
    Domain::Crafter.values().name(v)
}

fn material(name: &str) -> Value {
    Domain::Crafter.values().parse(name).expect("known material")
}

#[derive(Debug, Error, PartialEq)]
pub enum CrafterError {
    #[error("map size {0} is below 16")]
    TooSmall(usize),
    #[error("no map met the resource quota after {0} attempts")]
    Exhausted(usize),
    #[error("nothing left to explore while looking for {0}")]
    ExplorationExhausted(String),
    #[error("{action}: {reason}")]
    Precondition { action: String, reason: String },
    #[error("gave up after {0} actions")]
    ActionLimit(usize),
}

/// Minimum counts an accepted map must offer within reach of the spawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quota {
    pub tree: usize,
    pub stone: usize,
    pub coal: usize,
    pub iron: usize,
    pub diamond: usize,
}

impl Default for Quota {
    fn default() -> Self {
        Quota { tree: 9, stone: 8, coal: 3, iron: 3, diamond: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr", into = "MapRepr")]
pub struct CrafterMap {
    pub size: usize,
    pub materials: Vec<Value>,
    pub spawn: (usize, usize),
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MapRepr {
    size: usize,
    materials: Vec<Vec<String>>,
    spawn: (usize, usize),
    seed: u64,
}

impl From<CrafterMap> for MapRepr {
    fn from(m: CrafterMap) -> Self {
        MapRepr {
            size: m.size,
            materials: m.materials.chunks(m.size).map(|r| r.iter().map(|v| material_name(*v).to_string()).collect()).collect(),
            spawn: m.spawn,
            seed: m.seed,
        }
    }
}

impl TryFrom<MapRepr> for CrafterMap {
    type Error = String;

    fn try_from(r: MapRepr) -> Result<Self, String> {
        if r.materials.len() != r.size || r.materials.iter().any(|row| row.len() != r.size) {
            return Err(format!("materials must be {0}x{0}", r.size));
        }
        let materials = r
            .materials
            .iter()
            .flatten()
            .map(|s| Domain::Crafter.values().parse(s).ok_or_else(|| format!("unknown material `{s}`")))
            .collect::<Result<_, _>>()?;
        if r.spawn.0 >= r.size || r.spawn.1 >= r.size {
            return Err("spawn must lie on the map".into());
        }
        Ok(CrafterMap { size: r.size, materials, spawn: r.spawn, seed: r.seed })
    }
}

impl CrafterMap {
    pub fn layout(&self) -> Layout {
        Layout::Grid { rows: self.size, cols: self.size }
    }

    pub fn at(&self, r: usize, c: usize) -> Value {
        self.materials[r * self.size + c]
    }

    pub fn count(&self, v: Value) -> usize {
        self.materials.iter().filter(|m| **m == v).count()
    }

    pub fn to_instance(&self) -> GroundTruthInstance {
        GroundTruthInstance {
            domain: Domain::Crafter,
            layout: self.layout(),
            assignment: self.materials.clone(),
            task: TaskPayload::Crafter { spawn: self.layout().var(self.spawn.0, self.spawn.1) },
        }
    }
}

/// Seeded 2D gradient noise with independent layers selected by `z`.
struct Noise {
    seed: u64,
}

impl Noise {
    fn hash(&self, x: i64, y: i64, z: i64) -> u64 {
        let mut h = self.seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        h ^= (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 33;
        h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
        h ^ (h >> 33)
    }

    fn gradient(&self, x: i64, y: i64, z: i64, dx: f64, dy: f64) -> f64 {
        let angle = (self.hash(x, y, z) >> 11) as f64 / (1u64 << 53) as f64 * std::f64::consts::TAU;
        angle.cos() * dx + angle.sin() * dy
    }

    /// Roughly in [-1, 1].
    fn noise(&self, x: f64, y: f64, z: i64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (u, v) = (fade(fx), fade(fy));
        let n00 = self.gradient(ix, iy, z, fx, fy);
        let n10 = self.gradient(ix + 1, iy, z, fx - 1.0, fy);
        let n01 = self.gradient(ix, iy + 1, z, fx, fy - 1.0);
        let n11 = self.gradient(ix + 1, iy + 1, z, fx - 1.0, fy - 1.0);
        let a = n00 + u * (n10 - n00);
        let b = n01 + u * (n11 - n01);
        std::f64::consts::SQRT_2 * (a + v * (b - a))
    }

    fn layered(&self, x: f64, y: f64, z: i64, sizes: &[(f64, f64)], normalize: bool) -> f64 {
        let mut value = 0.0;
        for &(size, weight) in sizes {
            value += weight * self.noise(x / size, y / size, z);
        }
        if normalize {
            value /= sizes.iter().map(|s| s.1).sum::<f64>();
        }
        value
    }
}

fn terrain(size: usize, rng: &mut ChaCha8Rng) -> Vec<Value> {
    let noise = Noise { seed: rng.gen() };
    let s = |x: f64, y: f64, z: i64, size: f64| noise.layered(x, y, z, &[(size, 1.0)], true);
    let (px, py) = ((size / 2) as f64, (size / 2) as f64);
    let mut out = vec![GRASS; size * size];
    for xi in 0..size {
        for yi in 0..size {
            let (x, y) = (xi as f64, yi as f64);
            let mut start = 4.0 - ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            start += 2.0 * s(x, y, 8, 3.0);
            let start = 1.0 / (1.0 + (-start).exp());
            let mut water = noise.layered(x, y, 3, &[(15.0, 1.0), (5.0, 0.15)], false) + 0.1;
            water -= 2.0 * start;
            let mut mountain = noise.layered(x, y, 0, &[(15.0, 1.0), (5.0, 0.3)], true);
            mountain -= 4.0 * start + 0.3 * water;
            let m = if start > 0.5 {
                GRASS
            } else if mountain > 0.15 {
                if s(x, y, 6, 7.0) > 0.15 && mountain > 0.3 {
                    PATH
                } else if s(2.0 * x, y / 5.0, 7, 3.0) > 0.4 || s(x / 5.0, 2.0 * y, 7, 3.0) > 0.4 {
                    PATH
                } else if s(x, y, 1, 8.0) > 0.0 && rng.gen::<f64>() > 0.85 {
                    COAL
                } else if s(x, y, 2, 6.0) > 0.4 && rng.gen::<f64>() > 0.75 {
                    IRON
                } else if mountain > 0.18 && rng.gen::<f64>() > 0.994 {
                    DIAMOND
                } else if mountain > 0.3 && s(x, y, 6, 5.0) > 0.35 {
                    LAVA
                } else {
                    STONE
                }
            } else if water > 0.25 && water <= 0.35 && s(x, y, 4, 9.0) > -0.2 {
                SAND
            } else if water > 0.3 {
                WATER
            } else if s(x, y, 5, 7.0) > 0.0 && rng.gen::<f64>() > 0.8 {
                TREE
            } else {
                GRASS
            };
            out[yi * size + xi] = m;
        }
    }
    // Diamonds only occur inside rock.
    for i in 0..size * size {
        if out[i] == DIAMOND && !grid_neighbors(size, i).any(|j| out[j] == STONE) {
            out[i] = STONE;
        }
    }
    out
}

fn grid_neighbors(size: usize, i: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / size, i % size);
    let mut out = [usize::MAX; 4];
    if r > 0 {
        out[0] = i - size;
    }
    if c > 0 {
        out[1] = i - 1;
    }
    if c + 1 < size {
        out[2] = i + 1;
    }
    if r + 1 < size {
        out[3] = i + size;
    }
    out.into_iter().filter(|&j| j != usize::MAX)
}

/// Cells reachable from `from` through materials in `open`.
fn reach(materials: &[Value], size: usize, from: usize, open: &[Value]) -> Vec<bool> {
    let mut seen = vec![false; materials.len()];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(i) = queue.pop_front() {
        for j in grid_neighbors(size, i) {
            if !seen[j] && open.contains(&materials[j]) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

/// Whether every quota resource can be reached in the order the tools
/// unlock it.
pub fn meets_quota(materials: &[Value], size: usize, spawn: (usize, usize), quota: &Quota) -> bool {
    let from = spawn.0 * size + spawn.1;
    let mut open = vec![GRASS, SAND, PATH, TREE];
    let stages: [(&[Value], &[(Value, usize)]); 4] = [
        (&[], &[(TREE, quota.tree)]),
        (&[STONE, COAL], &[(STONE, quota.stone), (COAL, quota.coal)]),
        (&[IRON], &[(IRON, quota.iron)]),
        (&[DIAMOND], &[(DIAMOND, quota.diamond)]),
    ];
    for (unlock, needs) in stages {
        open.extend_from_slice(unlock);
        let seen = reach(materials, size, from, &open);
        for &(m, n) in needs {
            if materials.iter().zip(&seen).filter(|(v, s)| **s && **v == m).count() < n {
                return false;
            }
        }
    }
    true
}

/// Generate maps from one seeded stream until one meets the quota.
pub fn generate_world(seed: u64, size: usize, quota: &Quota) -> Result<CrafterMap, CrafterError> {
    if size < 16 {
        return Err(CrafterError::TooSmall(size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spawn = (size / 2, size / 2);
    for _ in 0..MAX_REJECTIONS {
        let materials = terrain(size, &mut rng);
        if meets_quota(&materials, size, spawn, quota) {
            return Ok(CrafterMap { size, materials, spawn, seed });
        }
    }
    Err(CrafterError::Exhausted(MAX_REJECTIONS))
}

/// Cross configurations seen at least `min_count` times on maps generated
/// from `seeds`, most frequent first. Serves as the ground-truth macro set
/// for the oracle proposer.
pub fn mine_cross_macros(seeds: impl IntoIterator<Item = u64>, size: usize, min_count: usize) -> Vec<MacroPattern> {
    let mut counts: BTreeMap<[u8; 5], usize> = BTreeMap::new();
    for seed in seeds {
        let Ok(map) = generate_world(seed, size, &Quota::default()) else { continue };
        for r in 1..size - 1 {
            for c in 1..size - 1 {
                let key = [map.at(r, c), map.at(r - 1, c), map.at(r + 1, c), map.at(r, c - 1), map.at(r, c + 1)].map(|v| v.0);
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<([u8; 5], usize)> = counts.into_iter().filter(|(_, n)| *n >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .map(|(k, _)| MacroPattern::Cross {
            center: Value(k[0]),
            top: Value(k[1]),
            bottom: Value(k[2]),
            left: Value(k[3]),
            right: Value(k[4]),
        })
        .collect()
}

/// Walking, mining, and placement rules, loaded from the bundled data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipes {
    pub collect: BTreeMap<String, CollectRule>,
    pub place: BTreeMap<String, PlaceRule>,
    pub make: BTreeMap<String, MakeRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectRule {
    pub require: Vec<String>,
    pub receive: String,
    pub leaves: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceRule {
    pub uses: BTreeMap<String, u32>,
    #[serde(rename = "where")]
    pub where_: Vec<String>,
    pub nearby: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MakeRule {
    pub uses: BTreeMap<String, u32>,
    pub nearby: Vec<String>,
}

pub fn recipes() -> &'static Recipes {
    static R: OnceLock<Recipes> = OnceLock::new();
    R.get_or_init(|| serde_json::from_str(include_str!("../assets/crafter_recipes.json")).expect("bundled recipes parse"))
}

pub type Inventory = BTreeMap<String, u32>;

fn held(inv: &Inventory, item: &str) -> u32 {
    inv.get(item).copied().unwrap_or(0)
}

/// Whether the agent can walk through `m`, possibly after mining it with the
/// tools it holds.
pub fn passable(m: Value, inv: &Inventory) -> bool {
    match m {
        GRASS | SAND | PATH | TREE => true,
        STONE | COAL => held(inv, "wood_pickaxe") > 0,
        IRON => held(inv, "stone_pickaxe") > 0,
        DIAMOND => held(inv, "iron_pickaxe") > 0,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "material")]
pub enum Tile {
    Material(Value),
    Table,
    Furnace,
}

impl Tile {
    fn name(self) -> &'static str {
        match self {
            Tile::Material(v) => material_name(v),
            Tile::Table => "table",
            Tile::Furnace => "furnace",
        }
    }

    fn walkable(self) -> bool {
        matches!(self, Tile::Material(GRASS | SAND | PATH))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    Do,
    PlaceStone,
    PlaceTable,
    PlaceFurnace,
    PlacePlant,
    MakeWoodPickaxe,
    MakeStonePickaxe,
    MakeIronPickaxe,
    MakeWoodSword,
    MakeStoneSword,
    MakeIronSword,
}

impl Action {
    pub const ALL: [Action; 15] = [
        Action::MoveLeft,
        Action::MoveRight,
        Action::MoveUp,
        Action::MoveDown,
        Action::Do,
        Action::PlaceStone,
        Action::PlaceTable,
        Action::PlaceFurnace,
        Action::PlacePlant,
        Action::MakeWoodPickaxe,
        Action::MakeStonePickaxe,
        Action::MakeIronPickaxe,
        Action::MakeWoodSword,
        Action::MakeStoneSword,
        Action::MakeIronSword,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveLeft => "move_left",
            Action::MoveRight => "move_right",
            Action::MoveUp => "move_up",
            Action::MoveDown => "move_down",
            Action::Do => "do",
            Action::PlaceStone => "place_stone",
            Action::PlaceTable => "place_table",
            Action::PlaceFurnace => "place_furnace",
            Action::PlacePlant => "place_plant",
            Action::MakeWoodPickaxe => "make_wood_pickaxe",
            Action::MakeStonePickaxe => "make_stone_pickaxe",
            Action::MakeIronPickaxe => "make_iron_pickaxe",
            Action::MakeWoodSword => "make_wood_sword",
            Action::MakeStoneSword => "make_stone_sword",
            Action::MakeIronSword => "make_iron_sword",
        }
    }

    fn direction(self) -> Option<(isize, isize)> {
        match self {
            Action::MoveLeft => Some((0, -1)),
            Action::MoveRight => Some((0, 1)),
            Action::MoveUp => Some((-1, 0)),
            Action::MoveDown => Some((1, 0)),
            _ => None,
        }
    }

    fn toward(d: (isize, isize)) -> Action {
        match d {
            (0, -1) => Action::MoveLeft,
            (0, 1) => Action::MoveRight,
            (-1, 0) => Action::MoveUp,
            _ => Action::MoveDown,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Achievement {
    CollectWood,
    PlaceTable,
    MakeWoodPickaxe,
    MakeWoodSword,
    CollectStone,
    PlaceStone,
    MakeStonePickaxe,
    MakeStoneSword,
    PlaceFurnace,
    CollectCoal,
    CollectIron,
    MakeIronPickaxe,
    MakeIronSword,
    CollectDiamond,
}

impl Achievement {
    /// The fixed completion order.
    pub const ORDER: [Achievement; 14] = [
        Achievement::CollectWood,
        Achievement::PlaceTable,
        Achievement::MakeWoodPickaxe,
        Achievement::MakeWoodSword,
        Achievement::CollectStone,
        Achievement::PlaceStone,
        Achievement::MakeStonePickaxe,
        Achievement::MakeStoneSword,
        Achievement::PlaceFurnace,
        Achievement::CollectCoal,
        Achievement::CollectIron,
        Achievement::MakeIronPickaxe,
        Achievement::MakeIronSword,
        Achievement::CollectDiamond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Achievement::CollectWood => "collect_wood",
            Achievement::PlaceTable => "place_table",
            Achievement::MakeWoodPickaxe => "make_wood_pickaxe",
            Achievement::MakeWoodSword => "make_wood_sword",
            Achievement::CollectStone => "collect_stone",
            Achievement::PlaceStone => "place_stone",
            Achievement::MakeStonePickaxe => "make_stone_pickaxe",
            Achievement::MakeStoneSword => "make_stone_sword",
            Achievement::PlaceFurnace => "place_furnace",
            Achievement::CollectCoal => "collect_coal",
            Achievement::CollectIron => "collect_iron",
            Achievement::MakeIronPickaxe => "make_iron_pickaxe",
            Achievement::MakeIronSword => "make_iron_sword",
            Achievement::CollectDiamond => "collect_diamond",
        }
    }

    pub fn subtask(self) -> Subtask {
        let (kind, name) = match self {
            Achievement::CollectWood => (SubtaskKind::Collect, "tree"),
            Achievement::CollectStone => (SubtaskKind::Collect, "stone"),
            Achievement::CollectCoal => (SubtaskKind::Collect, "coal"),
            Achievement::CollectIron => (SubtaskKind::Collect, "iron"),
            Achievement::CollectDiamond => (SubtaskKind::Collect, "diamond"),
            Achievement::PlaceTable => (SubtaskKind::Place, "table"),
            Achievement::PlaceStone => (SubtaskKind::Place, "stone"),
            Achievement::PlaceFurnace => (SubtaskKind::Place, "furnace"),
            Achievement::MakeWoodPickaxe => (SubtaskKind::Make, "wood_pickaxe"),
            Achievement::MakeWoodSword => (SubtaskKind::Make, "wood_sword"),
            Achievement::MakeStonePickaxe => (SubtaskKind::Make, "stone_pickaxe"),
            Achievement::MakeStoneSword => (SubtaskKind::Make, "stone_sword"),
            Achievement::MakeIronPickaxe => (SubtaskKind::Make, "iron_pickaxe"),
            Achievement::MakeIronSword => (SubtaskKind::Make, "iron_sword"),
        };
        let r = recipes();
        let (costs, nearby) = match kind {
            SubtaskKind::Collect => (BTreeMap::from([(r.collect[name].receive.clone(), 1)]), Vec::new()),
            SubtaskKind::Place => (r.place[name].uses.clone(), r.place[name].nearby.clone()),
            SubtaskKind::Make => (r.make[name].uses.clone(), r.make[name].nearby.clone()),
        };
        Subtask { achievement: self, kind, target: name.to_string(), costs, nearby }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    Collect,
    Place,
    Make,
}

/// What an achievement needs: inventory costs, stations within reach, and
/// for collection the material to look for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub achievement: Achievement,
    pub kind: SubtaskKind,
    pub target: String,
    pub costs: BTreeMap<String, u32>,
    pub nearby: Vec<String>,
}

/// Raw material an inventory item is gathered from.
fn source_of(item: &str) -> Option<Value> {
    recipes().collect.iter().find(|(_, rule)| rule.receive == item).map(|(m, _)| material(m))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub size: usize,
    pub player: (usize, usize),
    pub facing: (isize, isize),
    pub inventory: Inventory,
    /// Items ever collected, including ones since spent.
    pub collected: Inventory,
    pub terrain: Vec<Tile>,
    pub achievements: Vec<(Achievement, usize)>,
    pub steps: usize,
}

impl GameState {
    pub fn new(map: &CrafterMap) -> Self {
        GameState {
            size: map.size,
            player: map.spawn,
            facing: (1, 0),
            inventory: Inventory::new(),
            collected: Inventory::new(),
            terrain: map.materials.iter().map(|m| Tile::Material(*m)).collect(),
            achievements: Vec::new(),
            steps: 0,
        }
    }

    pub fn tile(&self, (r, c): (usize, usize)) -> Tile {
        self.terrain[r * self.size + c]
    }

    fn offset(&self, (r, c): (usize, usize), (dr, dc): (isize, isize)) -> Option<(usize, usize)> {
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        (nr >= 0 && nc >= 0 && (nr as usize) < self.size && (nc as usize) < self.size).then_some((nr as usize, nc as usize))
    }

    pub fn target(&self) -> Option<(usize, usize)> {
        self.offset(self.player, self.facing)
    }

    /// Whether a tile named `name` lies within one step (including
    /// diagonals) of the player.
    pub fn nearby(&self, name: &str) -> bool {
        (-1..=1).any(|dr| (-1..=1).any(|dc| self.offset(self.player, (dr, dc)).is_some_and(|p| self.tile(p).name() == name)))
    }

    fn check(&self, action: Action, uses: &BTreeMap<String, u32>, nearby: &[String]) -> Result<(), CrafterError> {
        for (item, n) in uses {
            if held(&self.inventory, item) < *n {
                return Err(CrafterError::Precondition { action: action.name().into(), reason: format!("needs {n} {item}") });
            }
        }
        for station in nearby {
            if !self.nearby(station) {
                return Err(CrafterError::Precondition { action: action.name().into(), reason: format!("needs a nearby {station}") });
            }
        }
        Ok(())
    }

    fn spend(&mut self, uses: &BTreeMap<String, u32>) {
        for (item, n) in uses {
            *self.inventory.entry(item.clone()).or_insert(0) -= n;
        }
    }

    /// Apply one action. Returns the cell whose tile changed, if any.
    pub fn step(&mut self, action: Action) -> Result<Option<(usize, usize)>, CrafterError> {
        self.steps += 1;
        let r = recipes();
        if let Some(d) = action.direction() {
            self.facing = d;
            if let Some(p) = self.target() {
                if self.tile(p).walkable() {
                    self.player = p;
                }
            }
            return Ok(None);
        }
        let fail = |reason: &str| CrafterError::Precondition { action: action.name().into(), reason: reason.into() };
        let target = self.target();
        match action {
            Action::Do => {
                let Some(p) = target else { return Ok(None) };
                let Tile::Material(m) = self.tile(p) else { return Ok(None) };
                let Some(rule) = r.collect.get(material_name(m)) else { return Ok(None) };
                if rule.require.iter().any(|t| held(&self.inventory, t) == 0) {
                    return Ok(None);
                }
                *self.inventory.entry(rule.receive.clone()).or_insert(0) += 1;
                *self.collected.entry(rule.receive.clone()).or_insert(0) += 1;
                self.terrain[p.0 * self.size + p.1] = Tile::Material(material(&rule.leaves));
                Ok(Some(p))
            }
            Action::PlaceStone | Action::PlaceTable | Action::PlaceFurnace => {
                let (name, tile) = match action {
                    Action::PlaceStone => ("stone", Tile::Material(STONE)),
                    Action::PlaceTable => ("table", Tile::Table),
                    _ => ("furnace", Tile::Furnace),
                };
                let rule = &r.place[name];
                let p = target.ok_or_else(|| fail("facing the map edge"))?;
                if !rule.where_.iter().any(|w| w == self.tile(p).name()) {
                    return Err(fail(&format!("cannot place on {}", self.tile(p).name())));
                }
                self.check(action, &rule.uses, &rule.nearby)?;
                self.spend(&rule.uses);
                self.terrain[p.0 * self.size + p.1] = tile;
                Ok(Some(p))
            }
            Action::PlacePlant => Err(fail("saplings are not part of this world")),
            _ => {
                let item = &action.name()["make_".len()..];
                let rule = &r.make[item];
                self.check(action, &rule.uses, &rule.nearby)?;
                self.spend(&rule.uses);
                *self.inventory.entry(item.to_string()).or_insert(0) += 1;
                Ok(None)
            }
        }
    }
}

/// The agent: its world model, the true game state, and what it knows
/// about its own changes to the map.
struct Agent<'a, 'b> {
    map: &'a CrafterMap,
    truth: GroundTruthInstance,
    world: WorldModel,
    ledger: TokenLedger,
    state: GameState,
    changed: Vec<bool>,
    inference: Option<Inference<'b>>,
    tracer: Tracer,
    scores: Vec<Option<f64>>,
    score_targets: Vec<Value>,
    scratch: Vec<usize>,
}

const DIRS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

impl<'a, 'b> Agent<'a, 'b> {
    fn n(&self) -> usize {
        self.map.size
    }

    fn idx(&self, (r, c): (usize, usize)) -> usize {
        r * self.n() + c
    }

    fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.n(), i % self.n())
    }

    /// The agent's belief about a cell's current tile: its own edits, else
    /// what it revealed.
    fn view(&self, i: usize) -> Option<Tile> {
        if self.changed[i] {
            Some(self.state.terrain[i])
        } else {
            self.world.revealed(VariableId(i as u32)).map(Tile::Material)
        }
    }

    fn can_pass(&self, i: usize) -> bool {
        match self.view(i) {
            Some(Tile::Material(m)) => passable(m, &self.state.inventory),
            _ => false,
        }
    }

    /// BFS over known passable cells from the player; returns parents and
    /// the visit order.
    fn region(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n();
        let start = self.idx(self.state.player);
        let mut parent = vec![usize::MAX; n * n];
        parent[start] = start;
        let mut order = vec![start];
        let mut head = 0;
        while head < order.len() {
            let i = order[head];
            head += 1;
            for j in grid_neighbors(n, i) {
                if parent[j] == usize::MAX && self.can_pass(j) {
                    parent[j] = i;
                    order.push(j);
                }
            }
        }
        (parent, order)
    }

    fn act(&mut self, action: Action) -> Result<(), CrafterError> {
        if self.state.steps >= MAX_ACTIONS {
            return Err(CrafterError::ActionLimit(MAX_ACTIONS));
        }
        let step = self.state.steps;
        self.tracer.push(|| TraceEvent::Action { step, action: action.name().into() });
        if let Some(p) = self.state.step(action)? {
            let i = self.idx(p);
            self.changed[i] = true;
        }
        Ok(())
    }

    /// Walk along `path` (excluding the current cell), mining through
    /// minable cells.
    fn walk(&mut self, path: &[usize]) -> Result<(), CrafterError> {
        for &i in path {
            let (r, c) = self.cell(i);
            let (pr, pc) = self.state.player;
            let d = (r as isize - pr as isize, c as isize - pc as isize);
            let mv = Action::toward(d);
            if !self.view(i).is_some_and(Tile::walkable) {
                self.act(mv)?;
                self.act(Action::Do)?;
            }
            self.act(mv)?;
            if self.state.player != (r, c) {
                return Err(CrafterError::Precondition { action: mv.name().into(), reason: format!("blocked at {:?}", (r, c)) });
            }
        }
        Ok(())
    }

    fn path_to(parent: &[usize], mut i: usize) -> Vec<usize> {
        let mut path = Vec::new();
        while parent[i] != i {
            path.push(i);
            i = parent[i];
        }
        path.reverse();
        path
    }

    /// Reveal the best frontier cell for finding `targets`.
    fn explore(&mut self, targets: &[Value], what: &str) -> Result<(), CrafterError> {
        let (_, order) = self.region();
        let n = self.n();
        let mut in_frontier = vec![false; n * n];
        let mut frontier = Vec::new();
        for &i in &order {
            for j in grid_neighbors(n, i) {
                if !in_frontier[j] && !self.world.is_revealed(VariableId(j as u32)) && !self.changed[j] {
                    in_frontier[j] = true;
                    frontier.push(j);
                }
            }
        }
        frontier.sort_unstable();
        if frontier.is_empty() {
            return Err(CrafterError::ExplorationExhausted(what.into()));
        }
        let mut pick = frontier.iter().copied().find(|&j| !self.world.is_known(VariableId(j as u32))).unwrap_or(frontier[0]);
        if let Some(inf) = self.inference {
            let vars: Vec<VariableId> = frontier
                .iter()
                .map(|&j| VariableId(j as u32))
                .filter(|v| !self.world.is_known(*v))
                .collect();
            let added = impute_closure(&mut self.world, inf.library, &inf.imputation, &vars).expect("frontier is unrevealed");
            for f in &added {
                self.tracer.push(|| TraceEvent::Impute { var: f.variable, value: f.value });
                self.invalidate(f.variable.index());
            }
            if self.score_targets != targets {
                self.score_targets = targets.to_vec();
                self.scores.iter_mut().for_each(|s| *s = None);
            }
            let mut best: Option<(f64, usize)> = None;
            for &j in &frontier {
                let v = VariableId(j as u32);
                if self.world.is_known(v) {
                    continue;
                }
                let score = match self.scores[j] {
                    Some(s) => s,
                    None => {
                        let s = inf.library.target_mass(v, &self.world, targets, &mut self.scratch);
                        self.scores[j] = Some(s);
                        s
                    }
                };
                if best.map_or(true, |(b, _)| score > b) {
                    best = Some((score, j));
                }
            }
            if let Some((_, j)) = best {
                pick = j;
            }
        }
        let fact = reveal(&self.truth, VariableId(pick as u32), &mut self.world, &mut self.ledger).expect("frontier cell is unrevealed");
        self.tracer.push(|| TraceEvent::Reveal { var: fact.variable, value: fact.value });
        self.invalidate(pick);
        Ok(())
    }

    fn invalidate(&mut self, i: usize) {
        self.scores[i] = None;
        for j in grid_neighbors(self.n(), i) {
            self.scores[j] = None;
        }
    }

    /// Collect `material` until `item` reaches `count`.
    fn gather(&mut self, m: Value, item: &str, count: u32) -> Result<(), CrafterError> {
        while held(&self.state.inventory, item) < count {
            let (parent, order) = self.region();
            let mut found = None;
            'search: for &i in &order {
                for j in grid_neighbors(self.n(), i) {
                    if self.view(j) == Some(Tile::Material(m)) {
                        found = Some((i, j));
                        break 'search;
                    }
                }
            }
            match found {
                Some((stand, t)) => {
                    self.walk(&Self::path_to(&parent, stand))?;
                    let (r, c) = self.cell(t);
                    let (pr, pc) = self.state.player;
                    self.act(Action::toward((r as isize - pr as isize, c as isize - pc as isize)))?;
                    self.act(Action::Do)?;
                }
                None => self.explore(&[m], material_name(m))?,
            }
        }
        Ok(())
    }

    fn gather_costs(&mut self, costs: &BTreeMap<String, u32>) -> Result<(), CrafterError> {
        for (item, n) in costs {
            let src = source_of(item).ok_or_else(|| CrafterError::Precondition {
                action: "gather".into(),
                reason: format!("no material yields {item}"),
            })?;
            self.gather(src, item, *n)?;
        }
        Ok(())
    }

    fn stations_ok(&self, p: usize, nearby: &[String]) -> bool {
        let (r, c) = self.cell(p);
        nearby.iter().all(|name| {
            (-1isize..=1).any(|dr| {
                (-1isize..=1).any(|dc| {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    nr >= 0
                        && nc >= 0
                        && (nr as usize) < self.n()
                        && (nc as usize) < self.n()
                        && self.view(self.idx((nr as usize, nc as usize))).is_some_and(|t| t.name() == name)
                })
            })
        })
    }

    /// Stand within reach of the stations.
    fn go_near(&mut self, nearby: &[String]) -> Result<(), CrafterError> {
        if nearby.is_empty() {
            return Ok(());
        }
        let (parent, order) = self.region();
        let me = self.idx(self.state.player);
        let spot = order
            .iter()
            .copied()
            .find(|&i| (i == me || self.view(i).is_some_and(Tile::walkable)) && self.stations_ok(i, nearby))
            .ok_or_else(|| CrafterError::Precondition { action: "approach".into(), reason: format!("no reachable spot near {nearby:?}") })?;
        self.walk(&Self::path_to(&parent, spot))
    }

    /// Place `what` in front of the player from a spot within reach of the
    /// stations, exploring until such a spot exists.
    fn place(&mut self, action: Action, rule: &PlaceRule) -> Result<(), CrafterError> {
        loop {
            let (parent, order) = self.region();
            let me = self.idx(self.state.player);
            let n = self.n();
            let placeable = |a: &Self, q: usize| a.view(q).is_some_and(|t| rule.where_.iter().any(|w| w == t.name()));
            // Already facing a good cell.
            if let Some(t) = self.state.target() {
                if placeable(self, self.idx(t)) && self.stations_ok(me, &rule.nearby) {
                    return self.act(action);
                }
            }
            let mut plan = None;
            'search: for &pre in &order {
                for d in DIRS {
                    let (r, c) = self.cell(pre);
                    let step = |k: isize| {
                        let (nr, nc) = (r as isize + k * d.0, c as isize + k * d.1);
                        (nr >= 0 && nc >= 0 && (nr as usize) < n && (nc as usize) < n).then(|| nr as usize * n + nc as usize)
                    };
                    let (Some(p), Some(q)) = (step(1), step(2)) else { continue };
                    if self.view(p).is_some_and(Tile::walkable) && placeable(self, q) && self.stations_ok(p, &rule.nearby) {
                        plan = Some((pre, d));
                        break 'search;
                    }
                }
            }
            match plan {
                Some((pre, d)) => {
                    self.walk(&Self::path_to(&parent, pre))?;
                    self.act(Action::toward(d))?;
                    return self.act(action);
                }
                None => {
                    let targets: Vec<Value> = rule.where_.iter().map(|w| material(w)).collect();
                    self.explore(&targets, action.name())?;
                }
            }
        }
    }

    fn subtask(&mut self, task: &Subtask) -> Result<(), CrafterError> {
        match task.kind {
            SubtaskKind::Collect => {
                let m = material(&task.target);
                // Mining along earlier paths may already have collected it.
                let item = &recipes().collect[&task.target].receive;
                if held(&self.state.collected, item) > 0 {
                    return Ok(());
                }
                self.gather(m, item, held(&self.state.inventory, item) + 1)
            }
            SubtaskKind::Place => {
                self.gather_costs(&task.costs)?;
                let rule = recipes().place[&task.target].clone();
                let action = match task.target.as_str() {
                    "stone" => Action::PlaceStone,
                    "table" => Action::PlaceTable,
                    _ => Action::PlaceFurnace,
                };
                self.place(action, &rule)
            }
            SubtaskKind::Make => {
                self.gather_costs(&task.costs)?;
                self.go_near(&task.nearby)?;
                let action = Action::ALL.into_iter().find(|a| a.name() == format!("make_{}", task.target)).expect("make action");
                self.act(action)
            }
        }
    }
}

/// Play the fourteen achievements in order, revealing cells as needed.
/// With inference, reveal candidates are ordered by the library's mass on
/// the material being sought.
pub fn run_episode(map: &CrafterMap, inference: Option<Inference<'_>>, trace: bool) -> EpisodeOutcome {
    let truth = map.to_instance();
    let n = map.size * map.size;
    let mut agent = Agent {
        map,
        world: truth.empty_world(),
        truth,
        ledger: TokenLedger::new(RevealBudget::for_domain(Domain::Crafter)),
        state: GameState::new(map),
        changed: vec![false; n],
        inference,
        tracer: Tracer::new(trace),
        scores: vec![None; n],
        score_targets: Vec::new(),
        scratch: Vec::new(),
    };
    let spawn = map.layout().var(map.spawn.0, map.spawn.1);
    let fact = reveal(&agent.truth, spawn, &mut agent.world, &mut agent.ledger).expect("fresh world");
    agent.tracer.push(|| TraceEvent::Reveal { var: fact.variable, value: fact.value });
    let mut failure = None;
    for a in Achievement::ORDER {
        if let Err(e) = agent.subtask(&a.subtask()) {
            failure = Some(format!("{}: {e}", a.name()));
            break;
        }
        let step = agent.state.steps;
        agent.state.achievements.push((a, step));
        agent.tracer.push(|| TraceEvent::Achievement { step, name: a.name().into() });
    }
    EpisodeOutcome { world: agent.world, ledger: agent.ledger, success: failure.is_none(), failure, trace: agent.tracer.events }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{ImputationConfig, PatternLibrary};
    use crate::world::grounding_accuracy;

    #[test]
    fn passability_rules() {
        let mut inv = Inventory::new();
        assert!(passable(TREE, &inv));
        assert!(!passable(STONE, &inv));
        assert!(!passable(LAVA, &inv));
        inv.insert("wood_pickaxe".into(), 1);
        assert!(passable(STONE, &inv) && passable(COAL, &inv));
        assert!(!passable(IRON, &inv));
        inv.insert("stone_pickaxe".into(), 1);
        inv.insert("iron_pickaxe".into(), 1);
        assert!(passable(IRON, &inv) && passable(DIAMOND, &inv));
        assert!(!passable(WATER, &inv) && !passable(LAVA, &inv));
    }

    #[test]
    fn recipes_match_original_costs() {
        let r = recipes();
        assert_eq!(r.place["table"].uses["wood"], 2);
        assert_eq!(r.place["furnace"].uses["stone"], 4);
        assert_eq!(r.make["iron_pickaxe"].nearby, vec!["table".to_string(), "furnace".to_string()]);
        let mut wood = 0;
        let mut stone = 0;
        for a in Achievement::ORDER {
            let t = a.subtask();
            if t.kind != SubtaskKind::Collect {
                wood += t.costs.get("wood").copied().unwrap_or(0);
                stone += t.costs.get("stone").copied().unwrap_or(0);
            }
        }
        assert_eq!((wood, stone), (8, 7));
        assert_eq!(Action::ALL.len(), 15);
    }

    #[test]
    fn generated_worlds_meet_quota_and_are_deterministic() {
        for seed in 0..5 {
            let m = generate_world(seed, 64, &Quota::default()).unwrap();
            assert!(m.count(TREE) >= 9 && m.count(STONE) >= 8 && m.count(COAL) >= 3 && m.count(IRON) >= 3 && m.count(DIAMOND) >= 1);
            assert_eq!(m.at(m.spawn.0, m.spawn.1), GRASS);
            for i in 0..m.materials.len() {
                if m.materials[i] == DIAMOND {
                    assert!(grid_neighbors(64, i).any(|j| m.materials[j] == STONE));
                }
            }
            assert_eq!(m, generate_world(seed, 64, &Quota::default()).unwrap());
        }
    }

    fn tiny_map(rows: [&str; 7]) -> CrafterMap {
        let key = |c: char| match c {
            'g' => GRASS,
            's' => STONE,
            't' => TREE,
            'w' => WATER,
            _ => PATH,
        };
        CrafterMap { size: 7, materials: rows.iter().flat_map(|r| r.chars().map(key)).collect(), spawn: (3, 3), seed: 0 }
    }

    fn agent_for(map: &CrafterMap) -> Agent<'_, 'static> {
        let truth = map.to_instance();
        let n = map.size * map.size;
        Agent {
            map,
            world: truth.empty_world(),
            truth,
            ledger: TokenLedger::new(RevealBudget::for_domain(Domain::Crafter)),
            state: GameState::new(map),
            changed: vec![false; n],
            inference: None,
            tracer: Tracer::new(false),
            scores: vec![None; n],
            score_targets: vec![],
            scratch: vec![],
        }
    }

    #[test]
    fn frontier_of_a_single_grass_cell() {
        let map = tiny_map(["ggggggg"; 7]);
        let mut a = agent_for(&map);
        a.world.insert_revealed(VariableId(24), GRASS).unwrap();
        // Reveals go to the row-major first frontier cell: (2,3).
        a.explore(&[TREE], "tree").unwrap();
        assert!(a.world.is_revealed(a.map.layout().var(2, 3)));
    }

    #[test]
    fn stone_ring_blocks_exploration_without_a_pickaxe() {
        let map = tiny_map(["ggggggg", "gsssssg", "gsgggsg", "gsgggsg", "gsgggsg", "gsssssg", "ggggggg"]);
        let mut a = agent_for(&map);
        for r in 1..6 {
            for c in 1..6 {
                let v = a.map.layout().var(r, c);
                a.world.insert_revealed(v, map.at(r, c)).unwrap();
            }
        }
        assert!(matches!(a.explore(&[TREE], "tree"), Err(CrafterError::ExplorationExhausted(_))));
        a.state.inventory.insert("wood_pickaxe".into(), 1);
        a.explore(&[TREE], "tree").unwrap();
        assert_eq!(a.ledger.reveal_count, 1);
    }

    #[test]
    fn adjacent_tree_takes_one_do() {
        let map = tiny_map(["ggggggg", "ggggggg", "ggggggg", "ggggggg", "gggtggg", "ggggggg", "ggggggg"]);
        let mut a = agent_for(&map);
        a.world.insert_revealed(VariableId(24), GRASS).unwrap();
        a.world.insert_revealed(a.map.layout().var(4, 3), TREE).unwrap();
        a.subtask(&Achievement::CollectWood.subtask()).unwrap();
        assert_eq!(held(&a.state.inventory, "wood"), 1);
        assert_eq!(a.state.player, (3, 3));
        assert_eq!(a.state.steps, 2);
        assert_eq!(a.state.tile((4, 3)), Tile::Material(GRASS));
    }

    #[test]
    fn recipe_preconditions_are_enforced() {
        let map = tiny_map(["ggggggg"; 7]);
        let mut s = GameState::new(&map);
        assert!(matches!(s.step(Action::PlaceTable), Err(CrafterError::Precondition { .. })));
        s.inventory.insert("wood".into(), 3);
        s.step(Action::PlaceTable).unwrap();
        assert_eq!(s.tile((4, 3)), Tile::Table);
        s.step(Action::MakeWoodPickaxe).unwrap();
        assert_eq!(held(&s.inventory, "wood_pickaxe"), 1);
        assert!(s.step(Action::PlacePlant).is_err());
        s.inventory.insert("stone".into(), 4);
        s.step(Action::MoveRight).unwrap();
        assert_eq!(s.player, (3, 4));
        s.step(Action::PlaceFurnace).unwrap();
        assert_eq!(s.tile((3, 5)), Tile::Furnace);
    }

    #[test]
    fn full_run_with_and_without_reranking() {
        let map = generate_world(7, 64, &Quota::default()).unwrap();
        let base = run_episode(&map, None, false);
        assert!(base.success, "{:?}", base.failure);
        assert_eq!(grounding_accuracy(&base.world, &map.to_instance()).unwrap(), 1.0);
        let mut lib = PatternLibrary::empty(Domain::Crafter);
        for m in mine_cross_macros(100..102, 64, 20) {
            lib.add_macro(&m, 1.0).unwrap();
        }
        let inf = Inference { library: &lib, imputation: ImputationConfig::for_domain(Domain::Crafter), full_closure: false };
        let full = run_episode(&map, Some(inf), true);
        assert!(full.success, "{:?}", full.failure);
        assert_eq!(full.world.effective_imputed_count(), 0);
        assert!(full.trace.iter().filter(|e| matches!(e, TraceEvent::Achievement { .. })).count() == 14);
    }
}
