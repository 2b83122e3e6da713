//! Facelet-level Rubik's cube: state, move engine, scramble datasets,
//! corner-cubie structure and corner pattern libraries.
//!
//! Facelets are numbered 0..53 face by face in `U R F D L B` order, nine per
//! face, row-major as seen from outside the face. The sticker frames and the
//! solved colour scheme live in `assets/cube_layout.json`; move permutations
//! and the corner map are derived from those frames by rotating sticker
//! positions in 3D.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{EpisodeOutcome, Inference, TraceEvent, Tracer};
use crate::pattern::{impute_closure, MacroPattern};
use crate::world::{reveal, Domain, GroundTruthInstance, Layout, RevealBudget, TaskPayload, TokenLedger, Value, VariableId, WorldModel};

#[derive(Debug, Error, PartialEq)]
pub enum CubeError {
    #[error("state string must have 54 characters, got {0}")]
    BadLength(usize),
    #[error("invalid colour character `{0}`")]
    BadColor(char),
    #[error("unknown move `{0}`")]
    BadMove(String),
    #[error("unknown corner cubie `{0}`")]
    BadCorner(String),
    #[error("every facelet is already known")]
    NothingUnknown,
    #[error("world model is not yet sufficient ({0} of 54 facelets known)")]
    NotSufficient(usize),
}

pub const FACELETS: usize = 54;

#[derive(Deserialize)]
struct Frame {
    normal: [i32; 3],
    origin: [i32; 3],
    col_step: [i32; 3],
    row_step: [i32; 3],
}

#[derive(Deserialize)]
struct LayoutFile {
    face_order: Vec<String>,
    solved_colors: BTreeMap<String, String>,
    corner_names: Vec<String>,
    frames: BTreeMap<String, Frame>,
}

type Vec3 = [i32; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, k: i32) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn dot(a: Vec3, b: Vec3) -> i32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Clockwise quarter turn seen from outside along `axis`.
fn rotate_cw(v: Vec3, axis: Vec3) -> Vec3 {
    add(scale(cross(axis, v), -1), scale(axis, dot(axis, v)))
}

/// Derived cube geometry, built once from the layout file.
pub struct Geometry {
    face_letters: Vec<char>,
    solved: [Value; FACELETS],
    /// `quarter[f][i]` is where facelet `i` moves under a clockwise turn of face `f`.
    quarter: Vec<[usize; FACELETS]>,
    corners: CornerCubieMap,
    cubie_of: Vec<Vec3>,
}

/// Corner position name → facelet indices, slot order following the name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CornerCubieMap {
    pub names: Vec<String>,
    pub facelets: Vec<[usize; 3]>,
}

impl CornerCubieMap {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// `(corner, slot)` of a corner facelet, `None` for edges and centres.
    pub fn locate(&self, facelet: usize) -> Option<(usize, usize)> {
        self.facelets.iter().enumerate().find_map(|(c, slots)| {
            slots.iter().position(|&f| f == facelet).map(|s| (c, s))
        })
    }
}

pub fn geometry() -> &'static Geometry {
    static GEOMETRY: OnceLock<Geometry> = OnceLock::new();
    GEOMETRY.get_or_init(|| {
        let file: LayoutFile = serde_json::from_str(include_str!("../assets/cube_layout.json"))
            .expect("bundled cube layout is valid JSON");
        Geometry::from_layout(&file)
    })
}

impl Geometry {
    fn from_layout(file: &LayoutFile) -> Self {
        let colors = Domain::Cube.values();
        let mut positions = Vec::with_capacity(FACELETS);
        let mut normals = Vec::with_capacity(FACELETS);
        let mut solved = [Value(0); FACELETS];
        for (f, face) in file.face_order.iter().enumerate() {
            let frame = &file.frames[face];
            let color = colors.parse(&file.solved_colors[face]).expect("solved colour in alphabet");
            for r in 0..3 {
                for c in 0..3 {
                    let pos = add(add(frame.origin, scale(frame.row_step, r)), scale(frame.col_step, c));
                    positions.push(pos);
                    normals.push(frame.normal);
                    solved[f * 9 + (r * 3 + c) as usize] = color;
                }
            }
        }
        let lookup: HashMap<(Vec3, Vec3), usize> =
            (0..FACELETS).map(|i| ((positions[i], normals[i]), i)).collect();

        let quarter = file
            .face_order
            .iter()
            .map(|face| {
                let axis = file.frames[face].normal;
                let mut perm = [0usize; FACELETS];
                for i in 0..FACELETS {
                    perm[i] = if dot(positions[i], axis) == 1 {
                        let key = (rotate_cw(positions[i], axis), rotate_cw(normals[i], axis));
                        lookup[&key]
                    } else {
                        i
                    };
                }
                perm
            })
            .collect();

        let face_letters: Vec<char> =
            file.face_order.iter().map(|f| f.chars().next().expect("face letter")).collect();
        let normal_of = |letter: char| {
            let face = letter.to_string();
            file.frames[&face].normal
        };
        let facelets = file
            .corner_names
            .iter()
            .map(|name| {
                let letters: Vec<char> = name.chars().collect();
                let pos = letters.iter().fold([0, 0, 0], |acc, &l| add(acc, normal_of(l)));
                let mut slots = [0usize; 3];
                for (k, &l) in letters.iter().enumerate() {
                    slots[k] = lookup[&(pos, normal_of(l))];
                }
                slots
            })
            .collect();
        Geometry {
            face_letters,
            solved,
            quarter,
            corners: CornerCubieMap { names: file.corner_names.clone(), facelets },
            cubie_of: positions,
        }
    }

    pub fn corner_map(&self) -> &CornerCubieMap {
        &self.corners
    }

    /// Facelets sharing a cubie with each facelet.
    pub fn sticker_adjacency(&self) -> Vec<Vec<usize>> {
        (0..FACELETS)
            .map(|i| {
                (0..FACELETS)
                    .filter(|&j| j != i && self.cubie_of[j] == self.cubie_of[i])
                    .collect()
            })
            .collect()
    }
}

pub fn corner_map() -> &'static CornerCubieMap {
    geometry().corner_map()
}

/// A face turn: `turns` clockwise quarter turns of `face` (1, 2 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Move {
    pub face: u8,
    pub turns: u8,
}

impl Move {
    pub fn all() -> impl Iterator<Item = Move> {
        (0..6u8).flat_map(|face| (1..=3u8).map(move |turns| Move { face, turns }))
    }

    pub fn inverse(self) -> Move {
        Move { face: self.face, turns: 4 - self.turns }
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letter = geometry().face_letters[self.face as usize];
        match self.turns {
            1 => write!(f, "{letter}"),
            2 => write!(f, "{letter}2"),
            _ => write!(f, "{letter}'"),
        }
    }
}

impl FromStr for Move {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        let letter = chars.next().ok_or_else(|| CubeError::BadMove(s.into()))?;
        let face = geometry()
            .face_letters
            .iter()
            .position(|&l| l == letter)
            .ok_or_else(|| CubeError::BadMove(s.into()))? as u8;
        let turns = match chars.as_str() {
            "" => 1,
            "2" => 2,
            "'" => 3,
            _ => return Err(CubeError::BadMove(s.into())),
        };
        Ok(Move { face, turns })
    }
}

impl Serialize for Move {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Move {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// 54 facelet colours in simulator order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CubeState {
    pub facelets: [Value; FACELETS],
}

impl CubeState {
    pub fn solved() -> Self {
        CubeState { facelets: geometry().solved }
    }

    pub fn apply(&self, mv: Move) -> Self {
        let perm = &geometry().quarter[mv.face as usize];
        let mut cur = self.facelets;
        for _ in 0..mv.turns {
            let mut next = cur;
            for (i, &dest) in perm.iter().enumerate() {
                next[dest] = cur[i];
            }
            cur = next;
        }
        CubeState { facelets: cur }
    }

    pub fn apply_all(&self, moves: &[Move]) -> Self {
        moves.iter().fold(*self, |s, &m| s.apply(m))
    }

    pub fn color_counts(&self) -> [usize; 6] {
        let mut counts = [0; 6];
        for v in self.facelets {
            counts[v.index()] += 1;
        }
        counts
    }

    pub fn to_instance(&self) -> GroundTruthInstance {
        GroundTruthInstance {
            domain: Domain::Cube,
            layout: Layout::Cube,
            assignment: self.facelets.to_vec(),
            task: TaskPayload::Cube,
        }
    }

    pub fn corner_token(&self, corner: usize) -> [Value; 3] {
        corner_map().facelets[corner].map(|f| self.facelets[f])
    }
}

impl fmt::Display for CubeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = Domain::Cube.values();
        for v in self.facelets {
            f.write_str(names.name(v))?;
        }
        Ok(())
    }
}

impl FromStr for CubeState {
    type Err = CubeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != FACELETS {
            return Err(CubeError::BadLength(chars.len()));
        }
        let names = Domain::Cube.values();
        let mut facelets = [Value(0); FACELETS];
        for (i, ch) in chars.into_iter().enumerate() {
            facelets[i] = names.parse(&ch.to_string()).ok_or(CubeError::BadColor(ch))?;
        }
        Ok(CubeState { facelets })
    }
}

impl Serialize for CubeState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CubeState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrambleRecord {
    pub moves: Vec<Move>,
    pub state: CubeState,
}

/// Seeded scrambles from the solved state, `moves_per_state` uniform face
/// turns each.
pub fn scramble_dataset(seed: u64, count: usize, moves_per_state: usize) -> Vec<ScrambleRecord> {
    let all: Vec<Move> = Move::all().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let moves: Vec<Move> =
                (0..moves_per_state).map(|_| all[rng.gen_range(0..all.len())]).collect();
            let state = CubeState::solved().apply_all(&moves);
            ScrambleRecord { moves, state }
        })
        .collect()
}

/// Dataset file: states plus the metadata needed to interpret them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub moves_per_state: usize,
    pub records: Vec<ScrambleRecord>,
    pub corner_map: CornerCubieMap,
    pub adjacency: Vec<Vec<usize>>,
}

impl DatasetManifest {
    pub fn generate(seed: u64, count: usize, moves_per_state: usize) -> Self {
        DatasetManifest {
            seed,
            moves_per_state,
            records: scramble_dataset(seed, count, moves_per_state),
            corner_map: corner_map().clone(),
            adjacency: geometry().sticker_adjacency(),
        }
    }
}

/// Uniformly random facelet outside `dom(M)`.
pub fn random_candidate(world: &WorldModel, rng: &mut impl Rng) -> Result<VariableId, CubeError> {
    let unknown: Vec<VariableId> = world.unknown_vars().collect();
    if unknown.is_empty() {
        return Err(CubeError::NothingUnknown);
    }
    Ok(unknown[rng.gen_range(0..unknown.len())])
}

/// The checker: every facelet has a value in the merged view.
pub fn sufficiency(world: &WorldModel) -> bool {
    world.known_count() == FACELETS
}

/// Corner colours in slot order from the merged view; `None` marks unknown.
pub fn corner_token(world: &WorldModel, corner: usize) -> [Option<Value>; 3] {
    corner_map().facelets[corner].map(|f| world.merged(VariableId(f as u32)))
}

pub fn render_token(token: &[Option<Value>; 3]) -> String {
    let names = Domain::Cube.values();
    token.iter().map(|v| v.map_or("?", |v| names.name(v))).collect()
}

/// Every legal corner orientation at every corner position: 8 pieces times
/// 3 twists per position.
pub fn placeholder_library() -> Vec<MacroPattern> {
    let solved = CubeState::solved();
    let mut out = Vec::with_capacity(8 * 24);
    for position in 0..8 {
        for piece in 0..8 {
            let colors = solved.corner_token(piece);
            for twist in 0..3 {
                let token = [colors[twist % 3], colors[(twist + 1) % 3], colors[(twist + 2) % 3]];
                out.push(MacroPattern::Corner { corner: position as u8, token });
            }
        }
    }
    out
}

/// Corner macros for exactly the tokens that occur in `states`, first
/// occurrence order.
pub fn ground_truth_library<'a>(states: impl IntoIterator<Item = &'a CubeState>) -> Vec<MacroPattern> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for state in states {
        for corner in 0..8 {
            let token = state.corner_token(corner);
            if seen.insert((corner, token)) {
                out.push(MacroPattern::Corner { corner: corner as u8, token });
            }
        }
    }
    out
}

/// Exact reconstruction: the merged view equals the truth on all facelets.
pub fn reconstruction_success(world: &WorldModel, truth: &GroundTruthInstance) -> Result<bool, CubeError> {
    if !sufficiency(world) {
        return Err(CubeError::NotSufficient(world.known_count()));
    }
    Ok((0..FACELETS).all(|i| world.merged(VariableId(i as u32)) == Some(truth.assignment[i])))
}

/// Reveal random unknown facelets, imputing after each reveal, until every
/// facelet is known; success is exact reconstruction.
pub fn run_episode(state: &CubeState, inference: Option<Inference<'_>>, seed: u64, trace: bool) -> EpisodeOutcome {
    let truth = state.to_instance();
    let mut world = truth.empty_world();
    let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Cube));
    let mut tracer = Tracer::new(trace);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while !sufficiency(&world) {
        let var = random_candidate(&world, &mut rng).expect("checker has not fired");
        let fact = reveal(&truth, var, &mut world, &mut ledger).expect("candidate is unknown");
        tracer.push(|| TraceEvent::Reveal { var: fact.variable, value: fact.value });
        if let Some(inf) = inference {
            let unknown: Vec<VariableId> = world.unknown_vars().collect();
            let added = impute_closure(&mut world, inf.library, &inf.imputation, &unknown).expect("candidates are unknown");
            for f in &added {
                tracer.push(|| TraceEvent::Impute { var: f.variable, value: f.value });
            }
        }
    }
    let success = reconstruction_success(&world, &truth).expect("loop ends sufficient");
    EpisodeOutcome {
        world,
        ledger,
        success,
        failure: (!success).then(|| "reconstruction differs from the true state".to_string()),
        trace: tracer.events,
    }
}
