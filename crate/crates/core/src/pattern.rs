//! Pattern library and gated mixture-of-experts inference.
//!
//! Every [`Pattern`] is an expert anchored on a target variable. It is
//! applicable when its target slot lines up with the queried variable, and
//! its gate opens when the context facts it expects are present in the
//! merged world model. Active experts each put `1 - ε` on their prediction
//! and spread `ε` over the remaining values; the library predicts their
//! weight-normalised average, or the uniform distribution when nothing is
//! active.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cube;
use crate::world::{Domain, FactSource, Layout, SymbolicFact, Value, VariableId, WorldError, WorldModel};

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("variable {0} is already revealed")]
    Revealed(VariableId),
    #[error("{0}")]
    Macro(#[from] MacroError),
    #[error("{kind:?} patterns do not apply to the {domain:?} domain")]
    KindMismatch { domain: Domain, kind: PatternKind },
    #[error("smoothing epsilon {epsilon} must lie in (0, 1/{cardinality})")]
    BadEpsilon { epsilon: f64, cardinality: usize },
    #[error("threshold tau {0} must lie in (0, 1]")]
    BadTau(f64),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weights must be finite and non-negative")]
    NegativeWeight,
    #[error("reranking needs a nonempty target value set")]
    EmptyTargets,
    #[error(transparent)]
    World(#[from] WorldError),
}

/// A rejected macro pattern: which field was wrong and why.
#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("{field}: {reason}")]
pub struct MacroError {
    pub field: String,
    pub reason: String,
}

impl MacroError {
    fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MacroError { field: field.into(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    GridBlock,
    Cross,
    Corner,
}

impl PatternKind {
    pub fn for_domain(domain: Domain) -> PatternKind {
        match domain {
            Domain::Lake => PatternKind::GridBlock,
            Domain::Crafter => PatternKind::Cross,
            Domain::Cube => PatternKind::Corner,
        }
    }
}

/// Cross slots: the centre is the target, the four neighbours the context.
pub mod cross_slot {
    pub const CENTER: u8 = 0;
    pub const TOP: u8 = 1;
    pub const BOTTOM: u8 = 2;
    pub const LEFT: u8 = 3;
    pub const RIGHT: u8 = 4;
}

/// A single gated expert.
///
/// Slots are kind-relative: a grid-block slot is the row-major offset inside
/// an aligned 4x4 block, a cross slot is one of [`cross_slot`], and a corner
/// slot is `3 * corner + k` for the `k`-th facelet of a corner position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub kind: PatternKind,
    pub target: u8,
    pub context: Vec<(u8, Value)>,
    pub prediction: Value,
    pub weight: f64,
}

type DedupKey = (PatternKind, u8, Vec<(u8, Value)>, Value);

impl Pattern {
    fn dedup_key(&self) -> DedupKey {
        let mut context = self.context.clone();
        context.sort();
        (self.kind, self.target, context, self.prediction)
    }
}

/// Proposer-level pattern that expands into one or more [`Pattern`]s.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MacroPattern {
    GridBlock { cells: [[Value; 4]; 4] },
    Cross { center: Value, top: Value, bottom: Value, left: Value, right: Value },
    Corner { corner: u8, token: [Value; 3] },
}

impl MacroPattern {
    pub fn kind(&self) -> PatternKind {
        match self {
            MacroPattern::GridBlock { .. } => PatternKind::GridBlock,
            MacroPattern::Cross { .. } => PatternKind::Cross,
            MacroPattern::Corner { .. } => PatternKind::Corner,
        }
    }

    /// Parse one item of a proposer's `"patterns"` array, using the value
    /// names of `domain`.
    pub fn from_json(domain: Domain, item: &serde_json::Value) -> Result<MacroPattern, MacroError> {
        let names = domain.values();
        match domain {
            Domain::Lake => {
                let rows = item
                    .as_array()
                    .filter(|rows| rows.len() == 4)
                    .ok_or_else(|| MacroError::new("pattern", "must be a 4x4 array of rows"))?;
                let mut cells = [[Value(0); 4]; 4];
                for (r, row) in rows.iter().enumerate() {
                    let row = row
                        .as_array()
                        .filter(|row| row.len() == 4)
                        .ok_or_else(|| MacroError::new(format!("row {r}"), "must have exactly 4 cells"))?;
                    for (c, cell) in row.iter().enumerate() {
                        cells[r][c] = cell.as_str().and_then(|s| names.parse(s)).ok_or_else(|| {
                            MacroError::new(
                                format!("cell [{r}][{c}]"),
                                "must be labeled exactly \"SAFE\" or \"HOLE\"",
                            )
                        })?;
                    }
                }
                Ok(MacroPattern::GridBlock { cells })
            }
            Domain::Crafter => {
                let obj = item
                    .as_object()
                    .ok_or_else(|| MacroError::new("pattern", "must be an object"))?;
                let field = |key: &str| -> Result<Value, MacroError> {
                    let raw = obj
                        .get(key)
                        .ok_or_else(|| MacroError::new(key, "missing"))?
                        .as_str()
                        .ok_or_else(|| MacroError::new(key, "must be a string"))?;
                    names.parse(raw).ok_or_else(|| {
                        MacroError::new(key, format!("`{raw}` is not a lowercase world-generation material name"))
                    })
                };
                for key in obj.keys() {
                    if !["center", "top", "bottom", "left", "right"].contains(&key.as_str()) {
                        return Err(MacroError::new(key.as_str(), "unexpected field"));
                    }
                }
                Ok(MacroPattern::Cross {
                    center: field("center")?,
                    top: field("top")?,
                    bottom: field("bottom")?,
                    left: field("left")?,
                    right: field("right")?,
                })
            }
            Domain::Cube => {
                let cubies = item
                    .get("cubies")
                    .and_then(|c| c.as_object())
                    .ok_or_else(|| MacroError::new("cubies", "must be an object"))?;
                if cubies.len() != 1 {
                    return Err(MacroError::new("cubies", "each pattern must contain exactly one corner cubie"));
                }
                let (name, token) = cubies.iter().next().expect("one entry");
                let corner = cube::corner_map()
                    .index_of(name)
                    .ok_or_else(|| MacroError::new("cubies", format!("unknown corner cubie `{name}`")))?;
                let token = token
                    .as_str()
                    .ok_or_else(|| MacroError::new(name.as_str(), "token must be a string"))?;
                let chars: Vec<char> = token.chars().collect();
                if chars.len() != 3 {
                    return Err(MacroError::new(name.as_str(), "Corner token length must be exactly 3"));
                }
                let mut values = [Value(0); 3];
                for (k, ch) in chars.iter().enumerate() {
                    values[k] = names.parse(&ch.to_string()).ok_or_else(|| {
                        MacroError::new(name.as_str(), format!("`{ch}` is not in the alphabet {{R,G,B,Y,O,W}}"))
                    })?;
                }
                Ok(MacroPattern::Corner { corner: corner as u8, token: values })
            }
        }
    }

    /// Inverse of [`MacroPattern::from_json`].
    pub fn to_json(&self, domain: Domain) -> serde_json::Value {
        let names = domain.values();
        match self {
            MacroPattern::GridBlock { cells } => serde_json::Value::Array(
                cells
                    .iter()
                    .map(|row| row.iter().map(|v| names.name(*v)).collect::<Vec<_>>().into())
                    .collect(),
            ),
            MacroPattern::Cross { center, top, bottom, left, right } => serde_json::json!({
                "center": names.name(*center),
                "top": names.name(*top),
                "bottom": names.name(*bottom),
                "left": names.name(*left),
                "right": names.name(*right),
            }),
            MacroPattern::Corner { corner, token } => {
                let name = &cube::corner_map().names[*corner as usize];
                let token: String = token.iter().map(|v| names.name(*v)).collect();
                serde_json::json!({ "cubies": { name.as_str(): token } })
            }
        }
    }

    fn validate(&self, domain: Domain) -> Result<(), MacroError> {
        let names = domain.values();
        let check = |field: &str, v: &Value| {
            if names.contains(*v) {
                Ok(())
            } else {
                Err(MacroError::new(field, format!("value index {} outside the domain", v.0)))
            }
        };
        match self {
            MacroPattern::GridBlock { cells } => {
                for (r, row) in cells.iter().enumerate() {
                    for (c, v) in row.iter().enumerate() {
                        check(&format!("cell [{r}][{c}]"), v)?;
                    }
                }
            }
            MacroPattern::Cross { center, top, bottom, left, right } => {
                for (field, v) in [("center", center), ("top", top), ("bottom", bottom), ("left", left), ("right", right)] {
                    check(field, v)?;
                }
            }
            MacroPattern::Corner { corner, token } => {
                if *corner >= 8 {
                    return Err(MacroError::new("corner", "corner index must be below 8"));
                }
                for v in token {
                    check("token", v)?;
                }
            }
        }
        Ok(())
    }
}

/// Expand a macro into its patterns, each carrying `initial_weight`.
pub fn parse_macro(domain: Domain, m: &MacroPattern, initial_weight: f64) -> Result<Vec<Pattern>, PatternError> {
    if m.kind() != PatternKind::for_domain(domain) {
        return Err(PatternError::KindMismatch { domain, kind: m.kind() });
    }
    m.validate(domain)?;
    let make = |kind, target, context, prediction| Pattern { kind, target, context, prediction, weight: initial_weight };
    Ok(match m {
        MacroPattern::GridBlock { cells } => {
            let flat: Vec<Value> = cells.iter().flatten().copied().collect();
            (0..16u8)
                .map(|t| {
                    let context = (0..16u8).filter(|&s| s != t).map(|s| (s, flat[s as usize])).collect();
                    make(PatternKind::GridBlock, t, context, flat[t as usize])
                })
                .collect()
        }
        MacroPattern::Cross { center, top, bottom, left, right } => {
            use cross_slot::*;
            vec![make(
                PatternKind::Cross,
                CENTER,
                vec![(TOP, *top), (BOTTOM, *bottom), (LEFT, *left), (RIGHT, *right)],
                *center,
            )]
        }
        MacroPattern::Corner { corner, token } => (0..3u8)
            .map(|k| {
                let base = corner * 3;
                let context = (0..3u8).filter(|&j| j != k).map(|j| (base + j, token[j as usize])).collect();
                make(PatternKind::Corner, base + k, context, token[k as usize])
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// At least one known context fact matches and none contradicts.
    Consistent,
    /// Every context fact is known and matches.
    Strict,
}

impl GateMode {
    /// Corner contexts are only two facelets, and a single matching colour
    /// already singles out a token in a sparse library, so cube gating
    /// waits for the full context.
    pub fn for_domain(domain: Domain) -> GateMode {
        match domain {
            Domain::Cube => GateMode::Strict,
            Domain::Lake | Domain::Crafter => GateMode::Consistent,
        }
    }
}

/// Where a pattern's slots land for one queried variable.
#[derive(Debug, Clone, Copy)]
enum Anchor {
    Block { row: usize, col: usize },
    Center(VariableId),
    Cube,
}

fn locate(kind: PatternKind, var: VariableId, layout: Layout) -> Option<(u8, Anchor)> {
    match (kind, layout) {
        (PatternKind::GridBlock, Layout::Grid { rows, cols }) => {
            let (r, c) = layout.coords(var);
            let (br, bc) = (r - r % 4, c - c % 4);
            (br + 4 <= rows && bc + 4 <= cols)
                .then(|| (((r % 4) * 4 + c % 4) as u8, Anchor::Block { row: br, col: bc }))
        }
        (PatternKind::Cross, Layout::Grid { rows, cols }) => {
            let (r, c) = layout.coords(var);
            (r > 0 && c > 0 && r + 1 < rows && c + 1 < cols).then_some((cross_slot::CENTER, Anchor::Center(var)))
        }
        (PatternKind::Corner, Layout::Cube) => cube::corner_map()
            .locate(var.index())
            .map(|(corner, k)| ((corner * 3 + k) as u8, Anchor::Cube)),
        _ => None,
    }
}

fn resolve(anchor: Anchor, slot: u8, layout: Layout) -> Option<VariableId> {
    match anchor {
        Anchor::Block { row, col } => Some(layout.var(row + slot as usize / 4, col + slot as usize % 4)),
        Anchor::Center(center) => {
            let (dr, dc) = match slot {
                cross_slot::TOP => (-1, 0),
                cross_slot::BOTTOM => (1, 0),
                cross_slot::LEFT => (0, -1),
                cross_slot::RIGHT => (0, 1),
                _ => (0, 0),
            };
            layout.offset(center, dr, dc)
        }
        Anchor::Cube => {
            let slots = cube::corner_map().facelets.get(slot as usize / 3)?;
            Some(VariableId(slots[slot as usize % 3] as u32))
        }
    }
}

/// Variables a pattern reads as context when queried at `var`, in context
/// order. Empty when the pattern does not apply there.
pub fn context_vars(pattern: &Pattern, var: VariableId, layout: Layout) -> Vec<VariableId> {
    match locate(pattern.kind, var, layout) {
        Some((slot, anchor)) if slot == pattern.target => {
            pattern.context.iter().filter_map(|(s, _)| resolve(anchor, *s, layout)).collect()
        }
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, Default)]
struct LibraryIndex {
    /// grid block targets 0..16, cross at 16, corner targets at 17..41
    buckets: Vec<Vec<usize>>,
    keys: HashSet<DedupKey>,
}

const BUCKETS: usize = 41;

fn bucket(kind: PatternKind, target: u8) -> usize {
    match kind {
        PatternKind::GridBlock => target as usize,
        PatternKind::Cross => 16,
        PatternKind::Corner => 17 + target as usize,
    }
}

/// Ordered, deduplicated set of weighted experts for one domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LibraryRepr", into = "LibraryRepr")]
pub struct PatternLibrary {
    domain: Domain,
    patterns: Vec<Pattern>,
    epsilon: f64,
    gate_mode: GateMode,
    index: LibraryIndex,
}

#[derive(Serialize, Deserialize)]
struct LibraryRepr {
    domain: Domain,
    patterns: Vec<Pattern>,
    epsilon: f64,
    gate_mode: GateMode,
}

impl From<PatternLibrary> for LibraryRepr {
    fn from(lib: PatternLibrary) -> Self {
        LibraryRepr { domain: lib.domain, patterns: lib.patterns, epsilon: lib.epsilon, gate_mode: lib.gate_mode }
    }
}

impl TryFrom<LibraryRepr> for PatternLibrary {
    type Error = PatternError;

    fn try_from(repr: LibraryRepr) -> Result<Self, Self::Error> {
        let mut lib = PatternLibrary::new(repr.domain, repr.epsilon, repr.gate_mode)?;
        for p in repr.patterns {
            lib.add(p)?;
        }
        Ok(lib)
    }
}

impl PartialEq for PatternLibrary {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain
            && self.patterns == other.patterns
            && self.epsilon == other.epsilon
            && self.gate_mode == other.gate_mode
    }
}

pub const DEFAULT_EPSILON: f64 = 0.001;
pub const INITIAL_WEIGHT: f64 = 1.0;

impl PatternLibrary {
    pub fn new(domain: Domain, epsilon: f64, gate_mode: GateMode) -> Result<Self, PatternError> {
        let cardinality = domain.values().cardinality();
        if !(epsilon > 0.0 && epsilon < 1.0 / cardinality as f64) {
            return Err(PatternError::BadEpsilon { epsilon, cardinality });
        }
        Ok(PatternLibrary {
            domain,
            patterns: Vec::new(),
            epsilon,
            gate_mode,
            index: LibraryIndex { buckets: vec![Vec::new(); BUCKETS], keys: HashSet::new() },
        })
    }

    pub fn empty(domain: Domain) -> Self {
        Self::new(domain, DEFAULT_EPSILON, GateMode::for_domain(domain)).expect("default epsilon is valid")
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.gate_mode = mode;
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn cardinality(&self) -> usize {
        self.domain.values().cardinality()
    }

    /// Insert unless a structurally identical pattern exists. Returns
    /// whether the pattern was added.
    pub fn add(&mut self, pattern: Pattern) -> Result<bool, PatternError> {
        if pattern.kind != PatternKind::for_domain(self.domain) {
            return Err(PatternError::KindMismatch { domain: self.domain, kind: pattern.kind });
        }
        if !(pattern.weight >= 0.0 && pattern.weight.is_finite()) {
            return Err(PatternError::NegativeWeight);
        }
        let names = self.domain.values();
        if !names.contains(pattern.prediction) || pattern.context.iter().any(|(_, v)| !names.contains(*v)) {
            return Err(MacroError::new("pattern", "value outside the domain").into());
        }
        if pattern.context.is_empty() {
            return Err(MacroError::new("context", "must be nonempty").into());
        }
        if !self.index.keys.insert(pattern.dedup_key()) {
            return Ok(false);
        }
        self.index.buckets[bucket(pattern.kind, pattern.target)].push(self.patterns.len());
        self.patterns.push(pattern);
        Ok(true)
    }

    pub fn contains(&self, pattern: &Pattern) -> bool {
        self.index.keys.contains(&pattern.dedup_key())
    }

    /// True when every pattern the macro expands to is already present.
    pub fn contains_macro(&self, m: &MacroPattern) -> bool {
        match parse_macro(self.domain, m, INITIAL_WEIGHT) {
            Ok(patterns) => patterns.iter().all(|p| self.contains(p)),
            Err(_) => false,
        }
    }

    /// Parse a macro and add its patterns; returns how many were new.
    pub fn add_macro(&mut self, m: &MacroPattern, initial_weight: f64) -> Result<usize, PatternError> {
        let mut added = 0;
        for p in parse_macro(self.domain, m, initial_weight)? {
            added += self.add(p)? as usize;
        }
        Ok(added)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.patterns.iter().map(|p| p.weight).collect()
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<(), PatternError> {
        if weights.len() != self.patterns.len() {
            return Err(PatternError::WeightCount { expected: self.patterns.len(), got: weights.len() });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(PatternError::NegativeWeight);
        }
        for (p, w) in self.patterns.iter_mut().zip(weights) {
            p.weight = *w;
        }
        Ok(())
    }

    /// Copy of the library without pattern `i`.
    pub fn without(&self, i: usize) -> Self {
        let mut lib = PatternLibrary::new(self.domain, self.epsilon, self.gate_mode).expect("validated");
        for (j, p) in self.patterns.iter().enumerate() {
            if j != i {
                lib.add(p.clone()).expect("validated");
            }
        }
        lib
    }

    fn gate(&self, pattern: &Pattern, anchor: Anchor, world: &WorldModel) -> bool {
        let layout = world.layout();
        let mut matched = 0usize;
        for &(slot, expected) in &pattern.context {
            match resolve(anchor, slot, layout).and_then(|v| world.merged(v)) {
                Some(v) if v == expected => matched += 1,
                Some(_) => return false,
                None if self.gate_mode == GateMode::Strict => return false,
                None => {}
            }
        }
        matched > 0
    }

    /// Active expert indices for `var`, without the revealed-variable check.
    pub(crate) fn collect_active(&self, var: VariableId, world: &WorldModel, out: &mut Vec<usize>) {
        out.clear();
        let kind = PatternKind::for_domain(self.domain);
        let Some((slot, anchor)) = locate(kind, var, world.layout()) else {
            return;
        };
        for &i in &self.index.buckets[bucket(kind, slot)] {
            let p = &self.patterns[i];
            if p.target == slot && self.gate(p, anchor, world) {
                out.push(i);
            }
        }
    }

    /// Mixture over the experts in `active`.
    pub fn mixture_of(&self, active: &[usize]) -> MixtureDistribution {
        let k = self.cardinality();
        let total: f64 = active.iter().map(|&i| self.patterns[i].weight).sum();
        if active.is_empty() || total <= 0.0 {
            return MixtureDistribution { probabilities: vec![1.0 / k as f64; k], active_indices: Vec::new() };
        }
        let mut per_value = vec![0.0; k];
        for &i in active {
            per_value[self.patterns[i].prediction.index()] += self.patterns[i].weight;
        }
        let eps = self.epsilon;
        let off = eps / (k as f64 - 1.0);
        let probabilities = per_value
            .iter()
            .map(|&w_v| (w_v * (1.0 - eps) + (total - w_v) * off) / total)
            .collect();
        MixtureDistribution { probabilities, active_indices: active.to_vec() }
    }
}

/// Categorical prediction over a variable's value domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDistribution {
    pub probabilities: Vec<f64>,
    pub active_indices: Vec<usize>,
}

impl MixtureDistribution {
    /// Most probable value (lowest index on ties) and its probability.
    pub fn argmax(&self) -> (Value, f64) {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        (Value(best as u8), self.probabilities[best])
    }

    pub fn mass(&self, values: &[Value]) -> f64 {
        values.iter().map(|v| self.probabilities[v.index()]).sum()
    }
}

fn require_unrevealed(var: VariableId, world: &WorldModel) -> Result<(), PatternError> {
    if var.index() >= world.num_vars() {
        return Err(WorldError::OutOfRange { var, count: world.num_vars() }.into());
    }
    if world.is_revealed(var) {
        return Err(PatternError::Revealed(var));
    }
    Ok(())
}

/// Indices of the experts that are applicable to `var` and whose gate is open.
pub fn active_set(var: VariableId, world: &WorldModel, library: &PatternLibrary) -> Result<Vec<usize>, PatternError> {
    require_unrevealed(var, world)?;
    let mut out = Vec::new();
    library.collect_active(var, world, &mut out);
    Ok(out)
}

pub fn mixture(var: VariableId, world: &WorldModel, library: &PatternLibrary) -> Result<MixtureDistribution, PatternError> {
    let active = active_set(var, world, library)?;
    Ok(library.mixture_of(&active))
}

/// Confidence threshold for imputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub tau: f64,
}

impl ImputationConfig {
    pub fn new(tau: f64) -> Result<Self, PatternError> {
        if tau > 0.0 && tau <= 1.0 {
            Ok(ImputationConfig { tau })
        } else {
            Err(PatternError::BadTau(tau))
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        let tau = match domain {
            Domain::Lake => 0.99,
            Domain::Crafter => 1.00,
            Domain::Cube => 0.99,
        };
        ImputationConfig { tau }
    }
}

/// Add the mixture argmax as an imputed fact when its probability reaches
/// `tau`. Leaves the world untouched otherwise.
pub fn impute(
    var: VariableId,
    world: &mut WorldModel,
    library: &PatternLibrary,
    config: &ImputationConfig,
) -> Result<Option<SymbolicFact>, PatternError> {
    require_unrevealed(var, world)?;
    let mut active = Vec::new();
    Ok(impute_one(var, world, library, config, &mut active))
}

fn impute_one(
    var: VariableId,
    world: &mut WorldModel,
    library: &PatternLibrary,
    config: &ImputationConfig,
    scratch: &mut Vec<usize>,
) -> Option<SymbolicFact> {
    library.collect_active(var, world, scratch);
    if scratch.is_empty() {
        return None;
    }
    let (value, confidence) = library.mixture_of(scratch).argmax();
    if confidence < config.tau {
        return None;
    }
    world.insert_imputed(var, value).expect("variable checked unrevealed");
    Some(SymbolicFact { variable: var, value, source: FactSource::Imputed })
}

/// Sweep `candidates` repeatedly, imputing every unknown variable that
/// clears the threshold, until a sweep adds nothing or the sweep count
/// reaches `candidates.len()`. Facts added earlier in a sweep are visible to
/// later gates.
pub fn impute_closure(
    world: &mut WorldModel,
    library: &PatternLibrary,
    config: &ImputationConfig,
    candidates: &[VariableId],
) -> Result<Vec<SymbolicFact>, PatternError> {
    for &var in candidates {
        require_unrevealed(var, world)?;
    }
    let mut added = Vec::new();
    if library.is_empty() || config.tau > 1.0 - library.epsilon() {
        return Ok(added);
    }
    let mut scratch = Vec::new();
    for _ in 0..candidates.len().max(1) {
        let before = added.len();
        for &var in candidates {
            if world.is_known(var) {
                continue;
            }
            if let Some(fact) = impute_one(var, world, library, config, &mut scratch) {
                added.push(fact);
            }
        }
        if added.len() == before {
            break;
        }
    }
    Ok(added)
}

/// Values whose mixture mass scores a reveal candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankSpec {
    pub target_values: Vec<Value>,
}

/// Order candidates by descending mixture mass on the target values; ties
/// keep `(row, col)` order. Adds nothing to the world model.
pub fn rerank(
    candidates: &[VariableId],
    world: &WorldModel,
    library: &PatternLibrary,
    spec: &RerankSpec,
) -> Result<Vec<VariableId>, PatternError> {
    if spec.target_values.is_empty() {
        return Err(PatternError::EmptyTargets);
    }
    let mut scratch = Vec::new();
    let mut scored = Vec::with_capacity(candidates.len());
    for &var in candidates {
        require_unrevealed(var, world)?;
        scored.push((var, library.target_mass(var, world, &spec.target_values, &mut scratch)));
    }
    sort_by_score(&mut scored);
    Ok(scored.into_iter().map(|(v, _)| v).collect())
}

impl PatternLibrary {
    /// Mixture mass on `targets` at an unrevealed variable, reusing `scratch`.
    pub fn target_mass(&self, var: VariableId, world: &WorldModel, targets: &[Value], scratch: &mut Vec<usize>) -> f64 {
        self.collect_active(var, world, scratch);
        if scratch.is_empty() {
            return targets.len() as f64 / self.cardinality() as f64;
        }
        self.mixture_of(scratch).mass(targets)
    }
}

/// Descending score, ascending variable index on ties.
pub(crate) fn sort_by_score(scored: &mut [(VariableId, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAFE: Value = Value(0);
    const HOLE: Value = Value(1);

    fn grid_world(domain: Domain, n: usize) -> WorldModel {
        WorldModel::new(domain, Layout::Grid { rows: n, cols: n })
    }

    fn cube_value(name: &str) -> Value {
        Domain::Cube.values().parse(name).unwrap()
    }

    fn crafter(name: &str) -> Value {
        Domain::Crafter.values().parse(name).unwrap()
    }

    fn block(rows: [&str; 4]) -> MacroPattern {
        let mut cells = [[SAFE; 4]; 4];
        for (r, row) in rows.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                cells[r][c] = if ch == 'H' { HOLE } else { SAFE };
            }
        }
        MacroPattern::GridBlock { cells }
    }

    #[test]
    fn grid_macro_expands_to_16_patterns() {
        let m = block(["SSSS", "SHHS", "SHHS", "SSSS"]);
        let pats = parse_macro(Domain::Lake, &m, 1.0).unwrap();
        assert_eq!(pats.len(), 16);
        assert!(pats.iter().all(|p| p.context.len() == 15));
        assert_eq!(pats[5].prediction, HOLE);
    }

    #[test]
    fn corner_macro_expands_to_3_patterns() {
        let m = MacroPattern::from_json(Domain::Cube, &serde_json::json!({"cubies": {"URF": "ROW"}})).unwrap();
        let pats = parse_macro(Domain::Cube, &m, 1.0).unwrap();
        assert_eq!(pats.len(), 3);
        // U slot predicted R from R-slot = O and F-slot = W.
        assert_eq!(pats[0].target, 0);
        assert_eq!(pats[0].prediction, cube_value("R"));
        assert_eq!(pats[0].context, vec![(1, cube_value("O")), (2, cube_value("W"))]);
    }

    #[test]
    fn cross_macro_expands_to_one_pattern() {
        let stone = crafter("stone");
        let m = MacroPattern::Cross { center: stone, top: stone, bottom: stone, left: crafter("coal"), right: stone };
        let pats = parse_macro(Domain::Crafter, &m, 1.0).unwrap();
        assert_eq!(pats.len(), 1);
        assert_eq!(pats[0].context.len(), 4);
        assert_eq!(pats[0].prediction, stone);
    }

    #[test]
    fn malformed_macros_name_the_field() {
        let err = MacroPattern::from_json(
            Domain::Lake,
            &serde_json::json!([["SAFE", "SAFE", "SAFE", "SAFE"], ["SAFE", "UNKNOWN", "SAFE", "SAFE"],
                                ["SAFE", "SAFE", "SAFE", "SAFE"], ["SAFE", "SAFE", "SAFE", "SAFE"]]),
        )
        .unwrap_err();
        assert_eq!(err.field, "cell [1][1]");
        assert!(err.reason.contains("must be labeled exactly \"SAFE\" or \"HOLE\""));

        let err = MacroPattern::from_json(Domain::Cube, &serde_json::json!({"cubies": {"URF": "ROWG"}})).unwrap_err();
        assert!(err.reason.contains("Corner token length must be exactly 3"));

        let err = MacroPattern::from_json(
            Domain::Crafter,
            &serde_json::json!({"center": "unknown", "top": "stone", "bottom": "stone", "left": "stone", "right": "stone"}),
        )
        .unwrap_err();
        assert_eq!(err.field, "center");

        let wrong_kind = MacroPattern::Corner { corner: 0, token: [Value(0); 3] };
        assert!(matches!(parse_macro(Domain::Lake, &wrong_kind, 1.0), Err(PatternError::KindMismatch { .. })));
    }

    #[test]
    fn macro_json_round_trips() {
        for (domain, item) in [
            (Domain::Cube, serde_json::json!({"cubies": {"DBL": "YBO"}})),
            (Domain::Crafter, serde_json::json!({"center": "iron", "top": "stone", "bottom": "stone", "left": "path", "right": "stone"})),
        ] {
            let m = MacroPattern::from_json(domain, &item).unwrap();
            assert_eq!(m.to_json(domain), item);
        }
    }

    #[test]
    fn parsing_twice_adds_nothing() {
        let mut lib = PatternLibrary::empty(Domain::Lake);
        let m = block(["SSSS", "HHHS", "SSSS", "SHHH"]);
        assert_eq!(lib.add_macro(&m, 1.0).unwrap(), 16);
        assert_eq!(lib.add_macro(&m, 3.0).unwrap(), 0);
        assert_eq!(lib.len(), 16);
    }

    fn urf_library(tokens: &[&str]) -> PatternLibrary {
        let mut lib = PatternLibrary::empty(Domain::Cube);
        for t in tokens {
            let m = MacroPattern::from_json(Domain::Cube, &serde_json::json!({"cubies": {"URF": t}})).unwrap();
            lib.add_macro(&m, 1.0).unwrap();
        }
        lib
    }

    #[test]
    fn corner_gate_excludes_contradicting_tokens() {
        let lib = urf_library(&["WRG", "WBR", "GWR"]);
        let urf = cube::corner_map().facelets[0];
        let mut world = WorldModel::new(Domain::Cube, Layout::Cube);
        world.insert_revealed(VariableId(urf[0] as u32), cube_value("W")).unwrap();
        world.insert_revealed(VariableId(urf[1] as u32), cube_value("R")).unwrap();
        let active = active_set(VariableId(urf[2] as u32), &world, &lib).unwrap();
        // Only the WRG pattern that predicts slot 2 from slots 0 and 1.
        assert_eq!(active.len(), 1);
        assert_eq!(lib.patterns()[active[0]].prediction, cube_value("G"));
    }

    #[test]
    fn no_known_context_means_no_active_experts() {
        let lib = urf_library(&["WRG"]);
        let mut world = WorldModel::new(Domain::Cube, Layout::Cube);
        assert!(active_set(VariableId(8), &world, &lib).unwrap().is_empty());
        world.insert_revealed(VariableId(20), cube_value("W")).unwrap();
        let mut strict = lib.clone();
        strict.set_gate_mode(GateMode::Strict);
        assert!(active_set(VariableId(8), &world, &strict).unwrap().is_empty());
    }

    #[test]
    fn strict_needs_full_context_consistent_does_not() {
        let mut lib = PatternLibrary::empty(Domain::Lake);
        lib.add_macro(&block(["SSSS", "SSSS", "SSSS", "SSSS"]), 1.0).unwrap();
        let mut world = grid_world(Domain::Lake, 4);
        // Know 14 of the 15 context cells of target 0.
        for i in 1..15 {
            world.insert_revealed(VariableId(i), SAFE).unwrap();
        }
        assert_eq!(active_set(VariableId(0), &world, &lib).unwrap().len(), 1);
        let mut strict = lib.clone();
        strict.set_gate_mode(GateMode::Strict);
        assert!(active_set(VariableId(0), &world, &strict).unwrap().is_empty());
    }

    #[test]
    fn active_set_rejects_revealed_target() {
        let lib = PatternLibrary::empty(Domain::Lake);
        let mut world = grid_world(Domain::Lake, 4);
        world.insert_revealed(VariableId(3), SAFE).unwrap();
        assert_eq!(active_set(VariableId(3), &world, &lib), Err(PatternError::Revealed(VariableId(3))));
    }

    /// Four-valued toy setup: two cross patterns on a 3x3 crafter grid whose
    /// centre is the query, predicting values 0 and 1 with weights 2 and 1.
    fn two_expert_setup() -> (WorldModel, PatternLibrary) {
        let mut lib = PatternLibrary::empty(Domain::Crafter);
        let g = crafter("grass");
        let s = crafter("sand");
        let a = crafter("grass");
        let b = crafter("sand");
        lib.add(Pattern {
            kind: PatternKind::Cross,
            target: 0,
            context: vec![(1, g), (2, g), (3, g), (4, g)],
            prediction: a,
            weight: 2.0,
        })
        .unwrap();
        lib.add(Pattern {
            kind: PatternKind::Cross,
            target: 0,
            context: vec![(1, g), (2, s), (3, s), (4, s)],
            prediction: b,
            weight: 1.0,
        })
        .unwrap();
        let mut world = grid_world(Domain::Crafter, 3);
        world.insert_revealed(VariableId(1), g).unwrap();
        (world, lib)
    }

    /// Brute-force evaluation of the weighted smoothed-expert average, one
    /// value at a time.
    fn brute_mixture(preds: &[(usize, f64)], k: usize, eps: f64) -> Vec<f64> {
        let total: f64 = preds.iter().map(|p| p.1).sum();
        (0..k)
            .map(|v| {
                preds
                    .iter()
                    .map(|&(mu, w)| w * if v == mu { 1.0 - eps } else { eps / (k as f64 - 1.0) })
                    .sum::<f64>()
                    / total
            })
            .collect()
    }

    #[test]
    fn mixture_matches_brute_force() {
        let (world, lib) = two_expert_setup();
        let mix = mixture(VariableId(4), &world, &lib).unwrap();
        assert_eq!(mix.active_indices, vec![0, 1]);
        let expected = brute_mixture(&[(0, 2.0), (1, 1.0)], 10, 0.001);
        for (p, e) in mix.probabilities.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_four_value_reference_numbers() {
        // Hand-evaluated reference for |Y| = 4, eps = 0.001, w = (2, 1).
        let expected = brute_mixture(&[(0, 2.0), (1, 1.0)], 4, 0.001);
        assert!((expected[0] - 0.666_111_111).abs() < 1e-6);
        assert!((expected[1] - 0.333_222_222).abs() < 1e-6);
        assert!((expected[2] - 0.000_333_333).abs() < 1e-6);
        // Same numbers through the library, on a 4-valued slice of the cube
        // alphabet: two URF tokens sharing the slot-0/slot-1 context.
        let mut lib = PatternLibrary::empty(Domain::Cube);
        let w = cube_value("W");
        let r = cube_value("R");
        for (pred, weight) in [(cube_value("R"), 2.0), (cube_value("G"), 1.0)] {
            lib.add(Pattern { kind: PatternKind::Corner, target: 2, context: vec![(0, w), (1, r)], prediction: pred, weight })
                .unwrap();
        }
        let urf = cube::corner_map().facelets[0];
        let mut world = WorldModel::new(Domain::Cube, Layout::Cube);
        world.insert_revealed(VariableId(urf[0] as u32), w).unwrap();
        world.insert_revealed(VariableId(urf[1] as u32), r).unwrap();
        let mix = mixture(VariableId(urf[2] as u32), &world, &lib).unwrap();
        let six = brute_mixture(&[(0, 2.0), (1, 1.0)], 6, 0.001);
        assert!((mix.probabilities[0] - six[0]).abs() < 1e-15);
        assert!((mix.probabilities[1] - six[1]).abs() < 1e-15);
    }

    #[test]
    fn single_expert_puts_one_minus_eps_on_prediction() {
        let lib = urf_library(&["WRG"]);
        let urf = cube::corner_map().facelets[0];
        let mut world = WorldModel::new(Domain::Cube, Layout::Cube);
        world.insert_revealed(VariableId(urf[0] as u32), cube_value("W")).unwrap();
        world.insert_revealed(VariableId(urf[1] as u32), cube_value("R")).unwrap();
        let mix = mixture(VariableId(urf[2] as u32), &world, &lib).unwrap();
        let (v, c) = mix.argmax();
        assert_eq!(v, cube_value("G"));
        assert!((c - 0.999).abs() < 1e-15);
        assert!((mix.probabilities[0] - 0.001 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn empty_active_set_is_uniform() {
        let lib = PatternLibrary::empty(Domain::Cube);
        let world = WorldModel::new(Domain::Cube, Layout::Cube);
        let mix = mixture(VariableId(0), &world, &lib).unwrap();
        assert!(mix.probabilities.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let (world, mut lib) = two_expert_setup();
        lib.set_weights(&[0.0, 0.0]).unwrap();
        let mix = mixture(VariableId(4), &world, &lib).unwrap();
        assert!(mix.active_indices.is_empty());
        assert!(mix.probabilities.iter().all(|p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn impute_respects_tau() {
        let lib = urf_library(&["WRG"]);
        let urf = cube::corner_map().facelets[0];
        let mut world = WorldModel::new(Domain::Cube, Layout::Cube);
        world.insert_revealed(VariableId(urf[0] as u32), cube_value("W")).unwrap();
        world.insert_revealed(VariableId(urf[1] as u32), cube_value("R")).unwrap();
        let target = VariableId(urf[2] as u32);

        let mut never = world.clone();
        let none = impute(target, &mut never, &lib, &ImputationConfig::new(1.0).unwrap()).unwrap();
        assert!(none.is_none());
        assert_eq!(never, world);

        let fact = impute(target, &mut world, &lib, &ImputationConfig::new(0.99).unwrap()).unwrap().unwrap();
        assert_eq!(fact.value, cube_value("G"));
        assert_eq!(fact.source, FactSource::Imputed);
        assert_eq!(world.imputed(target), Some(cube_value("G")));
    }

    #[test]
    fn disagreement_blocks_imputation() {
        let (mut world, lib) = two_expert_setup();
        let before = world.clone();
        let out = impute(VariableId(4), &mut world, &lib, &ImputationConfig::new(0.99).unwrap()).unwrap();
        assert!(out.is_none());
        assert_eq!(world, before);
    }

    #[test]
    fn closure_chains_through_imputed_facts() {
        // All-SAFE block: one revealed SAFE cell lets every other cell in the
        // block be imputed, and imputed cells feed later gates.
        let mut lib = PatternLibrary::empty(Domain::Lake);
        lib.add_macro(&block(["SSSS", "SSSS", "SSSS", "SSSS"]), 1.0).unwrap();
        let mut world = grid_world(Domain::Lake, 4);
        world.insert_revealed(VariableId(0), SAFE).unwrap();
        let candidates: Vec<VariableId> = (1..16).map(VariableId).collect();
        let facts = impute_closure(&mut world, &lib, &ImputationConfig::for_domain(Domain::Lake), &candidates).unwrap();
        assert_eq!(facts.len(), 15);
        assert_eq!(world.known_count(), 16);

        let mut fresh = grid_world(Domain::Lake, 4);
        fresh.insert_revealed(VariableId(0), SAFE).unwrap();
        let empty = PatternLibrary::empty(Domain::Lake);
        assert!(impute_closure(&mut fresh, &empty, &ImputationConfig::new(0.5).unwrap(), &candidates).unwrap().is_empty());
        assert!(impute_closure(&mut fresh, &lib, &ImputationConfig::new(1.0).unwrap(), &candidates).unwrap().is_empty());
    }

    #[test]
    fn rerank_orders_by_target_mass() {
        // 5x5 grid; candidates (1,1) has an active cross pattern predicting
        // stone, (3,3) predicts grass, (2,2) has no active pattern.
        let stone = crafter("stone");
        let grass = crafter("grass");
        let mut lib = PatternLibrary::empty(Domain::Crafter);
        lib.add_macro(&MacroPattern::Cross { center: stone, top: stone, bottom: stone, left: stone, right: stone }, 1.0)
            .unwrap();
        lib.add_macro(&MacroPattern::Cross { center: grass, top: grass, bottom: grass, left: grass, right: grass }, 1.0)
            .unwrap();
        let layout = Layout::Grid { rows: 5, cols: 5 };
        let mut world = WorldModel::new(Domain::Crafter, layout);
        world.insert_revealed(layout.var(0, 1), stone).unwrap();
        world.insert_revealed(layout.var(4, 3), grass).unwrap();
        let cands = [layout.var(3, 3), layout.var(2, 2), layout.var(1, 1)];
        let spec = RerankSpec { target_values: vec![stone] };
        let order = rerank(&cands, &world, &lib, &spec).unwrap();
        assert_eq!(order, vec![layout.var(1, 1), layout.var(2, 2), layout.var(3, 3)]);
        assert_eq!(world.known_count(), 2);

        let uniform = rerank(&cands, &world, &PatternLibrary::empty(Domain::Crafter), &spec).unwrap();
        assert_eq!(uniform, vec![layout.var(1, 1), layout.var(2, 2), layout.var(3, 3)]);
        assert!(rerank(&cands, &world, &lib, &RerankSpec { target_values: vec![] }).is_err());
    }

    #[test]
    fn library_json_round_trip_rebuilds_index() {
        let (world, lib) = two_expert_setup();
        let json = serde_json::to_string(&lib).unwrap();
        let back: PatternLibrary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lib);
        assert_eq!(mixture(VariableId(4), &world, &back).unwrap(), mixture(VariableId(4), &world, &lib).unwrap());
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(doc.get("patterns").is_some() && doc.get("epsilon").is_some() && doc.get("gate_mode").is_some());
    }

    #[test]
    fn epsilon_is_validated() {
        assert!(PatternLibrary::new(Domain::Lake, 0.0, GateMode::Consistent).is_err());
        assert!(PatternLibrary::new(Domain::Lake, 0.5, GateMode::Consistent).is_err());
        assert!(PatternLibrary::new(Domain::Lake, 0.49, GateMode::Consistent).is_ok());
    }
}
