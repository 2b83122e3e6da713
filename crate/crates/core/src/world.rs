//! Visual variables, symbolic facts and the world model.
//!
//! A [`WorldModel`] keeps two fact sets: values grounded directly through the
//! reveal oracle and values imputed from the pattern library. Reads go
//! through [`WorldModel::merged`], where a revealed value always wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("variable {0} is already revealed")]
    AlreadyRevealed(VariableId),
    #[error("variable {var} out of range (model has {count} variables)")]
    OutOfRange { var: VariableId, count: usize },
    #[error("value {value} outside the {domain:?} domain")]
    ValueOutOfDomain { domain: Domain, value: u8 },
    #[error("grounding accuracy is undefined on an empty world model")]
    EmptyWorldModel,
    #[error("world model and instance disagree on {0}")]
    Mismatch(&'static str),
}

/// The three planning domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Lake,
    Crafter,
    Cube,
}

static LAKE_VALUES: [&str; 2] = ["SAFE", "HOLE"];
static CRAFTER_VALUES: [&str; 10] = [
    "grass", "sand", "water", "tree", "stone", "coal", "iron", "diamond", "lava", "path",
];
static CUBE_VALUES: [&str; 6] = ["R", "G", "B", "Y", "O", "W"];

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Lake, Domain::Crafter, Domain::Cube];

    pub fn values(self) -> ValueDomain {
        match self {
            Domain::Lake => ValueDomain { names: &LAKE_VALUES },
            Domain::Crafter => ValueDomain { names: &CRAFTER_VALUES },
            Domain::Cube => ValueDomain { names: &CUBE_VALUES },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Lake => "lake",
            Domain::Crafter => "crafter",
            Domain::Cube => "cube",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lake" | "frozenlake" => Ok(Domain::Lake),
            "crafter" => Ok(Domain::Crafter),
            "cube" | "cubebench" => Ok(Domain::Cube),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

/// Ordered set of symbolic value names for one domain.
#[derive(Debug, Clone, Copy)]
pub struct ValueDomain {
    names: &'static [&'static str],
}

impl ValueDomain {
    pub fn cardinality(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &'static [&'static str] {
        self.names
    }

    pub fn name(&self, value: Value) -> &'static str {
        self.names[value.index()]
    }

    pub fn parse(&self, name: &str) -> Option<Value> {
        self.names.iter().position(|n| *n == name).map(|i| Value(i as u8))
    }

    pub fn contains(&self, value: Value) -> bool {
        value.index() < self.names.len()
    }
}

/// Index of a visual variable: a row-major cell index on grids, a facelet
/// index on the cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VariableId(pub u32);

impl VariableId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for VariableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// Index into a domain's [`ValueDomain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Value(pub u8);

impl Value {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Spatial arrangement of the variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layout {
    Grid { rows: usize, cols: usize },
    Cube,
}

impl Layout {
    pub fn num_vars(&self) -> usize {
        match *self {
            Layout::Grid { rows, cols } => rows * cols,
            Layout::Cube => 54,
        }
    }

    /// `(row, col)` of a grid variable. Cube facelets map to `(0, index)`.
    pub fn coords(&self, var: VariableId) -> (usize, usize) {
        match *self {
            Layout::Grid { cols, .. } => (var.index() / cols, var.index() % cols),
            Layout::Cube => (0, var.index()),
        }
    }

    pub fn var(&self, row: usize, col: usize) -> VariableId {
        match *self {
            Layout::Grid { cols, .. } => VariableId((row * cols + col) as u32),
            Layout::Cube => VariableId(col as u32),
        }
    }

    /// Grid cell at a signed offset, `None` when it falls off the grid.
    pub fn offset(&self, var: VariableId, dr: isize, dc: isize) -> Option<VariableId> {
        match *self {
            Layout::Grid { rows, cols } => {
                let (r, c) = self.coords(var);
                let r = r as isize + dr;
                let c = c as isize + dc;
                if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                    None
                } else {
                    Some(self.var(r as usize, c as usize))
                }
            }
            Layout::Cube => None,
        }
    }

    /// 4-neighbours in up, down, left, right order.
    pub fn neighbors4(&self, var: VariableId) -> impl Iterator<Item = VariableId> + '_ {
        [(-1, 0), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .filter_map(move |(dr, dc)| self.offset(var, dr, dc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactSource {
    Revealed,
    Imputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicFact {
    #[serde(rename = "var")]
    pub variable: VariableId,
    pub value: Value,
    pub source: FactSource,
}

/// Directly grounded facts plus pattern-imputed facts over one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldModelRepr", into = "WorldModelRepr")]
pub struct WorldModel {
    domain: Domain,
    layout: Layout,
    revealed: Vec<Option<Value>>,
    imputed: Vec<Option<Value>>,
}

#[derive(Serialize, Deserialize)]
struct WorldModelRepr {
    domain: Domain,
    layout: Layout,
    revealed: Vec<SymbolicFact>,
    imputed: Vec<SymbolicFact>,
}

impl From<WorldModel> for WorldModelRepr {
    fn from(world: WorldModel) -> Self {
        WorldModelRepr {
            domain: world.domain,
            layout: world.layout,
            revealed: world.revealed_facts().collect(),
            imputed: world.imputed_facts().collect(),
        }
    }
}

impl TryFrom<WorldModelRepr> for WorldModel {
    type Error = WorldError;

    fn try_from(repr: WorldModelRepr) -> Result<Self, Self::Error> {
        let mut world = WorldModel::new(repr.domain, repr.layout);
        for fact in repr.revealed {
            world.insert_revealed(fact.variable, fact.value)?;
        }
        for fact in repr.imputed {
            world.check(fact.variable, fact.value)?;
            world.imputed[fact.variable.index()] = Some(fact.value);
        }
        Ok(world)
    }
}

impl WorldModel {
    pub fn new(domain: Domain, layout: Layout) -> Self {
        let n = layout.num_vars();
        WorldModel { domain, layout, revealed: vec![None; n], imputed: vec![None; n] }
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn num_vars(&self) -> usize {
        self.revealed.len()
    }

    pub fn revealed(&self, var: VariableId) -> Option<Value> {
        self.revealed.get(var.index()).copied().flatten()
    }

    pub fn imputed(&self, var: VariableId) -> Option<Value> {
        self.imputed.get(var.index()).copied().flatten()
    }

    pub fn is_revealed(&self, var: VariableId) -> bool {
        self.revealed(var).is_some()
    }

    /// Revealed value if present, else imputed value, else `None`.
    #[inline]
    pub fn merged(&self, var: VariableId) -> Option<Value> {
        let i = var.index();
        match self.revealed.get(i) {
            Some(Some(v)) => Some(*v),
            Some(None) => self.imputed[i],
            None => None,
        }
    }

    pub fn is_known(&self, var: VariableId) -> bool {
        self.merged(var).is_some()
    }

    /// Source that currently determines the merged value of `var`.
    pub fn effective_source(&self, var: VariableId) -> Option<FactSource> {
        if self.is_revealed(var) {
            Some(FactSource::Revealed)
        } else if self.imputed(var).is_some() {
            Some(FactSource::Imputed)
        } else {
            None
        }
    }

    fn check(&self, var: VariableId, value: Value) -> Result<(), WorldError> {
        if var.index() >= self.num_vars() {
            return Err(WorldError::OutOfRange { var, count: self.num_vars() });
        }
        if !self.domain.values().contains(value) {
            return Err(WorldError::ValueOutOfDomain { domain: self.domain, value: value.0 });
        }
        Ok(())
    }

    pub fn insert_revealed(&mut self, var: VariableId, value: Value) -> Result<(), WorldError> {
        self.check(var, value)?;
        if self.is_revealed(var) {
            return Err(WorldError::AlreadyRevealed(var));
        }
        self.revealed[var.index()] = Some(value);
        Ok(())
    }

    /// Record an imputed value. Re-imputing overwrites; imputing a revealed
    /// variable is rejected.
    pub fn insert_imputed(&mut self, var: VariableId, value: Value) -> Result<(), WorldError> {
        self.check(var, value)?;
        if self.is_revealed(var) {
            return Err(WorldError::AlreadyRevealed(var));
        }
        self.imputed[var.index()] = Some(value);
        Ok(())
    }

    pub fn clear_imputed(&mut self) {
        self.imputed.iter_mut().for_each(|v| *v = None);
    }

    pub fn revealed_facts(&self) -> impl Iterator<Item = SymbolicFact> + '_ {
        self.revealed.iter().enumerate().filter_map(|(i, v)| {
            v.map(|value| SymbolicFact {
                variable: VariableId(i as u32),
                value,
                source: FactSource::Revealed,
            })
        })
    }

    /// Every stored imputed fact, including ones shadowed by a reveal.
    pub fn imputed_facts(&self) -> impl Iterator<Item = SymbolicFact> + '_ {
        self.imputed.iter().enumerate().filter_map(|(i, v)| {
            v.map(|value| SymbolicFact {
                variable: VariableId(i as u32),
                value,
                source: FactSource::Imputed,
            })
        })
    }

    /// The merged view `M`, each fact tagged with its effective source.
    pub fn merged_facts(&self) -> impl Iterator<Item = SymbolicFact> + '_ {
        (0..self.num_vars()).filter_map(move |i| {
            let var = VariableId(i as u32);
            let value = self.merged(var)?;
            let source = self.effective_source(var)?;
            Some(SymbolicFact { variable: var, value, source })
        })
    }

    pub fn revealed_count(&self) -> usize {
        self.revealed.iter().filter(|v| v.is_some()).count()
    }

    /// Imputed facts that are not shadowed by a reveal.
    pub fn effective_imputed_count(&self) -> usize {
        self.revealed
            .iter()
            .zip(&self.imputed)
            .filter(|(r, i)| r.is_none() && i.is_some())
            .count()
    }

    /// `|dom(M)|`
    pub fn known_count(&self) -> usize {
        self.revealed_count() + self.effective_imputed_count()
    }

    pub fn unknown_vars(&self) -> impl Iterator<Item = VariableId> + '_ {
        (0..self.num_vars()).map(|i| VariableId(i as u32)).filter(|v| !self.is_known(*v))
    }
}

/// Per-episode payload that accompanies the hidden assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskPayload {
    Lake { start: VariableId, goal: VariableId },
    Crafter { spawn: VariableId },
    Cube,
}

/// Hidden full assignment, observable only through [`reveal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub domain: Domain,
    pub layout: Layout,
    pub assignment: Vec<Value>,
    pub task: TaskPayload,
}

impl GroundTruthInstance {
    pub fn value(&self, var: VariableId) -> Value {
        self.assignment[var.index()]
    }

    pub fn empty_world(&self) -> WorldModel {
        WorldModel::new(self.domain, self.layout)
    }
}

/// Fixed token cost charged for every reveal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealBudget {
    pub input_tokens_per_reveal: u64,
    pub output_tokens_per_reveal: u64,
}

impl RevealBudget {
    pub fn for_domain(domain: Domain) -> Self {
        let (input, output) = match domain {
            Domain::Lake => (98, 5),
            Domain::Crafter => (184, 5),
            Domain::Cube => (88, 5),
        };
        RevealBudget { input_tokens_per_reveal: input, output_tokens_per_reveal: output }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub budget: RevealBudget,
    pub perception_in: u64,
    pub perception_out: u64,
    pub proposal_in: u64,
    pub proposal_out: u64,
    pub reveal_count: u64,
    pub proposal_calls: u64,
}

impl TokenLedger {
    pub fn new(budget: RevealBudget) -> Self {
        TokenLedger {
            budget,
            perception_in: 0,
            perception_out: 0,
            proposal_in: 0,
            proposal_out: 0,
            reveal_count: 0,
            proposal_calls: 0,
        }
    }

    fn charge_reveal(&mut self) {
        self.reveal_count += 1;
        self.perception_in += self.budget.input_tokens_per_reveal;
        self.perception_out += self.budget.output_tokens_per_reveal;
    }

    pub fn total_in(&self) -> u64 {
        self.perception_in + self.proposal_in
    }

    pub fn total_out(&self) -> u64 {
        self.perception_out + self.proposal_out
    }

    /// Sum of `other` into `self`; budgets must match.
    pub fn absorb(&mut self, other: &TokenLedger) {
        self.perception_in += other.perception_in;
        self.perception_out += other.perception_out;
        self.proposal_in += other.proposal_in;
        self.proposal_out += other.proposal_out;
        self.reveal_count += other.reveal_count;
        self.proposal_calls += other.proposal_calls;
    }
}

/// Add proposal token usage. Perception counters are untouched.
pub fn charge_proposal(ledger: &mut TokenLedger, in_tokens: u64, out_tokens: u64) {
    ledger.proposal_in += in_tokens;
    ledger.proposal_out += out_tokens;
}

/// Ground `var` through the oracle and record it as a revealed fact.
pub fn reveal(
    instance: &GroundTruthInstance,
    var: VariableId,
    world: &mut WorldModel,
    ledger: &mut TokenLedger,
) -> Result<SymbolicFact, WorldError> {
    reveal_with(instance, var, world, ledger, None)
}

/// [`reveal`] with an optional perception-noise hook applied to the true
/// value before it is recorded.
pub fn reveal_with(
    instance: &GroundTruthInstance,
    var: VariableId,
    world: &mut WorldModel,
    ledger: &mut TokenLedger,
    noise: Option<&mut dyn FnMut(VariableId, Value) -> Value>,
) -> Result<SymbolicFact, WorldError> {
    if instance.layout != world.layout() || instance.domain != world.domain() {
        return Err(WorldError::Mismatch("layout"));
    }
    if var.index() >= instance.assignment.len() {
        return Err(WorldError::OutOfRange { var, count: instance.assignment.len() });
    }
    if world.is_revealed(var) {
        return Err(WorldError::AlreadyRevealed(var));
    }
    let truth = instance.value(var);
    let value = match noise {
        Some(hook) => hook(var, truth),
        None => truth,
    };
    world.insert_revealed(var, value)?;
    ledger.charge_reveal();
    Ok(SymbolicFact { variable: var, value, source: FactSource::Revealed })
}

/// Correct/total counts split by effective source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub n_imp: usize,
    pub n_per: usize,
    pub correct_imp: usize,
    pub correct_per: usize,
}

impl GroundingCounts {
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.n_imp + self.n_per;
        (total > 0).then(|| (self.correct_imp + self.correct_per) as f64 / total as f64)
    }
}

pub fn grounding_counts(world: &WorldModel, truth: &GroundTruthInstance) -> GroundingCounts {
    let mut counts = GroundingCounts::default();
    for fact in world.merged_facts() {
        let ok = truth.value(fact.variable) == fact.value;
        match fact.source {
            FactSource::Revealed => {
                counts.n_per += 1;
                counts.correct_per += ok as usize;
            }
            FactSource::Imputed => {
                counts.n_imp += 1;
                counts.correct_imp += ok as usize;
            }
        }
    }
    counts
}

/// Fraction of merged facts that match the ground truth. Untouched
/// variables are not counted.
pub fn grounding_accuracy(world: &WorldModel, truth: &GroundTruthInstance) -> Result<f64, WorldError> {
    if world.num_vars() != truth.assignment.len() {
        return Err(WorldError::Mismatch("variable count"));
    }
    grounding_counts(world, truth).accuracy().ok_or(WorldError::EmptyWorldModel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube_truth(colors: &[u8]) -> GroundTruthInstance {
        GroundTruthInstance {
            domain: Domain::Cube,
            layout: Layout::Cube,
            assignment: colors.iter().map(|&c| Value(c)).collect(),
            task: TaskPayload::Cube,
        }
    }

    fn grid_truth(n: usize, value: u8) -> GroundTruthInstance {
        GroundTruthInstance {
            domain: Domain::Lake,
            layout: Layout::Grid { rows: n, cols: n },
            assignment: vec![Value(value); n * n],
            task: TaskPayload::Lake { start: VariableId(0), goal: VariableId((n * n - 1) as u32) },
        }
    }

    #[test]
    fn reveal_charges_cube_budget() {
        let white = Domain::Cube.values().parse("W").unwrap();
        let mut colors = vec![0u8; 54];
        colors[7] = white.0;
        let truth = cube_truth(&colors);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Cube));
        let fact = reveal(&truth, VariableId(7), &mut world, &mut ledger).unwrap();
        assert_eq!(fact.value, white);
        assert_eq!(fact.source, FactSource::Revealed);
        assert_eq!((ledger.perception_in, ledger.perception_out), (88, 5));
    }

    #[test]
    fn full_cube_reveal_costs_4752_in() {
        let truth = cube_truth(&[3u8; 54]);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Cube));
        for i in 0..54 {
            reveal(&truth, VariableId(i), &mut world, &mut ledger).unwrap();
        }
        assert_eq!(ledger.perception_in, 4752);
        assert_eq!(ledger.perception_out, 270);
        assert_eq!(ledger.reveal_count, 54);
    }

    #[test]
    fn re_reveal_is_rejected() {
        let truth = grid_truth(3, 0);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Lake));
        reveal(&truth, VariableId(4), &mut world, &mut ledger).unwrap();
        let err = reveal(&truth, VariableId(4), &mut world, &mut ledger).unwrap_err();
        assert_eq!(err, WorldError::AlreadyRevealed(VariableId(4)));
        assert_eq!(ledger.reveal_count, 1);
    }

    #[test]
    fn reveal_overrides_wrong_imputation() {
        let truth = grid_truth(3, 0);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Lake));
        world.insert_imputed(VariableId(2), Value(1)).unwrap();
        assert_eq!(world.merged(VariableId(2)), Some(Value(1)));
        reveal(&truth, VariableId(2), &mut world, &mut ledger).unwrap();
        assert_eq!(world.merged(VariableId(2)), Some(Value(0)));
        assert_eq!(world.effective_imputed_count(), 0);
    }

    #[test]
    fn merged_value_cases() {
        let mut world = WorldModel::new(Domain::Lake, Layout::Grid { rows: 2, cols: 2 });
        world.insert_imputed(VariableId(0), Value(1)).unwrap();
        world.insert_revealed(VariableId(0), Value(0)).unwrap();
        world.insert_imputed(VariableId(1), Value(1)).unwrap();
        assert_eq!(world.merged(VariableId(0)), Some(Value(0)));
        assert_eq!(world.merged(VariableId(1)), Some(Value(1)));
        assert_eq!(world.merged(VariableId(2)), None);
        assert_eq!(world.known_count(), 2);
    }

    #[test]
    fn imputing_a_revealed_variable_fails() {
        let mut world = WorldModel::new(Domain::Lake, Layout::Grid { rows: 2, cols: 2 });
        world.insert_revealed(VariableId(3), Value(0)).unwrap();
        assert!(world.insert_imputed(VariableId(3), Value(1)).is_err());
    }

    #[test]
    fn grounding_accuracy_direct_formula() {
        // 80 revealed (all correct) + 20 imputed with 18 correct.
        let truth = grid_truth(10, 0);
        let mut world = truth.empty_world();
        for i in 0..80 {
            world.insert_revealed(VariableId(i), Value(0)).unwrap();
        }
        for i in 80..100 {
            let v = if i < 98 { 0 } else { 1 };
            world.insert_imputed(VariableId(i), Value(v)).unwrap();
        }
        let acc = grounding_accuracy(&world, &truth).unwrap();
        assert!((acc - 0.98).abs() < 1e-12);
    }

    #[test]
    fn grounding_accuracy_all_revealed_is_one() {
        let truth = cube_truth(&[5u8; 54]);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Cube));
        for i in 0..54 {
            reveal(&truth, VariableId(i), &mut world, &mut ledger).unwrap();
        }
        assert_eq!(grounding_accuracy(&world, &truth).unwrap(), 1.0);
    }

    #[test]
    fn grounding_accuracy_empty_is_error() {
        let truth = grid_truth(2, 0);
        let world = truth.empty_world();
        assert_eq!(grounding_accuracy(&world, &truth), Err(WorldError::EmptyWorldModel));
    }

    #[test]
    fn charge_proposal_accumulates() {
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Lake));
        let before = ledger;
        charge_proposal(&mut ledger, 0, 0);
        assert_eq!(ledger, before);
        charge_proposal(&mut ledger, 464, 268);
        assert_eq!(ledger.proposal_in, 464);
        charge_proposal(&mut ledger, 10, 2);
        assert_eq!((ledger.proposal_in, ledger.proposal_out), (474, 270));
        assert_eq!(ledger.perception_in, 0);
    }

    #[test]
    fn noisy_reveal_hook_is_applied() {
        let truth = grid_truth(2, 0);
        let mut world = truth.empty_world();
        let mut ledger = TokenLedger::new(RevealBudget::for_domain(Domain::Lake));
        let mut flip = |_: VariableId, v: Value| Value(1 - v.0);
        let fact = reveal_with(&truth, VariableId(0), &mut world, &mut ledger, Some(&mut flip)).unwrap();
        assert_eq!(fact.value, Value(1));
        assert!(grounding_accuracy(&world, &truth).unwrap() < 1.0);
    }

    #[test]
    fn world_model_json_uses_fact_objects() {
        let mut world = WorldModel::new(Domain::Lake, Layout::Grid { rows: 2, cols: 2 });
        world.insert_revealed(VariableId(1), Value(1)).unwrap();
        let json = serde_json::to_value(&world).unwrap();
        assert_eq!(json["revealed"][0], serde_json::json!({"var": 1, "value": 1, "source": "revealed"}));
        assert_eq!(json["imputed"], serde_json::json!([]));
    }
}
