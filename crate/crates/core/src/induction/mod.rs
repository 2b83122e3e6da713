//! Online pattern induction: replay buffer, masked training data, and
//! maximum-likelihood reweighting of library weights.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::PatternLibrary;
use crate::world::{FactSource, SymbolicFact, WorldModel};

pub mod lbfgs;
pub mod proposal;

pub use lbfgs::LbfgsConfig;

#[derive(Debug, Error, PartialEq)]
pub enum InductionError {
    #[error("world model has {0} facts; masking needs at least 2")]
    TooFewFacts(usize),
    #[error("mask fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("log-likelihood is not finite ({0}); weights left unchanged")]
    NonFinite(f64),
    #[error("replay buffer is empty")]
    EmptyBuffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub episode_id: usize,
    pub success: bool,
    /// Set once the entry has been shown to a proposer.
    pub reflected: bool,
    pub world: WorldModel,
}

/// Final world models of completed episodes, in completion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode_id: usize, success: bool, world: WorldModel) {
        self.entries.push(ReplayEntry { episode_id, success, reflected: false, world });
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mark_reflected(&mut self, indices: &[usize]) {
        for &i in indices {
            if let Some(e) = self.entries.get_mut(i) {
                e.reflected = true;
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("replay entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(ReplayBuffer { entries })
    }
}

/// A world model with some of its facts held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub visible: WorldModel,
    pub hidden: Vec<SymbolicFact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub fraction: f64,
    pub count: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { fraction: 0.25, count: 4 }
    }
}

/// Hide `ceil(fraction * n)` of the model's `n` merged facts, `count` times.
/// Each sample draws a fresh partial Fisher-Yates shuffle from one seeded
/// stream, so the output depends only on the model and the seed.
pub fn generate_masks(
    model: &WorldModel,
    fraction: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<MaskedSample>, InductionError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(InductionError::BadFraction(fraction));
    }
    let facts: Vec<SymbolicFact> = model.merged_facts().collect();
    let n = facts.len();
    if n < 2 {
        return Err(InductionError::TooFewFacts(n));
    }
    let hide = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        for i in 0..hide {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
        }
        let mut hidden_idx: Vec<usize> = order[..hide].to_vec();
        hidden_idx.sort_unstable();
        let mut is_hidden = vec![false; n];
        for &i in &hidden_idx {
            is_hidden[i] = true;
        }
        let mut visible = WorldModel::new(model.domain(), model.layout());
        for (i, f) in facts.iter().enumerate() {
            if is_hidden[i] {
                continue;
            }
            match f.source {
                FactSource::Revealed => visible.insert_revealed(f.variable, f.value),
                FactSource::Imputed => visible.insert_imputed(f.variable, f.value),
            }
            .expect("facts come from a valid model");
        }
        let hidden = hidden_idx.iter().map(|&i| facts[i]).collect();
        samples.push(MaskedSample { visible, hidden });
    }
    Ok(samples)
}

/// Masked samples for every buffered model with at least two facts. Model
/// `b` draws from stream `seed + b`.
pub fn build_dataset(buffer: &ReplayBuffer, mask: &MaskConfig, seed: u64) -> Result<Vec<MaskedSample>, InductionError> {
    let mut out = Vec::new();
    for (b, entry) in buffer.entries().iter().enumerate() {
        match generate_masks(&entry.world, mask.fraction, mask.count, seed.wrapping_add(b as u64)) {
            Ok(samples) => out.extend(samples),
            Err(InductionError::TooFewFacts(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// The masked log-likelihood reduced to distinct (active set, correctness)
/// signatures with multiplicities. Hidden facts with no active expert only
/// add a constant.
#[derive(Debug, Clone)]
pub struct Objective {
    rows: Vec<(Vec<(u32, bool)>, f64)>,
    constant: f64,
    on: f64,
    off: f64,
    uniform_log: f64,
}

impl Objective {
    pub fn compile(library: &PatternLibrary, dataset: &[MaskedSample]) -> Objective {
        let k = library.cardinality() as f64;
        let eps = library.epsilon();
        let uniform_log = (1.0 / k).ln();
        let mut counts: BTreeMap<Vec<(u32, bool)>, f64> = BTreeMap::new();
        let mut constant = 0.0;
        let mut scratch = Vec::new();
        for sample in dataset {
            for fact in &sample.hidden {
                library.collect_active(fact.variable, &sample.visible, &mut scratch);
                if scratch.is_empty() {
                    constant += uniform_log;
                    continue;
                }
                let sig: Vec<(u32, bool)> = scratch
                    .iter()
                    .map(|&i| (i as u32, library.patterns()[i].prediction == fact.value))
                    .collect();
                *counts.entry(sig).or_insert(0.0) += 1.0;
            }
        }
        Objective {
            rows: counts.into_iter().collect(),
            constant,
            on: 1.0 - eps,
            off: eps / (k - 1.0),
            uniform_log,
        }
    }

    pub fn signatures(&self) -> usize {
        self.rows.len()
    }

    /// Log-likelihood at `w`, adding its gradient into `grad` when given.
    pub fn evaluate(&self, w: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut ll = self.constant;
        for (sig, count) in &self.rows {
            let mut den = 0.0;
            let mut num = 0.0;
            for &(i, correct) in sig {
                let wi = w[i as usize];
                den += wi;
                num += wi * if correct { self.on } else { self.off };
            }
            if den <= 0.0 {
                ll += count * self.uniform_log;
                continue;
            }
            ll += count * (num / den).ln();
            if let Some(g) = grad.as_deref_mut() {
                for &(i, correct) in sig {
                    let q = if correct { self.on } else { self.off };
                    g[i as usize] += count * (q / num - 1.0 / den);
                }
            }
        }
        ll
    }
}

pub fn log_likelihood(weights: &[f64], dataset: &[MaskedSample], library: &PatternLibrary) -> Result<f64, InductionError> {
    check_len(weights, library)?;
    Ok(Objective::compile(library, dataset).evaluate(weights, None))
}

pub fn grad_log_likelihood(
    weights: &[f64],
    dataset: &[MaskedSample],
    library: &PatternLibrary,
) -> Result<Vec<f64>, InductionError> {
    check_len(weights, library)?;
    let mut g = vec![0.0; weights.len()];
    Objective::compile(library, dataset).evaluate(weights, Some(&mut g));
    Ok(g)
}

fn check_len(weights: &[f64], library: &PatternLibrary) -> Result<(), InductionError> {
    if weights.len() != library.len() {
        return Err(InductionError::WeightCount { expected: library.len(), got: weights.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reparameterization {
    Exponential,
    Softplus,
}

impl Reparameterization {
    fn weight(self, theta: f64) -> f64 {
        match self {
            Reparameterization::Exponential => theta.exp(),
            Reparameterization::Softplus => theta.max(0.0) + (-theta.abs()).exp().ln_1p(),
        }
    }

    fn derivative(self, theta: f64) -> f64 {
        match self {
            Reparameterization::Exponential => theta.exp(),
            Reparameterization::Softplus => 1.0 / (1.0 + (-theta).exp()),
        }
    }

    fn theta(self, w: f64) -> f64 {
        let w = w.max(1e-300);
        match self {
            Reparameterization::Exponential => w.ln(),
            Reparameterization::Softplus => {
                if w > 30.0 {
                    w
                } else {
                    w.exp_m1().max(1e-300).ln()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub reparameterization: Reparameterization,
}

impl OptimizerConfig {
    pub fn for_domain(domain: crate::world::Domain) -> Self {
        use crate::world::Domain;
        let max_iterations = match domain {
            Domain::Lake => 50,
            Domain::Crafter => 20,
            Domain::Cube => 150,
        };
        OptimizerConfig { step_size: 1.0, max_iterations, reparameterization: Reparameterization::Exponential }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reweighting {
    pub weights: Vec<f64>,
    pub ll_before: f64,
    pub ll_after: f64,
    pub iterations: usize,
    /// Log-likelihood after every accepted step.
    pub trace: Vec<f64>,
}

/// Maximise the masked log-likelihood starting from the library's current
/// weights. The library itself is not modified.
pub fn optimize_weights(
    library: &PatternLibrary,
    dataset: &[MaskedSample],
    config: &OptimizerConfig,
) -> Result<Reweighting, InductionError> {
    if dataset.is_empty() {
        return Err(InductionError::EmptyDataset);
    }
    let objective = Objective::compile(library, dataset);
    let start = library.weights();
    let ll_before = objective.evaluate(&start, None);
    if !ll_before.is_finite() {
        return Err(InductionError::NonFinite(ll_before));
    }
    let reparam = config.reparameterization;
    let theta0: Vec<f64> = start.iter().map(|&w| reparam.theta(w)).collect();
    let mut w = vec![0.0; start.len()];
    let mut gw = vec![0.0; start.len()];
    let lb = LbfgsConfig { step_size: config.step_size, max_iterations: config.max_iterations, ..Default::default() };
    let result = lbfgs::minimize(
        |theta, g| {
            for (wi, &t) in w.iter_mut().zip(theta) {
                *wi = reparam.weight(t);
            }
            let ll = objective.evaluate(&w, Some(&mut gw));
            for ((gi, &gwi), &t) in g.iter_mut().zip(&gw).zip(theta) {
                *gi = -gwi * reparam.derivative(t);
            }
            -ll
        },
        &theta0,
        &lb,
    )
    .map_err(|e| InductionError::NonFinite(-e.0))?;
    let weights: Vec<f64> = result.x.iter().map(|&t| reparam.weight(t)).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(InductionError::NonFinite(f64::NAN));
    }
    let ll_after = objective.evaluate(&weights, None);
    if ll_after < ll_before {
        // Reparameterisation round-off; keep the starting weights.
        return Ok(Reweighting { weights: start, ll_before, ll_after: ll_before, iterations: 0, trace: vec![ll_before] });
    }
    Ok(Reweighting {
        weights,
        ll_before,
        ll_after,
        iterations: result.iterations,
        trace: result.trace.iter().map(|v| -v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{GateMode, Pattern, PatternKind};
    use crate::world::{Domain, Layout, Value, VariableId};

    fn lake_model(n_facts: u32) -> WorldModel {
        let mut m = WorldModel::new(Domain::Lake, Layout::Grid { rows: 4, cols: 4 });
        for i in 0..n_facts {
            m.insert_revealed(VariableId(i), Value((i % 2) as u8)).unwrap();
        }
        m
    }

    #[test]
    fn masks_partition_the_facts() {
        let model = lake_model(10);
        let samples = generate_masks(&model, 0.3, 5, 7).unwrap();
        assert_eq!(samples.len(), 5);
        for s in &samples {
            assert_eq!(s.hidden.len(), 3);
            assert_eq!(s.visible.known_count(), 7);
            let mut all: Vec<SymbolicFact> = s.visible.merged_facts().chain(s.hidden.iter().copied()).collect();
            all.sort_by_key(|f| f.variable);
            assert_eq!(all, model.merged_facts().collect::<Vec<_>>());
        }
        assert_eq!(samples, generate_masks(&model, 0.3, 5, 7).unwrap());
    }

    #[test]
    fn masks_follow_the_reference_stream() {
        let model = lake_model(16);
        let samples = generate_masks(&model, 0.25, 4, 99).unwrap();
        // Independent replay of the same ChaCha8 stream.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut order: Vec<u32> = (0..16).collect();
        for s in &samples {
            for i in 0..4 {
                let j = rng.gen_range(i..16);
                order.swap(i, j);
            }
            let mut expect: Vec<u32> = order[..4].to_vec();
            expect.sort();
            let got: Vec<u32> = s.hidden.iter().map(|f| f.variable.0).collect();
            assert_eq!(got, expect);
        }
        let distinct: std::collections::HashSet<Vec<u32>> =
            samples.iter().map(|s| s.hidden.iter().map(|f| f.variable.0).collect()).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn tiny_models_cannot_be_masked() {
        assert_eq!(generate_masks(&lake_model(1), 0.5, 1, 0), Err(InductionError::TooFewFacts(1)));
        assert!(generate_masks(&lake_model(5), 1.0, 1, 0).is_err());
    }

    /// Crafter library with cross patterns on a 3x3 grid whose centre is
    /// always the hidden fact.
    fn cross(pred: u8, ctx: u8, weight: f64) -> Pattern {
        Pattern {
            kind: PatternKind::Cross,
            target: 0,
            context: vec![(1, Value(ctx)), (2, Value(ctx)), (3, Value(ctx)), (4, Value(ctx))],
            prediction: Value(pred),
            weight,
        }
    }

    fn centre_dataset(truths: &[u8], top: u8) -> Vec<MaskedSample> {
        truths
            .iter()
            .map(|&t| {
                let mut visible = WorldModel::new(Domain::Crafter, Layout::Grid { rows: 3, cols: 3 });
                visible.insert_revealed(VariableId(1), Value(top)).unwrap();
                MaskedSample {
                    visible,
                    hidden: vec![SymbolicFact { variable: VariableId(4), value: Value(t), source: crate::world::FactSource::Revealed }],
                }
            })
            .collect()
    }

    #[test]
    fn closed_form_log_likelihood() {
        let mut lib = PatternLibrary::empty(Domain::Crafter);
        lib.add(cross(2, 0, 1.0)).unwrap();
        let data = centre_dataset(&[2; 10], 0);
        let ll = log_likelihood(&[1.0], &data, &lib).unwrap();
        assert!((ll - 10.0 * 0.999f64.ln()).abs() < 1e-12);
        assert!((ll + 0.010005).abs() < 1e-6);
        assert_eq!(log_likelihood(&[1.0], &[], &lib).unwrap(), 0.0);
        // Nothing gates open when the top neighbour disagrees.
        let uniform = log_likelihood(&[1.0], &centre_dataset(&[0; 6], 5), &lib).unwrap();
        assert!((uniform - 6.0 * (0.1f64).ln()).abs() < 1e-12);
    }

    fn two_valued(pred: u8, weight: f64) -> Pattern {
        Pattern {
            kind: PatternKind::GridBlock,
            target: 0,
            context: vec![(1, Value(0))],
            prediction: Value(pred),
            weight,
        }
    }

    fn lake_dataset(n: usize) -> Vec<MaskedSample> {
        (0..n)
            .map(|_| {
                let mut visible = WorldModel::new(Domain::Lake, Layout::Grid { rows: 4, cols: 4 });
                visible.insert_revealed(VariableId(1), Value(0)).unwrap();
                MaskedSample {
                    visible,
                    hidden: vec![SymbolicFact { variable: VariableId(0), value: Value(0), source: crate::world::FactSource::Revealed }],
                }
            })
            .collect()
    }

    #[test]
    fn gradient_favours_the_correct_pattern() {
        let mut lib = PatternLibrary::empty(Domain::Lake);
        lib.add(two_valued(0, 1.0)).unwrap();
        lib.add(two_valued(1, 1.0)).unwrap();
        let data = lake_dataset(8);
        let g = grad_log_likelihood(&[1.0, 1.0], &data, &lib).unwrap();
        assert!(g[0] > 0.0 && g[1] < 0.0);
        let h = 1e-6;
        let fd = (log_likelihood(&[1.0 + h, 1.0], &data, &lib).unwrap()
            - log_likelihood(&[1.0 - h, 1.0], &data, &lib).unwrap())
            / (2.0 * h);
        assert!((fd - g[0]).abs() < 1e-5 * g[0].abs().max(1.0));
    }

    #[test]
    fn never_active_patterns_get_zero_gradient() {
        let mut lib = PatternLibrary::empty(Domain::Lake);
        lib.add(two_valued(0, 1.0)).unwrap();
        lib.add(Pattern { target: 5, ..two_valued(1, 1.0) }).unwrap();
        let g = grad_log_likelihood(&[1.0, 1.0], &lake_dataset(3), &lib).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn mle_separates_correct_from_wrong() {
        let mut lib = PatternLibrary::new(Domain::Lake, 0.001, GateMode::Consistent).unwrap();
        lib.add(two_valued(0, 1.0)).unwrap();
        lib.add(two_valued(1, 1.0)).unwrap();
        let data = lake_dataset(20);
        let before = crate::pattern::mixture(VariableId(0), &data[0].visible, &lib).unwrap();
        assert!((before.probabilities[0] - 0.5).abs() < 1e-12);
        let out = optimize_weights(&lib, &data, &OptimizerConfig::for_domain(Domain::Lake)).unwrap();
        assert!(out.ll_after >= out.ll_before);
        assert!(out.trace.windows(2).all(|w| w[1] >= w[0]));
        lib.set_weights(&out.weights).unwrap();
        let after = crate::pattern::mixture(VariableId(0), &data[0].visible, &lib).unwrap();
        assert!(after.probabilities[0] >= 0.99, "{:?}", after.probabilities);
    }

    #[test]
    fn softplus_also_improves() {
        let mut lib = PatternLibrary::empty(Domain::Lake);
        lib.add(two_valued(0, 1.0)).unwrap();
        lib.add(two_valued(1, 1.0)).unwrap();
        let cfg = OptimizerConfig { reparameterization: Reparameterization::Softplus, ..OptimizerConfig::for_domain(Domain::Lake) };
        let out = optimize_weights(&lib, &lake_dataset(5), &cfg).unwrap();
        assert!(out.ll_after > out.ll_before);
        assert!(out.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let lib = PatternLibrary::empty(Domain::Lake);
        assert_eq!(
            optimize_weights(&lib, &[], &OptimizerConfig::for_domain(Domain::Lake)),
            Err(InductionError::EmptyDataset)
        );
    }

    #[test]
    fn replay_jsonl_round_trip() {
        let mut buf = ReplayBuffer::new();
        buf.push(0, true, lake_model(3));
        buf.push(1, false, lake_model(5));
        buf.mark_reflected(&[1]);
        assert_eq!(ReplayBuffer::from_jsonl(&buf.to_jsonl()).unwrap(), buf);
    }
}
