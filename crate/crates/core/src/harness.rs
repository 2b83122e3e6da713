//! Experiment orchestration: the online episode loop with periodic
//! proposal and reweighting, ablations, reports and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crafter::{self, CrafterMap, Quota};
use crate::cube::{self, CubeState};
use crate::episode::{EpisodeOutcome, Inference, TraceEvent};
use crate::induction::proposal::{extract_proposal_context, patterns_per_trigger, proposal_period, Proposer, ProposerSpec};
use crate::induction::{build_dataset, optimize_weights, MaskConfig, OptimizerConfig, ReplayBuffer};
use crate::lake::{self, GenerationMethod, LakeInstance};
use crate::pattern::{GateMode, ImputationConfig, MacroPattern, PatternLibrary, DEFAULT_EPSILON};
use crate::world::{charge_proposal, grounding_counts, Domain, GroundTruthInstance, RevealBudget, TokenLedger};

pub const REPORT_SCHEMA: &str = include_str!("../assets/run_report.schema.json");

/// Seeds used to mine the crafter oracle macro set; kept far away from
/// episode seeds.
const ORACLE_SEED_BASE: u64 = 1 << 40;
const ORACLE_MAPS: u64 = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("library is for {library} but the run is {run}")]
    DomainMismatch { library: String, run: String },
    #[error("instance generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },
}

impl HarnessError {
    /// Config problems are the caller's to fix; everything else is a run
    /// failure.
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::DomainMismatch { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoInference,
    NoReweight,
}

/// Where the library at the start of every run comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LibrarySource {
    Empty,
    /// Cube only: every legal corner token at every position.
    Placeholder,
    /// The environment's own macro set (lake templates, mined crafter
    /// crosses, cube dataset corners).
    GroundTruth,
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeDatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub moves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: Domain,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub trials: usize,
    pub ablation: Ablation,
    pub proposer: ProposerSpec,
    pub tau: f64,
    pub epsilon: f64,
    pub gate_mode: GateMode,
    pub mask: MaskConfig,
    pub optimizer: OptimizerConfig,
    pub proposal_period: usize,
    pub patterns_per_trigger: usize,
    pub initial_weight: f64,
    pub budget: RevealBudget,
    /// Grid side for lake and crafter; ignored for cube.
    pub map_size: usize,
    pub lake_method: GenerationMethod,
    pub crafter_quota: Quota,
    pub cube_dataset: CubeDatasetConfig,
    pub initial_library: LibrarySource,
    /// Keep the library exactly as loaded: no proposals, no reweighting.
    pub frozen: bool,
    /// Lake: impute over every unknown cell instead of the planner's
    /// neighbourhood.
    pub full_closure: bool,
    pub record_trace: bool,
}

impl ExperimentConfig {
    /// Default settings for `domain`.
    pub fn for_domain(domain: Domain) -> Self {
        ExperimentConfig {
            domain,
            episodes: 100,
            seeds: vec![0, 1, 2],
            trials: 3,
            ablation: Ablation::Full,
            proposer: ProposerSpec::Oracle,
            tau: ImputationConfig::for_domain(domain).tau,
            epsilon: DEFAULT_EPSILON,
            gate_mode: GateMode::for_domain(domain),
            mask: MaskConfig::default(),
            optimizer: OptimizerConfig::for_domain(domain),
            proposal_period: proposal_period(domain),
            patterns_per_trigger: patterns_per_trigger(domain),
            initial_weight: crate::pattern::INITIAL_WEIGHT,
            budget: RevealBudget::for_domain(domain),
            map_size: match domain {
                Domain::Lake => 16,
                Domain::Crafter => 64,
                Domain::Cube => 0,
            },
            lake_method: GenerationMethod::Reject,
            crafter_quota: Quota::default(),
            cube_dataset: CubeDatasetConfig { seed: 42, count: 100, moves: 20 },
            initial_library: match domain {
                Domain::Cube => LibrarySource::Placeholder,
                _ => LibrarySource::Empty,
            },
            frozen: false,
            full_closure: false,
            record_trace: false,
        }
    }

    /// Parse a JSON config. Only `domain` is required; every other field
    /// falls back to [`ExperimentConfig::for_domain`] for that domain.
    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let serde_json::Value::Object(overrides) = value else {
            return Err(HarnessError::Config("config must be a JSON object".into()));
        };
        let domain: Domain = overrides
            .get("domain")
            .ok_or_else(|| HarnessError::Config("missing `domain`".into()))
            .and_then(|d| serde_json::from_value(d.clone()).map_err(|e| HarnessError::Config(format!("domain: {e}"))))?;
        let mut base = serde_json::to_value(Self::for_domain(domain)).expect("config serializes");
        let obj = base.as_object_mut().expect("config is an object");
        for (k, v) in overrides {
            obj.insert(k, v);
        }
        let config: Self = serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.episodes == 0 {
            return bad("episodes must be positive");
        }
        if self.seeds.is_empty() || self.trials == 0 {
            return bad("need at least one seed and one trial");
        }
        if self.proposal_period == 0 {
            return bad("proposal_period must be positive");
        }
        ImputationConfig::new(self.tau).map_err(|e| HarnessError::Config(e.to_string()))?;
        PatternLibrary::new(self.domain, self.epsilon, self.gate_mode).map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.mask.fraction > 0.0 && self.mask.fraction < 1.0) || self.mask.count == 0 {
            return bad("mask fraction must lie in (0, 1) and count must be positive");
        }
        if self.optimizer.max_iterations == 0 || !(self.optimizer.step_size > 0.0) {
            return bad("optimizer needs positive step size and iterations");
        }
        if !(self.initial_weight > 0.0 && self.initial_weight.is_finite()) {
            return bad("initial_weight must be positive");
        }
        match self.domain {
            Domain::Lake if self.map_size == 0 || self.map_size % 4 != 0 => bad("lake map_size must be a positive multiple of 4"),
            Domain::Crafter if self.map_size < 16 => bad("crafter map_size must be at least 16"),
            Domain::Cube if self.cube_dataset.count == 0 => bad("cube dataset needs at least one state"),
            _ if self.initial_library == LibrarySource::Placeholder && self.domain != Domain::Cube => {
                bad("placeholder library exists only for cube")
            }
            _ => Ok(()),
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Map seed for episode `episode` under run seed `seed`. Independent of the
/// trial and the ablation so runs can be paired.
pub fn instance_seed(seed: u64, episode: usize) -> u64 {
    mix(seed, episode as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", content = "instance", rename_all = "snake_case")]
pub enum Instance {
    Lake(LakeInstance),
    Crafter(CrafterMap),
    Cube(CubeState),
}

impl Instance {
    pub fn truth(&self) -> GroundTruthInstance {
        match self {
            Instance::Lake(m) => m.to_instance(),
            Instance::Crafter(m) => m.to_instance(),
            Instance::Cube(s) => s.to_instance(),
        }
    }
}

/// Instances shared by every run of one config.
pub struct Environment {
    config: ExperimentConfig,
    templates: Vec<lake::LakeTemplate>,
    cube_states: Vec<CubeState>,
}

impl Environment {
    pub fn new(config: &ExperimentConfig) -> Self {
        let cube_states = match config.domain {
            Domain::Cube => {
                let d = config.cube_dataset;
                cube::scramble_dataset(d.seed, d.count, d.moves).into_iter().map(|r| r.state).collect()
            }
            _ => Vec::new(),
        };
        Environment { config: config.clone(), templates: lake::default_templates(), cube_states }
    }

    pub fn instance(&self, seed: u64, episode: usize) -> Result<Instance, HarnessError> {
        let c = &self.config;
        let iseed = instance_seed(seed, episode);
        let fail = |reason: String| HarnessError::Generation { seed: iseed, reason };
        Ok(match c.domain {
            Domain::Lake => Instance::Lake(
                lake::generate_map(&self.templates, c.map_size, lake::min_path_for(c.map_size), iseed, c.lake_method)
                    .map_err(|e| fail(e.to_string()))?,
            ),
            Domain::Crafter => {
                Instance::Crafter(crafter::generate_world(iseed, c.map_size, &c.crafter_quota).map_err(|e| fail(e.to_string()))?)
            }
            Domain::Cube => Instance::Cube(self.cube_states[episode % self.cube_states.len()]),
        })
    }

    /// The environment's true macro set, used by the oracle proposer and
    /// the ground-truth library source.
    pub fn ground_truth_macros(&self) -> Vec<MacroPattern> {
        match self.config.domain {
            Domain::Lake => lake::template_macros(&self.templates),
            Domain::Crafter => crafter::mine_cross_macros(
                (0..ORACLE_MAPS).map(|i| ORACLE_SEED_BASE + i),
                self.config.map_size,
                1,
            ),
            Domain::Cube => cube::ground_truth_library(&self.cube_states),
        }
    }

    pub fn initial_library(&self) -> Result<PatternLibrary, HarnessError> {
        let c = &self.config;
        let mut lib = PatternLibrary::new(c.domain, c.epsilon, c.gate_mode).map_err(|e| HarnessError::Config(e.to_string()))?;
        let macros = match &c.initial_library {
            LibrarySource::Empty => Vec::new(),
            LibrarySource::Placeholder => cube::placeholder_library(),
            LibrarySource::GroundTruth => self.ground_truth_macros(),
            LibrarySource::File { path } => {
                let loaded = load_library(path)?;
                if loaded.domain() != c.domain {
                    return Err(HarnessError::DomainMismatch {
                        library: loaded.domain().name().into(),
                        run: c.domain.name().into(),
                    });
                }
                for p in loaded.patterns() {
                    lib.add(p.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
                }
                return Ok(lib);
            }
        };
        for m in &macros {
            lib.add_macro(m, c.initial_weight).map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(lib)
    }

    /// Play one episode with whatever inference the ablation allows.
    pub fn play(&self, instance: &Instance, library: &PatternLibrary, reveal_seed: u64) -> EpisodeOutcome {
        let c = &self.config;
        let inference = (c.ablation != Ablation::NoInference).then(|| Inference {
            library,
            imputation: ImputationConfig { tau: c.tau },
            full_closure: c.full_closure,
        });
        let mut outcome = match instance {
            Instance::Lake(m) => lake::run_episode(m, inference, c.record_trace),
            Instance::Crafter(m) => crafter::run_episode(m, inference, c.record_trace),
            Instance::Cube(s) => cube::run_episode(s, inference, reveal_seed, c.record_trace),
        };
        reprice(&mut outcome.ledger, c.budget);
        outcome
    }
}

fn reprice(ledger: &mut TokenLedger, budget: RevealBudget) {
    ledger.budget = budget;
    ledger.perception_in = ledger.reveal_count * budget.input_tokens_per_reveal;
    ledger.perception_out = ledger.reveal_count * budget.output_tokens_per_reveal;
}

pub fn load_library(path: &Path) -> Result<PatternLibrary, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Malformed { what: path.display().to_string(), reason: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: usize,
    pub instance_seed: u64,
    pub reveal_count: u64,
    pub imputation_count: usize,
    pub correct_imputations: usize,
    pub correct_reveals: usize,
    /// Over touched variables; `None` when nothing was touched.
    pub grounding_accuracy: Option<f64>,
    pub success: bool,
    pub failure: Option<String>,
    pub ledger: TokenLedger,
    /// Trace file relative to the run directory, when traces are kept.
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub trigger: usize,
    pub after_episode: usize,
    pub context_entries: usize,
    pub proposed: usize,
    pub added_patterns: usize,
    pub rejected: Vec<String>,
    pub error: Option<String>,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightRecord {
    pub trigger: usize,
    pub samples: usize,
    pub patterns: usize,
    pub ll_before: f64,
    pub ll_after: f64,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub episodes: usize,
    pub planning_accuracy: f64,
    pub grounding_accuracy: f64,
    pub mean_reveals: f64,
    pub mean_imputations: f64,
    /// Per-episode means.
    pub perception_in: f64,
    pub perception_out: f64,
    pub proposals: usize,
    /// Per-proposal means; zero when no proposal was made.
    pub proposal_in: f64,
    pub proposal_out: f64,
    /// Proposal tokens spread over episodes.
    pub proposal_in_amortized: f64,
    pub proposal_out_amortized: f64,
    /// Perception plus amortized proposal, per episode.
    pub total_in: f64,
    pub total_out: f64,
    /// Reveal count per episode index averaged over runs, Gaussian
    /// smoothed with sigma 2.
    pub smoothed_reveals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub trial: usize,
    pub episodes: Vec<EpisodeReport>,
    pub proposals: Vec<ProposalRecord>,
    pub reweightings: Vec<ReweightRecord>,
    /// Sum of every episode ledger plus proposal charges.
    pub ledger: TokenLedger,
    pub aggregates: Aggregates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn mean_reveals(&self) -> f64 {
        self.aggregates.mean_reveals
    }
}

/// Everything a run produced besides its report.
#[derive(Debug, Clone)]
pub struct TrialArtifacts {
    pub seed: u64,
    pub trial: usize,
    pub replay: ReplayBuffer,
    /// Library after each trigger, starting with the initial one.
    pub snapshots: Vec<PatternLibrary>,
    pub traces: Vec<(usize, Vec<TraceEvent>)>,
    pub final_library: PatternLibrary,
}

pub struct RunOutput {
    pub report: RunReport,
    pub artifacts: Vec<TrialArtifacts>,
}

/// Discrete Gaussian smoothing with reflective boundaries (the edge sample
/// is repeated), kernel truncated at four sigma.
pub fn smooth_series(values: &[f64], sigma: f64) -> Result<Vec<f64>, HarnessError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(HarnessError::Config(format!("sigma must be positive, got {sigma}")));
    }
    let n = values.len() as isize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let radius = (4.0 * sigma + 0.5) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let reflect = |mut i: isize| {
        let period = 2 * n;
        i = i.rem_euclid(period);
        if i >= n {
            period - 1 - i
        } else {
            i
        }
    };
    Ok((0..n)
        .map(|i| (-radius..=radius).zip(&kernel).map(|(k, w)| w * values[reflect(i + k) as usize]).sum())
        .collect())
}

fn aggregate(episodes: &[&EpisodeReport], proposals: &[&ProposalRecord], series: &[f64]) -> Aggregates {
    let n = episodes.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeReport) -> f64| episodes.iter().map(|e| f(e)).sum::<f64>() / n;
    let grounded: Vec<f64> = episodes.iter().filter_map(|e| e.grounding_accuracy).collect();
    let p = proposals.len();
    let prop_in: u64 = proposals.iter().map(|r| r.input_tokens).sum();
    let prop_out: u64 = proposals.iter().map(|r| r.output_tokens).sum();
    let per_prop = |t: u64| if p == 0 { 0.0 } else { t as f64 / p as f64 };
    let perception_in = mean(&|e| e.ledger.perception_in as f64);
    let perception_out = mean(&|e| e.ledger.perception_out as f64);
    let amort_in = prop_in as f64 / n;
    let amort_out = prop_out as f64 / n;
    Aggregates {
        episodes: episodes.len(),
        planning_accuracy: mean(&|e| e.success as u8 as f64),
        grounding_accuracy: if grounded.is_empty() { 1.0 } else { grounded.iter().sum::<f64>() / grounded.len() as f64 },
        mean_reveals: mean(&|e| e.reveal_count as f64),
        mean_imputations: mean(&|e| e.imputation_count as f64),
        perception_in,
        perception_out,
        proposals: p,
        proposal_in: per_prop(prop_in),
        proposal_out: per_prop(prop_out),
        proposal_in_amortized: amort_in,
        proposal_out_amortized: amort_out,
        total_in: perception_in + amort_in,
        total_out: perception_out + amort_out,
        smoothed_reveals: smooth_series(series, 2.0).expect("sigma is positive"),
    }
}

fn episode_report(episode: usize, iseed: u64, truth: &GroundTruthInstance, outcome: &EpisodeOutcome, trace: Option<String>) -> EpisodeReport {
    let counts = grounding_counts(&outcome.world, truth);
    EpisodeReport {
        episode,
        instance_seed: iseed,
        reveal_count: outcome.ledger.reveal_count,
        imputation_count: counts.n_imp,
        correct_imputations: counts.correct_imp,
        correct_reveals: counts.correct_per,
        grounding_accuracy: counts.accuracy(),
        success: outcome.success,
        failure: outcome.failure.clone(),
        ledger: outcome.ledger,
        trace,
    }
}

/// Directory name for one (seed, trial) run inside a run directory.
pub fn trial_dir_name(seed: u64, trial: usize) -> String {
    format!("seed{seed}_trial{trial}")
}

fn run_trial(env: &Environment, seed: u64, trial: usize, oracle: &[MacroPattern]) -> Result<(TrialReport, TrialArtifacts), HarnessError> {
    let c = &env.config;
    let trial_seed = mix(mix(seed, 0x7431), trial as u64);
    let mut library = env.initial_library()?;
    let mut proposer = Proposer::from_spec(&c.proposer, oracle.to_vec());
    let mut replay = ReplayBuffer::new();
    let mut episodes = Vec::with_capacity(c.episodes);
    let mut proposals = Vec::new();
    let mut reweightings = Vec::new();
    let mut snapshots = vec![library.clone()];
    let mut traces = Vec::new();
    let mut ledger = TokenLedger::new(c.budget);
    let induce = c.ablation != Ablation::NoInference && !c.frozen;
    for e in 0..c.episodes {
        let instance = env.instance(seed, e)?;
        let truth = instance.truth();
        let outcome = env.play(&instance, &library, mix(trial_seed, e as u64));
        let trace_ref = c.record_trace.then(|| format!("{}/traces/episode_{e:03}.jsonl", trial_dir_name(seed, trial)));
        episodes.push(episode_report(e, instance_seed(seed, e), &truth, &outcome, trace_ref));
        ledger.absorb(&outcome.ledger);
        if c.record_trace {
            traces.push((e, outcome.trace));
        }
        replay.push(e, outcome.success, outcome.world);
        let done = e + 1;
        if !induce || done % c.proposal_period != 0 || done == c.episodes {
            continue;
        }
        let trigger = done / c.proposal_period - 1;
        let round_seed = mix(trial_seed, 0x1000 + trigger as u64);
        if let Some(extracted) = extract_proposal_context(&replay, c.domain, round_seed) {
            let out = proposer.propose(&extracted.context, &library, c.patterns_per_trigger);
            charge_proposal(&mut ledger, out.input_tokens, out.output_tokens);
            ledger.proposal_calls += 1;
            let before = library.len();
            for m in &out.macros {
                if let Err(err) = library.add_macro(m, c.initial_weight) {
                    log::warn!("dropping proposed macro: {err}");
                }
            }
            replay.mark_reflected(&extracted.used);
            proposals.push(ProposalRecord {
                trigger,
                after_episode: e,
                context_entries: extracted.used.len(),
                proposed: out.macros.len(),
                added_patterns: library.len() - before,
                rejected: out.rejected,
                error: out.error,
                input_tokens: out.input_tokens,
                output_tokens: out.output_tokens,
            });
        }
        if c.ablation == Ablation::Full && !library.is_empty() {
            let record = match build_dataset(&replay, &c.mask, mix(round_seed, 0x5eed)) {
                Ok(data) if !data.is_empty() => match optimize_weights(&library, &data, &c.optimizer) {
                    Ok(r) => {
                        library.set_weights(&r.weights).expect("optimizer keeps weights valid");
                        ReweightRecord {
                            trigger,
                            samples: data.len(),
                            patterns: library.len(),
                            ll_before: r.ll_before,
                            ll_after: r.ll_after,
                            iterations: r.iterations,
                            error: None,
                        }
                    }
                    Err(err) => failed_reweight(trigger, data.len(), library.len(), err.to_string()),
                },
                Ok(_) => failed_reweight(trigger, 0, library.len(), "no masked samples".into()),
                Err(err) => failed_reweight(trigger, 0, library.len(), err.to_string()),
            };
            reweightings.push(record);
        }
        snapshots.push(library.clone());
    }
    let series: Vec<f64> = episodes.iter().map(|e| e.reveal_count as f64).collect();
    let aggregates = aggregate(&episodes.iter().collect::<Vec<_>>(), &proposals.iter().collect::<Vec<_>>(), &series);
    let report = TrialReport { seed, trial, episodes, proposals, reweightings, ledger, aggregates };
    let artifacts = TrialArtifacts { seed, trial, replay, snapshots, traces, final_library: library };
    Ok((report, artifacts))
}

fn failed_reweight(trigger: usize, samples: usize, patterns: usize, error: String) -> ReweightRecord {
    log::warn!("reweighting skipped at trigger {trigger}: {error}");
    ReweightRecord { trigger, samples, patterns, ll_before: 0.0, ll_after: 0.0, iterations: 0, error: Some(error) }
}

/// Pooled over trials; the smoothed curve is over the per-episode mean.
fn run_aggregates(trials: &[TrialReport], episodes: usize) -> Aggregates {
    let all_episodes: Vec<&EpisodeReport> = trials.iter().flat_map(|t| &t.episodes).collect();
    let all_proposals: Vec<&ProposalRecord> = trials.iter().flat_map(|t| &t.proposals).collect();
    let series: Vec<f64> = (0..episodes)
        .map(|e| trials.iter().filter_map(|t| t.episodes.get(e)).map(|x| x.reveal_count as f64).sum::<f64>() / trials.len() as f64)
        .collect();
    aggregate(&all_episodes, &all_proposals, &series)
}

/// Run every (seed, trial) pair; pairs run in parallel, episodes within a
/// pair run in order because the library evolves online.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let env = Environment::new(config);
    let needs_oracle = config.proposer == ProposerSpec::Oracle && config.ablation != Ablation::NoInference && !config.frozen;
    let oracle = if needs_oracle { env.ground_truth_macros() } else { Vec::new() };
    let pairs: Vec<(u64, usize)> = config.seeds.iter().flat_map(|&s| (0..config.trials).map(move |t| (s, t))).collect();
    let results: Vec<(TrialReport, TrialArtifacts)> =
        pairs.par_iter().map(|&(s, t)| run_trial(&env, s, t, &oracle)).collect::<Result<_, _>>()?;
    let (trials, artifacts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let aggregates = run_aggregates(&trials, config.episodes);
    Ok(RunOutput { report: RunReport { config: config.clone(), trials, aggregates }, artifacts })
}

/// Evaluate a fixed library: proposals and reweighting off, the library
/// used read-only.
pub fn run_ood(config: &ExperimentConfig, frozen: &PatternLibrary) -> Result<RunOutput, HarnessError> {
    if frozen.domain() != config.domain {
        return Err(HarnessError::DomainMismatch { library: frozen.domain().name().into(), run: config.domain.name().into() });
    }
    let dir = tempdir_for_library()?;
    let path = dir.join("frozen_library.json");
    write_atomic(&path, &serde_json::to_string(frozen).expect("library serializes"))?;
    let mut c = config.clone();
    c.frozen = true;
    c.initial_library = LibrarySource::File { path: path.clone() };
    c.epsilon = frozen.epsilon();
    c.gate_mode = frozen.gate_mode();
    let out = run_experiment(&c);
    let _ = fs::remove_dir_all(&dir);
    let mut out = out?;
    // Report the caller's config, not the scratch file.
    out.report.config = ExperimentConfig { frozen: true, ..config.clone() };
    Ok(out)
}

fn tempdir_for_library() -> Result<PathBuf, HarnessError> {
    use std::sync::atomic::{AtomicU64, Ordering};
    static N: AtomicU64 = AtomicU64::new(0);
    let dir = std::env::temp_dir().join(format!("pitwi-ood-{}-{}", std::process::id(), N.fetch_add(1, Ordering::Relaxed)));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Lay out a run directory: `config.json`, `report.json`, and per
/// (seed, trial) `episodes.jsonl`, `replay.jsonl`, `library_NN.json`
/// snapshots and optional traces.
pub fn write_run_dir(dir: &Path, output: &RunOutput) -> Result<(), HarnessError> {
    let report = &output.report;
    write_atomic(&dir.join("config.json"), &(serde_json::to_string_pretty(&report.config).expect("config serializes") + "\n"))?;
    for (trial, art) in report.trials.iter().zip(&output.artifacts) {
        let sub = dir.join(trial_dir_name(trial.seed, trial.trial));
        let episodes: String =
            trial.episodes.iter().map(|e| serde_json::to_string(e).expect("episode serializes") + "\n").collect();
        write_atomic(&sub.join("episodes.jsonl"), &episodes)?;
        write_atomic(&sub.join("replay.jsonl"), &art.replay.to_jsonl())?;
        for (i, lib) in art.snapshots.iter().enumerate() {
            write_atomic(&sub.join(format!("library_{i:02}.json")), &serde_json::to_string(lib).expect("library serializes"))?;
        }
        write_atomic(&sub.join("library_final.json"), &serde_json::to_string(&art.final_library).expect("library serializes"))?;
        for (e, events) in &art.traces {
            let text: String = events.iter().map(|ev| serde_json::to_string(ev).expect("event serializes") + "\n").collect();
            write_atomic(&sub.join(format!("traces/episode_{e:03}.jsonl")), &text)?;
        }
    }
    write_atomic(&dir.join("report.json"), &report.to_json())
}

pub fn read_report(path: &Path) -> Result<RunReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Malformed { what: path.display().to_string(), reason: e.to_string() })
}

/// Check a report against the bundled schema and its own arithmetic.
/// Returns every problem found.
pub fn audit_report(json: &serde_json::Value) -> Vec<String> {
    let mut problems = Vec::new();
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).expect("bundled schema parses");
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("bundled schema compiles");
    if let Err(errors) = compiled.validate(json) {
        problems.extend(errors.map(|e| format!("schema: {} at {}", e, e.instance_path)));
        return problems;
    }
    let report: RunReport = match serde_json::from_value(json.clone()) {
        Ok(r) => r,
        Err(e) => return vec![format!("report does not deserialize: {e}")],
    };
    for t in &report.trials {
        let name = trial_dir_name(t.seed, t.trial);
        if t.episodes.len() != report.config.episodes {
            problems.push(format!("{name}: {} episodes, config says {}", t.episodes.len(), report.config.episodes));
        }
        let mut sum = TokenLedger::new(t.ledger.budget);
        for e in &t.episodes {
            sum.absorb(&e.ledger);
            let touched = e.imputation_count + e.reveal_count as usize;
            let expect = (touched > 0).then(|| (e.correct_imputations + e.correct_reveals) as f64 / touched as f64);
            if e.grounding_accuracy != expect {
                problems.push(format!("{name} episode {}: grounding accuracy does not match its counts", e.episode));
            }
            if e.ledger.perception_in != e.reveal_count * e.ledger.budget.input_tokens_per_reveal {
                problems.push(format!("{name} episode {}: perception tokens do not match reveals", e.episode));
            }
        }
        let prop_in: u64 = t.proposals.iter().map(|p| p.input_tokens).sum();
        let prop_out: u64 = t.proposals.iter().map(|p| p.output_tokens).sum();
        if sum.perception_in != t.ledger.perception_in || prop_in != t.ledger.proposal_in || prop_out != t.ledger.proposal_out {
            problems.push(format!("{name}: ledger is not the sum of episodes and proposals"));
        }
        if t.ledger.total_in() != t.ledger.perception_in + t.ledger.proposal_in {
            problems.push(format!("{name}: total tokens are not perception plus proposal"));
        }
        let recomputed = aggregate(&t.episodes.iter().collect::<Vec<_>>(), &t.proposals.iter().collect::<Vec<_>>(), &t
            .episodes
            .iter()
            .map(|e| e.reveal_count as f64)
            .collect::<Vec<_>>());
        if !close_aggregates(&recomputed, &t.aggregates) {
            problems.push(format!("{name}: aggregates do not match episodes"));
        }
    }
    if !report.trials.is_empty() && !close_aggregates(&run_aggregates(&report.trials, report.config.episodes), &report.aggregates) {
        problems.push("run aggregates do not match the trials".into());
    }
    problems
}

fn close_aggregates(a: &Aggregates, b: &Aggregates) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs()));
    a.episodes == b.episodes
        && a.proposals == b.proposals
        && [
            (a.planning_accuracy, b.planning_accuracy),
            (a.grounding_accuracy, b.grounding_accuracy),
            (a.mean_reveals, b.mean_reveals),
            (a.mean_imputations, b.mean_imputations),
            (a.perception_in, b.perception_in),
            (a.perception_out, b.perception_out),
            (a.proposal_in, b.proposal_in),
            (a.proposal_out, b.proposal_out),
            (a.proposal_in_amortized, b.proposal_in_amortized),
            (a.proposal_out_amortized, b.proposal_out_amortized),
            (a.total_in, b.total_in),
            (a.total_out, b.total_out),
        ]
        .iter()
        .all(|&(x, y)| close(x, y))
        && a.smoothed_reveals.len() == b.smoothed_reveals.len()
        && a.smoothed_reveals.iter().zip(&b.smoothed_reveals).all(|(x, y)| close(*x, *y))
}

/// Recompute grounding accuracy of every stored world model in a run
/// directory against regenerated ground truth.
pub fn audit_run_dir(dir: &Path) -> Result<Vec<String>, HarnessError> {
    let report = read_report(&dir.join("report.json"))?;
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report round-trips");
    let mut problems = audit_report(&json);
    let env = Environment::new(&report.config);
    for t in &report.trials {
        let path = dir.join(trial_dir_name(t.seed, t.trial)).join("replay.jsonl");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let replay = ReplayBuffer::from_jsonl(&text)
            .map_err(|e| HarnessError::Malformed { what: path.display().to_string(), reason: e.to_string() })?;
        if replay.len() != t.episodes.len() {
            problems.push(format!("{}: replay has {} entries for {} episodes", path.display(), replay.len(), t.episodes.len()));
            continue;
        }
        for (entry, e) in replay.entries().iter().zip(&t.episodes) {
            let truth = env.instance(t.seed, e.episode)?.truth();
            if grounding_counts(&entry.world, &truth).accuracy() != e.grounding_accuracy {
                problems.push(format!("{}: episode {} world model disagrees with its report", path.display(), e.episode));
            }
        }
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_constant_and_impulse() {
        let flat = smooth_series(&[3.0; 20], 2.0).unwrap();
        assert!(flat.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let mut impulse = vec![0.0; 41];
        impulse[20] = 1.0;
        let out = smooth_series(&impulse, 2.0).unwrap();
        let norm: f64 = (-8..=8i32).map(|k| (-(k * k) as f64 / 8.0).exp()).sum();
        for k in -8..=8i32 {
            let w = (-(k * k) as f64 / 8.0).exp() / norm;
            assert!((out[(20 + k) as usize] - w).abs() < 1e-9);
        }
        assert!(smooth_series(&[], 2.0).unwrap().is_empty());
        assert!(smooth_series(&[1.0], 0.0).is_err());
    }

    #[test]
    fn reflective_boundary_repeats_edge() {
        // Step at the start: reflection keeps the left edge flat.
        let out = smooth_series(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 1.0).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        let tiny = smooth_series(&[1.0, 0.0], 2.0).unwrap();
        assert!((tiny[0] + tiny[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_overrides_merge_over_domain_defaults() {
        let c = ExperimentConfig::from_json_str(r#"{"domain":"crafter","episodes":7}"#).unwrap();
        assert_eq!(c.episodes, 7);
        assert_eq!(c.tau, 1.0);
        assert_eq!(c.optimizer.max_iterations, 20);
        assert_eq!(c.map_size, 64);
        assert!(ExperimentConfig::from_json_str(r#"{"domain":"lake","episods":7}"#).unwrap_err().is_config());
        assert!(ExperimentConfig::from_json_str(r#"{"episodes":7}"#).unwrap_err().is_config());
        assert!(ExperimentConfig::from_json_str(r#"{"domain":"lake","tau":1.5}"#).unwrap_err().is_config());
    }

    #[test]
    fn trigger_counts() {
        for (domain, expected) in [(Domain::Lake, 19), (Domain::Cube, 9)] {
            let mut c = ExperimentConfig::for_domain(domain);
            c.seeds = vec![0];
            c.trials = 1;
            c.ablation = Ablation::NoReweight;
            let out = run_experiment(&c).unwrap();
            assert_eq!(out.report.trials[0].ledger.proposal_calls, expected, "{domain:?}");
            assert_eq!(out.artifacts[0].replay.len(), 100);
        }
    }
}
