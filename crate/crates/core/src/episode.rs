//! Types shared by the per-environment episode loops.

use serde::{Deserialize, Serialize};

use crate::pattern::{ImputationConfig, PatternLibrary};
use crate::world::{TokenLedger, Value, VariableId, WorldModel};

/// Pattern inference available to an episode. `None` in an episode runner
/// means the no-inference ablation: the controller's order is used as is and
/// nothing is imputed.
#[derive(Debug, Clone, Copy)]
pub struct Inference<'a> {
    pub library: &'a PatternLibrary,
    pub imputation: ImputationConfig,
    /// Impute over every unknown variable instead of the controller's
    /// neighbourhood.
    pub full_closure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Reveal { var: VariableId, value: Value },
    Impute { var: VariableId, value: Value },
    Action { step: usize, action: String },
    Achievement { step: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub world: WorldModel,
    pub ledger: TokenLedger,
    pub success: bool,
    pub failure: Option<String>,
    pub trace: Vec<TraceEvent>,
}

/// Collects trace events when enabled.
#[derive(Debug, Default)]
pub struct Tracer {
    pub enabled: bool,
    pub events: Vec<TraceEvent>,
}

impl Tracer {
    pub fn new(enabled: bool) -> Self {
        Tracer { enabled, events: Vec::new() }
    }

    pub fn push(&mut self, make: impl FnOnce() -> TraceEvent) {
        if self.enabled {
            self.events.push(make());
        }
    }
}
