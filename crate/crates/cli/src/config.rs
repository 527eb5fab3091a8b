use std::fs;
use std::path::{Path, PathBuf};

use hiplan::experiment::{ConductorTable, DataConfig, EnvConfig, PerformerTable, Policy};
use hiplan::orchestrator::Variant;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run needs; one TOML file, unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    /// Dataset file; defaults to `<out>/dataset.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Evaluation seeds.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_train_seed")]
    pub train_seed: u64,
    /// Loss CSVs keep every n-th step.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub conductor: ConductorTable,
    #[serde(default)]
    pub performer: PerformerTable,
    #[serde(default)]
    pub orchestrator: OrchestratorTable,
    #[serde(default)]
    pub analysis: AnalysisTable,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_train_seed() -> u64 {
    1
}

fn default_log_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrchestratorTable {
    pub variant: Policy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replan_every: Option<usize>,
    pub episodes: usize,
    /// Overrides the planner's guidance scale at evaluation time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
}

impl Default for OrchestratorTable {
    fn default() -> Self {
        Self {
            variant: Policy::Hierarchical(Variant::PlanDQ),
            replan_every: None,
            episodes: 20,
            omega: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisTable {
    pub resolution: usize,
    pub ks: Vec<usize>,
}

impl Default for AnalysisTable {
    fn default() -> Self {
        Self {
            resolution: 20,
            ks: vec![2, 4, 8],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Minimal config for commands that need none.
    pub fn empty() -> Self {
        toml::from_str("[env]\nname = \"open_maze\"\n").expect("static config parses")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.orchestrator.episodes == 0 {
            return bad("orchestrator.episodes must be at least 1".into());
        }
        if self.orchestrator.replan_every == Some(0) {
            return bad("orchestrator.replan_every must be at least 1".into());
        }
        if self.analysis.resolution < 2 {
            return bad("analysis.resolution must be at least 2".into());
        }
        if self.analysis.ks.is_empty() || self.analysis.ks.contains(&0) {
            return bad("analysis.ks must hold positive intervals".into());
        }
        if let Policy::Hierarchical(_) = self.orchestrator.variant {
            let (c, p) = (self.conductor.interval(), self.performer.interval());
            if c != p {
                return bad(format!("conductor interval {c} differs from performer interval {p}"));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self, out: &Path) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| out.join(DATASET_FILE))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub const DATASET_FILE: &str = "dataset.bin";
