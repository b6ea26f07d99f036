//! Engine configuration, read from a single JSON file. Every field has a
//! default, so a file only lists what it overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnose::{CorrectEvidenceParams, EmConfig};
use crate::edgescore::{CalibrationConfig, ScoreWeights};
use crate::error::{Error, Result};
use crate::generate::SearchBudget;
use crate::model::ResponseModelParams;
use crate::schedule::SchedulerParams;
use crate::sim::{CounterfactualConfig, EdgeScoreConfig, SchedulerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfigs {
    pub counterfactual: CounterfactualConfig,
    pub scheduler: SchedulerConfig,
    pub edgescore: EdgeScoreConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub response: ResponseModelParams,
    pub scheduler: SchedulerParams,
    pub em: EmConfig,
    pub evidence: CorrectEvidenceParams,
    /// Topic flag threshold on summed misconception mass.
    pub flag_gamma: f64,
    /// Minimum share of a cluster's load for a topic to be mapped to it.
    pub cluster_zeta: f64,
    pub score: ScoreWeights,
    pub calibration: CalibrationConfig,
    pub score_window: usize,
    /// Difficulty bin edges for peer pace statistics.
    pub pace_edges: Vec<f64>,
    pub search: SearchBudget,
    pub predictor_ridge: f64,
    /// Expected time per item (seconds) when a learner has no matched history.
    pub fallback_time: f64,
    pub experiments: ExperimentConfigs,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            response: ResponseModelParams::default(),
            scheduler: SchedulerParams::default(),
            em: EmConfig::default(),
            evidence: CorrectEvidenceParams::default(),
            flag_gamma: 0.5,
            cluster_zeta: 0.3,
            score: ScoreWeights::default(),
            calibration: CalibrationConfig::default(),
            score_window: 20,
            pace_edges: vec![-1.0, 0.0, 1.0],
            search: SearchBudget::default(),
            predictor_ridge: 1e-3,
            fallback_time: 30.0,
            experiments: ExperimentConfigs::default(),
        }
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let cfg: EngineConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Data(format!(
                "{}: line {} column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        self.score.validate()?;
        if !(0.0..=1.0).contains(&self.flag_gamma) || !(0.0..=1.0).contains(&self.cluster_zeta) {
            return Err(Error::Config(
                "flag_gamma and cluster_zeta must lie in [0, 1]".into(),
            ));
        }
        if !(self.fallback_time > 0.0) {
            return Err(Error::Config("fallback_time must be > 0".into()));
        }
        Ok(())
    }

    /// Copy with every experiment reseeded from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.em.seed = seed;
        self.experiments.counterfactual.seed = seed;
        self.experiments.scheduler.seed = seed;
        self.experiments.edgescore.seed = seed;
        self
    }
}
