use std::fs;
use std::path::{Path, PathBuf};

use head_core::dataset::{DatasetConfig, Split, Splits};
use head_core::detector::{TrainHyper, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything an experiment needs; loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Catalog file (`id sigma r:c,r:c` lines); the built-in catalog if absent.
    pub catalog: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub timesaver: TimesaverConfig,
    pub runtime: RuntimeConfig,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub steps: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Seeds the prompt-disjoint split shared by train, eval and sweeps.
    pub seed: u64,
    pub target_recall: Option<f64>,
    /// Prompts used to measure operating points for sweeps.
    pub eval_split: PromptSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            variant: Variant::Combined,
            steps: vec![8],
            lr: h.lr,
            epochs: h.epochs,
            l2: h.l2,
            seed: h.seed,
            target_recall: h.target_recall,
            eval_split: PromptSet::Validation,
        }
    }
}

impl DetectorConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lr: self.lr,
            epochs: self.epochs,
            l2: self.l2,
            seed: self.seed,
            target_recall: self.target_recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimesaverConfig {
    pub trials: u64,
    pub seed: u64,
    /// Completeness probability the sweeps are calibrated to.
    pub completeness: f64,
    pub p_grid: Vec<f64>,
}

impl Default for TimesaverConfig {
    fn default() -> Self {
        Self {
            trials: 1_000_000,
            seed: 1,
            completeness: 0.59,
            p_grid: (1..20).map(|k| k as f64 / 20.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub runs_per_prompt: usize,
    pub root_seed: u64,
    /// Fresh generations per prompt used to measure the detector before a campaign.
    pub eval_seeds_per_prompt: usize,
    pub eval_seed: u64,
    pub max_restarts: usize,
    pub bootstrap: usize,
    pub prompts: PromptSet,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            runs_per_prompt: 56,
            root_seed: 11,
            eval_seeds_per_prompt: 100,
            eval_seed: 4242,
            max_restarts: head_core::runtime::DEFAULT_MAX_RESTARTS,
            bootstrap: head_core::runtime::DEFAULT_BOOTSTRAP,
            prompts: PromptSet::HeldOut,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PromptSet {
    Train,
    Validation,
    Test,
    /// Validation and test prompts.
    HeldOut,
    All,
}

impl PromptSet {
    pub fn select(self, splits: &Splits, n_prompts: usize) -> Vec<usize> {
        let mut ids = match self {
            PromptSet::Train => splits.get(Split::Train).to_vec(),
            PromptSet::Validation => splits.get(Split::Validation).to_vec(),
            PromptSet::Test => splits.get(Split::Test).to_vec(),
            PromptSet::HeldOut => [splits.get(Split::Validation), splits.get(Split::Test)].concat(),
            PromptSet::All => (0..n_prompts).collect(),
        };
        ids.sort_unstable();
        ids
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.detector.variant.check_steps(&self.detector.steps)?;
        let ts = &self.timesaver;
        if !(ts.completeness > 0.0 && ts.completeness <= 1.0) {
            return Err(CliError::Usage(format!("completeness {} outside (0, 1]", ts.completeness)));
        }
        if ts.p_grid.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(CliError::Usage("p_grid values must lie in (0, 1)".into()));
        }
        let rt = &self.runtime;
        if rt.runs_per_prompt == 0 || rt.eval_seeds_per_prompt == 0 {
            return Err(CliError::Usage("runtime run counts must be at least 1".into()));
        }
        Ok(())
    }
}
