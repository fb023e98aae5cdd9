use std::path::{Path, PathBuf};

use aad_core::attribution::AttributionConfig;
use aad_core::dataset::Task;
use aad_core::dsp::EegPipelineConfig;
use aad_core::model::ModelConfig;
use aad_core::synthetic::SynthConfig;
use aad_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub n_components: usize,
    /// Fit on every subject instead of the chosen fold's training subjects.
    pub all_subjects: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self {
            n_components: 64,
            all_subjects: false,
        }
    }
}

/// Everything a subcommand needs. Command-line flags override values read
/// from `--config`; the merged result is written to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub dataset_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub window_s: f64,
    pub task: String,
    /// Fold used by `train`, `mmm`, `pca` and `attribute`.
    pub fold: usize,
    /// Folds run by `crossval`; empty means all.
    pub folds: Vec<usize>,
    /// Global seed; copied into every module seed.
    pub seed: u64,
    /// `attended` or `unattended`, for `mmm`.
    pub stream: String,
    /// Checkpoint directory read by `attribute`.
    pub model_dir: Option<PathBuf>,
    /// Second checkpoint and its task for the `attribute` difference map.
    pub compare_model_dir: Option<PathBuf>,
    pub compare_task: Option<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub preprocess: EegPipelineConfig,
    pub pca: PcaConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            dataset_root: None,
            out: None,
            window_s: 5.0,
            task: "aad".into(),
            fold: 0,
            folds: Vec::new(),
            seed: 0,
            stream: "attended".into(),
            model_dir: None,
            compare_model_dir: None,
            compare_task: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            preprocess: EegPipelineConfig::default(),
            pca: PcaConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Copies the global seed into every module and checks cross-field rules.
    pub fn finish(mut self, command: &str) -> Result<Self, String> {
        if let Some(c) = &self.command {
            if c != command {
                return Err(format!("config was written for `{c}`, not `{command}`"));
            }
        }
        self.command = Some(command.to_string());
        self.train.seed = self.seed;
        self.attribution.seed = self.seed;
        self.synth.seed = self.seed;
        if ![1.0, 3.0, 5.0].contains(&self.window_s) {
            return Err(format!("window must be 1, 3 or 5 s, got {}", self.window_s));
        }
        self.task()?;
        if !matches!(self.stream.as_str(), "attended" | "unattended") {
            return Err(format!("stream must be attended or unattended, got {}", self.stream));
        }
        Ok(self)
    }

    pub fn task(&self) -> Result<Task, String> {
        Task::parse(&self.task).ok_or_else(|| format!("unknown task {}; use aad, mmm-att or mmm-unatt", self.task))
    }

    pub fn out(&self) -> Result<&Path, String> {
        self.out.as_deref().ok_or_else(|| "--out is required".to_string())
    }

    pub fn dataset_root(&self) -> Result<&Path, String> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| "--dataset-root or AAD_DATASET_ROOT is required".to_string())
    }
}
