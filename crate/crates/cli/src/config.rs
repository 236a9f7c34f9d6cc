//! Run configuration: one TOML file, validated before any command runs.

use std::path::{Path, PathBuf};

use csm_core::cohort::SplitSizes;
use csm_core::cvae::MeshCvaeConfig;
use csm_core::eval::{derive_seed, EvalConfig};
use csm_core::model::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the directory for default data and outputs.
pub const CACHE_ENV: &str = "CSM_CACHE_DIR";
const DEFAULT_CACHE: &str = ".csm-cache";

/// Tags mixed into the run seed, one per source of randomness.
pub mod seed_tag {
    pub const COHORT: u64 = 11;
    pub const INIT: u64 = 12;
    pub const TRAINING: u64 = 13;
    pub const EVALUATION: u64 = 14;
    pub const SAMPLING: u64 = 15;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    /// Icosphere subdivision level of the template (2 gives 162 vertices).
    pub subdivisions: u32,
}

impl Default for TemplateSection {
    fn default() -> Self {
        Self { subdivisions: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Cohort directory holding `manifest.csv`; `<cache>/cohort` if unset.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = SplitSizes::DESK;
        Self {
            dir: None,
            train: d.train,
            val: d.val,
            test: d.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Total epochs; resuming continues up to this count.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_covariate: f64,
    pub lr_mesh: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_covariate: t.lr_covariate,
            lr_mesh: t.lr_mesh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only seed; every random stream is derived from it.
    pub seed: u64,
    /// Run directory for checkpoints, logs and reports; `<cache>/run` if unset.
    pub output_dir: Option<PathBuf>,
    pub template: TemplateSection,
    pub data: DataSection,
    pub model: MeshCvaeConfig,
    pub training: TrainingSection,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train_config().validate()?;
        if self.template.subdivisions > 6 {
            return Err(CliError::config("template.subdivisions must be at most 6"));
        }
        if self.evaluation.pca_modes.contains(&0) {
            return Err(CliError::config("evaluation.pca_modes entries must be positive"));
        }
        if !self.evaluation.interpolation_offset.is_finite() {
            return Err(CliError::config("evaluation.interpolation_offset must be finite"));
        }
        if let Some(&d) = self.evaluation.interpolation_dims.iter().find(|&&d| d >= self.model.latent_dim) {
            return Err(CliError::config(format!(
                "evaluation.interpolation_dims entry {d} exceeds model.latent_dim = {}",
                self.model.latent_dim
            )));
        }
        Ok(())
    }

    pub fn cache_dir() -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| Self::cache_dir().join("cohort"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| Self::cache_dir().join("run"))
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.data.train,
            val: self.data.val,
            test: self.data.test,
        }
    }

    pub fn seed_for(&self, tag: u64) -> u64 {
        derive_seed(self.seed, tag)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_covariate: t.lr_covariate,
            lr_mesh: t.lr_mesh,
            seed: self.seed_for(seed_tag::TRAINING),
        }
    }
}
