//! Pipeline configuration, loaded from a JSON file with one section per
//! stage. Missing fields take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use declineforge_core::augment::AugmentConfig;
use declineforge_core::models::{CnnConfig, FcHeadConfig, TabularAeConfig, ViTConfig};
use declineforge_core::synthcohort::NoiseLevels;
use declineforge_core::trajectory::KMeansConfig;
use declineforge_core::{CohortSpec, GbtParams, TrainConfig};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSection {
    pub params: AugmentConfig,
    /// Augmented variants per training volume.
    pub copies_per_volume: usize,
    /// Also train on the unmodified volumes.
    pub include_originals: bool,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        Self { params: AugmentConfig::default(), copies_per_volume: 1, include_originals: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringSection {
    pub kmeans: KMeansConfig,
    /// Largest k on the elbow curve.
    pub k_max: usize,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        Self { kmeans: KMeansConfig::default(), k_max: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub test_ratio: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { test_ratio: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainingSection {
    pub vit: ViTConfig,
    pub train: TrainConfig,
    /// Held-out subjects whose reconstructions are scored by SSIM each epoch.
    pub monitor_count: usize,
    /// Augmented copies reconstruct their clean source volume; otherwise
    /// every input reconstructs itself.
    pub clean_targets: bool,
}

impl Default for PretrainingSection {
    fn default() -> Self {
        Self { vit: ViTConfig::default(), train: TrainConfig::default(), monitor_count: 8, clean_targets: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionSection {
    pub variance_target: f64,
    pub max_components: usize,
}

impl Default for ReductionSection {
    fn default() -> Self {
        Self { variance_target: 0.95, max_components: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifiersSection {
    pub gbt: GbtParams,
    pub fc_head: FcHeadConfig,
    pub cnn: CnnConfig,
    pub tabular_ae: TabularAeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub repetitions: usize,
    /// Draw a fresh stratified split for every repetition.
    pub resplit: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { repetitions: 5, resplit: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub workspace: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { workspace: PathBuf::from("workspace") }
    }
}

/// Every seed in the pipeline is derived from `seed`; the per-section seed
/// fields are overwritten at stage time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cohort: CohortSpec,
    pub augmentation: AugmentationSection,
    pub clustering: ClusteringSection,
    pub split: SplitSection,
    pub pretraining: PretrainingSection,
    pub reduction: ReductionSection,
    pub classifiers: ClassifiersSection,
    pub evaluation: EvaluationSection,
    pub paths: PathsSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, excluding the workspace path.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(CliError::Config(m));
        self.cohort.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.augmentation.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let km = &self.clustering.kmeans;
        if km.k == 0 || km.restarts == 0 || km.max_iter == 0 {
            return cfg("clustering k, restarts and max_iter must be >= 1".into());
        }
        if self.clustering.k_max < km.k {
            return cfg(format!("clustering.k_max {} is below k {}", self.clustering.k_max, km.k));
        }
        if km.k != 4 {
            return cfg(format!("clustering.k must be 4 to define the progression labels, got {}", km.k));
        }
        if !(self.split.test_ratio > 0.0 && self.split.test_ratio < 1.0) {
            return cfg(format!("split.test_ratio must lie in (0, 1), got {}", self.split.test_ratio));
        }
        let p = &self.pretraining;
        p.vit.validate().map_err(|e| CliError::Config(e.to_string()))?;
        p.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if p.vit.vol_dims != self.cohort.volume_dims {
            return cfg(format!(
                "pretraining.vit.vol_dims {:?} must equal cohort.volume_dims {:?}",
                p.vit.vol_dims, self.cohort.volume_dims
            ));
        }
        let r = &self.reduction;
        if !(r.variance_target > 0.0 && r.variance_target <= 1.0) || r.max_components == 0 {
            return cfg("reduction needs variance_target in (0, 1] and max_components >= 1".into());
        }
        let c = &self.classifiers;
        c.gbt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        c.fc_head.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        c.cnn.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        c.tabular_ae.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.evaluation.repetitions == 0 {
            return cfg("evaluation.repetitions must be >= 1".into());
        }
        Ok(())
    }

    /// Workspace directory, created if absent.
    pub fn ensure_workspace(&self) -> Result<PathBuf> {
        let ws = self.paths.workspace.clone();
        std::fs::create_dir_all(&ws).map_err(io_err(&ws))?;
        Ok(ws)
    }

    /// Small, strongly separated cohort that runs end to end in minutes.
    pub fn smoke(workspace: impl Into<PathBuf>) -> Self {
        let dims = [24; 3];
        let mut cfg = Self {
            cohort: CohortSpec {
                n_subjects: 120,
                group_proportions: [0.25; 4],
                volume_dims: dims,
                noise: NoiseLevels { volume_sd: 2.0, ..NoiseLevels::default() },
                ..CohortSpec::default()
            },
            pretraining: PretrainingSection {
                vit: ViTConfig { vol_dims: dims, embed_dim: 32, depth: 2, heads: 4, ..ViTConfig::default() },
                train: TrainConfig { epochs: 40, learning_rate: 1e-3, batch_size: 8, ..TrainConfig::default() },
                monitor_count: 4,
                clean_targets: true,
            },
            evaluation: EvaluationSection { repetitions: 5, resplit: false },
            paths: PathsSection { workspace: workspace.into() },
            ..Self::default()
        };
        cfg.classifiers.cnn.train.epochs = 10;
        cfg.clustering.k_max = 6;
        cfg.clustering.kmeans.restarts = 4;
        cfg
    }
}
