//! Declarative run configuration: a TOML file with flag and environment
//! overrides. Every section defaults field-by-field, so a partial file
//! overrides only the keys it names; unknown keys are rejected with the
//! offending path.
//!
//! Precedence: command-line flags > `FEDPN_*` environment variables >
//! config file > built-in defaults. The federated-stage defaults are the
//! reference recipe (batch 64, SGD 0.01 momentum 0.9, 100 rounds, 10 local
//! batches, gamma 0.001, lambda 0); experiment sections carry their own
//! desk-scale presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::dirichlet::LossWeights;
use crate::error::{Error, Result};
use crate::experiments::{
    BenchmarkConfig, LabelNoiseConfig, PrecisionFilterConfig, ToyLossConfig,
};
use crate::federated::{FederationConfig, PersonalizationConfig};
use crate::inference::ScoreKind;

/// Dataset shape for the pipeline commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub sigma: f64,
    pub classes_per_client_min: usize,
    pub classes_per_client_max: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        DatasetSection {
            n_classes: b.n_classes,
            input_dim: b.input_dim,
            train_per_class: b.train_per_class,
            test_per_class: b.test_per_class,
            separation: b.separation,
            sigma: b.sigma,
            classes_per_client_min: b.classes_per_client.0,
            classes_per_client_max: b.classes_per_client.1,
        }
    }
}

/// Model architecture for the pipeline commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub flow_depth: usize,
    pub bounded_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        ModelSection {
            embedding_dim: b.embedding_dim,
            hidden: b.hidden,
            flow_depth: b.flow_depth,
            bounded_embedding: b.bounded_embedding,
        }
    }
}

/// Calibration and switching settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub p_outlier: f64,
    pub score_kind: ScoreKind,
    pub use_global_threshold: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            p_outlier: 0.10,
            score_kind: ScoreKind::LogDensity,
            use_global_threshold: false,
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; per-stage seeds derive from it by label hashing.
    pub seed: u64,
    /// Output directory for artifacts.
    pub out_dir: Option<PathBuf>,
    /// Single-threaded reference mode.
    pub deterministic: bool,
    /// Write intermediate checkpoints every this many federated rounds
    /// during `train-federated` (in addition to the final one).
    pub checkpoint_interval: Option<usize>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub federation: FederationConfig,
    pub personalization: PersonalizationConfig,
    pub loss: LossWeights,
    pub split: SplitSpec,
    pub policy: PolicySection,
    /// Preset for `experiment switching` (overrides the pipeline sections).
    pub switching: BenchmarkConfig,
    pub toy_loss: ToyLossConfig,
    pub label_noise: LabelNoiseConfig,
    pub precision_filter: PrecisionFilterConfig,
}

/// Flag-level overrides applied on top of file and environment values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub deterministic: bool,
}

impl RunConfig {
    /// Load from an optional file, apply `FEDPN_*` environment variables
    /// and then flag overrides, and validate.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config {}: {}", p.display(), e))
                })?;
                toml::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::config(format!("{}: {}", p.display(), e)))?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        if overrides.deterministic {
            cfg.deterministic = true;
        }
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("FEDPN_SEED") {
            self.seed = v
                .parse()
                .map_err(|e| Error::config(format!("FEDPN_SEED: {}", e)))?;
        }
        if let Ok(v) = std::env::var("FEDPN_OUT") {
            self.out_dir = Some(PathBuf::from(v));
        }
        if let Ok(v) = std::env::var("FEDPN_DETERMINISTIC") {
            self.deterministic = matches!(v.as_str(), "1" | "true" | "yes");
        }
        Ok(())
    }

    /// Propagate the master seed and deterministic flag into sections.
    fn normalize(&mut self) {
        self.federation.seed = self.seed;
        self.switching.seed = self.seed;
        self.toy_loss.seed = self.seed;
        self.label_noise.benchmark.seed = self.seed;
        self.precision_filter.benchmark.seed = self.seed;
        if self.deterministic {
            self.federation.parallel = false;
            self.switching.federation.parallel = false;
            self.label_noise.benchmark.federation.parallel = false;
            self.precision_filter.benchmark.federation.parallel = false;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_benchmark().validate()?;
        self.switching.validate()?;
        self.label_noise.benchmark.validate()?;
        self.precision_filter.benchmark.validate()?;
        self.loss.validate()?;
        if !(0.0..=1.0).contains(&self.policy.p_outlier) {
            return Err(Error::config("policy.p_outlier must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Assemble the pipeline-command configuration (SM-default federation
    /// plus the dataset/model/policy sections).
    pub fn pipeline_benchmark(&self) -> BenchmarkConfig {
        let mut federation = self.federation.clone();
        federation.loss_weights = self.loss;
        BenchmarkConfig {
            n_classes: self.dataset.n_classes,
            input_dim: self.dataset.input_dim,
            train_per_class: self.dataset.train_per_class,
            test_per_class: self.dataset.test_per_class,
            separation: self.dataset.separation,
            sigma: self.dataset.sigma,
            classes_per_client: (
                self.dataset.classes_per_client_min,
                self.dataset.classes_per_client_max,
            ),
            embedding_dim: self.model.embedding_dim,
            hidden: self.model.hidden.clone(),
            bounded_embedding: self.model.bounded_embedding,
            flow_depth: self.model.flow_depth,
            federation,
            personalization: self.personalization.clone(),
            split: self.split,
            p_outlier: self.policy.p_outlier,
            score_kind: self.policy.score_kind,
            use_global_threshold: self.policy.use_global_threshold,
            seed: self.seed,
        }
    }

    pub fn resolved_out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}
