//! Experiment configuration (JSON, versioned) and its validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::StrategyKind;
use crate::data::{
    generate_clustered, generate_general, load_idx, partition_clustered, ClusteredParams,
    FederationData, GeneralParams,
};
use crate::dropout::{generate_schedule, DropoutSchedule, GeneratorKind};
use crate::error::{Error, Result};
use crate::model::{LocalTrainConfig, ModelKind, ModelSpec};
use crate::rng::{Purpose, RngStream};
use crate::similarity::{EliminationConfig, ScoreKind};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "FEDSIM_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Clustered(ClusteredParams),
    General(GeneralParams),
    /// MNIST-style IDX files split into a clustered federation.
    Idx(IdxDataConfig),
    /// A federation previously written by `generate-data`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxDataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub n_clients: usize,
    pub n_clusters: usize,
    pub labels_per_cluster: usize,
    pub samples_per_client: usize,
}

impl DataConfig {
    pub fn build(&self, seed: u64) -> Result<FederationData> {
        match self {
            DataConfig::Clustered(p) => generate_clustered(p, seed),
            DataConfig::General(p) => generate_general(p, seed),
            DataConfig::Idx(c) => {
                let pool = load_idx(&c.train_images, &c.train_labels)?;
                let test = load_idx(&c.test_images, &c.test_labels)?;
                partition_clustered(
                    &pool,
                    test,
                    c.n_clients,
                    c.n_clusters,
                    c.labels_per_cluster,
                    c.samples_per_client,
                    seed,
                )
            }
            DataConfig::File { path } => FederationData::load_json(path),
        }
    }

    /// Client count when it is known without building the data.
    pub fn n_clients(&self) -> Option<usize> {
        match self {
            DataConfig::Clustered(p) => Some(p.n_clients),
            DataConfig::General(p) => Some(p.n_clients),
            DataConfig::Idx(c) => Some(c.n_clients),
            DataConfig::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub hidden_units: usize,
    #[serde(default)]
    pub init_scale: f64,
    pub train: LocalTrainConfig,
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.kind,
            n_features: self.n_features,
            n_classes: self.n_classes,
            hidden_units: self.hidden_units,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub kind: GeneratorKind,
    pub alpha: f64,
    pub rounds: usize,
    /// Schedule file for `from_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl DropoutConfig {
    pub fn build(&self, n_clients: usize, seed: u64) -> Result<DropoutSchedule> {
        match self.kind {
            GeneratorKind::FromFile => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("dropout.path", "required for from_file"))?;
                let s = DropoutSchedule::load_json(path, n_clients, self.alpha)?;
                if s.rounds() < self.rounds {
                    return Err(Error::config(
                        "dropout.rounds",
                        format!("schedule file has only {} rounds", s.rounds()),
                    ));
                }
                Ok(DropoutSchedule {
                    participation: s.participation[..self.rounds].to_vec(),
                    ..s
                })
            }
            kind => generate_schedule(
                kind,
                n_clients,
                self.rounds,
                self.alpha,
                RngStream::server(seed, Purpose::Dropout, 0),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    #[serde(default)]
    pub score: ScoreKind,
    #[serde(default)]
    pub elimination: EliminationConfig,
    /// Write a score snapshot every this many rounds; 0 writes only the final one.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            score: ScoreKind::Cosine,
            elimination: EliminationConfig::default(),
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Compute the full-batch gradient norm every this many rounds (0 = never).
    #[serde(default = "one")]
    pub grad_every: usize,
    /// Repeats per probe point for the heterogeneity estimate; 0 disables it.
    #[serde(default)]
    pub heterogeneity_repeats: usize,
}

fn one() -> usize {
    1
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            grad_every: 1,
            heterogeneity_repeats: 0,
        }
    }
}

fn default_eta_global() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub dropout: DropoutConfig,
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_eta_global")]
    pub eta_global: f64,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Cross-check that identical local-training inputs give identical outputs.
    #[serde(default)]
    pub audit: bool,
}

impl ExperimentConfig {
    /// Desk-scale clustered preset: 20 clients in 5 clusters, softmax
    /// regression on Gaussian blobs.
    pub fn preset(alpha: f64) -> Self {
        let rounds = 300;
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            data: DataConfig::Clustered(ClusteredParams {
                n_clients: 20,
                n_clusters: 5,
                labels_per_cluster: 2,
                n_classes: 10,
                n_features: 20,
                samples_per_client: 200,
                noise_scale: 2.0,
                test_size: crate::data::DEFAULT_TEST_SIZE,
            }),
            model: ModelConfig {
                kind: ModelKind::SoftmaxRegression,
                n_features: 20,
                n_classes: 10,
                hidden_units: 0,
                init_scale: 0.0,
                train: LocalTrainConfig {
                    eta_local: 0.3,
                    epochs: 40,
                    batch_size: 32,
                },
            },
            dropout: DropoutConfig {
                kind: GeneratorKind::IidRandom,
                alpha,
                rounds,
                path: None,
            },
            strategies: StrategyKind::ALL.to_vec(),
            eta_global: 1.5,
            similarity: SimilarityConfig::default(),
            metrics: MetricsConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("out"),
            audit: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::config(path.display().to_string(), format!("cannot parse config: {e}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "at least one strategy is required"));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::config("strategies", "duplicate strategy"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.dropout.rounds == 0 {
            return Err(Error::config("dropout.rounds", "must be at least 1"));
        }
        if !(self.dropout.alpha.is_finite() && (0.0..1.0).contains(&self.dropout.alpha)) {
            return Err(Error::config("dropout.alpha", "must lie in [0, 1)"));
        }
        if !(self.eta_global.is_finite() && self.eta_global > 0.0) {
            return Err(Error::config("eta_global", "must be finite and positive"));
        }
        self.model.spec().validate()?;
        self.model.train.validate()?;
        self.similarity.elimination.validate()?;
        match &self.data {
            DataConfig::Clustered(p) => {
                if p.n_features != self.model.n_features || p.n_classes != self.model.n_classes {
                    return Err(Error::config(
                        "data",
                        "n_features / n_classes disagree with the model section",
                    ));
                }
            }
            DataConfig::General(p) => {
                if p.n_features != self.model.n_features || p.n_classes != self.model.n_classes {
                    return Err(Error::config(
                        "data",
                        "n_features / n_classes disagree with the model section",
                    ));
                }
            }
            DataConfig::Idx(_) | DataConfig::File { .. } => {}
        }
        if let Some(k) = self.data.n_clients() {
            if k == 0 {
                return Err(Error::config("data.n_clients", "must be positive"));
            }
        }
        if self.dropout.kind == GeneratorKind::FromFile && self.dropout.path.is_none() {
            return Err(Error::config("dropout.path", "required for from_file"));
        }
        Ok(())
    }
}
