//! Run configuration: one strict JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use evgraph::datagen::{BaselineParams, Informativeness, SynthSpec};
use evgraph::graph::GraphKind;
use evgraph::train::TrainConfig;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Appended to every `--help`.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (JSON, schema_version 1; unknown keys are rejected, every key is optional)
  schema_version   1
  graph            \"adaptive\" | \"random\" | \"affinity\"         [adaptive]
  train            learning_rate 0.01, weight_decay 5e-5, dropout 0.2,
                   edge_dropout 0.2, pae_dropout null (= dropout), epochs 300,
                   order 3, layers 4, hidden_width 16, latent_dim 128,
                   predictor_hidden 256, t_mc 128, lambda_max 2.0, seed 0
  data             {\"dir\": DIR} or {\"features\": F, \"metadata\": M, \"labels\": L};
                   paths are relative to the config file. Without it the
                   synthetic population below is generated.
  synthetic        n_subjects 200, n_classes 2, feature_dim 32, metadata_dim 6,
                   feature_noise 1.3, informativeness \"full\" (noise|partial|full),
                   metadata_jitter 0.25, partial_signal 2.0, seed 0
  baseline         edge_probability 0.1, affinity_threshold 0.6,
                   min_agreeing_columns null (= half the columns), seed 0
  ablate           graphs [random, affinity, adaptive], seeds [0..9],
                   informativeness [full], folds null (k-fold over labeled
                   subjects instead of the stored split)

ENVIRONMENT
  EVGRAPH_THREADS  worker threads for parallel sections (default: all cores)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub graph: GraphKind,
    pub train: TrainConfig,
    pub data: Option<DataPaths>,
    pub synthetic: SynthSpec,
    pub baseline: BaselineParams,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            graph: GraphKind::Adaptive,
            train: TrainConfig::default(),
            data: None,
            synthetic: SynthSpec::default(),
            baseline: BaselineParams::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Dataset location, either a directory holding the three standard files
/// or each file separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum DataPaths {
    Dir {
        dir: PathBuf,
    },
    Files {
        features: PathBuf,
        metadata: PathBuf,
        labels: PathBuf,
    },
}

impl DataPaths {
    fn rebase(self, base: &Path) -> Self {
        match self {
            DataPaths::Dir { dir } => DataPaths::Dir { dir: base.join(dir) },
            DataPaths::Files {
                features,
                metadata,
                labels,
            } => DataPaths::Files {
                features: base.join(features),
                metadata: base.join(metadata),
                labels: base.join(labels),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub graphs: Vec<GraphKind>,
    pub seeds: Vec<u64>,
    /// Synthetic association levels to sweep; ignored for file data.
    pub informativeness: Vec<Informativeness>,
    pub folds: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            graphs: vec![GraphKind::Random, GraphKind::Affinity, GraphKind::Adaptive],
            seeds: (0..10).collect(),
            informativeness: vec![Informativeness::Full],
            folds: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path`; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.data = config.data.map(|d| d.rebase(base));
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        self.synthetic.validate()?;
        if self.ablate.graphs.is_empty() || self.ablate.seeds.is_empty() {
            return Err(CliError::config("ablate needs at least one graph and one seed"));
        }
        if self.ablate.informativeness.is_empty() {
            return Err(CliError::config("ablate.informativeness must not be empty"));
        }
        if matches!(self.ablate.folds, Some(k) if k < 3) {
            return Err(CliError::config("ablate.folds must be at least 3"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.weight_decay, 5e-5);
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.train.order, 3);
        assert_eq!(c.train.layers, 4);
        assert_eq!(c.train.t_mc, 128);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for doc in [
            r#"{"epochs": 3}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"synthetic": {"subjects": 3}}"#,
            r#"{"baseline": {"p": 0.2}}"#,
            r#"{"ablate": {"seed": [1]}}"#,
            r#"{"data": {"dir": "x", "extra": 1}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 2}"#).unwrap_err();
        assert!(err.message.contains("schema_version"));
    }

    #[test]
    fn data_forms_parse() {
        let c = RunConfig::from_json(r#"{"data": {"dir": "d"}}"#).unwrap();
        assert_eq!(c.data, Some(DataPaths::Dir { dir: "d".into() }));
        let c = RunConfig::from_json(r#"{"data": {"features": "f", "metadata": "m", "labels": "l"}}"#).unwrap();
        assert!(matches!(c.data, Some(DataPaths::Files { .. })));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": -1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"graph": "knn"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"ablate": {"folds": 1}}"#).is_err());
    }

    #[test]
    fn relative_data_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"data": {"dir": "pop"}}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.data, Some(DataPaths::Dir { dir: dir.path().join("pop") }));
    }
}
