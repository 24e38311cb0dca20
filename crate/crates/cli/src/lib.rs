//! Command implementations behind the `evgraph` binary.
//!
//! Every command is a deterministic function of its configuration and
//! seeds; file artifacts are byte-reproducible.

pub mod ablate;
pub mod config;
pub mod io;

use std::fmt;
use std::path::Path;

use evgraph::datagen::{build_baseline_graph, generate_synthetic, load_dataset, load_dataset_dir, BaselineParams, Dataset};
use evgraph::diagnostics::{run_gradient_check, GradCheckReport, GradCheckSpec};
use evgraph::graph::GraphKind;
use evgraph::metrics::{accuracy, argmax_rows};
use evgraph::model::{Checkpoint, ForwardConfig, CHECKPOINT_FORMAT_VERSION};
use evgraph::train::{fit, predict, EpochRecord, GraphInput, Population, Split};
use evgraph::uncertainty::{mced, resolve_graph, UncertaintyReport};
use evgraph::{Error, Matrix};

pub use config::{DataPaths, RunConfig, CONFIG_HELP, SCHEMA_VERSION};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const UNCERTAINTY_FILE: &str = "uncertainty.csv";

/// Failure of a command: a short machine-readable kind, a one-line message
/// and the process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: u8,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            kind: "config",
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: "usage",
            message: message.into(),
            exit_code: 2,
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
            exit_code: 1,
        }
    }

    /// `error: code=<kind> <message>` on a single line.
    pub fn line(&self) -> String {
        let flat: Vec<&str> = self.message.split_whitespace().collect();
        format!("error: code={} {}", self.kind, flat.join(" "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => return CliError::config(e.to_string()),
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Numerical(_) => "numerical",
            Error::Shape { .. } | Error::EmptyInput { .. } => "shape",
            Error::Domain { .. } => "domain",
        };
        CliError::runtime(kind, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the configured dataset, or generates the synthetic population.
pub fn load_data(config: &RunConfig) -> CliResult<Dataset> {
    let dataset = match &config.data {
        Some(DataPaths::Dir { dir }) => load_dataset_dir(dir)?,
        Some(DataPaths::Files {
            features,
            metadata,
            labels,
        }) => load_dataset(features, metadata, labels)?,
        None => generate_synthetic(&config.synthetic)?,
    };
    Ok(dataset)
}

/// Metadata as the model sees it: a population without metadata columns
/// gets one constant column so the encoder stays well-formed.
pub fn model_metadata(dataset: &Dataset) -> Matrix {
    if dataset.metadata.cols() == 0 {
        Matrix::zeros(dataset.len(), 1)
    } else {
        dataset.metadata.clone()
    }
}

pub fn graph_input(kind: GraphKind, dataset: &Dataset, baseline: &BaselineParams) -> CliResult<GraphInput> {
    Ok(match kind {
        GraphKind::Adaptive => GraphInput::Adaptive,
        fixed => GraphInput::Fixed(build_baseline_graph(fixed, dataset, baseline)?),
    })
}

/// Output of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.val_accuracy)
    }
}

pub fn train_model(config: &RunConfig, dataset: &Dataset) -> CliResult<TrainOutcome> {
    let input = graph_input(config.graph, dataset, &config.baseline)?;
    let mask = dataset.label_mask()?;
    let metadata = model_metadata(dataset);
    let population = Population {
        features: &dataset.features,
        metadata: &metadata,
        mask: &mask,
        classes: dataset.n_classes,
    };
    let trained = fit(population, &input, &config.train)?;
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        seed: config.train.seed,
        graph: config.graph,
        baseline: (config.graph != GraphKind::Adaptive).then(|| config.baseline.clone()),
        edge_dropout: config.train.edge_dropout,
        dropout: config.train.dropout,
        lambda_max: config.train.lambda_max,
        norm_stats: trained.norm_stats,
        params: trained.params,
    };
    Ok(TrainOutcome {
        checkpoint,
        history: trained.history,
    })
}

fn forward_config(checkpoint: &Checkpoint) -> ForwardConfig {
    ForwardConfig {
        dropout: checkpoint.dropout,
        edge_dropout: checkpoint.edge_dropout,
        lambda_max: checkpoint.lambda_max,
    }
}

/// Rejects data whose shape does not match the checkpoint.
pub fn check_compatible(checkpoint: &Checkpoint, dataset: &Dataset) -> CliResult<()> {
    let dims = &checkpoint.params.dims;
    let features = dataset.features.cols();
    let metadata = dataset.metadata.cols().max(1);
    if dims.input_dim != features {
        return Err(CliError::runtime(
            "shape",
            format!("checkpoint expects {} feature columns, data has {features}", dims.input_dim),
        ));
    }
    if dims.metadata_dim != metadata {
        return Err(CliError::runtime(
            "shape",
            format!(
                "checkpoint expects {} metadata columns, data has {metadata}",
                dims.metadata_dim
            ),
        ));
    }
    if checkpoint.norm_stats.mean.len() != metadata {
        return Err(CliError::runtime(
            "shape",
            format!(
                "checkpoint normalization covers {} metadata columns, data has {metadata}",
                checkpoint.norm_stats.mean.len()
            ),
        ));
    }
    Ok(())
}

fn checkpoint_graph(checkpoint: &Checkpoint, dataset: &Dataset) -> CliResult<GraphInput> {
    let baseline = checkpoint.baseline.clone().unwrap_or_default();
    graph_input(checkpoint.graph, dataset, &baseline)
}

/// Eval-mode class probabilities of every subject.
pub fn predict_probs(checkpoint: &Checkpoint, dataset: &Dataset) -> CliResult<Matrix> {
    check_compatible(checkpoint, dataset)?;
    let input = checkpoint_graph(checkpoint, dataset)?;
    let probs = predict(
        &dataset.features,
        &model_metadata(dataset),
        &input,
        &checkpoint.params,
        &checkpoint.norm_stats,
        &forward_config(checkpoint),
    )?;
    Ok(probs)
}

/// Monte-Carlo edge-dropout report over every subject.
pub fn uncertainty_report(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    t_passes: usize,
    seed: u64,
) -> CliResult<UncertaintyReport> {
    check_compatible(checkpoint, dataset)?;
    let input = checkpoint_graph(checkpoint, dataset)?;
    let graph = resolve_graph(
        &input,
        &dataset.features,
        &model_metadata(dataset),
        &checkpoint.params,
        &checkpoint.norm_stats,
    )?;
    Ok(mced(&graph, &checkpoint.params, &forward_config(checkpoint), t_passes, seed)?)
}

/// Test accuracy of `predicted`, `None` without labeled test subjects.
pub fn test_accuracy(dataset: &Dataset, predicted: &[usize]) -> CliResult<Option<f64>> {
    let mask = dataset.label_mask()?;
    let test = mask.indices(Split::Test);
    if test.is_empty() {
        return Ok(None);
    }
    Ok(Some(accuracy(predicted, &mask.dense_labels(0), &test)?))
}

// ---- commands ----

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// `train`: writes the checkpoint and history under `out`.
pub fn cmd_train(config: &RunConfig, out: &Path) -> CliResult<TrainOutcome> {
    let dataset = load_data(config)?;
    let outcome = train_model(config, &dataset)?;
    ensure_dir(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    io::write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    Ok(outcome)
}

/// `predict`: writes eval-mode class probabilities.
pub fn cmd_predict(checkpoint: &Checkpoint, dataset: &Dataset, out: &Path) -> CliResult<Matrix> {
    let probs = predict_probs(checkpoint, dataset)?;
    ensure_dir(out)?;
    io::write_probabilities(&out.join(PREDICTIONS_FILE), &dataset.ids, &probs, None)?;
    Ok(probs)
}

/// `uncertainty`: writes the Monte-Carlo report.
pub fn cmd_uncertainty(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    t_passes: usize,
    seed: u64,
    out: &Path,
) -> CliResult<UncertaintyReport> {
    let report = uncertainty_report(checkpoint, dataset, t_passes, seed)?;
    ensure_dir(out)?;
    io::write_probabilities(&out.join(UNCERTAINTY_FILE), &dataset.ids, &report.mean_probs, Some(&report.entropy))?;
    Ok(report)
}

/// `gradcheck`: one report per Chebyshev order.
pub fn cmd_gradcheck(spec: &GradCheckSpec, orders: &[usize]) -> CliResult<Vec<GradCheckReport>> {
    orders
        .iter()
        .map(|&order| {
            let spec = GradCheckSpec {
                order,
                ..spec.clone()
            };
            Ok(run_gradient_check(&spec)?)
        })
        .collect()
}

/// Offending `K=<order>:<group>` entries, empty when everything passed.
pub fn gradcheck_failures(reports: &[GradCheckReport]) -> Vec<String> {
    let mut out = Vec::new();
    for r in reports {
        for g in r.failures() {
            out.push(format!("K={}:{}", r.spec.order, g.group));
        }
        if r.spec.order > 0 && !(r.edge_weight_grad_norm > 0.0) {
            out.push(format!("K={}:edge_weights(zero gradient)", r.spec.order));
        }
    }
    out
}

/// Predicted classes for a probability matrix.
pub fn predicted_classes(probs: &Matrix) -> Vec<usize> {
    argmax_rows(probs)
}
