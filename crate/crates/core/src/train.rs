//! Transductive semi-supervised training: masked cross-entropy on the
//! labeled training subjects, Bernoulli edge dropout, and Adam with
//! decoupled weight decay over full-population steps.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{PopulationGraph, TapeGraph, DEFAULT_LAMBDA_MAX};
use crate::metrics::{accuracy, argmax_rows};
use crate::model::{forward, init_params, ForwardConfig, Mode, ModelDims, ModelParams, ParamVars};
use crate::numcore::{Matrix, Tape, Var};
use crate::pae::{build_adaptive_graph, NormStats, DEFAULT_LATENT_DIM};

/// Probabilities are floored here before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// RNG stream used for training-time dropout; stream 0 of the same seed
/// initializes the parameters.
const TRAIN_STREAM: u64 = 1;

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Vertex-feature dropout after each graph convolution.
    pub dropout: f64,
    pub edge_dropout: f64,
    /// Encoder hidden-layer dropout; follows `dropout` when unset.
    pub pae_dropout: Option<f64>,
    pub epochs: usize,
    /// Chebyshev order `K`.
    pub order: usize,
    /// Number of graph convolution layers `L_G`.
    pub layers: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub predictor_hidden: usize,
    /// Monte-Carlo passes `T`.
    pub t_mc: usize,
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 5e-5,
            dropout: 0.2,
            edge_dropout: 0.2,
            pae_dropout: None,
            epochs: 300,
            order: 3,
            layers: 4,
            hidden_width: 16,
            latent_dim: DEFAULT_LATENT_DIM,
            predictor_hidden: 256,
            t_mc: 128,
            lambda_max: DEFAULT_LAMBDA_MAX,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let probabilities = [
            ("dropout", Some(self.dropout)),
            ("edge_dropout", Some(self.edge_dropout)),
            ("pae_dropout", self.pae_dropout),
        ];
        for (name, p) in probabilities {
            if let Some(p) = p {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
                }
            }
        }
        let counts = [
            ("epochs", self.epochs),
            ("layers", self.layers),
            ("hidden_width", self.hidden_width),
            ("latent_dim", self.latent_dim),
            ("predictor_hidden", self.predictor_hidden),
            ("t_mc", self.t_mc),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("lambda_max", self.lambda_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn effective_pae_dropout(&self) -> f64 {
        self.pae_dropout.unwrap_or(self.dropout)
    }

    pub fn model_dims(&self, input_dim: usize, metadata_dim: usize, classes: usize) -> ModelDims {
        ModelDims {
            input_dim,
            metadata_dim,
            latent_dim: self.latent_dim,
            hidden: vec![self.hidden_width; self.layers],
            predictor_hidden: self.predictor_hidden,
            classes,
            order: self.order,
            pae_dropout: self.effective_pae_dropout(),
        }
    }

    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            dropout: self.dropout,
            edge_dropout: self.edge_dropout,
            lambda_max: self.lambda_max,
        }
    }
}

/// Role of a subject in a transductive run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unlabeled" => Ok(Split::Unlabeled),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val, test or unlabeled)"
            ))),
        }
    }
}

/// Per-subject labels and partition membership.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    labels: Vec<Option<usize>>,
    splits: Vec<Split>,
}

impl LabelMask {
    /// Every training subject must carry a label.
    pub fn new(labels: Vec<Option<usize>>, splits: Vec<Split>) -> Result<Self> {
        if labels.len() != splits.len() {
            return Err(Error::Config(format!(
                "{} labels but {} split assignments",
                labels.len(),
                splits.len()
            )));
        }
        if let Some(i) = (0..labels.len()).find(|&i| splits[i] == Split::Train && labels[i].is_none()) {
            return Err(Error::Config(format!("training subject {i} has no label")));
        }
        Ok(LabelMask { labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Labeled subjects in `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split && self.labels[i].is_some())
            .collect()
    }

    /// `(subject, class)` pairs for the labeled members of `split`.
    pub fn targets(&self, split: Split) -> Vec<(usize, usize)> {
        self.indices(split)
            .into_iter()
            .map(|i| (i, self.labels[i].expect("indices are labeled")))
            .collect()
    }

    /// Labels with missing entries replaced by `fill`.
    pub fn dense_labels(&self, fill: usize) -> Vec<usize> {
        self.labels.iter().map(|l| l.unwrap_or(fill)).collect()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().enumerate().find(|(_, l)| l.is_some_and(|c| c >= classes)) {
            Some((i, l)) => Err(Error::Config(format!(
                "subject {i} has class {} but only {classes} classes exist",
                l.unwrap()
            ))),
            None => Ok(()),
        }
    }
}

/// Mean of `−log max(p[i, y_i], 1e-12)` over the labeled members of `split`.
pub fn masked_cross_entropy(tape: &mut Tape, probs: Var, mask: &LabelMask, split: Split) -> Result<Var> {
    let (n, classes) = tape.shape(probs);
    if n != mask.len() {
        return Err(Error::shape("masked_cross_entropy", (n, classes), (mask.len(), 1)));
    }
    let targets = mask.targets(split);
    if targets.is_empty() {
        return Err(Error::domain(
            "masked_cross_entropy",
            format!("no labeled {split} subjects"),
        ));
    }
    if let Some(&(i, c)) = targets.iter().find(|(_, c)| *c >= classes) {
        return Err(Error::domain(
            "masked_cross_entropy",
            format!("subject {i} has class {c} but probabilities have {classes} columns"),
        ));
    }
    let picked = tape.gather(probs, &targets)?;
    let floored = tape.clamp(picked, LOG_FLOOR, f64::INFINITY);
    let logs = tape.log(floored)?;
    let mean = tape.mean_all(logs)?;
    Ok(tape.scale(mean, -1.0))
}

/// Keep/drop decision per subject pair: one uniform draw per `{i < j}` in
/// row-major upper-triangle order; the diagonal is always kept.
pub fn edge_dropout_mask<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::domain("edge_dropout", format!("rate {rate} outside [0, 1]")));
    }
    let mut mask = Matrix::ones(n, n);
    if rate == 0.0 {
        return Ok(mask);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < rate {
                mask.set(i, j, 0.0);
                mask.set(j, i, 0.0);
            }
        }
    }
    Ok(mask)
}

/// Edge dropout on a tape variable; kept weights are not rescaled.
pub fn edge_dropout<R: Rng + ?Sized>(tape: &mut Tape, w: Var, rate: f64, rng: &mut R) -> Result<Var> {
    let (r, c) = tape.shape(w);
    if r != c {
        return Err(Error::shape("edge_dropout", (r, c), (r, r)));
    }
    if rate == 0.0 {
        return Ok(w);
    }
    let mask = edge_dropout_mask(r, rate, rng)?;
    let mask = tape.constant(mask);
    tape.mul(w, mask)
}

/// Edge dropout on a plain matrix.
pub fn edge_dropout_matrix<R: Rng + ?Sized>(w: &Matrix, rate: f64, rng: &mut R) -> Result<Matrix> {
    if w.rows() != w.cols() {
        return Err(Error::shape("edge_dropout", w.shape(), (w.rows(), w.rows())));
    }
    let mask = edge_dropout_mask(w.rows(), rate, rng)?;
    Ok(w.zip_map(&mask, |a, b| a * b))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates, one per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|m| m.shape()).collect();
        Self::new(&shapes)
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `tensors`. Decoupled decay `θ ← θ(1 − lr·wd)` is
/// applied first, to the tensors flagged in `decay`.
pub fn adam_update(
    tensors: Vec<&mut Matrix>,
    grads: &[Matrix],
    decay: &[bool],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if tensors.len() != grads.len() || tensors.len() != state.m.len() || tensors.len() != decay.len() {
        return Err(Error::Config(format!(
            "optimizer got {} tensors, {} gradients, {} decay flags and {} moment slots",
            tensors.len(),
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (t, g) in tensors.iter().zip(grads) {
        if t.shape() != g.shape() {
            return Err(Error::shape("adam_step", t.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let shrink = 1.0 - config.learning_rate * config.weight_decay;
    for (k, theta) in tensors.into_iter().enumerate() {
        let g = grads[k].as_slice();
        let m = state.m[k].as_mut_slice();
        let v = state.v[k].as_mut_slice();
        let decays = decay[k] && config.weight_decay != 0.0;
        for (idx, p) in theta.as_mut_slice().iter_mut().enumerate() {
            if decays {
                *p *= shrink;
            }
            m[idx] = config.beta1 * m[idx] + (1.0 - config.beta1) * g[idx];
            v[idx] = config.beta2 * v[idx] + (1.0 - config.beta2) * g[idx] * g[idx];
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Adam step over every model parameter; biases are not decayed.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Matrix],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let decay: Vec<bool> = params.infos().iter().map(|i| !i.is_bias).collect();
    adam_update(params.tensors_mut(), grads, &decay, state, config)
}

/// Where the population graph comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphInput {
    /// Learned from metadata by the pairwise association encoder.
    Adaptive,
    /// A precomputed graph; the encoder is unused.
    Fixed(PopulationGraph),
}

/// Imaging features, metadata and labels of one population.
#[derive(Debug, Clone, Copy)]
pub struct Population<'a> {
    pub features: &'a Matrix,
    pub metadata: &'a Matrix,
    pub mask: &'a LabelMask,
    pub classes: usize,
}

impl Population<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.metadata.rows() != n {
            return Err(Error::shape("population", self.features.shape(), self.metadata.shape()));
        }
        if self.mask.len() != n {
            return Err(Error::Config(format!(
                "{n} subjects but {} label entries",
                self.mask.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.mask.check_classes(self.classes)
    }
}

/// Records the population graph on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn population_graph_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    input: &GraphInput,
    features: &Matrix,
    metadata: &Matrix,
    vars: &ParamVars,
    stats: &NormStats,
    training: bool,
    rng: &mut R,
) -> Result<TapeGraph> {
    match input {
        GraphInput::Adaptive => build_adaptive_graph(tape, features, metadata, &vars.pae, stats, training, rng),
        GraphInput::Fixed(graph) => {
            if graph.n() != features.rows() {
                return Err(Error::shape(
                    "population_graph",
                    graph.edge_weights.shape(),
                    features.shape(),
                ));
            }
            Ok(TapeGraph::constant(tape, graph))
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` without labeled validation subjects.
    pub val_accuracy: Option<f64>,
}

/// Result of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: ModelParams,
    pub norm_stats: NormStats,
    pub history: Vec<EpochRecord>,
}

/// Deterministic eval-mode class probabilities.
pub fn predict(
    population_features: &Matrix,
    metadata: &Matrix,
    input: &GraphInput,
    params: &ModelParams,
    stats: &NormStats,
    config: &ForwardConfig,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    // Eval mode draws nothing; the generator is a formality.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = population_graph_on_tape(
        &mut tape,
        input,
        population_features,
        metadata,
        &vars,
        stats,
        false,
        &mut rng,
    )?;
    let probs = forward(&mut tape, &graph, &vars, config, Mode::Eval, &mut rng)?;
    Ok(tape.value(probs).clone())
}

/// Trains a fresh model for `config.epochs` full-population steps.
///
/// Only labeled training subjects enter the loss; all subjects take part in
/// every forward pass.
pub fn fit(population: Population<'_>, input: &GraphInput, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    population.validate()?;
    let mask = population.mask;
    if mask.indices(Split::Train).is_empty() {
        return Err(Error::Config("no labeled training subjects".into()));
    }
    let dims = config.model_dims(
        population.features.cols(),
        population.metadata.cols().max(1),
        population.classes,
    );
    let metadata_holder;
    let metadata = if population.metadata.cols() == 0 {
        metadata_holder = Matrix::zeros(population.metadata.rows(), 1);
        &metadata_holder
    } else {
        population.metadata
    };
    let mut params = init_params(&dims, config.seed)?;
    let norm_stats = NormStats::fit(metadata)?;
    let forward_cfg = config.forward_config();
    let adam_cfg = AdamConfig::new(config.learning_rate, config.weight_decay);
    let mut adam = AdamState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let val = mask.indices(Split::Val);
    let dense = mask.dense_labels(0);
    let names = params.infos();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let graph = population_graph_on_tape(
            &mut tape,
            input,
            population.features,
            metadata,
            &vars,
            &norm_stats,
            true,
            &mut rng,
        )?;
        let probs = forward(&mut tape, &graph, &vars, &forward_cfg, Mode::Train, &mut rng).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("{m} at epoch {epoch}")),
            other => other,
        })?;
        let loss = masked_cross_entropy(&mut tape, probs, mask, Split::Train)?;
        let train_loss = tape.value(loss).get(0, 0);
        if !train_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {train_loss} at epoch {epoch}"
            )));
        }
        tape.backward(loss)?;
        let grads = vars.grads(&tape);
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at epoch {epoch}",
                names[k].name
            )));
        }
        drop(tape);
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;

        let val_accuracy = if val.is_empty() {
            None
        } else {
            let p = predict(population.features, metadata, input, &params, &norm_stats, &forward_cfg)?;
            Some(accuracy(&argmax_rows(&p), &dense, &val)?)
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
    }
    Ok(Trained {
        params,
        norm_stats,
        history,
    })
}
