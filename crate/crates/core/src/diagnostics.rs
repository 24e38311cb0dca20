//! End-to-end gradient check of the full model on a tiny random
//! population: reverse-mode gradients of the masked cross-entropy against
//! central finite differences, for every parameter group including the
//! pairwise association encoder and the edge weights themselves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{TapeGraph, DEFAULT_LAMBDA_MAX};
use crate::model::{forward, init_params, ForwardConfig, Mode, ModelDims, ModelParams, ParamVars};
use crate::numcore::gradcheck::{numerical_gradient, relative_error, FD_STEP};
use crate::numcore::{Matrix, Tape, Var};
use crate::pae::{build_adaptive_graph, NormStats};
use crate::train::{masked_cross_entropy, LabelMask, Split};

/// Largest relative error accepted by [`GradCheckReport::passed`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Problem size of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSpec {
    pub subjects: usize,
    pub input_dim: usize,
    pub metadata_dim: usize,
    pub order: usize,
    pub layers: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub predictor_hidden: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            subjects: 6,
            input_dim: 4,
            metadata_dim: 3,
            order: 2,
            layers: 2,
            hidden_width: 3,
            latent_dim: 5,
            predictor_hidden: 6,
            classes: 2,
            seed: 0,
        }
    }
}

/// Worst relative error within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub max_relative_error: f64,
    /// Largest analytic gradient entry, to show the check is not vacuous.
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub spec: GradCheckSpec,
    /// Encoder, each convolution layer, the predictor, then `edge_weights`.
    pub groups: Vec<GroupResult>,
    /// Frobenius norm of the loss gradient with respect to the edge weights.
    pub edge_weight_grad_norm: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&GroupResult> {
        self.groups
            .iter()
            .filter(|g| !(g.max_relative_error < GRADCHECK_TOLERANCE))
            .collect()
    }

    /// All groups within tolerance and, for `K ≥ 1`, a non-zero edge-weight
    /// gradient.
    pub fn passed(&self) -> bool {
        self.failures().is_empty() && (self.spec.order == 0 || self.edge_weight_grad_norm > 0.0)
    }
}

struct Problem {
    features: Matrix,
    metadata: Matrix,
    stats: NormStats,
    mask: LabelMask,
    config: ForwardConfig,
}

impl Problem {
    /// Loss with the graph built by the encoder; returns the loss, the
    /// parameter leaves and the edge weights.
    fn loss_through_encoder(&self, params: &ModelParams, tape: &mut Tape, trainable: bool) -> Result<(Var, ParamVars, Var)> {
        let vars = if trainable {
            params.bind(tape)
        } else {
            params.bind_frozen(tape)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let graph = build_adaptive_graph(tape, &self.features, &self.metadata, &vars.pae, &self.stats, false, &mut rng)?;
        let probs = forward(tape, &graph, &vars, &self.config, Mode::Eval, &mut rng)?;
        let loss = masked_cross_entropy(tape, probs, &self.mask, Split::Train)?;
        Ok((loss, vars, graph.weights))
    }

    /// Loss with the edge weights supplied directly as a leaf.
    fn loss_given_weights(&self, params: &ModelParams, w: &Matrix, tape: &mut Tape, trainable: bool) -> Result<(Var, Var)> {
        let vars = params.bind_frozen(tape);
        let features = tape.constant(self.features.clone());
        let weights = if trainable {
            tape.param(w.clone())
        } else {
            tape.constant(w.clone())
        };
        let graph = TapeGraph { features, weights };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = forward(tape, &graph, &vars, &self.config, Mode::Eval, &mut rng)?;
        Ok((masked_cross_entropy(tape, probs, &self.mask, Split::Train)?, weights))
    }
}

fn with_tensors(base: &ModelParams, tensors: &[Matrix]) -> ModelParams {
    let mut p = base.clone();
    for (dst, src) in p.tensors_mut().into_iter().zip(tensors) {
        dst.clone_from(src);
    }
    p
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Runs the check in deterministic (eval) mode.
pub fn run_gradient_check(spec: &GradCheckSpec) -> Result<GradCheckReport> {
    if spec.subjects < 2 {
        return Err(Error::Config("gradient check needs at least 2 subjects".into()));
    }
    if spec.classes < 2 {
        return Err(Error::Config("gradient check needs at least 2 classes".into()));
    }
    let dims = ModelDims {
        input_dim: spec.input_dim,
        metadata_dim: spec.metadata_dim,
        latent_dim: spec.latent_dim,
        hidden: vec![spec.hidden_width; spec.layers],
        predictor_hidden: spec.predictor_hidden,
        classes: spec.classes,
        order: spec.order,
        pae_dropout: 0.0,
    };
    let mut params = init_params(&dims, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    // Zero biases put dead-input rows exactly on the ReLU kink, where
    // central differences see half the slope.
    let infos = params.infos();
    for (tensor, info) in params.tensors_mut().into_iter().zip(&infos) {
        if info.is_bias {
            for v in tensor.as_mut_slice() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let n = spec.subjects;
    let mut gaussian = |r, c| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let features = gaussian(n, spec.input_dim);
    let metadata = gaussian(n, spec.metadata_dim);
    let stats = NormStats::fit(&metadata)?;
    // Two of every three subjects are labeled for training.
    let labels = (0..n).map(|i| Some(i % spec.classes)).collect();
    let splits = (0..n)
        .map(|i| if i % 3 == 2 { Split::Test } else { Split::Train })
        .collect();
    let problem = Problem {
        features,
        metadata,
        stats,
        mask: LabelMask::new(labels, splits)?,
        config: ForwardConfig {
            dropout: 0.0,
            edge_dropout: 0.0,
            lambda_max: DEFAULT_LAMBDA_MAX,
        },
    };

    let mut tape = Tape::new();
    let (loss, vars, weights) = problem.loss_through_encoder(&params, &mut tape, true)?;
    tape.backward(loss)?;
    let grads = vars.grads(&tape);
    let weights = tape.value(weights).clone();
    drop(tape);
    let tensors: Vec<Matrix> = params.tensors().into_iter().cloned().collect();
    let numeric = numerical_gradient(&tensors, FD_STEP, |ts| {
        let p = with_tensors(&params, ts);
        let mut t = Tape::new();
        let (l, _, _) = problem.loss_through_encoder(&p, &mut t, false)?;
        Ok(t.value(l).get(0, 0))
    })?;

    let mut groups: Vec<GroupResult> = Vec::new();
    for ((info, a), num) in params.infos().iter().zip(&grads).zip(&numeric) {
        let err = relative_error(a, num);
        let group = group_of(&info.name);
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.max_relative_error = g.max_relative_error.max(err);
                g.max_abs_gradient = g.max_abs_gradient.max(a.max_abs());
            }
            None => groups.push(GroupResult {
                group: group.to_string(),
                max_relative_error: err,
                max_abs_gradient: a.max_abs(),
            }),
        }
    }

    let mut tape = Tape::new();
    let (loss, w_var) = problem.loss_given_weights(&params, &weights, &mut tape, true)?;
    tape.backward(loss)?;
    let w_grad = tape
        .grad(w_var)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(n, n));
    let w_numeric = numerical_gradient(std::slice::from_ref(&weights), FD_STEP, |ws| {
        let mut t = Tape::new();
        let (l, _) = problem.loss_given_weights(&params, &ws[0], &mut t, false)?;
        Ok(t.value(l).get(0, 0))
    })?;
    groups.push(GroupResult {
        group: "edge_weights".into(),
        max_relative_error: relative_error(&w_grad, &w_numeric[0]),
        max_abs_gradient: w_grad.max_abs(),
    });

    Ok(GradCheckReport {
        spec: spec.clone(),
        groups,
        edge_weight_grad_norm: w_grad.frobenius_norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_passes() {
        let report = run_gradient_check(&GradCheckSpec::default()).unwrap();
        let names: Vec<_> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["pae", "gc0", "gc1", "predictor", "edge_weights"]);
        for g in &report.groups {
            assert!(g.max_abs_gradient > 0.0, "{} has a zero gradient", g.group);
        }
        assert!(report.passed(), "{:?}", report.groups);
    }

    #[test]
    fn order_zero_has_no_edge_gradient() {
        let report = run_gradient_check(&GradCheckSpec {
            order: 0,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(report.edge_weight_grad_norm, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn degenerate_specs_rejected() {
        let one = GradCheckSpec {
            subjects: 1,
            ..Default::default()
        };
        assert!(run_gradient_check(&one).is_err());
    }
}
