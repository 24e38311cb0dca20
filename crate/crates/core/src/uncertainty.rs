//! Monte-Carlo edge dropout: repeated inference under random edge removal,
//! summarized as per-subject mean class probabilities and predictive
//! entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{PopulationGraph, TapeGraph};
use crate::metrics::argmax_rows;
use crate::model::{forward, ForwardConfig, Mode, ModelParams};
use crate::numcore::{Matrix, Tape};
use crate::pae::NormStats;
use crate::train::{population_graph_on_tape, GraphInput};

/// Aggregated Monte-Carlo predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    /// Mean class probabilities over passes, `N × C_k`.
    pub mean_probs: Matrix,
    /// Predictive entropy of each row of `mean_probs`, in nats.
    pub entropy: Vec<f64>,
    pub t_passes: usize,
}

impl UncertaintyReport {
    /// Argmax of the mean probabilities; ties go to the lowest class.
    pub fn predictions(&self) -> Vec<usize> {
        mced_ensemble_predict(self)
    }

    /// Mean entropy over `subjects`, `None` when empty.
    pub fn mean_entropy(&self, subjects: &[usize]) -> Option<f64> {
        if subjects.is_empty() {
            return None;
        }
        Some(subjects.iter().map(|&i| self.entropy[i]).sum::<f64>() / subjects.len() as f64)
    }

    pub fn mean_entropy_all(&self) -> f64 {
        self.entropy.iter().sum::<f64>() / self.entropy.len().max(1) as f64
    }
}

/// `−Σ_c p_c ln p_c` with `0 · ln 0 = 0`, clamped to `[0, ln C]`.
pub fn predictive_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.clamp(0.0, (p.len().max(1) as f64).ln())
}

pub fn mced_ensemble_predict(report: &UncertaintyReport) -> Vec<usize> {
    argmax_rows(&report.mean_probs)
}

/// Population graph with deterministic (eval-mode) edge weights.
pub fn resolve_graph(
    input: &GraphInput,
    features: &Matrix,
    metadata: &Matrix,
    params: &ModelParams,
    stats: &NormStats,
) -> Result<PopulationGraph> {
    match input {
        GraphInput::Fixed(g) => Ok(g.clone()),
        GraphInput::Adaptive => {
            let mut tape = Tape::new();
            let vars = params.bind_frozen(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let g = population_graph_on_tape(
                &mut tape, input, features, metadata, &vars, stats, false, &mut rng,
            )?;
            PopulationGraph::new(features.clone(), tape.value(g.weights).clone())
        }
    }
}

/// One forward pass with only edge dropout active, on RNG stream `pass`.
fn sampled_pass(
    graph: &PopulationGraph,
    params: &ModelParams,
    config: &ForwardConfig,
    seed: u64,
    pass: u64,
) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pass);
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let g = TapeGraph::constant(&mut tape, graph);
    let probs = forward(&mut tape, &g, &vars, config, Mode::EdgeSampling, &mut rng)?;
    Ok(tape.value(probs).clone())
}

/// `t_passes` forward passes, each with an independent edge-dropout draw
/// at `config.edge_dropout`; vertex-feature dropout stays off.
///
/// Passes run concurrently but are summed in pass order with compensated
/// summation, so the report does not depend on the thread count.
pub fn mced(
    graph: &PopulationGraph,
    params: &ModelParams,
    config: &ForwardConfig,
    t_passes: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    if t_passes == 0 {
        return Err(Error::domain("mced", "need at least one pass"));
    }
    let passes: Vec<Matrix> = (0..t_passes as u64)
        .into_par_iter()
        .map(|pass| sampled_pass(graph, params, config, seed, pass))
        .collect::<Result<_>>()?;
    let (n, c) = passes[0].shape();
    let mut sum = Matrix::zeros(n, c);
    let mut comp = vec![0.0; n * c];
    for p in &passes {
        for ((s, e), &x) in sum.as_mut_slice().iter_mut().zip(&mut comp).zip(p.as_slice()) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *e += (*s - t) + x;
            } else {
                *e += (x - t) + *s;
            }
            *s = t;
        }
    }
    let inv = 1.0 / t_passes as f64;
    for (s, e) in sum.as_mut_slice().iter_mut().zip(&comp) {
        *s = (*s + e) * inv;
    }
    let entropy = (0..n).map(|i| predictive_entropy(sum.row(i))).collect();
    Ok(UncertaintyReport {
        mean_probs: sum,
        entropy,
        t_passes,
    })
}
