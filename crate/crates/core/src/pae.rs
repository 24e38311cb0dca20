//! Pairwise association encoder.
//!
//! Each subject's metadata is standardized, projected by a one-hidden-layer
//! MLP shared by both members of a pair, and scored against every other
//! subject with a cosine similarity rescaled into `[0, 1]`:
//!
//! ```text
//! h_i  = Ω² · relu(Ω¹ · x̃_i + b)
//! w_ij = h_iᵀh_j / (2‖h_i‖‖h_j‖) + 0.5
//! ```
//!
//! Weights are stored input-major (`[fan_in × fan_out]`) so a batch of row
//! vectors is projected with a single right multiplication.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TapeGraph;
use crate::numcore::{Matrix, Tape, Var};

pub const DEFAULT_LATENT_DIM: usize = 128;

/// Floor applied to per-column standard deviations.
pub const STD_EPSILON: f64 = 1e-8;

/// Per-column population mean and standard deviation of the metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(x: &Matrix) -> Result<Self> {
        let (n, m) = x.shape();
        if n == 0 {
            return Err(Error::EmptyInput {
                op: "norm_stats",
                message: "no subjects".into(),
            });
        }
        let mut mean = vec![0.0; m];
        for i in 0..n {
            for (acc, v) in mean.iter_mut().zip(x.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n as f64);
        let mut var = vec![0.0; m];
        for i in 0..n {
            for ((acc, v), mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(STD_EPSILON))
            .collect();
        Ok(NormStats { mean, std })
    }
}

/// Column-wise `(x − mean) / std`.
pub fn normalize_metadata(x: &Matrix, stats: &NormStats) -> Result<Matrix> {
    if x.cols() != stats.mean.len() || x.cols() != stats.std.len() {
        return Err(Error::shape(
            "normalize_metadata",
            x.shape(),
            (1, stats.mean.len()),
        ));
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        (x.get(i, j) - stats.mean[j]) / stats.std[j]
    }))
}

/// Trainable encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaeParams {
    /// `[M × D_h]`
    pub w1: Matrix,
    /// `[1 × D_h]`
    pub b1: Matrix,
    /// `[D_h × D_h]`
    pub w2: Matrix,
    pub dropout_rate: f64,
}

impl PaeParams {
    /// He-initialized weights and a zero bias.
    pub fn init<R: Rng + ?Sized>(
        metadata_dim: usize,
        latent_dim: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Self {
        PaeParams {
            w1: he_normal(metadata_dim, latent_dim, rng),
            b1: Matrix::zeros(1, latent_dim),
            w2: he_normal(latent_dim, latent_dim, rng),
            dropout_rate,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> PaeVars {
        PaeVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            dropout_rate: self.dropout_rate,
        }
    }
}

/// [`PaeParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PaeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub dropout_rate: f64,
}

/// Weights drawn from `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(fan_in, fan_out, |_, _| dist.sample(rng))
}

/// Latent projection of standardized metadata rows, `N×M → N×D_h`.
///
/// In training mode the hidden activation goes through inverted dropout.
pub fn project<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    params: &PaeVars,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let pre = tape.matmul(x, params.w1)?;
    let pre = tape.add_row(pre, params.b1)?;
    let mut hidden = tape.relu(pre);
    if training {
        hidden = tape.dropout(hidden, params.dropout_rate, rng)?;
    }
    tape.matmul(hidden, params.w2)
}

/// Rescaled cosine similarity between every pair of latent rows.
///
/// The result is exactly symmetric, clamped into `[0, 1]`, and has a unit
/// diagonal that carries no gradient.
pub fn pairwise_scores(tape: &mut Tape, h: Var) -> Result<Var> {
    let norms = tape.row_l2_norm(h)?;
    let unit = tape.div_col(h, norms)?;
    let unit_t = tape.transpose(unit);
    let cos = tape.matmul(unit, unit_t)?;
    // s + sᵀ is bitwise symmetric, so each pair is scored once
    let cos_t = tape.transpose(cos);
    let both = tape.add(cos, cos_t)?;
    let w = tape.scale(both, 0.25);
    let w = tape.add_scalar(w, 0.5);
    let w = tape.clamp(w, 0.0, 1.0);
    tape.set_diagonal(w, 1.0)
}

/// Adaptive population graph: imaging features as node signals, encoder
/// scores as edge weights.
#[allow(clippy::too_many_arguments)]
pub fn build_adaptive_graph<R: Rng + ?Sized>(
    tape: &mut Tape,
    features: &Matrix,
    metadata: &Matrix,
    params: &PaeVars,
    stats: &NormStats,
    training: bool,
    rng: &mut R,
) -> Result<TapeGraph> {
    if features.rows() != metadata.rows() {
        return Err(Error::shape(
            "build_adaptive_graph",
            features.shape(),
            metadata.shape(),
        ));
    }
    let normalized = normalize_metadata(metadata, stats)?;
    let x = tape.constant(normalized);
    let h = project(tape, x, params, training, rng)?;
    let weights = pairwise_scores(tape, h)?;
    let features = tape.constant(features.clone());
    Ok(TapeGraph { features, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{numerical_gradient, relative_error, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn scores(h: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let w = pairwise_scores(&mut tape, hv).unwrap();
        tape.value(w).clone()
    }

    #[test]
    fn constant_column_normalizes_to_zero() {
        let x = Matrix::from_rows(&[[2.0, 0.0], [2.0, 2.0], [2.0, 1.0]]).unwrap();
        let stats = NormStats::fit(&x).unwrap();
        assert_eq!(stats.std[0], STD_EPSILON);
        let z = normalize_metadata(&x, &stats).unwrap();
        for i in 0..3 {
            assert_eq!(z.get(i, 0), 0.0);
        }
    }

    #[test]
    fn two_point_standardization() {
        let x = Matrix::from_rows(&[[0.0], [2.0]]).unwrap();
        let z = normalize_metadata(&x, &NormStats::fit(&x).unwrap()).unwrap();
        assert_eq!(z.as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalized_columns_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Matrix::from_fn(20, 5, |_, j| rng.random_range(-3.0..3.0) * (j + 1) as f64 + j as f64);
        let z = normalize_metadata(&x, &NormStats::fit(&x).unwrap()).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..20).map(|i| z.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 20.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "column {j} var {var}");
        }
    }

    #[test]
    fn column_mismatch_is_shape_error() {
        let stats = NormStats::fit(&Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(
            normalize_metadata(&Matrix::zeros(3, 4), &stats),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = PaeParams::init(3, 8, 0.2, &mut rng);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(Matrix::zeros(4, 3));
        let h = project(&mut tape, x, &vars, false, &mut rng).unwrap();
        assert_eq!(tape.value(h), &Matrix::zeros(4, 8));
    }

    #[test]
    fn zero_dropout_training_equals_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = PaeParams::init(3, 8, 0.0, &mut rng);
        let x = random(5, 3, &mut rng);
        let run = |training: bool| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let h = project(&mut tape, xv, &vars, training, &mut r).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = PaeParams::init(3, 6, 0.0, &mut rng);
        let x = random(5, 3, &mut rng);
        let weight = random(5, 6, &mut rng);
        let eval = |w1: &Matrix, tape: &mut Tape, grad: bool| -> Result<(Var, Var)> {
            let mut p = params.clone();
            p.w1 = w1.clone();
            let mut vars = p.bind(tape);
            if !grad {
                vars.w1 = tape.constant(w1.clone());
            }
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let h = project(tape, xv, &vars, false, &mut r)?;
            let wv = tape.constant(weight.clone());
            let prod = tape.mul(h, wv)?;
            Ok((tape.sum_all(prod)?, vars.w1))
        };
        let mut tape = Tape::new();
        let (loss, w1) = eval(&params.w1, &mut tape, true).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(w1).unwrap().clone();
        let numeric = numerical_gradient(&[params.w1.clone()], FD_STEP, |ms| {
            let mut t = Tape::new();
            let (l, _) = eval(&ms[0], &mut t, false)?;
            Ok(t.value(l).get(0, 0))
        })
        .unwrap();
        let err = relative_error(&analytic, &numeric[0]);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn analytic_anchor_cases() {
        let h = Matrix::from_rows(&[
            [1.0, 2.0, 0.0],
            [1.0, 2.0, 0.0],
            [-2.0, 1.0, 0.0],
            [-1.0, -2.0, 0.0],
        ])
        .unwrap();
        let w = scores(&h);
        assert!((w.get(0, 1) - 1.0).abs() < 1e-12, "parallel");
        assert!((w.get(0, 2) - 0.5).abs() < 1e-12, "orthogonal");
        assert!(w.get(0, 3).abs() < 1e-12, "antiparallel");
        for i in 0..4 {
            assert_eq!(w.get(i, i), 1.0);
        }
    }

    #[test]
    fn scores_symmetric_bounded_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let h = random(12, 7, &mut rng);
        let w = scores(&h);
        assert_eq!(w.max_asymmetry(), 0.0);
        assert!(w.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        for c in [0.1, 3.0, 250.0] {
            assert!(scores(&h.scale(c)).max_abs_diff(&w) < 1e-12, "c={c}");
        }
    }

    #[test]
    fn single_subject_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = PaeParams::init(2, 4, 0.2, &mut rng);
        let meta = Matrix::from_rows(&[[1.0, 5.0]]).unwrap();
        let stats = NormStats::fit(&meta).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let g = build_adaptive_graph(
            &mut tape,
            &Matrix::zeros(1, 3),
            &meta,
            &vars,
            &stats,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tape.value(g.weights), &Matrix::ones(1, 1));
    }

    #[test]
    fn identical_metadata_gives_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let params = PaeParams::init(3, 16, 0.2, &mut rng);
        let meta = Matrix::from_fn(5, 3, |_, j| j as f64 * 1.5 - 0.3);
        // fitted stats would standardize to zero; use shifted stats instead
        let stats = NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let g = build_adaptive_graph(
            &mut tape,
            &Matrix::zeros(5, 2),
            &meta,
            &vars,
            &stats,
            false,
            &mut rng,
        )
        .unwrap();
        let w = tape.value(g.weights);
        assert!(w.max_abs_diff(&Matrix::ones(5, 5)) < 1e-12);
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let params = PaeParams::init(2, 4, 0.0, &mut rng);
        let meta = Matrix::zeros(3, 2);
        let stats = NormStats::fit(&meta).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let r = build_adaptive_graph(
            &mut tape,
            &Matrix::zeros(4, 2),
            &meta,
            &vars,
            &stats,
            false,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
