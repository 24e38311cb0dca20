//! Population graphs and the spectral machinery used by the convolution
//! layers: normalized Laplacian, rescaling, and the Chebyshev basis.
//!
//! Every operation is recorded on a [`Tape`], so gradients flow from the
//! convolution outputs back into the edge weights.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

/// Upper bound of the normalized Laplacian spectrum, used in place of a
/// per-graph eigensolve during training.
pub const DEFAULT_LAMBDA_MAX: f64 = 2.0;

/// How the population graph's edges are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    /// Learned by the pairwise association encoder.
    Adaptive,
    /// Symmetric Bernoulli edges with unit weight.
    Random,
    /// Thresholded per-column metadata similarity.
    Affinity,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Random, GraphKind::Affinity, GraphKind::Adaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Adaptive => "adaptive",
            GraphKind::Random => "random",
            GraphKind::Affinity => "affinity",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GraphKind::Adaptive),
            "random" => Ok(GraphKind::Random),
            "affinity" => Ok(GraphKind::Affinity),
            other => Err(Error::Config(format!(
                "unknown graph kind {other:?} (expected adaptive, random or affinity)"
            ))),
        }
    }
}

/// Dense population graph: one node per subject, every pair weighted.
///
/// Edge weights are symmetric, lie in `[0, 1]`, and carry unit self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationGraph {
    pub node_features: Matrix,
    pub edge_weights: Matrix,
}

impl PopulationGraph {
    pub fn new(node_features: Matrix, edge_weights: Matrix) -> Result<Self> {
        let g = PopulationGraph {
            node_features,
            edge_weights,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.edge_weights.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.edge_weights;
        let n = w.rows();
        if w.cols() != n || self.node_features.rows() != n {
            return Err(Error::shape(
                "population_graph",
                self.node_features.shape(),
                w.shape(),
            ));
        }
        for i in 0..n {
            if w.get(i, i) != 1.0 {
                return Err(Error::domain(
                    "population_graph",
                    format!("diagonal entry {i} is {} (expected 1)", w.get(i, i)),
                ));
            }
            for j in 0..n {
                let v = w.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::domain(
                        "population_graph",
                        format!("weight ({i}, {j}) = {v} outside [0, 1]"),
                    ));
                }
                if v != w.get(j, i) {
                    return Err(Error::domain(
                        "population_graph",
                        format!("weights ({i}, {j}) and ({j}, {i}) differ"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A population graph whose tensors live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeGraph {
    pub features: Var,
    pub weights: Var,
}

impl TapeGraph {
    /// Places a fixed graph on the tape as constants.
    pub fn constant(tape: &mut Tape, graph: &PopulationGraph) -> Self {
        TapeGraph {
            features: tape.constant(graph.node_features.clone()),
            weights: tape.constant(graph.edge_weights.clone()),
        }
    }
}

/// `L = I − D^{-1/2} W D^{-1/2}` with `D = diag(row sums of W)`.
///
/// Zero-degree nodes take `D^{-1/2} = 0`, which leaves an identity row.
pub fn normalized_laplacian(tape: &mut Tape, w: Var) -> Result<Var> {
    let wv = tape.value(w);
    let (r, c) = wv.shape();
    if r != c {
        return Err(Error::shape("normalized_laplacian", (r, c), (r, r)));
    }
    if let Some(bad) = wv.as_slice().iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::domain(
            "normalized_laplacian",
            format!("negative edge weight {bad}"),
        ));
    }
    let degree = tape.row_sum(w)?;
    let inv_sqrt = tape.rsqrt_or_zero(degree);
    let inv_sqrt_t = tape.transpose(inv_sqrt);
    let left = tape.mul_col(w, inv_sqrt)?;
    let adj = tape.mul_row(left, inv_sqrt_t)?;
    let eye = tape.constant(Matrix::identity(r));
    tape.sub(eye, adj)
}

/// `L̃ = 2L / λ_max − I`.
pub fn rescale_laplacian(tape: &mut Tape, l: Var, lambda_max: f64) -> Result<Var> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::domain(
            "rescale_laplacian",
            format!("lambda_max must be positive, got {lambda_max}"),
        ));
    }
    let n = tape.shape(l).0;
    let scaled = tape.scale(l, 2.0 / lambda_max);
    let eye = tape.constant(Matrix::identity(n));
    tape.sub(scaled, eye)
}

/// `[T_0(L̃)X, …, T_K(L̃)X]` through the three-term recursion, one
/// matrix product per order.
pub fn chebyshev_basis(tape: &mut Tape, lt: Var, x: Var, order: usize) -> Result<Vec<Var>> {
    let (n, m) = tape.shape(lt);
    if n != m || tape.shape(x).0 != n {
        return Err(Error::shape("chebyshev_basis", (n, m), tape.shape(x)));
    }
    let mut terms = Vec::with_capacity(order + 1);
    terms.push(x);
    if order >= 1 {
        terms.push(tape.matmul(lt, x)?);
    }
    for k in 2..=order {
        let prod = tape.matmul(lt, terms[k - 1])?;
        let doubled = tape.scale(prod, 2.0);
        terms.push(tape.sub(doubled, terms[k - 2])?);
    }
    Ok(terms)
}

/// Normalized Laplacian of a plain weight matrix.
pub fn laplacian_matrix(w: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let l = normalized_laplacian(&mut tape, wv)?;
    Ok(tape.value(l).clone())
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if m.rows() != m.cols() {
        return Err(Error::shape("symmetric_eigen", m.shape(), (m.rows(), m.rows())));
    }
    let n = m.rows();
    let dm = DMatrix::from_row_slice(n, n, m.as_slice());
    let eig = SymmetricEigen::new(dm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

/// Exact largest eigenvalue of a symmetric matrix.
pub fn lambda_max(m: &Matrix) -> Result<f64> {
    let (values, _) = symmetric_eigen(m)?;
    values
        .last()
        .copied()
        .ok_or_else(|| Error::domain("lambda_max", "empty matrix"))
}
