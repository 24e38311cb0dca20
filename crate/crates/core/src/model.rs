//! The graph convolutional network: `L_G` Chebyshev convolution layers
//! with ReLU, jumping-connection fusion by vertex-wise concatenation, and a
//! two-layer vertex-wise predictor ending in a softmax.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{chebyshev_basis, normalized_laplacian, rescale_laplacian, TapeGraph};
use crate::numcore::{Matrix, Tape, Var};
use crate::pae::{he_normal, NormStats, PaeParams, PaeVars};
use crate::train::edge_dropout;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Imaging feature width `C`.
    pub input_dim: usize,
    /// Metadata width `M` after categorical expansion.
    pub metadata_dim: usize,
    /// Encoder latent width `D_h`.
    pub latent_dim: usize,
    /// Output width of each graph convolution layer; its length is `L_G`.
    pub hidden: Vec<usize>,
    pub predictor_hidden: usize,
    /// Number of classes `C_k`.
    pub classes: usize,
    /// Chebyshev order `K`.
    pub order: usize,
    pub pae_dropout: f64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("metadata_dim", self.metadata_dim),
            ("latent_dim", self.latent_dim),
            ("predictor_hidden", self.predictor_hidden),
            ("classes", self.classes),
            ("layers", self.hidden.len()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(l) = self.hidden.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("hidden width of layer {l} must be positive")));
        }
        if !(0.0..=1.0).contains(&self.pae_dropout) {
            return Err(Error::Config(format!(
                "pae_dropout {} outside [0, 1]",
                self.pae_dropout
            )));
        }
        Ok(())
    }

    /// Predictor input width: the sum of every layer's width.
    pub fn fused_width(&self) -> usize {
        self.hidden.iter().sum()
    }
}

/// `K + 1` filter taps `Θ_k` of one convolution layer, each `[C_in × C_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebLayerParams {
    pub filters: Vec<Matrix>,
}

impl ChebLayerParams {
    pub fn order(&self) -> usize {
        self.filters.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Every trainable parameter of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub pae: PaeParams,
    pub layers: Vec<ChebLayerParams>,
    pub predictor: PredictorParams,
}

/// Name and decay eligibility of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub is_bias: bool,
}

impl ModelParams {
    /// Canonical parameter order shared by [`Self::tensors`],
    /// [`Self::tensors_mut`], [`Self::infos`] and [`ParamVars::vars`].
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.pae.w1, &self.pae.b1, &self.pae.w2];
        for layer in &self.layers {
            out.extend(layer.filters.iter());
        }
        let p = &self.predictor;
        out.extend([&p.w1, &p.b1, &p.w2, &p.b2]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.pae.w1, &mut self.pae.b1, &mut self.pae.w2];
        for layer in &mut self.layers {
            out.extend(layer.filters.iter_mut());
        }
        let p = &mut self.predictor;
        out.extend([&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2]);
        out
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        let info = |name: String, is_bias| ParamInfo { name, is_bias };
        let mut out = vec![
            info("pae.w1".into(), false),
            info("pae.b1".into(), true),
            info("pae.w2".into(), false),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for k in 0..layer.filters.len() {
                out.push(info(format!("gc{l}.theta{k}"), false));
            }
        }
        out.extend([
            info("predictor.w1".into(), false),
            info("predictor.b1".into(), true),
            info("predictor.w2".into(), false),
            info("predictor.b2".into(), true),
        ]);
        out
    }

    /// Records the parameters as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.bind_with(tape, true)
    }

    /// Records the parameters as constants, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let pae = PaeVars {
            w1: leaf(&self.pae.w1),
            b1: leaf(&self.pae.b1),
            w2: leaf(&self.pae.w2),
            dropout_rate: self.pae.dropout_rate,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| l.filters.iter().map(&mut leaf).collect())
            .collect();
        let p = &self.predictor;
        let predictor = [leaf(&p.w1), leaf(&p.b1), leaf(&p.w2), leaf(&p.b2)];
        ParamVars {
            pae,
            layers,
            predictor,
        }
    }
}

/// [`ModelParams`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub pae: PaeVars,
    pub layers: Vec<Vec<Var>>,
    /// `w1, b1, w2, b2`
    pub predictor: [Var; 4],
}

impl ParamVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.pae.w1, self.pae.b1, self.pae.w2];
        for layer in &self.layers {
            out.extend(layer.iter().copied());
        }
        out.extend(self.predictor);
        out
    }

    /// Accumulated gradients in canonical order; zeros for frozen leaves.
    pub fn grads(&self, tape: &Tape) -> Vec<Matrix> {
        self.vars()
            .into_iter()
            .map(|v| match tape.grad(v) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = tape.shape(v);
                    Matrix::zeros(r, c)
                }
            })
            .collect()
    }
}

/// He-initialized parameters; biases start at zero. Deterministic in `seed`.
///
/// Chebyshev filters count all `K + 1` taps in their fan-in.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pae = PaeParams::init(dims.metadata_dim, dims.latent_dim, dims.pae_dropout, &mut rng);
    let mut layers = Vec::with_capacity(dims.hidden.len());
    let mut c_in = dims.input_dim;
    for &c_out in &dims.hidden {
        let fan_in = c_in * (dims.order + 1);
        let std_fix = (c_in as f64 / fan_in as f64).sqrt();
        let filters = (0..=dims.order)
            .map(|_| he_normal(c_in, c_out, &mut rng).scale(std_fix))
            .collect();
        layers.push(ChebLayerParams { filters });
        c_in = c_out;
    }
    let predictor = PredictorParams {
        w1: he_normal(dims.fused_width(), dims.predictor_hidden, &mut rng),
        b1: Matrix::zeros(1, dims.predictor_hidden),
        w2: he_normal(dims.predictor_hidden, dims.classes, &mut rng),
        b2: Matrix::zeros(1, dims.classes),
    };
    Ok(ModelParams {
        dims: dims.clone(),
        pae,
        layers,
        predictor,
    })
}

/// Which sources of randomness a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Edge dropout, vertex-feature dropout and encoder dropout.
    Train,
    /// Deterministic inference.
    Eval,
    /// Edge dropout only; used by Monte-Carlo edge dropout.
    EdgeSampling,
}

impl Mode {
    pub fn drops_edges(self) -> bool {
        matches!(self, Mode::Train | Mode::EdgeSampling)
    }

    pub fn drops_features(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// Rates and spectral scale used by [`forward`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub dropout: f64,
    pub edge_dropout: f64,
    pub lambda_max: f64,
}

/// `Σ_k T_k(L̃) H Θ_k`, no bias.
pub fn cheb_conv(tape: &mut Tape, h: Var, lt: Var, filters: &[Var]) -> Result<Var> {
    let Some(first) = filters.first() else {
        return Err(Error::Config("convolution layer without filters".into()));
    };
    let shape = tape.shape(*first);
    if let Some(bad) = filters.iter().find(|f| tape.shape(**f) != shape) {
        return Err(Error::shape("cheb_conv", shape, tape.shape(*bad)));
    }
    if tape.shape(h).1 != shape.0 {
        return Err(Error::shape("cheb_conv", tape.shape(h), shape));
    }
    let basis = chebyshev_basis(tape, lt, h, filters.len() - 1)?;
    let mut out = tape.matmul(basis[0], filters[0])?;
    for (term, theta) in basis.iter().zip(filters).skip(1) {
        let contrib = tape.matmul(*term, *theta)?;
        out = tape.add(out, contrib)?;
    }
    Ok(out)
}

/// Class probabilities for every subject, `N × C_k`.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &TapeGraph,
    params: &ParamVars,
    config: &ForwardConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let mut w = graph.weights;
    if mode.drops_edges() {
        w = edge_dropout(tape, w, config.edge_dropout, rng)?;
    }
    let l = normalized_laplacian(tape, w)?;
    let lt = rescale_laplacian(tape, l, config.lambda_max)?;

    let mut h = graph.features;
    let mut depth_outputs = Vec::with_capacity(params.layers.len());
    for filters in &params.layers {
        let conv = cheb_conv(tape, h, lt, filters)?;
        h = tape.relu(conv);
        if mode.drops_features() {
            h = tape.dropout(h, config.dropout, rng)?;
        }
        depth_outputs.push(h);
    }
    let fused = tape.concat_cols(&depth_outputs)?;

    let [w1, b1, w2, b2] = params.predictor;
    let z = tape.matmul(fused, w1)?;
    let z = tape.add_row(z, b1)?;
    let z = tape.relu(z);
    let z = tape.matmul(z, w2)?;
    let z = tape.add_row(z, b2)?;
    tape.softmax_rows(z)
}

/// Portable parameter checkpoint, serialized as JSON with matrices in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub graph: crate::graph::GraphKind,
    /// Settings that rebuild a fixed baseline graph; absent for the
    /// adaptive graph.
    pub baseline: Option<crate::datagen::BaselineParams>,
    pub edge_dropout: f64,
    pub dropout: f64,
    pub lambda_max: f64,
    pub norm_stats: NormStats,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("checkpoint serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.params.dims.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
