//! The graph vector-quantization masked autoencoder (gVQ-MAE).
//!
//! Pipeline per graph: mask a fraction of node feature rows, run a two-layer
//! mean-aggregation message-passing encoder, snap each embedding to its
//! nearest token in every codebook head, mix the per-head tokens through a
//! shared projection, and decode node attributes with a linear map.

mod checkpoint;
mod encoder;
mod loss;
mod optim;
mod quantize;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorArchive, ARCHIVE_VERSION};
pub use encoder::{encode, select_masked_rows, GraphTensors};
pub use loss::{
    build_pretrain_loss, loss_feat, loss_topo, pretrain_loss, LossBreakdown, LossTerms, PretrainTrace,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use quantize::{nearest_tokens, quantize, Quantized};
pub use train::{local_train, LocalTrainResult, TrainConfig};

pub(crate) use encoder::ParamVars;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of initial weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub feature_dim: usize,
    /// Whether the encoder carries edge-feature weights (`feature_dim × hidden_dim`).
    pub edge_features: bool,
    pub hidden_dim: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(Error::config(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One mean-aggregation message-passing layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub w_self: Tensor,
    pub w_neighbor: Tensor,
    pub w_edge: Option<Tensor>,
    pub bias: Tensor,
}

impl SageLayer {
    fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, d_edge: Option<usize>, rng: &mut R) -> Self {
        Self {
            w_self: Tensor::randn(&[d_in, d_out], INIT_STD, rng),
            w_neighbor: Tensor::randn(&[d_in, d_out], INIT_STD, rng),
            w_edge: d_edge.map(|d_e| Tensor::randn(&[d_e, d_out], INIT_STD, rng)),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: [SageLayer; 2],
}

/// `heads × tokens × hidden_dim` token vectors plus the shared
/// `(heads·hidden_dim) × hidden_dim` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub tokens: Tensor,
    pub projection: Tensor,
}

impl Codebook {
    pub fn heads(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn token(&self, head: usize, j: usize) -> &[f64] {
        token_row(&self.tokens, head, j)
    }
}

/// Row `j` of head `head` in an `H × N × d` token tensor.
pub fn token_row(tokens: &Tensor, head: usize, j: usize) -> &[f64] {
    let n = tokens.shape()[1];
    tokens.row(head * n + j)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    /// `hidden_dim × feature_dim`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub codebook: Codebook,
    pub decoder: DecoderParams,
    /// Learnable vector substituted for masked feature rows.
    pub mask_token: Tensor,
}

impl ModelParams {
    /// Weights ~ `N(0, INIT_STD²)`, zero biases, tokens drawn from a unit
    /// Gaussian and normalized to unit length.
    pub fn init<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let d_edge = dims.edge_features.then_some(dims.feature_dim);
        let layers = [
            SageLayer::init(dims.feature_dim, dims.hidden_dim, d_edge, rng),
            SageLayer::init(dims.hidden_dim, dims.hidden_dim, d_edge, rng),
        ];
        let mut tokens = Tensor::randn(&[dims.heads, dims.tokens, dims.hidden_dim], 1.0, rng);
        for i in 0..tokens.row_count() {
            let row = tokens.row_mut(i);
            let norm = crate::tensor::l2_norm(row);
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        let projection = Tensor::randn(&[dims.heads * dims.hidden_dim, dims.hidden_dim], INIT_STD, rng);
        let decoder = DecoderParams {
            weight: Tensor::randn(&[dims.hidden_dim, dims.feature_dim], INIT_STD, rng),
            bias: Tensor::zeros(&[dims.feature_dim]),
        };
        let mask_token = Tensor::randn(&[dims.feature_dim], INIT_STD, rng);
        Ok(Self {
            encoder: EncoderParams { layers },
            codebook: Codebook { tokens, projection },
            decoder,
            mask_token,
        })
    }

    pub fn dims(&self) -> ModelDims {
        let tok = self.codebook.tokens.shape();
        ModelDims {
            feature_dim: self.mask_token.numel(),
            edge_features: self.encoder.layers[0].w_edge.is_some(),
            hidden_dim: tok[2],
            heads: tok[0],
            tokens: tok[1],
        }
    }

    /// Parameter names in canonical order; the codebook tokens come last.
    pub fn slot_names(dims: &ModelDims) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..2 {
            names.push(format!("encoder.{l}.self"));
            names.push(format!("encoder.{l}.neighbor"));
            if dims.edge_features {
                names.push(format!("encoder.{l}.edge"));
            }
            names.push(format!("encoder.{l}.bias"));
        }
        names.extend(
            ["codebook.projection", "decoder.weight", "decoder.bias", "mask_token", "codebook.tokens"]
                .map(String::from),
        );
        names
    }

    /// All parameter tensors in canonical order.
    pub fn slots(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder.layers {
            out.push(&layer.w_self);
            out.push(&layer.w_neighbor);
            if let Some(e) = &layer.w_edge {
                out.push(e);
            }
            out.push(&layer.bias);
        }
        out.extend([
            &self.codebook.projection,
            &self.decoder.weight,
            &self.decoder.bias,
            &self.mask_token,
            &self.codebook.tokens,
        ]);
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.encoder.layers {
            out.push(&mut layer.w_self);
            out.push(&mut layer.w_neighbor);
            if let Some(e) = &mut layer.w_edge {
                out.push(e);
            }
            out.push(&mut layer.bias);
        }
        out.push(&mut self.codebook.projection);
        out.push(&mut self.decoder.weight);
        out.push(&mut self.decoder.bias);
        out.push(&mut self.mask_token);
        out.push(&mut self.codebook.tokens);
        out
    }

    /// Every parameter except the codebook tokens.
    pub fn other_params(&self) -> ParamSet {
        let slots = self.slots();
        ParamSet(slots[..slots.len() - 1].iter().map(|t| (*t).clone()).collect())
    }

    /// Replaces everything but the tokens, checking shapes.
    pub fn set_other_params(&mut self, other: &ParamSet) -> Result<()> {
        let mut slots = self.slots_mut();
        slots.pop();
        if slots.len() != other.0.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                other.0.len()
            )));
        }
        for (dst, src) in slots.iter().zip(&other.0) {
            dst.expect_same_shape(src)?;
        }
        for (dst, src) in slots.into_iter().zip(&other.0) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn set_tokens(&mut self, tokens: Tensor) -> Result<()> {
        self.codebook.tokens.expect_same_shape(&tokens)?;
        self.codebook.tokens = tokens;
        Ok(())
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_slots(dims: &ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        let mut template = Self::init(dims, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let slots = template.slots_mut();
        if slots.len() != tensors.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (dst, src) in slots.into_iter().zip(tensors) {
            dst.expect_same_shape(&src)?;
            *dst = src;
        }
        Ok(template)
    }

    /// Largest absolute entrywise difference to another parameter set.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.slots()
            .iter()
            .zip(other.slots())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// An ordered list of parameter tensors treated as one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet(pub Vec<Tensor>);

impl ParamSet {
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.shape() == b.shape())
    }

    /// `Σ_k weights[k] · sets[k]`, tensor by tensor.
    pub fn weighted_sum(sets: &[&ParamSet], weights: &[f64]) -> Result<ParamSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::contract("weighted sum over zero parameter sets"))?;
        if sets.len() != weights.len() {
            return Err(Error::contract("one weight per parameter set is required"));
        }
        if let Some(bad) = sets.iter().position(|s| !s.same_layout(first)) {
            return Err(Error::dim(format!("parameter set {bad} has a different layout")));
        }
        let out = first
            .0
            .iter()
            .enumerate()
            .map(|(t, proto)| {
                let mut data = vec![0.0; proto.numel()];
                for (set, &w) in sets.iter().zip(weights) {
                    for (acc, v) in data.iter_mut().zip(set.0[t].data()) {
                        *acc += w * v;
                    }
                }
                Tensor::from_parts(proto.shape().to_vec(), data)
            })
            .collect();
        Ok(ParamSet(out))
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Per-head, per-token selection counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenCounts {
    heads: usize,
    tokens: usize,
    counts: Vec<u64>,
}

impl TokenCounts {
    pub fn zeros(heads: usize, tokens: usize) -> Self {
        Self {
            heads,
            tokens,
            counts: vec![0; heads * tokens],
        }
    }

    pub fn from_vec(heads: usize, tokens: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != heads * tokens {
            return Err(Error::dim(format!(
                "{} counters for {heads} heads × {tokens} tokens",
                counts.len()
            )));
        }
        Ok(Self { heads, tokens, counts })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head(&self, h: usize) -> &[u64] {
        &self.counts[h * self.tokens..(h + 1) * self.tokens]
    }

    pub fn get(&self, h: usize, j: usize) -> u64 {
        self.counts[h * self.tokens + j]
    }

    pub fn increment(&mut self, h: usize, j: usize) {
        self.counts[h * self.tokens + j] += 1;
    }

    pub fn accumulate(&mut self, other: &TokenCounts) -> Result<()> {
        if (self.heads, self.tokens) != (other.heads, other.tokens) {
            return Err(Error::dim("counter tables have different shapes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Every counter multiplied by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        Self {
            heads: self.heads,
            tokens: self.tokens,
            counts: self.counts.iter().map(|c| c * factor).collect(),
        }
    }
}
