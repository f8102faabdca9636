use rand::Rng;

use super::{ModelParams, SageLayer};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::tensor::Tensor;

/// Per-graph constants consumed by the forward pass.
#[derive(Clone, Debug)]
pub struct GraphTensors {
    pub features: Tensor,
    pub neighbor_mean: Tensor,
    pub edge_mean: Option<Tensor>,
    pub adjacency: Tensor,
}

impl GraphTensors {
    pub fn new(g: &TextAttributedGraph) -> Self {
        Self {
            features: g.node_features.clone(),
            neighbor_mean: g.neighbor_mean_operator(),
            edge_mean: g.mean_incident_edge_features(),
            adjacency: g.adjacency(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.features.row_count()
    }
}

/// `round(ratio · n)` distinct rows chosen uniformly at random.
pub fn select_masked_rows<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    let count = ((ratio * n as f64).round() as usize).min(n);
    let mut rows = vec![false; n];
    for i in rand::seq::index::sample(rng, n, count) {
        rows[i] = true;
    }
    rows
}

pub(crate) struct LayerVars {
    w_self: Var,
    w_neighbor: Var,
    w_edge: Option<Var>,
    bias: Var,
}

/// Tape handles for every model parameter.
pub(crate) struct ParamVars {
    layers: [LayerVars; 2],
    pub projection: Var,
    pub decoder_weight: Var,
    pub decoder_bias: Var,
    pub mask_token: Var,
    pub tokens: Var,
    /// Canonical order, matching [`ModelParams::slots`].
    pub all: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let mut all = Vec::new();
        let mut reg = |tape: &mut Tape, t: &Tensor| {
            let v = tape.param(t.clone());
            all.push(v);
            v
        };
        let mut layer = |tape: &mut Tape, l: &SageLayer| LayerVars {
            w_self: reg(tape, &l.w_self),
            w_neighbor: reg(tape, &l.w_neighbor),
            w_edge: l.w_edge.as_ref().map(|e| reg(tape, e)),
            bias: reg(tape, &l.bias),
        };
        let l0 = layer(tape, &params.encoder.layers[0]);
        let l1 = layer(tape, &params.encoder.layers[1]);
        let projection = reg(tape, &params.codebook.projection);
        let decoder_weight = reg(tape, &params.decoder.weight);
        let decoder_bias = reg(tape, &params.decoder.bias);
        let mask_token = reg(tape, &params.mask_token);
        let tokens = reg(tape, &params.codebook.tokens);
        Self {
            layers: [l0, l1],
            projection,
            decoder_weight,
            decoder_bias,
            mask_token,
            tokens,
            all,
        }
    }
}

/// Records the encoder on `tape` and returns the `n × hidden_dim` output.
pub(crate) fn encode_on_tape(tape: &mut Tape, pv: &ParamVars, g: &GraphTensors, masked: &[bool]) -> Result<Var> {
    if masked.len() != g.node_count() {
        return Err(Error::dim(format!(
            "mask covers {} rows, graph has {} nodes",
            masked.len(),
            g.node_count()
        )));
    }
    let x = tape.constant(g.features.clone());
    let p = tape.constant(g.neighbor_mean.clone());
    let e = g.edge_mean.as_ref().map(|e| tape.constant(e.clone()));
    let mut h = if masked.iter().any(|&m| m) {
        tape.mask_rows(x, pv.mask_token, masked.to_vec())?
    } else {
        x
    };
    for (l, layer) in pv.layers.iter().enumerate() {
        let own = tape.matmul(h, layer.w_self)?;
        let agg = tape.matmul(p, h)?;
        let nb = tape.matmul(agg, layer.w_neighbor)?;
        let mut out = tape.add(own, nb)?;
        match (layer.w_edge, e) {
            (Some(w), Some(e)) => {
                let ew = tape.matmul(e, w)?;
                out = tape.add(out, ew)?;
            }
            (None, Some(_)) => {
                return Err(Error::contract("graph has edge features but the model has no edge weights"))
            }
            _ => {}
        }
        out = tape.add_bias(out, layer.bias)?;
        h = if l == 0 { tape.relu(out)? } else { out };
    }
    Ok(h)
}

/// Encoder output for one graph, `n × hidden_dim`.
pub fn encode(g: &TextAttributedGraph, params: &ModelParams, masked: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let z = encode_on_tape(&mut tape, &pv, &GraphTensors::new(g), masked)?;
    Ok(tape.value(z).clone())
}
