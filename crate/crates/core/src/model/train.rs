use rand::seq::SliceRandom;
use rand::Rng;

use super::encoder::{select_masked_rows, GraphTensors};
use super::loss::build_pretrain_loss;
use super::{ModelParams, Optimizer, TokenCounts};
use crate::error::{Error, Result};
use crate::graph::ClientDataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Fraction of node rows replaced by the mask vector.
    pub mask_ratio: f64,
    /// Exponent of the scaled cosine feature loss.
    pub gamma: f64,
    /// Graphs per optimizer step for multi-graph clients; `None` is full batch.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.25,
            gamma: 2.0,
            batch_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask ratio must be in [0, 1), got {}", self.mask_ratio)));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be at least 1, got {}", self.gamma)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrainResult {
    /// Total loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Local training instances `M`.
    pub sample_count: usize,
    /// Token selections over all epochs.
    pub counts: TokenCounts,
}

/// `epochs` passes of masked-autoencoder training on one client's graphs.
pub fn local_train<R: Rng + ?Sized>(
    data: &ClientDataset,
    params: &mut ModelParams,
    epochs: usize,
    optimizer: &mut Optimizer,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LocalTrainResult> {
    config.validate()?;
    if data.graphs.is_empty() {
        return Err(Error::contract(format!("client {} has no graphs", data.client_id)));
    }
    let dims = params.dims();
    let tensors: Vec<GraphTensors> = data.graphs.iter().map(GraphTensors::new).collect();
    let mut counts = TokenCounts::zeros(dims.heads, dims.tokens);
    let mut loss_trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..tensors.len()).collect();

    for _ in 0..epochs {
        let batch = match config.batch_size {
            Some(b) if b < order.len() => {
                order.shuffle(rng);
                b
            }
            _ => order.len(),
        };
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let graphs: Vec<&GraphTensors> = chunk.iter().map(|&i| &tensors[i]).collect();
            let masks: Vec<Vec<bool>> = graphs
                .iter()
                .map(|g| select_masked_rows(g.node_count(), config.mask_ratio, rng))
                .collect();
            let trace = build_pretrain_loss(params, &graphs, &masks, config.gamma)?;
            let grads = trace.gradients()?;
            epoch_loss += trace.breakdown().total;
            counts.accumulate(&trace.counts)?;
            optimizer.step(params.slots_mut(), &grads)?;
        }
        loss_trace.push(epoch_loss);
    }
    log::debug!(
        "client {}: {} epochs, final loss {:?}",
        data.client_id,
        epochs,
        loss_trace.last()
    );

    Ok(LocalTrainResult {
        loss_trace,
        sample_count: data.sample_count(),
        counts,
    })
}
