//! Per-round local training on the combined objective: local cross-entropy
//! plus KL distillation on one uniformly sampled peer's encrypted dataset,
//! with that peer's stochastic layer substituted, and an optional proximal term.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::encryption::EncryptedDataset;
use crate::error::{Error, Result};
use crate::nn::{
    gradient, loss, HardBatch, LossSpec, OptimizerState, Proximal, SegmentedParams, SoftBatch,
    StochasticLayer,
};
use crate::rng::{derive_rng, derive_seed};

/// A peer's shared artifacts, as seen by another client.
#[derive(Debug, Clone, Copy)]
pub struct PeerShare<'a> {
    pub client: usize,
    pub dataset: &'a EncryptedDataset,
    pub layer: &'a StochasticLayer,
}

#[derive(Debug, Clone)]
pub struct TransferContext<'a> {
    pub client: usize,
    pub local: &'a Dataset,
    /// Shares of every other client; never contains `client` itself.
    pub peers: Vec<PeerShare<'a>>,
    pub round: usize,
    pub lambda_c: f64,
    pub lambda_dis: f64,
    pub epochs: usize,
    pub mu: f64,
    /// Seeds the peer draw for this round.
    pub sampling_seed: u64,
    /// Seeds the per-epoch shuffles of local and distillation batches.
    pub shuffle_seed: u64,
    pub batch_size: usize,
}

impl TransferContext<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config(
                "transfer round needs at least one epoch".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if (self.lambda_c + self.lambda_dis - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "lambda_c + lambda_dis = {} (must be 1)",
                self.lambda_c + self.lambda_dis
            )));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::Config(format!(
                "mu {} must be non-negative",
                self.mu
            )));
        }
        if self.local.is_empty() {
            return Err(Error::Config(format!("client {} has no data", self.client)));
        }
        if self.peers.iter().any(|p| p.client == self.client) {
            return Err(Error::Protocol(format!(
                "client {} listed among its own peers",
                self.client
            )));
        }
        Ok(())
    }

    /// Position in `peers` of this round's uniformly drawn peer.
    pub fn sampled_peer(&self) -> Result<usize> {
        if self.peers.is_empty() {
            return Err(Error::Config(format!(
                "client {} has no peers",
                self.client
            )));
        }
        Ok(derive_rng(self.sampling_seed, "peer", &[]).random_range(0..self.peers.len()))
    }

    fn all_local(&self) -> Vec<usize> {
        (0..self.local.len()).collect()
    }

    fn local_batch<'b>(&'b self, indices: &'b [usize]) -> HardBatch<'b> {
        HardBatch {
            inputs: &self.local.inputs,
            labels: &self.local.labels,
            indices,
        }
    }
}

fn check_origin(peer: &StochasticLayer, data: &EncryptedDataset) -> Result<()> {
    if data.stochastic_seed != peer.seed() {
        return Err(Error::Protocol(format!(
            "encrypted dataset of client {} was produced with stochastic seed {}, layer has {}",
            data.origin_client,
            data.stochastic_seed,
            peer.seed()
        )));
    }
    Ok(())
}

fn soft_batch<'b>(data: &'b EncryptedDataset, indices: &'b [usize]) -> SoftBatch<'b> {
    SoftBatch {
        inputs: &data.inputs,
        targets: &data.soft_labels,
        indices,
    }
}

/// Mean KL between stored soft labels and the model with the origin
/// client's stochastic layer substituted in.
pub fn distill_loss(
    params: &SegmentedParams,
    peer_layer: &StochasticLayer,
    data: &EncryptedDataset,
    indices: &[usize],
) -> Result<f64> {
    check_origin(peer_layer, data)?;
    loss(&LossSpec::Distill {
        params,
        peer_layer,
        batch: soft_batch(data, indices),
    })
}

fn full_distill(params: &SegmentedParams, peer: &PeerShare<'_>) -> Result<f64> {
    let idx: Vec<usize> = (0..peer.dataset.len()).collect();
    distill_loss(params, peer.layer, peer.dataset, &idx)
}

/// `lambda_c * CE(D_k) + lambda_dis * distill(D_i*)` for the round's sampled
/// peer; the peer term is not evaluated when `lambda_dis == 0`.
pub fn combined_loss_sampled(ctx: &TransferContext<'_>, params: &SegmentedParams) -> Result<f64> {
    let peer = ctx.peers[ctx.sampled_peer()?];
    let idx = ctx.all_local();
    let local = loss(&LossSpec::PlainCe {
        params,
        batch: ctx.local_batch(&idx),
    })?;
    if ctx.lambda_dis == 0.0 {
        return Ok(ctx.lambda_c * local);
    }
    Ok(ctx.lambda_c * local + ctx.lambda_dis * full_distill(params, &peer)?)
}

/// `lambda_c * CE(D_k) + lambda_dis * sum over all peers of distill(D_i)`,
/// with the peer sum left unscaled.
pub fn combined_loss_full(ctx: &TransferContext<'_>, params: &SegmentedParams) -> Result<f64> {
    if ctx.peers.is_empty() {
        return Err(Error::Config(format!("client {} has no peers", ctx.client)));
    }
    let idx = ctx.all_local();
    let local = loss(&LossSpec::PlainCe {
        params,
        batch: ctx.local_batch(&idx),
    })?;
    if ctx.lambda_dis == 0.0 {
        return Ok(ctx.lambda_c * local);
    }
    let mut peer_sum = 0.0;
    for peer in &ctx.peers {
        peer_sum += full_distill(params, peer)?;
    }
    Ok(ctx.lambda_c * local + ctx.lambda_dis * peer_sum)
}

/// What one client did during one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferStats {
    pub epochs: usize,
    pub lambda_c: f64,
    pub lambda_dis: f64,
    /// Client id of the sampled peer, when distillation ran.
    pub sampled_peer: Option<usize>,
    /// Optimizer steps taken.
    pub steps: usize,
    /// Mean objective over the steps of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Settings shared by every local-training call.
#[derive(Debug, Clone, Copy)]
pub struct LocalTraining<'a> {
    pub local: &'a Dataset,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub lambda_c: f64,
    pub lambda_dis: f64,
    pub mu: f64,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Minibatch descent on the combined objective. Each step pairs the next
/// local minibatch with the next distillation minibatch (the peer's data is
/// cycled through in a shuffled order), so both paths contribute to every
/// update. With `distill == None` or `lambda_dis == 0` this is plain local
/// cross-entropy training.
pub fn local_train(
    params: &mut SegmentedParams,
    global: &SegmentedParams,
    setup: &LocalTraining<'_>,
    distill: Option<(&StochasticLayer, &EncryptedDataset)>,
    optimizer: &mut OptimizerState,
) -> Result<(usize, Vec<f64>)> {
    if let Some((layer, data)) = distill {
        check_origin(layer, data)?;
        if data.is_empty() {
            return Err(Error::Config(format!(
                "encrypted dataset of client {} is empty",
                data.origin_client
            )));
        }
    }
    if setup.local.is_empty() {
        return Err(Error::Config(
            "local training needs at least one sample".into(),
        ));
    }
    if setup.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let distill = distill.filter(|_| setup.lambda_dis != 0.0);
    let n = setup.local.len();
    let mut steps = 0;
    let mut epoch_losses = Vec::with_capacity(setup.epochs);
    let mut peer_order: Vec<usize> = Vec::new();
    let mut peer_cursor = 0;
    let mut peer_pass = 0u64;
    for epoch in 0..setup.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(
            setup.shuffle_seed,
            "local",
            &[epoch as u64],
        ));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(setup.batch_size) {
            let peer_batch: Option<(&StochasticLayer, &EncryptedDataset, Vec<usize>)> = distill
                .map(|(layer, data)| {
                    let mut picked = Vec::with_capacity(setup.batch_size);
                    while picked.len() < setup.batch_size.min(data.len()) {
                        if peer_cursor == peer_order.len() {
                            peer_order = (0..data.len()).collect();
                            peer_order.shuffle(&mut derive_rng(
                                setup.shuffle_seed,
                                "peer-order",
                                &[peer_pass],
                            ));
                            peer_pass += 1;
                            peer_cursor = 0;
                        }
                        picked.push(peer_order[peer_cursor]);
                        peer_cursor += 1;
                    }
                    (layer, data, picked)
                });
            let spec = LossSpec::Combined {
                params,
                local: HardBatch {
                    inputs: &setup.local.inputs,
                    labels: &setup.local.labels,
                    indices: chunk,
                },
                distill: peer_batch
                    .as_ref()
                    .map(|(layer, data, idx)| (*layer, soft_batch(data, idx))),
                lambda_c: setup.lambda_c,
                lambda_dis: setup.lambda_dis,
                proximal: (setup.mu > 0.0).then_some(Proximal {
                    global,
                    mu: setup.mu,
                }),
            };
            let (value, grads) = gradient(&spec)?;
            optimizer.step(params, &grads)?;
            total += value;
            count += 1;
            steps += 1;
        }
        epoch_losses.push(total / count as f64);
    }
    Ok((steps, epoch_losses))
}

/// One client's round: start from the incoming global model, run
/// `ctx.epochs` epochs on the sampled-peer objective (plus the proximal term
/// when `mu > 0`), and return the updated model with round statistics.
pub fn fed_know_trans(
    ctx: &TransferContext<'_>,
    global: &SegmentedParams,
    own_layer: &StochasticLayer,
    optimizer: &OptimizerState,
) -> Result<(SegmentedParams, TransferStats)> {
    ctx.validate()?;
    let mut params = global.clone().with_stochastic(own_layer.clone())?;
    let peer = if ctx.lambda_dis != 0.0 {
        Some(ctx.peers[ctx.sampled_peer()?])
    } else {
        None
    };
    let setup = LocalTraining {
        local: ctx.local,
        epochs: ctx.epochs,
        batch_size: ctx.batch_size,
        shuffle_seed: ctx.shuffle_seed,
        lambda_c: ctx.lambda_c,
        lambda_dis: ctx.lambda_dis,
        mu: ctx.mu,
    };
    let mut opt = optimizer.reset();
    let (steps, epoch_losses) = local_train(
        &mut params,
        global,
        &setup,
        peer.map(|p| (p.layer, p.dataset)),
        &mut opt,
    )?;
    Ok((
        params,
        TransferStats {
            epochs: ctx.epochs,
            lambda_c: ctx.lambda_c,
            lambda_dis: ctx.lambda_dis,
            sampled_peer: peer.map(|p| p.client),
            steps,
            epoch_losses,
        },
    ))
}

/// Seed for the peer draw of client `k` in round `t`.
pub fn sampling_seed(base_seed: u64, client: usize, round: usize) -> u64 {
    derive_seed(base_seed, "sample-peer", &[client as u64, round as u64])
}

/// Seed for client `k`'s batch shuffles in round `t`.
pub fn shuffle_seed(base_seed: u64, client: usize, round: usize) -> u64 {
    derive_seed(base_seed, "shuffle", &[client as u64, round as u64])
}
