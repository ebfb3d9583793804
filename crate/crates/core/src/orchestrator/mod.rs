//! Full protocol loops over simulated clients.
//!
//! Each round the server state is snapshotted, clients train on immutable
//! views of it (optionally in parallel), and the results are joined and
//! aggregated in client-index order. All client randomness is keyed by
//! `(base_seed, client, round)`, so serial and parallel runs agree bitwise.

mod config;
mod metrics;
mod network;

pub use config::{Method, SimConfig};
pub use metrics::{
    evaluate_top1, format_sig9, metrics_to_csv, parse_metrics_csv, read_metrics_csv,
    rounds_to_target, rounds_to_target_report, write_metrics_csv, RoundMetrics, CSV_HEADER,
};
pub use network::{
    simulate_comm_cost, simulate_until, CommTotals, Message, MessageKind, MessageLog,
    NetworkCostModel, Phase, Tier,
};

use rayon::prelude::*;

use crate::aggregation::{
    fedavg_aggregate, fednova_aggregate, fednova_delta, fednova_norm, weights_for,
};
use crate::data::{
    dirichlet_partition, generate_synthetic, load_idx_dataset, Dataset, PartitionSpec,
};
use crate::encryption::{fed_encrypted_data_generate, EncryptedDataset, EncryptionConfig};
use crate::error::{Error, Result};
use crate::format::{encoded_len, ParamsRecord};
use crate::nn::{LayerSizes, OptimizerState, SegmentedParams, StochasticLayer};
use crate::rng::derive_seed;
use crate::schedules::{epochs_at, lambdas_at};
use crate::tensor::Tensor;
use crate::transfer::{
    fed_know_trans, local_train, sampling_seed, shuffle_seed, LocalTraining, PeerShare,
    TransferContext,
};

/// Data shared by every arm of an experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub holdout: Dataset,
    pub partition: PartitionSpec,
    pub shards: Vec<Dataset>,
    pub sizes: LayerSizes,
}

/// Builds (or loads) the dataset, splits off the global holdout and
/// partitions the rest across clients.
pub fn prepare(cfg: &SimConfig) -> Result<Prepared> {
    cfg.validate()?;
    let full = match (&cfg.idx_images, &cfg.idx_labels) {
        (Some(images), Some(labels)) => load_idx_dataset(images, labels)?,
        _ => generate_synthetic(
            cfg.num_classes,
            cfg.samples_per_class,
            cfg.input_dim,
            cfg.spread,
            cfg.data_seed(),
        )?,
    };
    let (train, holdout) = full.split_holdout(
        cfg.holdout_fraction,
        derive_seed(cfg.data_seed(), "split", &[]),
    )?;
    if holdout.is_empty() {
        return Err(Error::Config("holdout split is empty".into()));
    }
    let partition = dirichlet_partition(&train, cfg.alpha, cfg.num_clients, cfg.partition_seed())?;
    let shards = partition
        .assignments
        .iter()
        .map(|idx| train.subset(idx))
        .collect();
    let sizes = LayerSizes {
        input_dim: train.input_dim(),
        hidden_dims: cfg.hidden_dims.clone(),
        feature_dim: cfg.feature_dim,
        num_classes: train.num_classes,
    };
    sizes.validate()?;
    Ok(Prepared {
        train,
        holdout,
        partition,
        shards,
        sizes,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub global: SegmentedParams,
    pub log: MessageLog,
    /// Encrypted datasets and stochastic layers, one per client (empty
    /// without encrypted data sharing).
    pub encrypted: Vec<EncryptedDataset>,
    pub layers: Vec<StochasticLayer>,
}

/// Seed of client `k`'s stochastic layer, as assigned by the server.
pub fn stochastic_seed(base_seed: u64, client: usize) -> u64 {
    derive_seed(base_seed, "stoch", &[client as u64])
}

pub fn initial_global(cfg: &SimConfig, sizes: &LayerSizes) -> Result<SegmentedParams> {
    SegmentedParams::init(
        sizes.clone(),
        cfg.activation,
        derive_seed(cfg.base_seed, "global-init", &[]),
    )
}

fn local_optimizer(cfg: &SimConfig) -> Result<OptimizerState> {
    OptimizerState::momentum_sgd(cfg.learning_rate, cfg.rho, cfg.weight_decay)
}

pub fn encryption_config(cfg: &SimConfig, client: usize) -> Result<EncryptionConfig> {
    Ok(EncryptionConfig {
        pretrain_epochs: cfg.e_c,
        encryptor_epochs: cfg.e_g,
        pretrain_optimizer: OptimizerState::momentum_sgd(
            cfg.pretrain_learning_rate,
            cfg.rho,
            cfg.weight_decay,
        )?,
        encryptor_optimizer: OptimizerState::adaptive(
            cfg.encryptor_learning_rate,
            cfg.encryptor_weight_decay,
        )?,
        encryptor_hidden: cfg.encryptor_hidden,
        encryptor_residual_gain: cfg.encryptor_residual_gain,
        encryptor_seed: derive_seed(cfg.base_seed, "encryptor", &[client as u64]),
    })
}

fn map_clients<T, F>(parallel: bool, k: usize, round: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let tag = |c: usize, r: Result<T>| r.map_err(|e| e.at_client(round, c));
    let results: Vec<Result<T>> = if parallel {
        (0..k).into_par_iter().map(|c| tag(c, f(c))).collect()
    } else {
        (0..k).map(|c| tag(c, f(c))).collect()
    };
    results.into_iter().collect()
}

/// Runs the configured method end to end.
pub fn run(cfg: &SimConfig) -> Result<RunOutput> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, &prepared)
}

pub fn run_prepared(cfg: &SimConfig, prepared: &Prepared) -> Result<RunOutput> {
    match cfg.method {
        Method::FedAvg | Method::FedProx => run_fededs(cfg, prepared),
        Method::FedNova => run_fednova_eds(cfg, prepared),
    }
}

/// FedAvg / FedProx with optional encrypted data sharing.
pub fn run_fededs(cfg: &SimConfig, prepared: &Prepared) -> Result<RunOutput> {
    if cfg.method == Method::FedNova {
        return Err(Error::Config(
            "run_fededs handles fedavg and fedprox; use run_fednova_eds".into(),
        ));
    }
    run_protocol(cfg, prepared)
}

/// FedNova with optional encrypted data sharing.
pub fn run_fednova_eds(cfg: &SimConfig, prepared: &Prepared) -> Result<RunOutput> {
    if cfg.method != Method::FedNova {
        return Err(Error::Config(format!(
            "run_fednova_eds needs method fednova, got {}",
            cfg.method.name()
        )));
    }
    run_protocol(cfg, prepared)
}

struct ClientResult {
    trainable: Vec<Tensor>,
    steps: usize,
    final_loss: f64,
    sampled_peer: Option<usize>,
}

fn run_protocol(cfg: &SimConfig, prepared: &Prepared) -> Result<RunOutput> {
    cfg.validate()?;
    let k = cfg.num_clients;
    if prepared.shards.len() != k {
        return Err(Error::Config(format!(
            "{} shards for {k} clients",
            prepared.shards.len()
        )));
    }
    let network = NetworkCostModel::new(cfg.server_rtt, cfg.peer_rtt)?;
    let mut log = MessageLog::default();
    let mut global = initial_global(cfg, &prepared.sizes)?;
    let params_bytes = encoded_len(&ParamsRecord(global.trainable()))?;

    // Server distributes the initial model (and each client's stochastic layer).
    for c in 0..k {
        log.push(
            Tier::Server,
            Phase::Setup,
            MessageKind::Params,
            None,
            Some(c),
            params_bytes,
        );
    }
    let (layers, encrypted) = if cfg.with_eds {
        let layers: Vec<StochasticLayer> = (0..k)
            .map(|c| {
                StochasticLayer::generate(
                    cfg.feature_dim,
                    stochastic_seed(cfg.base_seed, c),
                    cfg.stochastic_scale,
                )
            })
            .collect();
        for (c, layer) in layers.iter().enumerate() {
            log.push(
                Tier::Server,
                Phase::Setup,
                MessageKind::StochasticLayer,
                None,
                Some(c),
                encoded_len(layer)?,
            );
        }
        let snapshot = &global;
        let encrypted = map_clients(cfg.parallel, k, 0, |c| {
            let enc_cfg = encryption_config(cfg, c)?;
            fed_encrypted_data_generate(c, snapshot, &layers[c], &prepared.shards[c], &enc_cfg)
                .map(|out| out.encrypted)
        })?;
        for (c, data) in encrypted.iter().enumerate() {
            let data_bytes = encoded_len(data)?;
            let layer_bytes = encoded_len(&layers[c])?;
            for peer in (0..k).filter(|&p| p != c) {
                log.push(
                    Tier::Peer,
                    Phase::Setup,
                    MessageKind::EncryptedDataset,
                    Some(c),
                    Some(peer),
                    data_bytes,
                );
                log.push(
                    Tier::Peer,
                    Phase::Setup,
                    MessageKind::StochasticLayer,
                    Some(c),
                    Some(peer),
                    layer_bytes,
                );
            }
        }
        (layers, encrypted)
    } else {
        (Vec::new(), Vec::new())
    };

    let epoch_cfg = cfg.with_eds.then(|| cfg.epoch_schedule()).transpose()?;
    let lambda_cfg = cfg.with_eds.then(|| cfg.lambda_schedule()).transpose()?;
    let mu = if cfg.method == Method::FedProx {
        cfg.mu
    } else {
        0.0
    };
    let optimizer = local_optimizer(cfg)?;
    let sample_counts: Vec<usize> = prepared.shards.iter().map(Dataset::len).collect();
    let mut metrics = Vec::with_capacity(cfg.rounds);

    for t in 1..=cfg.rounds {
        let e_t = epoch_cfg
            .as_ref()
            .map_or(cfg.local_epochs, |s| epochs_at(s, t));
        let (lambda_c, lambda_dis) = match &lambda_cfg {
            Some(l) if !cfg.force_local_only => lambdas_at(l, t),
            _ => (1.0, 0.0),
        };
        let snapshot = &global;
        let results = map_clients(cfg.parallel, k, t, |c| {
            let shard = &prepared.shards[c];
            if cfg.with_eds {
                let peers = (0..k)
                    .filter(|&p| p != c)
                    .map(|p| PeerShare {
                        client: p,
                        dataset: &encrypted[p],
                        layer: &layers[p],
                    })
                    .collect();
                let ctx = TransferContext {
                    client: c,
                    local: shard,
                    peers,
                    round: t,
                    lambda_c,
                    lambda_dis,
                    epochs: e_t,
                    mu,
                    sampling_seed: sampling_seed(cfg.base_seed, c, t),
                    shuffle_seed: shuffle_seed(cfg.base_seed, c, t),
                    batch_size: cfg.batch_size,
                };
                let (params, stats) = fed_know_trans(&ctx, snapshot, &layers[c], &optimizer)?;
                Ok(ClientResult {
                    trainable: params.trainable(),
                    steps: stats.steps,
                    final_loss: *stats.epoch_losses.last().expect("at least one epoch"),
                    sampled_peer: stats.sampled_peer,
                })
            } else {
                let mut params = snapshot.clone();
                let mut opt = optimizer.reset();
                let setup = LocalTraining {
                    local: shard,
                    epochs: e_t,
                    batch_size: cfg.batch_size,
                    shuffle_seed: shuffle_seed(cfg.base_seed, c, t),
                    lambda_c: 1.0,
                    lambda_dis: 0.0,
                    mu,
                };
                let (steps, losses) = local_train(&mut params, snapshot, &setup, None, &mut opt)?;
                Ok(ClientResult {
                    trainable: params.trainable(),
                    steps,
                    final_loss: *losses.last().expect("at least one epoch"),
                    sampled_peer: None,
                })
            }
        })?;

        let incoming = global.trainable();
        let mut a_norms = Vec::new();
        let next = if cfg.method == Method::FedNova {
            let mut deltas = Vec::with_capacity(k);
            for (c, r) in results.iter().enumerate() {
                let a = fednova_norm(r.steps, cfg.rho).map_err(|e| e.at_client(t, c))?;
                deltas.push(
                    fednova_delta(&r.trainable, &incoming, cfg.learning_rate, a)
                        .map_err(|e| e.at_client(t, c))?,
                );
                a_norms.push(a);
                log.push(
                    Tier::Server,
                    Phase::Round(t),
                    MessageKind::Delta,
                    Some(c),
                    None,
                    params_bytes + 8,
                );
            }
            fednova_aggregate(
                &incoming,
                &deltas,
                &a_norms,
                cfg.learning_rate,
                cfg.fednova_literal_server_step,
            )?
        } else {
            for c in 0..k {
                log.push(
                    Tier::Server,
                    Phase::Round(t),
                    MessageKind::Params,
                    Some(c),
                    None,
                    params_bytes,
                );
            }
            let weights = weights_for(cfg.aggregate_weighting, &sample_counts)?;
            let updates: Vec<Vec<Tensor>> = results.iter().map(|r| r.trainable.clone()).collect();
            fedavg_aggregate(&updates, &weights)?
        };
        if next.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("global model after round {t}")));
        }
        global.set_trainable(&next)?;
        for c in 0..k {
            log.push(
                Tier::Server,
                Phase::Round(t),
                MessageKind::Params,
                None,
                Some(c),
                params_bytes,
            );
        }

        let accuracy = evaluate_top1(&global, &prepared.holdout)?;
        let comm = simulate_until(&network, &log, Some(t));
        metrics.push(RoundMetrics {
            round: t,
            accuracy,
            mean_loss: results.iter().map(|r| r.final_loss).sum::<f64>() / k as f64,
            e_t,
            lambda_c,
            lambda_dis,
            cum_seconds: comm.total_seconds(),
            cum_server_bytes: comm.server_bytes,
            cum_peer_bytes: comm.peer_bytes,
            sampled_peers: results.iter().map(|r| r.sampled_peer).collect(),
            a_norms,
        });
    }

    Ok(RunOutput {
        metrics,
        global,
        log,
        encrypted,
        layers,
    })
}

/// Best holdout accuracy over `epochs` epochs of training the same
/// architecture on the pooled training set (an early-stopping ceiling).
pub fn centralized_accuracy(cfg: &SimConfig, prepared: &Prepared, epochs: usize) -> Result<f64> {
    let global = initial_global(cfg, &prepared.sizes)?;
    let mut params = global.clone();
    let mut opt = local_optimizer(cfg)?;
    let mut best = 0.0f64;
    for epoch in 0..epochs {
        let setup = LocalTraining {
            local: &prepared.train,
            epochs: 1,
            batch_size: cfg.batch_size,
            shuffle_seed: derive_seed(cfg.base_seed, "centralized", &[epoch as u64]),
            lambda_c: 1.0,
            lambda_dis: 0.0,
            mu: 0.0,
        };
        local_train(&mut params, &global, &setup, None, &mut opt)?;
        best = best.max(evaluate_top1(&params, &prepared.holdout)?);
    }
    Ok(best)
}
