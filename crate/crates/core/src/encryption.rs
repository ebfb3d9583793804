//! Encrypted data generation: local pretraining along the plain path,
//! encryptor training against the frozen stochastic path, and
//! materialization of the shareable encrypted dataset.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    argmax, forward_plain, forward_stochastic, gradient, EncryptorParams, HardBatch, LossSpec,
    OptimizerState, SegmentedParams, StochasticLayer,
};
use crate::tensor::Tensor;

/// Shards up to this size are trained full-batch.
pub const FULL_BATCH_LIMIT: usize = 256;
pub const MINIBATCH: usize = 32;

/// Encrypted inputs paired with the frozen model's soft predictions on them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedDataset {
    pub origin_client: usize,
    pub inputs: Vec<Tensor>,
    pub soft_labels: Vec<Tensor>,
    pub stochastic_seed: u64,
}

impl EncryptedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Deterministic batch plan: one full batch for small shards, otherwise
/// consecutive minibatches of [`MINIBATCH`].
pub fn batch_plan(n: usize) -> Vec<Vec<usize>> {
    if n <= FULL_BATCH_LIMIT {
        vec![(0..n).collect()]
    } else {
        (0..n)
            .collect::<Vec<_>>()
            .chunks(MINIBATCH)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

fn require_epochs(epochs: usize, what: &str) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config(format!("{what} needs at least one epoch")));
    }
    Ok(())
}

/// Cross-entropy descent on the extractor and classifier via the plain path.
/// Returns the mean batch loss of every epoch.
pub fn pretrain_local(
    params: &mut SegmentedParams,
    dataset: &Dataset,
    epochs: usize,
    optimizer: &mut OptimizerState,
) -> Result<Vec<f64>> {
    require_epochs(epochs, "local pretraining")?;
    let plan = batch_plan(dataset.len());
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for indices in &plan {
            let spec = LossSpec::PlainCe {
                params,
                batch: HardBatch {
                    inputs: &dataset.inputs,
                    labels: &dataset.labels,
                    indices,
                },
            };
            let (loss, grads) = gradient(&spec)?;
            optimizer.step(params, &grads)?;
            total += loss;
        }
        history.push(total / plan.len() as f64);
    }
    Ok(history)
}

/// Trains only the encryptor so that encrypted inputs, pushed through the
/// frozen model with its stochastic layer, are classified correctly.
pub fn train_encryptor(
    encryptor: &mut EncryptorParams,
    frozen: &SegmentedParams,
    dataset: &Dataset,
    epochs: usize,
    optimizer: &mut OptimizerState,
) -> Result<Vec<f64>> {
    require_epochs(epochs, "encryptor training")?;
    let plan = batch_plan(dataset.len());
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for indices in &plan {
            let spec = LossSpec::EncryptorCe {
                encryptor,
                frozen,
                stochastic: &frozen.stochastic,
                batch: HardBatch {
                    inputs: &dataset.inputs,
                    labels: &dataset.labels,
                    indices,
                },
            };
            let (loss, grads) = gradient(&spec)?;
            optimizer.step(encryptor, &grads)?;
            total += loss;
        }
        history.push(total / plan.len() as f64);
    }
    Ok(history)
}

/// Encrypts every sample and labels it with the frozen model's own
/// stochastic-path prediction.
pub fn generate_encrypted_dataset(
    encryptor: &EncryptorParams,
    frozen: &SegmentedParams,
    dataset: &Dataset,
    origin_client: usize,
) -> Result<EncryptedDataset> {
    let mut inputs = Vec::with_capacity(dataset.len());
    let mut soft_labels = Vec::with_capacity(dataset.len());
    for x in &dataset.inputs {
        let encrypted = encryptor.apply(x)?;
        let flat = Tensor::from_vec(encrypted.data().to_vec());
        let soft = forward_stochastic(frozen, &frozen.stochastic, &flat)?;
        if !encrypted.is_finite() || !soft.is_finite() {
            return Err(Error::Numeric(format!(
                "encrypted sample of client {origin_client}"
            )));
        }
        inputs.push(encrypted);
        soft_labels.push(soft);
    }
    Ok(EncryptedDataset {
        origin_client,
        inputs,
        soft_labels,
        stochastic_seed: frozen.stochastic.seed(),
    })
}

#[derive(Debug, Clone)]
pub struct EncryptionConfig {
    /// Local pretraining epochs.
    pub pretrain_epochs: usize,
    /// Encryptor training epochs.
    pub encryptor_epochs: usize,
    pub pretrain_optimizer: OptimizerState,
    pub encryptor_optimizer: OptimizerState,
    pub encryptor_hidden: usize,
    pub encryptor_residual_gain: f64,
    pub encryptor_seed: u64,
}

#[derive(Debug, Clone)]
pub struct EncryptionOutcome {
    pub encrypted: EncryptedDataset,
    /// Client model after the call; extractor and classifier equal the
    /// incoming global values again.
    pub local: SegmentedParams,
    /// Frozen model the encryptor was trained against.
    pub pretrained: SegmentedParams,
    pub encryptor: EncryptorParams,
    pub pretrain_losses: Vec<f64>,
    pub encryptor_losses: Vec<f64>,
}

/// Full per-client generation procedure: initialize from the global model,
/// pretrain, train the encryptor, encrypt the shard, then restore the
/// extractor and classifier to the incoming global values.
pub fn fed_encrypted_data_generate(
    client: usize,
    global: &SegmentedParams,
    stochastic: &StochasticLayer,
    dataset: &Dataset,
    cfg: &EncryptionConfig,
) -> Result<EncryptionOutcome> {
    require_epochs(cfg.pretrain_epochs, "local pretraining")?;
    require_epochs(cfg.encryptor_epochs, "encryptor training")?;
    if dataset.is_empty() {
        return Err(Error::Config(format!("client {client} has no data")));
    }
    let mut local = global.clone().with_stochastic(stochastic.clone())?;
    let mut opt = cfg.pretrain_optimizer.reset();
    let pretrain_losses = pretrain_local(&mut local, dataset, cfg.pretrain_epochs, &mut opt)?;

    let mut encryptor = EncryptorParams::near_identity(
        local.sizes.input_dim,
        cfg.encryptor_hidden,
        cfg.encryptor_residual_gain,
        cfg.encryptor_seed,
    );
    let mut enc_opt = cfg.encryptor_optimizer.reset();
    let encryptor_losses = train_encryptor(
        &mut encryptor,
        &local,
        dataset,
        cfg.encryptor_epochs,
        &mut enc_opt,
    )?;
    let encrypted = generate_encrypted_dataset(&encryptor, &local, dataset, client)?;

    let pretrained = local.clone();
    local.set_trainable(&global.trainable())?;
    Ok(EncryptionOutcome {
        encrypted,
        local,
        pretrained,
        encryptor,
        pretrain_losses,
        encryptor_losses,
    })
}

/// How far encryption moves inputs, and what it costs in accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyReport {
    /// Mean of `||g(x) - x||`.
    pub mean_distortion: f64,
    /// Mean of `||x||`.
    pub mean_input_norm: f64,
    /// Stochastic-path accuracy on encrypted inputs.
    pub encrypted_accuracy: f64,
    /// Plain-path accuracy on raw inputs.
    pub plain_accuracy: f64,
}

impl PrivacyReport {
    pub fn distortion_ratio(&self) -> f64 {
        self.mean_distortion / self.mean_input_norm
    }
}

pub fn privacy_report(
    encryptor: &EncryptorParams,
    frozen: &SegmentedParams,
    dataset: &Dataset,
) -> Result<PrivacyReport> {
    if dataset.is_empty() {
        return Err(Error::Config(
            "privacy report needs a non-empty dataset".into(),
        ));
    }
    let (mut dist, mut norm, mut enc_hits, mut plain_hits) = (0.0, 0.0, 0usize, 0usize);
    for (x, &y) in dataset.inputs.iter().zip(&dataset.labels) {
        let gx = encryptor.apply(x)?;
        dist += gx
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        norm += x.sq_norm().sqrt();
        if argmax(forward_stochastic(frozen, &frozen.stochastic, &gx)?.data()) == y {
            enc_hits += 1;
        }
        if argmax(forward_plain(frozen, x)?.data()) == y {
            plain_hits += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(PrivacyReport {
        mean_distortion: dist / n,
        mean_input_norm: norm / n,
        encrypted_accuracy: enc_hits as f64 / n,
        plain_accuracy: plain_hits as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_plan_covers_all_indices() {
        assert_eq!(batch_plan(5), vec![vec![0, 1, 2, 3, 4]]);
        let plan = batch_plan(300);
        assert_eq!(plan.len(), 10);
        assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 300);
        assert_eq!(plan[9].len(), 300 - 9 * 32);
    }

    #[test]
    fn zero_epochs_rejected() {
        let d = crate::data::generate_synthetic(2, 3, 2, 0.1, 1).unwrap();
        let sizes = crate::nn::LayerSizes {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: 3,
            num_classes: 2,
        };
        let mut p = SegmentedParams::init(sizes, Default::default(), 1).unwrap();
        let mut opt = OptimizerState::momentum_sgd(0.1, 0.0, 0.0).unwrap();
        assert!(matches!(
            pretrain_local(&mut p, &d, 0, &mut opt),
            Err(Error::Config(_))
        ));
    }
}
