//! Scalar training objectives and their exact reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::{EncryptorParams, StochasticLayer};
use super::loss::{cross_entropy, cross_entropy_dprobs, kl_divergence, kl_dprobs};
use super::model::{backward, encrypted_forward, forward_trace, softmax_backward, SegmentedParams};
use super::{Gradients, ParamCollection};

/// Hard-labelled samples selected by `indices`.
#[derive(Debug, Clone, Copy)]
pub struct HardBatch<'a> {
    pub inputs: &'a [Tensor],
    pub labels: &'a [usize],
    pub indices: &'a [usize],
}

/// Soft-labelled (encrypted) samples selected by `indices`.
#[derive(Debug, Clone, Copy)]
pub struct SoftBatch<'a> {
    pub inputs: &'a [Tensor],
    pub targets: &'a [Tensor],
    pub indices: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub global: &'a SegmentedParams,
    pub mu: f64,
}

/// Which loss to evaluate and which parameters are trainable.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Mean cross-entropy along the plain path; trainable: extractor, classifier.
    PlainCe {
        params: &'a SegmentedParams,
        batch: HardBatch<'a>,
    },
    /// Mean cross-entropy of the frozen stochastic path on encrypted inputs;
    /// trainable: encryptor only.
    EncryptorCe {
        encryptor: &'a EncryptorParams,
        frozen: &'a SegmentedParams,
        stochastic: &'a StochasticLayer,
        batch: HardBatch<'a>,
    },
    /// Mean KL from stored soft labels to the model with a substituted peer
    /// stochastic layer; trainable: extractor, classifier.
    Distill {
        params: &'a SegmentedParams,
        peer_layer: &'a StochasticLayer,
        batch: SoftBatch<'a>,
    },
    /// `lambda_c * CE + lambda_dis * KL (+ proximal)`; the KL term is skipped
    /// entirely when `lambda_dis == 0` or no distillation batch is given.
    Combined {
        params: &'a SegmentedParams,
        local: HardBatch<'a>,
        distill: Option<(&'a StochasticLayer, SoftBatch<'a>)>,
        lambda_c: f64,
        lambda_dis: f64,
        proximal: Option<Proximal<'a>>,
    },
}

impl LossSpec<'_> {
    fn parameter_shapes(&self) -> Gradients {
        match self {
            LossSpec::EncryptorCe { encryptor, .. } => encryptor.zeros_like(),
            LossSpec::PlainCe { params, .. }
            | LossSpec::Distill { params, .. }
            | LossSpec::Combined { params, .. } => params.zeros_like(),
        }
    }
}

pub fn loss(spec: &LossSpec<'_>) -> Result<f64> {
    evaluate(spec, false).map(|(l, _)| l)
}

pub fn gradient(spec: &LossSpec<'_>) -> Result<(f64, Gradients)> {
    evaluate(spec, true).map(|(l, g)| (l, g.expect("requested")))
}

fn finite(value: f64, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(term.to_string()))
    }
}

fn check_batch(len_inputs: usize, len_labels: usize, indices: &[usize], what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Config(format!("empty {what} batch")));
    }
    if len_inputs != len_labels {
        return Err(Error::Dimension(format!(
            "{what}: {len_inputs} inputs but {len_labels} labels"
        )));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= len_inputs) {
        return Err(Error::Index(format!("{what} sample {bad} of {len_inputs}")));
    }
    Ok(())
}

fn plain_ce(
    params: &SegmentedParams,
    batch: &HardBatch<'_>,
    weight: f64,
    mut grads: Option<&mut [Tensor]>,
) -> Result<f64> {
    check_batch(
        batch.inputs.len(),
        batch.labels.len(),
        batch.indices,
        "local",
    )?;
    let scale = weight / batch.indices.len() as f64;
    let mut total = 0.0;
    for &i in batch.indices {
        let x = &batch.inputs[i];
        params.check_input(x)?;
        let trace = forward_trace(params, None, x.data());
        let label = batch.labels[i];
        total += cross_entropy(&trace.probs, label)?;
        if let Some(g) = grads.as_deref_mut() {
            let dlogits =
                softmax_backward(&trace.probs, &cross_entropy_dprobs(&trace.probs, label));
            backward(params, None, &trace, &dlogits, Some(g), scale);
        }
    }
    finite(total / batch.indices.len() as f64, "local cross-entropy")
}

fn distill(
    params: &SegmentedParams,
    peer_layer: &StochasticLayer,
    batch: &SoftBatch<'_>,
    weight: f64,
    mut grads: Option<&mut [Tensor]>,
) -> Result<f64> {
    check_batch(
        batch.inputs.len(),
        batch.targets.len(),
        batch.indices,
        "distillation",
    )?;
    params.check_stochastic(peer_layer)?;
    let scale = weight / batch.indices.len() as f64;
    let mut total = 0.0;
    for &i in batch.indices {
        let x = &batch.inputs[i];
        params.check_input(x)?;
        let trace = forward_trace(params, Some(peer_layer), x.data());
        let target = batch.targets[i].data();
        total += kl_divergence(target, &trace.probs)?;
        if let Some(g) = grads.as_deref_mut() {
            let dlogits = softmax_backward(&trace.probs, &kl_dprobs(target, &trace.probs));
            backward(params, Some(peer_layer), &trace, &dlogits, Some(g), scale);
        }
    }
    finite(total / batch.indices.len() as f64, "distillation KL")
}

fn encryptor_ce(
    encryptor: &EncryptorParams,
    frozen: &SegmentedParams,
    stochastic: &StochasticLayer,
    batch: &HardBatch<'_>,
    mut grads: Option<&mut [Tensor]>,
) -> Result<f64> {
    check_batch(
        batch.inputs.len(),
        batch.labels.len(),
        batch.indices,
        "encryptor",
    )?;
    frozen.check_stochastic(stochastic)?;
    let scale = 1.0 / batch.indices.len() as f64;
    let mut total = 0.0;
    for &i in batch.indices {
        let x = &batch.inputs[i];
        frozen.check_input(x)?;
        encryptor.check_input(x)?;
        let (hidden, _encrypted, trace) =
            encrypted_forward(encryptor, frozen, stochastic, x.data());
        let label = batch.labels[i];
        total += cross_entropy(&trace.probs, label)?;
        if let Some(g) = grads.as_deref_mut() {
            let dlogits =
                softmax_backward(&trace.probs, &cross_entropy_dprobs(&trace.probs, label));
            // Frozen model: only the input gradient is propagated.
            let dencrypted = backward(frozen, Some(stochastic), &trace, &dlogits, None, 1.0);
            encryptor.backward(x.data(), &hidden, &dencrypted, g, scale);
        }
    }
    finite(
        total / batch.indices.len() as f64,
        "encryptor cross-entropy",
    )
}

/// `(mu/2) * (|g - g_G|^2 + |c - c_G|^2)`; the stochastic segment is excluded.
pub fn fedprox_penalty(params: &SegmentedParams, global: &SegmentedParams, mu: f64) -> Result<f64> {
    let (own, other) = (params.tensors(), global.tensors());
    if own.len() != other.len() || own.iter().zip(&other).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Dimension(
            "proximal term over mismatched models".into(),
        ));
    }
    if mu == 0.0 {
        return Ok(0.0);
    }
    let sq: f64 = own
        .iter()
        .zip(&other)
        .map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    Ok(0.5 * mu * sq)
}

fn evaluate(spec: &LossSpec<'_>, want_grad: bool) -> Result<(f64, Option<Gradients>)> {
    let mut grads = want_grad.then(|| spec.parameter_shapes());
    let value = match *spec {
        LossSpec::PlainCe { params, batch } => plain_ce(params, &batch, 1.0, grads.as_deref_mut())?,
        LossSpec::EncryptorCe {
            encryptor,
            frozen,
            stochastic,
            batch,
        } => encryptor_ce(encryptor, frozen, stochastic, &batch, grads.as_deref_mut())?,
        LossSpec::Distill {
            params,
            peer_layer,
            batch,
        } => distill(params, peer_layer, &batch, 1.0, grads.as_deref_mut())?,
        LossSpec::Combined {
            params,
            local,
            distill: peer,
            lambda_c,
            lambda_dis,
            proximal,
        } => {
            let mut value = lambda_c * plain_ce(params, &local, lambda_c, grads.as_deref_mut())?;
            if lambda_dis != 0.0 {
                if let Some((layer, batch)) = peer {
                    value += lambda_dis
                        * distill(params, layer, &batch, lambda_dis, grads.as_deref_mut())?;
                }
            }
            if let Some(Proximal { global, mu }) = proximal {
                if mu != 0.0 {
                    value += finite(fedprox_penalty(params, global, mu)?, "proximal term")?;
                    if let Some(g) = grads.as_deref_mut() {
                        for ((gt, p), q) in g.iter_mut().zip(params.tensors()).zip(global.tensors())
                        {
                            for ((gv, pv), qv) in
                                gt.data_mut().iter_mut().zip(p.data()).zip(q.data())
                            {
                                *gv += mu * (pv - qv);
                            }
                        }
                    }
                }
            }
            finite(value, "combined objective")?
        }
    };
    if let Some(g) = &grads {
        if let Some(pos) = g.iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("gradient tensor {pos}")));
        }
    }
    Ok((value, grads))
}
