use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

use super::layers::{Activation, Dense, EncryptorParams, StochasticLayer};
use super::ParamCollection;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSizes {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl LayerSizes {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.feature_dim == 0
            || self.num_classes < 2
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::Config(format!("invalid layer sizes {self:?}")));
        }
        Ok(())
    }

    /// Widths of the extractor layers' inputs and outputs, in order.
    fn extractor_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}

/// Classifier network split into a trainable feature extractor, a trainable
/// classifier head and the client's frozen stochastic layer.
///
/// Only the extractor and classifier are exposed through [`ParamCollection`],
/// so no optimizer can ever reach the stochastic segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedParams {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
    pub stochastic: StochasticLayer,
    pub sizes: LayerSizes,
    pub activation: Activation,
}

impl SegmentedParams {
    pub fn zeros(sizes: LayerSizes, activation: Activation) -> Result<Self> {
        sizes.validate()?;
        let dims = sizes.extractor_dims();
        let extractor = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(SegmentedParams {
            extractor,
            classifier: Dense::zeros(sizes.feature_dim, sizes.num_classes),
            stochastic: StochasticLayer::identity(sizes.feature_dim),
            sizes,
            activation,
        })
    }

    /// Gaussian initialization drawn from `seed`; the stochastic segment starts
    /// as the identity until a client layer is attached.
    pub fn init(sizes: LayerSizes, activation: Activation, seed: u64) -> Result<Self> {
        sizes.validate()?;
        let mut rng = rng_from_seed(seed);
        let dims = sizes.extractor_dims();
        let extractor = dims
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], 1.0, &mut rng))
            .collect();
        let classifier = Dense::random(sizes.feature_dim, sizes.num_classes, 1.0, &mut rng);
        Ok(SegmentedParams {
            extractor,
            classifier,
            stochastic: StochasticLayer::identity(sizes.feature_dim),
            sizes,
            activation,
        })
    }

    pub fn with_stochastic(mut self, layer: StochasticLayer) -> Result<Self> {
        self.check_stochastic(&layer)?;
        self.stochastic = layer;
        Ok(self)
    }

    pub fn check_stochastic(&self, layer: &StochasticLayer) -> Result<()> {
        if layer.feature_dim() != self.sizes.feature_dim {
            return Err(Error::Dimension(format!(
                "stochastic layer has feature_dim {}, model has {}",
                layer.feature_dim(),
                self.sizes.feature_dim
            )));
        }
        Ok(())
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.sizes.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} inputs, got {}",
                self.sizes.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Copies of the extractor and classifier tensors, in collection order.
    pub fn trainable(&self) -> Vec<Tensor> {
        self.snapshot()
    }

    /// Overwrites extractor and classifier from tensors in collection order.
    pub fn set_trainable(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.iter().zip(tensors) {
            if !slot.same_shape(t) {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            **slot = t.clone();
        }
        Ok(())
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParamCollection for SegmentedParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 2);
        for layer in &self.extractor {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 2);
        for layer in &mut self.extractor {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }
}

impl ParamCollection for EncryptorParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.encode.weight,
            &self.encode.bias,
            &self.decode.weight,
            &self.decode.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.encode.weight,
            &mut self.encode.bias,
            &mut self.decode.weight,
            &mut self.decode.bias,
        ]
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities along the plain path; the stochastic layer is skipped.
pub fn forward_plain(params: &SegmentedParams, x: &Tensor) -> Result<Tensor> {
    params.check_input(x)?;
    Ok(Tensor::from_vec(
        forward_trace(params, None, x.data()).probs,
    ))
}

/// Class probabilities with `stochastic` inserted between extractor and classifier.
pub fn forward_stochastic(
    params: &SegmentedParams,
    stochastic: &StochasticLayer,
    x: &Tensor,
) -> Result<Tensor> {
    params.check_input(x)?;
    params.check_stochastic(stochastic)?;
    Ok(Tensor::from_vec(
        forward_trace(params, Some(stochastic), x.data()).probs,
    ))
}

pub(crate) struct Trace {
    /// Input to each extractor layer; the last entry is the feature vector.
    activations: Vec<Vec<f64>>,
    classifier_input: Vec<f64>,
    pub(crate) probs: Vec<f64>,
}

pub(crate) fn forward_trace(
    params: &SegmentedParams,
    stochastic: Option<&StochasticLayer>,
    x: &[f64],
) -> Trace {
    let mut activations = Vec::with_capacity(params.extractor.len() + 1);
    activations.push(x.to_vec());
    for layer in &params.extractor {
        let out: Vec<f64> = layer
            .apply(activations.last().expect("non-empty"))
            .into_iter()
            .map(|v| params.activation.apply(v))
            .collect();
        activations.push(out);
    }
    let features = activations.last().expect("non-empty");
    let classifier_input = match stochastic {
        Some(layer) => layer.apply(features),
        None => features.clone(),
    };
    let probs = softmax(&params.classifier.apply(&classifier_input));
    Trace {
        activations,
        classifier_input,
        probs,
    }
}

/// Backpropagates `dlogits` through the network. Parameter gradients are
/// accumulated (times `scale`) into `grads` in collection order when given;
/// the gradient with respect to the input is returned unscaled.
pub(crate) fn backward(
    params: &SegmentedParams,
    stochastic: Option<&StochasticLayer>,
    trace: &Trace,
    dlogits: &[f64],
    mut grads: Option<&mut [Tensor]>,
    scale: f64,
) -> Vec<f64> {
    let n_ext = params.extractor.len();
    let head = grads.as_deref_mut().map(|g| {
        let (w, b) = g[2 * n_ext..].split_at_mut(1);
        (&mut w[0], &mut b[0])
    });
    let dclassifier_in = params
        .classifier
        .backward(&trace.classifier_input, dlogits, head, scale);
    let mut dout = match stochastic {
        Some(layer) => layer.backward(&dclassifier_in),
        None => dclassifier_in,
    };
    for (i, layer) in params.extractor.iter().enumerate().rev() {
        let out = &trace.activations[i + 1];
        let dpre: Vec<f64> = dout
            .iter()
            .zip(out)
            .map(|(d, y)| d * params.activation.derivative_at_output(*y))
            .collect();
        let slot = grads.as_deref_mut().map(|g| {
            let (w, b) = g[2 * i..2 * i + 2].split_at_mut(1);
            (&mut w[0], &mut b[0])
        });
        dout = layer.backward(&trace.activations[i], &dpre, slot, scale);
    }
    dout
}

/// Backpropagates a probability-space gradient through softmax.
pub(crate) fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - dot))
        .collect()
}

/// Runs the encryptor and the frozen stochastic path in one go.
pub(crate) fn encrypted_forward(
    encryptor: &EncryptorParams,
    frozen: &SegmentedParams,
    stochastic: &StochasticLayer,
    x: &[f64],
) -> (Vec<f64>, Vec<f64>, Trace) {
    let (hidden, encrypted) = encryptor.forward_trace(x);
    let trace = forward_trace(frozen, Some(stochastic), &encrypted);
    (hidden, encrypted, trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> LayerSizes {
        LayerSizes {
            input_dim: 3,
            hidden_dims: vec![5],
            feature_dim: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn zero_params_give_uniform_output() {
        let params = SegmentedParams::zeros(sizes(), Activation::Tanh).unwrap();
        let p = forward_plain(&params, &Tensor::from_vec(vec![0.3, -1.0, 2.0])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_stochastic_equals_plain_bitwise() {
        let params = SegmentedParams::init(sizes(), Activation::Tanh, 5).unwrap();
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0]);
        let plain = forward_plain(&params, &x).unwrap();
        let id = forward_stochastic(&params, &StochasticLayer::identity(4), &x).unwrap();
        assert_eq!(plain, id);
    }

    #[test]
    fn shape_errors() {
        let params = SegmentedParams::init(sizes(), Activation::Tanh, 5).unwrap();
        assert!(matches!(
            forward_plain(&params, &Tensor::from_vec(vec![1.0])),
            Err(Error::Dimension(_))
        ));
        let wrong = StochasticLayer::generate(5, 1, 0.5);
        assert!(forward_stochastic(&params, &wrong, &Tensor::from_vec(vec![0.0; 3])).is_err());
        assert!(params.clone().with_stochastic(wrong).is_err());
    }

    #[test]
    fn set_trainable_round_trips_and_checks() {
        let mut a = SegmentedParams::init(sizes(), Activation::Tanh, 1).unwrap();
        let b = SegmentedParams::init(sizes(), Activation::Tanh, 2).unwrap();
        a.set_trainable(&b.trainable()).unwrap();
        assert_eq!(a.trainable(), b.trainable());
        assert!(a.set_trainable(&b.trainable()[1..]).is_err());
    }
}
