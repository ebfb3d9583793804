use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    pub(crate) fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Fully connected layer `y = W x + b`, `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[output_dim, input_dim]),
            bias: Tensor::zeros(&[output_dim]),
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(input_dim)`, zero bias.
    pub fn random(input_dim: usize, output_dim: usize, gain: f64, rng: &mut SimRng) -> Self {
        let std = gain / (input_dim as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense {
            weight: Tensor::new(vec![output_dim, input_dim], data).expect("shape by construction"),
            bias: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.input_dim();
        self.weight
            .data()
            .chunks_exact(cols)
            .zip(self.bias.data())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates `scale * dL/dW` and `scale * dL/db` into the given buffers
    /// (when present) and returns `dL/dx` (unscaled).
    pub(crate) fn backward(
        &self,
        x: &[f64],
        dy: &[f64],
        grads: Option<(&mut Tensor, &mut Tensor)>,
        scale: f64,
    ) -> Vec<f64> {
        let cols = self.input_dim();
        if let Some((gw, gb)) = grads {
            for ((grow, gbias), &d) in gw
                .data_mut()
                .chunks_exact_mut(cols)
                .zip(gb.data_mut())
                .zip(dy)
            {
                let sd = scale * d;
                for (g, v) in grow.iter_mut().zip(x) {
                    *g += sd * v;
                }
                *gbias += sd;
            }
        }
        let mut dx = vec![0.0; cols];
        for (row, &d) in self.weight.data().chunks_exact(cols).zip(dy) {
            for (acc, w) in dx.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        dx
    }
}

/// Frozen random affine map `h -> W h + b` applied to extracted features.
///
/// `W = I + scale * G` and `b = scale * n` with `G`, `n` standard normal,
/// both drawn from a ChaCha stream seeded by `seed`. The layer is a pure
/// function of `(feature_dim, seed, scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLayer {
    weight: Tensor,
    noise_offset: Tensor,
    seed: u64,
    scale: f64,
}

impl StochasticLayer {
    pub fn generate(feature_dim: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut weight = Tensor::zeros(&[feature_dim, feature_dim]);
        for (i, w) in weight.data_mut().iter_mut().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            let diag = if i / feature_dim == i % feature_dim {
                1.0
            } else {
                0.0
            };
            *w = diag + scale * g;
        }
        let offset = (0..feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        StochasticLayer {
            weight,
            noise_offset: Tensor::from_vec(offset),
            seed,
            scale,
        }
    }

    /// Identity weight, zero offset.
    pub fn identity(feature_dim: usize) -> Self {
        Self::generate(feature_dim, 0, 0.0)
    }

    /// Rebuilds a layer from raw parts, e.g. after deserialization.
    pub fn from_parts(weight: Tensor, noise_offset: Tensor, seed: u64, scale: f64) -> Result<Self> {
        let d = noise_offset.len();
        if weight.shape() != [d, d] || noise_offset.shape() != [d] {
            return Err(Error::Dimension(format!(
                "stochastic layer weight {:?} does not match offset {:?}",
                weight.shape(),
                noise_offset.shape()
            )));
        }
        Ok(StochasticLayer {
            weight,
            noise_offset,
            seed,
            scale,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.noise_offset.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn noise_offset(&self) -> &Tensor {
        &self.noise_offset
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        let d = self.feature_dim();
        self.weight
            .data()
            .chunks_exact(d)
            .zip(self.noise_offset.data())
            .map(|(row, b)| row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `W^T dy`
    pub(crate) fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let d = self.feature_dim();
        let mut dh = vec![0.0; d];
        for (row, &g) in self.weight.data().chunks_exact(d).zip(dy) {
            for (acc, w) in dh.iter_mut().zip(row) {
                *acc += w * g;
            }
        }
        dh
    }
}

/// Shape-preserving residual encryptor `g(x) = x + D(tanh(E x + e)) + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptorParams {
    pub encode: Dense,
    pub decode: Dense,
}

impl EncryptorParams {
    /// Near-identity start: the residual branch is scaled by `residual_gain`.
    pub fn near_identity(input_dim: usize, hidden: usize, residual_gain: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        EncryptorParams {
            encode: Dense::random(input_dim, hidden, 1.0, &mut rng),
            decode: Dense::random(hidden, input_dim, residual_gain, &mut rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encode.input_dim()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, out) = self.forward_trace(x.data());
        Tensor::new(x.shape().to_vec(), out)
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encryptor expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Returns (hidden activations, output).
    pub(crate) fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = self.encode.apply(x).into_iter().map(f64::tanh).collect();
        let residual = self.decode.apply(&hidden);
        let out = x.iter().zip(residual).map(|(a, r)| a + r).collect();
        (hidden, out)
    }

    /// Accumulates `scale * dL/dphi` given `dL/dg(x)`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        hidden: &[f64],
        dout: &[f64],
        grads: &mut [Tensor],
        scale: f64,
    ) {
        let (enc, dec) = grads.split_at_mut(2);
        let (gw_e, gb_e) = enc.split_at_mut(1);
        let (gw_d, gb_d) = dec.split_at_mut(1);
        let dhidden = self
            .decode
            .backward(hidden, dout, Some((&mut gw_d[0], &mut gb_d[0])), scale);
        let dpre: Vec<f64> = dhidden
            .iter()
            .zip(hidden)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        self.encode
            .backward(x, &dpre, Some((&mut gw_e[0], &mut gb_e[0])), scale);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stochastic_layer_regenerates_bitwise() {
        let a = StochasticLayer::generate(6, 99, 0.5);
        let b = StochasticLayer::generate(6, 99, 0.5);
        assert_eq!(a, b);
        let c = StochasticLayer::generate(6, 100, 0.5);
        assert_ne!(a.weight(), c.weight());
    }

    #[test]
    fn identity_layer_is_identity() {
        let layer = StochasticLayer::identity(3);
        assert_eq!(layer.apply(&[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn dense_apply_matches_manual() {
        let layer = Dense {
            weight: Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::from_vec(vec![0.5, -0.5]),
        };
        assert_eq!(layer.apply(&[1.0, 1.0, 1.0]), vec![6.5, -0.5]);
    }

    #[test]
    fn encryptor_preserves_shape() {
        let enc = EncryptorParams::near_identity(5, 8, 0.01, 3);
        let x = Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let y = enc.apply(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let dist: f64 = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(dist.sqrt() < 0.1);
        assert!(enc.apply(&Tensor::from_vec(vec![1.0; 4])).is_err());
    }
}
