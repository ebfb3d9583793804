//! Central finite-difference checks of every training objective.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

use super::model::softmax;
use super::{
    gradient, loss, Activation, EncryptorParams, HardBatch, LayerSizes, LossSpec, ParamCollection,
    Proximal, SegmentedParams, SoftBatch, StochasticLayer,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor so that coordinates with vanishing gradients are
/// compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub num_params: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Largest per-coordinate relative error between `analytic` and central
/// differences of `f` around `params`.
pub fn check_collection<P, F>(params: &P, analytic: &[Tensor], step: f64, f: F) -> Result<f64>
where
    P: ParamCollection + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + step;
            let plus = f(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - step;
            let minus = f(&probe)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[ti].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Small deterministic problem shared by all checks.
pub struct Fixture {
    pub params: SegmentedParams,
    pub global: SegmentedParams,
    pub peer_layer: StochasticLayer,
    pub encryptor: EncryptorParams,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub soft_inputs: Vec<Tensor>,
    pub soft_targets: Vec<Tensor>,
}

impl Fixture {
    pub fn new(activation: Activation, seed: u64) -> Result<Self> {
        let sizes = LayerSizes {
            input_dim: 4,
            hidden_dims: vec![5],
            feature_dim: 4,
            num_classes: 3,
        };
        let params = SegmentedParams::init(sizes.clone(), activation, seed)?
            .with_stochastic(StochasticLayer::generate(4, seed ^ 1, 0.5))?;
        let global = SegmentedParams::init(sizes, activation, seed ^ 2)?;
        let mut rng = rng_from_seed(seed ^ 3);
        let mut vector = |n: usize| -> Tensor {
            Tensor::from_vec(
                (0..n)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        };
        let inputs: Vec<Tensor> = (0..6).map(|_| vector(4)).collect();
        let soft_inputs: Vec<Tensor> = (0..5).map(|_| vector(4)).collect();
        let soft_targets = (0..5)
            .map(|_| Tensor::from_vec(softmax(vector(3).data())))
            .collect();
        let labels = (0..6).map(|i| i % 3).collect();
        Ok(Fixture {
            params,
            global,
            peer_layer: StochasticLayer::generate(4, seed ^ 4, 0.5),
            encryptor: EncryptorParams::near_identity(4, 6, 0.5, seed ^ 5),
            inputs,
            labels,
            soft_inputs,
            soft_targets,
        })
    }

    fn hard(&self) -> HardBatch<'_> {
        HardBatch {
            inputs: &self.inputs,
            labels: &self.labels,
            indices: &[0, 1, 2, 3, 4, 5],
        }
    }

    fn soft(&self) -> SoftBatch<'_> {
        SoftBatch {
            inputs: &self.soft_inputs,
            targets: &self.soft_targets,
            indices: &[0, 1, 2, 3, 4],
        }
    }
}

fn check_model<F>(
    name: &'static str,
    fx: &Fixture,
    step: f64,
    tol: f64,
    spec: F,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&'p Fixture, &'p SegmentedParams) -> LossSpec<'p>,
{
    let (_, analytic) = gradient(&spec(fx, &fx.params))?;
    let worst = check_collection(&fx.params, &analytic, step, |p| loss(&spec(fx, p)))?;
    Ok(GradCheckReport {
        name,
        num_params: fx.params.num_trainable(),
        max_relative_error: worst,
        tolerance: tol,
    })
}

/// Runs every objective through a central-difference check.
pub fn run_suite(step: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for activation in [Activation::Tanh, Activation::Relu] {
        let fx = Fixture::new(activation, 11)?;
        reports.push(check_model(
            "local cross-entropy",
            &fx,
            step,
            tolerance,
            |fx, p| LossSpec::PlainCe {
                params: p,
                batch: fx.hard(),
            },
        )?);
        reports.push(check_model(
            "distillation KL",
            &fx,
            step,
            tolerance,
            |fx, p| LossSpec::Distill {
                params: p,
                peer_layer: &fx.peer_layer,
                batch: fx.soft(),
            },
        )?);
        reports.push(check_model("combined", &fx, step, tolerance, |fx, p| {
            LossSpec::Combined {
                params: p,
                local: fx.hard(),
                distill: Some((&fx.peer_layer, fx.soft())),
                lambda_c: 0.7,
                lambda_dis: 0.3,
                proximal: None,
            }
        })?);
        reports.push(check_model(
            "combined + proximal",
            &fx,
            step,
            tolerance,
            |fx, p| LossSpec::Combined {
                params: p,
                local: fx.hard(),
                distill: Some((&fx.peer_layer, fx.soft())),
                lambda_c: 0.7,
                lambda_dis: 0.3,
                proximal: Some(Proximal {
                    global: &fx.global,
                    mu: 0.1,
                }),
            },
        )?);

        let enc_spec = |e: &EncryptorParams| -> Result<f64> {
            loss(&LossSpec::EncryptorCe {
                encryptor: e,
                frozen: &fx.params,
                stochastic: &fx.params.stochastic,
                batch: fx.hard(),
            })
        };
        let (_, analytic) = gradient(&LossSpec::EncryptorCe {
            encryptor: &fx.encryptor,
            frozen: &fx.params,
            stochastic: &fx.params.stochastic,
            batch: fx.hard(),
        })?;
        reports.push(GradCheckReport {
            name: "encryptor cross-entropy",
            num_params: fx.encryptor.tensors().iter().map(|t| t.len()).sum(),
            max_relative_error: check_collection(&fx.encryptor, &analytic, step, enc_spec)?,
            tolerance,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_settings() {
        let reports = run_suite(DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert_eq!(reports.len(), 10);
        for r in &reports {
            assert!(
                r.num_params <= 500,
                "{} has {} params",
                r.name,
                r.num_params
            );
            assert!(r.passed(), "{}: {:e}", r.name, r.max_relative_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let fx = Fixture::new(Activation::Tanh, 3).unwrap();
        fn spec<'p>(fx: &'p Fixture, p: &'p SegmentedParams) -> LossSpec<'p> {
            LossSpec::PlainCe {
                params: p,
                batch: fx.hard(),
            }
        }
        let (_, mut analytic) = gradient(&spec(&fx, &fx.params)).unwrap();
        analytic[0].data_mut()[0] += 0.1;
        let worst =
            check_collection(&fx.params, &analytic, DEFAULT_STEP, |p| loss(&spec(&fx, p))).unwrap();
        assert!(worst > DEFAULT_TOLERANCE);
    }
}
