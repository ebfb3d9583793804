//! Server-side combination of client models.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `p_k = n_k / n`
    SampleCount,
    /// `1 / K`
    Uniform,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pk" => Ok(Weighting::SampleCount),
            "uniform" => Ok(Weighting::Uniform),
            other => Err(Error::Config(format!(
                "unknown aggregate weighting `{other}`"
            ))),
        }
    }
}

/// `p_k = n_k / sum_j n_j`
pub fn weights_pk(sample_counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sample_counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("sample counts sum to zero".into()));
    }
    if sample_counts.contains(&0) {
        return Err(Error::Config(
            "every client needs at least one sample".into(),
        ));
    }
    Ok(sample_counts
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect())
}

pub fn weights_for(weighting: Weighting, sample_counts: &[usize]) -> Result<Vec<f64>> {
    match weighting {
        Weighting::SampleCount => weights_pk(sample_counts),
        Weighting::Uniform => {
            if sample_counts.is_empty() {
                return Err(Error::Config("no clients to aggregate".into()));
            }
            Ok(vec![1.0 / sample_counts.len() as f64; sample_counts.len()])
        }
    }
}

fn check_shapes(reference: &[Tensor], others: &[&[Tensor]]) -> Result<()> {
    for other in others {
        if other.len() != reference.len()
            || other.iter().zip(reference).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::Dimension(
                "client parameter collections differ in shape".into(),
            ));
        }
    }
    Ok(())
}

/// Coordinate-wise `sum_k w_k * theta_k` over extractor and classifier tensors.
pub fn fedavg_aggregate(updates: &[Vec<Tensor>], weights: &[f64]) -> Result<Vec<Tensor>> {
    let Some(first) = updates.first() else {
        return Err(Error::Config("no client updates to aggregate".into()));
    };
    if updates.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let views: Vec<&[Tensor]> = updates.iter().map(Vec::as_slice).collect();
    check_shapes(first, &views)?;
    let mut out: Vec<Tensor> = first.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (update, &w) in updates.iter().zip(weights) {
        for (acc, t) in out.iter_mut().zip(update) {
            acc.add_scaled(t, w)?;
        }
    }
    Ok(out)
}

/// Accumulated momentum weight of `tau` local steps:
/// `(1/(1-rho)) * (tau - rho*(1-rho^tau)/(1-rho))`, exactly `tau` when `rho == 0`.
pub fn fednova_norm(tau: usize, rho: f64) -> Result<f64> {
    if tau == 0 {
        return Err(Error::Config(
            "FedNova needs at least one local step".into(),
        ));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("momentum {rho} outside [0, 1)")));
    }
    if rho == 0.0 {
        return Ok(tau as f64);
    }
    let tau_f = tau as f64;
    Ok((tau_f - rho * (1.0 - rho.powi(tau as i32)) / (1.0 - rho)) / (1.0 - rho))
}

/// Normalized client update `(incoming - updated) / (eta * a_norm)`, i.e. the
/// average descent direction per unit of accumulated step weight.
pub fn fednova_delta(
    updated: &[Tensor],
    incoming: &[Tensor],
    eta: f64,
    a_norm: f64,
) -> Result<Vec<Tensor>> {
    check_shapes(incoming, &[updated])?;
    let denom = eta * a_norm;
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::Config(format!(
            "FedNova normalizer eta*|a| = {denom}"
        )));
    }
    Ok(updated
        .iter()
        .zip(incoming)
        .map(|(u, g)| {
            let data = u
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| (b - a) / denom)
                .collect();
            Tensor::new(u.shape().to_vec(), data).expect("same shape")
        })
        .collect())
}

/// `theta <- theta - (sum_k |a_k| / K) * eta * sum_k delta_k / K`.
///
/// With `literal_server_step` the `eta` factor is dropped, matching the
/// recombination line as printed in the original algorithm.
pub fn fednova_aggregate(
    global: &[Tensor],
    deltas: &[Vec<Tensor>],
    norms: &[f64],
    eta: f64,
    literal_server_step: bool,
) -> Result<Vec<Tensor>> {
    if deltas.is_empty() {
        return Err(Error::Config("no client deltas to aggregate".into()));
    }
    if deltas.len() != norms.len() {
        return Err(Error::Dimension(format!(
            "{} deltas but {} norms",
            deltas.len(),
            norms.len()
        )));
    }
    let views: Vec<&[Tensor]> = deltas.iter().map(Vec::as_slice).collect();
    check_shapes(global, &views)?;
    let k = deltas.len() as f64;
    let tau_eff = norms.iter().sum::<f64>() / k;
    let step = if literal_server_step {
        tau_eff
    } else {
        tau_eff * eta
    };
    let mut out = global.to_vec();
    for delta in deltas {
        for (acc, d) in out.iter_mut().zip(delta) {
            acc.add_scaled(d, -step / k)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceBoundInputs {
    pub smoothness: f64,
    pub sigma2: f64,
    pub beta2: f64,
    pub kappa2: f64,
    pub eta: f64,
    pub e_min: usize,
    pub rounds: usize,
    pub loss_gap: f64,
    pub weights: Vec<f64>,
}

/// Evaluates the optimization-error bound for the global objective:
/// `4*gap/(E_min*eta*T) + 4*eta*L*sigma2*sum p_k^2 + 3(E_min-1)eta^2 sigma2 L^2
///  + 6 E_min (E_min-1) eta^2 L^2 kappa2`.
pub fn convergence_bound(inp: &ConvergenceBoundInputs) -> Result<f64> {
    let positive = [
        ("smoothness", inp.smoothness),
        ("eta", inp.eta),
        ("loss_gap", inp.loss_gap),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} = {v} must be positive")));
        }
    }
    if inp.e_min == 0 || inp.rounds == 0 {
        return Err(Error::Config("e_min and rounds must be positive".into()));
    }
    if inp.beta2.is_nan() || inp.beta2 < 1.0 {
        return Err(Error::Config(format!(
            "beta2 = {} must be at least 1",
            inp.beta2
        )));
    }
    if !(inp.kappa2 >= 0.0 && inp.sigma2 >= 0.0) {
        return Err(Error::Config(
            "sigma2 and kappa2 must be non-negative".into(),
        ));
    }
    let p_sum: f64 = inp.weights.iter().sum();
    if inp.weights.is_empty() || inp.weights.iter().any(|&p| p < 0.0) || (p_sum - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "weights must be non-negative and sum to 1, got {p_sum}"
        )));
    }

    let (l, eta) = (inp.smoothness, inp.eta);
    let e = inp.e_min as f64;
    let eta_l = eta * l;
    let first_limit = 1.0 / (2.0 * e);
    if eta_l > first_limit {
        return Err(Error::Config(format!(
            "learning-rate condition violated: eta*L = {eta_l} > 1/(2 E_min) = {first_limit}"
        )));
    }
    if inp.e_min > 1 {
        let second_limit = 1.0 / (2.0 * e * (e - 1.0) * (2.0 * inp.beta2 + 1.0)).sqrt();
        if eta_l > second_limit {
            return Err(Error::Config(format!(
                "learning-rate condition violated: eta*L = {eta_l} > 1/sqrt(2 E_min (E_min-1)(2 beta2+1)) = {second_limit}"
            )));
        }
    }

    let sum_p2: f64 = inp.weights.iter().map(|p| p * p).sum();
    let optimization = 4.0 * inp.loss_gap / (e * eta * inp.rounds as f64);
    let noise = 4.0 * eta * l * inp.sigma2 * sum_p2;
    let local_noise = 3.0 * (e - 1.0) * eta * eta * inp.sigma2 * l * l;
    let drift = 6.0 * e * (e - 1.0) * eta * eta * l * l * inp.kappa2;
    Ok(optimization + noise + local_noise + drift)
}
