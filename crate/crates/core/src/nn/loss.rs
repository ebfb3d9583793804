use crate::error::{Error, Result};

/// Added inside every logarithm so a zero probability costs a large but finite loss.
pub const LOG_EPS: f64 = 1e-12;

/// `-ln(pred[label] + LOG_EPS)`
pub fn cross_entropy(pred: &[f64], label: usize) -> Result<f64> {
    let p = pred
        .get(label)
        .ok_or_else(|| Error::Index(format!("label {label} for {} classes", pred.len())))?;
    Ok(-(p + LOG_EPS).ln())
}

/// `sum_c target[c] * ln((target[c] + eps) / (pred[c] + eps))`
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Dimension(format!(
            "KL over {} vs {} classes",
            target.len(),
            pred.len()
        )));
    }
    Ok(target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * ((t + LOG_EPS) / (p + LOG_EPS)).ln())
        .sum())
}

/// d cross_entropy / d pred
pub(crate) fn cross_entropy_dprobs(pred: &[f64], label: usize) -> Vec<f64> {
    let mut d = vec![0.0; pred.len()];
    d[label] = -1.0 / (pred[label] + LOG_EPS);
    d
}

/// d kl_divergence / d pred
pub(crate) fn kl_dprobs(target: &[f64], pred: &[f64]) -> Vec<f64> {
    target
        .iter()
        .zip(pred)
        .map(|(t, p)| -t / (p + LOG_EPS))
        .collect()
}
