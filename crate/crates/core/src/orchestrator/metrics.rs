//! Per-round metrics, the metrics CSV file, and evaluation helpers.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, forward_plain, SegmentedParams};

pub const CSV_HEADER: &str =
    "round,accuracy,mean_loss,e_t,lambda_c,lambda_dis,cum_seconds,cum_server_bytes,cum_peer_bytes";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub e_t: usize,
    pub lambda_c: f64,
    pub lambda_dis: f64,
    pub cum_seconds: f64,
    pub cum_server_bytes: u64,
    pub cum_peer_bytes: u64,
    /// Sampled peer of each client (None when distillation was off).
    pub sampled_peers: Vec<Option<usize>>,
    /// Per-client accumulated momentum weight (FedNova runs only).
    pub a_norms: Vec<f64>,
}

/// Fraction of samples whose plain-path argmax equals the label; ties go to
/// the lowest class index.
pub fn evaluate_top1(params: &SegmentedParams, holdout: &Dataset) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::Config(
            "cannot evaluate on an empty holdout set".into(),
        ));
    }
    let mut correct = 0usize;
    for (x, &y) in holdout.inputs.iter().zip(&holdout.labels) {
        if argmax(forward_plain(params, x)?.data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / holdout.len() as f64)
}

/// First round whose accuracy reaches `target`; `None` means never reached.
pub fn rounds_to_target(metrics: &[RoundMetrics], target: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.accuracy >= target)
        .map(|m| m.round)
}

/// `%.9g`-style rendering: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-5..9).contains(&exp) {
        trim(format!("{v:.*}", (8 - exp) as usize))
    } else {
        format!("{}e{exp}", trim(mantissa.to_string()))
    }
}

pub fn metrics_to_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.round,
            format_sig9(m.accuracy),
            format_sig9(m.mean_loss),
            m.e_t,
            format_sig9(m.lambda_c),
            format_sig9(m.lambda_dis),
            format_sig9(m.cum_seconds),
            m.cum_server_bytes,
            m.cum_peer_bytes
        );
    }
    out
}

pub fn write_metrics_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(metrics)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str, name: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::format(name, "missing or unexpected CSV header")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::format(
                name,
                format!("row {} has {} columns", i + 1, cols.len()),
            ));
        }
        let bad = |c: &str| Error::format(name, format!("row {}: bad value `{c}`", i + 1));
        let f = |c: &str| c.trim().parse::<f64>().map_err(|_| bad(c));
        let u = |c: &str| c.trim().parse::<u64>().map_err(|_| bad(c));
        out.push(RoundMetrics {
            round: u(cols[0])? as usize,
            accuracy: f(cols[1])?,
            mean_loss: f(cols[2])?,
            e_t: u(cols[3])? as usize,
            lambda_c: f(cols[4])?,
            lambda_dis: f(cols[5])?,
            cum_seconds: f(cols[6])?,
            cum_server_bytes: u(cols[7])?,
            cum_peer_bytes: u(cols[8])?,
            sampled_peers: Vec::new(),
            a_norms: Vec::new(),
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text, &path.display().to_string())
}

/// Rounds-to-target table, one `target,rounds` row per target; unreached
/// targets are marked `✗`.
pub fn rounds_to_target_report(metrics: &[RoundMetrics], targets: &[f64]) -> String {
    let mut out = String::from("target,rounds\n");
    for &t in targets {
        let cell = rounds_to_target(metrics, t).map_or_else(|| "✗".to_string(), |r| r.to_string());
        let _ = writeln!(out, "{},{cell}", format_sig9(t));
    }
    out
}
