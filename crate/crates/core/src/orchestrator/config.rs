//! Simulation configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::Weighting;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::rng::derive_seed;
use crate::schedules::{EpochScheduleConfig, LambdaScheduleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    FedAvg,
    FedProx,
    FedNova,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedNova => "fednova",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Method::FedAvg),
            "fedprox" => Ok(Method::FedProx),
            "fednova" => Ok(Method::FedNova),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub method: Method,
    pub with_eds: bool,

    // Epoch annealing and loss mixing (encrypted-data-sharing runs only).
    pub e_max: usize,
    pub e_min: usize,
    pub t_alpha: usize,
    pub t_beta: usize,
    pub lambda_m: f64,
    pub lambda_epsilon: f64,
    /// Pins `lambda_c = 1, lambda_dis = 0` in every round.
    pub force_local_only: bool,
    /// Local epochs per round for runs without encrypted data sharing.
    pub local_epochs: usize,

    pub mu: f64,
    pub rho: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,

    // Encrypted data generation.
    pub e_c: usize,
    pub e_g: usize,
    pub pretrain_learning_rate: f64,
    pub encryptor_learning_rate: f64,
    pub encryptor_weight_decay: f64,
    pub encryptor_hidden: usize,
    pub encryptor_residual_gain: f64,
    pub stochastic_scale: f64,

    // Model.
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,

    // Data.
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub holdout_fraction: f64,
    pub alpha: f64,
    pub data_seed: Option<u64>,
    pub partition_seed: Option<u64>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,

    pub aggregate_weighting: Weighting,
    pub fednova_literal_server_step: bool,

    pub server_rtt: f64,
    pub peer_rtt: f64,

    pub base_seed: u64,
    pub parallel: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_clients: 5,
            rounds: 60,
            method: Method::FedAvg,
            with_eds: true,
            e_max: 5,
            e_min: 1,
            t_alpha: 1,
            t_beta: 3,
            lambda_m: 3.0,
            lambda_epsilon: 0.01,
            force_local_only: false,
            local_epochs: 1,
            mu: 0.1,
            rho: 0.9,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            batch_size: 32,
            e_c: 40,
            e_g: 20,
            pretrain_learning_rate: 0.05,
            encryptor_learning_rate: 0.01,
            encryptor_weight_decay: 0.0,
            encryptor_hidden: 32,
            encryptor_residual_gain: 0.01,
            stochastic_scale: 0.5,
            hidden_dims: vec![32],
            feature_dim: 16,
            activation: Activation::Tanh,
            num_classes: 5,
            samples_per_class: 250,
            input_dim: 16,
            spread: 0.3,
            holdout_fraction: 0.2,
            alpha: 0.1,
            data_seed: None,
            partition_seed: None,
            idx_images: None,
            idx_labels: None,
            aggregate_weighting: Weighting::SampleCount,
            fednova_literal_server_step: false,
            server_rtt: 300.0,
            peer_rtt: 1.0,
            base_seed: 0,
            parallel: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean `{value}` for `{key}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn parse_opt_seed(key: &str, value: &str) -> Result<Option<u64>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl SimConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_clients" => self.num_clients = parse_value(key, value)?,
            "rounds" => self.rounds = parse_value(key, value)?,
            "method" => self.method = value.parse()?,
            "with_eds" => self.with_eds = parse_bool(key, value)?,
            "e_max" => self.e_max = parse_value(key, value)?,
            "e_min" => self.e_min = parse_value(key, value)?,
            "t_alpha" => self.t_alpha = parse_value(key, value)?,
            "t_beta" => self.t_beta = parse_value(key, value)?,
            "lambda_m" => self.lambda_m = parse_value(key, value)?,
            "lambda_epsilon" => self.lambda_epsilon = parse_value(key, value)?,
            "force_local_only" => self.force_local_only = parse_bool(key, value)?,
            "local_epochs" => self.local_epochs = parse_value(key, value)?,
            "mu" => self.mu = parse_value(key, value)?,
            "rho" => self.rho = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "e_c" => self.e_c = parse_value(key, value)?,
            "e_g" => self.e_g = parse_value(key, value)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = parse_value(key, value)?,
            "encryptor_learning_rate" => self.encryptor_learning_rate = parse_value(key, value)?,
            "encryptor_weight_decay" => self.encryptor_weight_decay = parse_value(key, value)?,
            "encryptor_hidden" => self.encryptor_hidden = parse_value(key, value)?,
            "encryptor_residual_gain" => self.encryptor_residual_gain = parse_value(key, value)?,
            "stochastic_scale" => self.stochastic_scale = parse_value(key, value)?,
            "hidden_dims" => self.hidden_dims = parse_list(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "activation" => self.activation = value.parse()?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "samples_per_class" => self.samples_per_class = parse_value(key, value)?,
            "input_dim" => self.input_dim = parse_value(key, value)?,
            "spread" => self.spread = parse_value(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_opt_seed(key, value)?,
            "partition_seed" => self.partition_seed = parse_opt_seed(key, value)?,
            "idx_images" => self.idx_images = parse_opt_path(value),
            "idx_labels" => self.idx_labels = parse_opt_path(value),
            "aggregate_weighting" => self.aggregate_weighting = value.parse()?,
            "fednova_literal_server_step" => {
                self.fednova_literal_server_step = parse_bool(key, value)?
            }
            "server_rtt" => self.server_rtt = parse_value(key, value)?,
            "peer_rtt" => self.peer_rtt = parse_value(key, value)?,
            "base_seed" => self.base_seed = parse_value(key, value)?,
            "parallel" => self.parallel = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// lines starting with `#` are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes every field; `parse(to_config_string())` reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }
        };
        let seed = |s: Option<u64>| s.map_or_else(|| "auto".into(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string())
        };
        let activation = match self.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        let weighting = match self.aggregate_weighting {
            Weighting::SampleCount => "pk",
            Weighting::Uniform => "uniform",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("num_clients", self.num_clients.to_string()),
            ("rounds", self.rounds.to_string()),
            ("method", self.method.name().into()),
            ("with_eds", self.with_eds.to_string()),
            ("e_max", self.e_max.to_string()),
            ("e_min", self.e_min.to_string()),
            ("t_alpha", self.t_alpha.to_string()),
            ("t_beta", self.t_beta.to_string()),
            ("lambda_m", self.lambda_m.to_string()),
            ("lambda_epsilon", self.lambda_epsilon.to_string()),
            ("force_local_only", self.force_local_only.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("mu", self.mu.to_string()),
            ("rho", self.rho.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("e_c", self.e_c.to_string()),
            ("e_g", self.e_g.to_string()),
            (
                "pretrain_learning_rate",
                self.pretrain_learning_rate.to_string(),
            ),
            (
                "encryptor_learning_rate",
                self.encryptor_learning_rate.to_string(),
            ),
            (
                "encryptor_weight_decay",
                self.encryptor_weight_decay.to_string(),
            ),
            ("encryptor_hidden", self.encryptor_hidden.to_string()),
            (
                "encryptor_residual_gain",
                self.encryptor_residual_gain.to_string(),
            ),
            ("stochastic_scale", self.stochastic_scale.to_string()),
            ("hidden_dims", list(&self.hidden_dims)),
            ("feature_dim", self.feature_dim.to_string()),
            ("activation", activation.into()),
            ("num_classes", self.num_classes.to_string()),
            ("samples_per_class", self.samples_per_class.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("spread", self.spread.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("alpha", self.alpha.to_string()),
            ("data_seed", seed(self.data_seed)),
            ("partition_seed", seed(self.partition_seed)),
            ("idx_images", path(&self.idx_images)),
            ("idx_labels", path(&self.idx_labels)),
            ("aggregate_weighting", weighting.into()),
            (
                "fednova_literal_server_step",
                self.fednova_literal_server_step.to_string(),
            ),
            ("server_rtt", self.server_rtt.to_string()),
            ("peer_rtt", self.peer_rtt.to_string()),
            ("base_seed", self.base_seed.to_string()),
            ("parallel", self.parallel.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn epoch_schedule(&self) -> Result<EpochScheduleConfig> {
        EpochScheduleConfig::new(self.e_max, self.e_min, self.t_alpha, self.t_beta)
    }

    pub fn lambda_schedule(&self) -> Result<LambdaScheduleConfig> {
        LambdaScheduleConfig::new(self.lambda_m, self.lambda_epsilon)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed
            .unwrap_or_else(|| derive_seed(self.base_seed, "data", &[]))
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition_seed
            .unwrap_or_else(|| derive_seed(self.base_seed, "partition", &[]))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_clients < 2 {
            return fail(format!(
                "num_clients = {} (need at least 2)",
                self.num_clients
            ));
        }
        if self.rounds < 1 {
            return fail("rounds must be at least 1".into());
        }
        if self.with_eds {
            self.epoch_schedule()?;
            self.lambda_schedule()?;
            if self.e_c == 0 || self.e_g == 0 {
                return fail("e_c and e_g must be at least 1".into());
            }
            if self.encryptor_hidden == 0 {
                return fail("encryptor_hidden must be positive".into());
            }
            for (name, v) in [
                ("pretrain_learning_rate", self.pretrain_learning_rate),
                ("encryptor_learning_rate", self.encryptor_learning_rate),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return fail(format!("{name} = {v} must be positive"));
                }
            }
            if !(self.stochastic_scale >= 0.0 && self.stochastic_scale.is_finite()) {
                return fail(format!(
                    "stochastic_scale = {} must be non-negative",
                    self.stochastic_scale
                ));
            }
        } else if self.local_epochs == 0 {
            return fail("local_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho = {} outside [0, 1)", self.rho));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu = {} must be non-negative", self.mu));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 || self.feature_dim == 0 {
            return fail("batch_size and feature_dim must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha = {} must be positive", self.alpha));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            return fail(format!(
                "holdout_fraction = {} must lie in (0, 1)",
                self.holdout_fraction
            ));
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            return fail("idx_images and idx_labels must be given together".into());
        }
        if self.idx_images.is_none()
            && (self.num_classes < 2 || self.samples_per_class == 0 || self.input_dim == 0)
        {
            return fail("synthetic data needs num_classes >= 2 and positive sizes".into());
        }
        if !(self.server_rtt >= self.peer_rtt && self.peer_rtt >= 0.0) {
            return fail(format!(
                "network model needs server_rtt >= peer_rtt >= 0, got {} / {}",
                self.server_rtt, self.peer_rtt
            ));
        }
        Ok(())
    }
}
