//! Flat `key = value` run configuration covering the generator and the trainer.
//!
//! Blank lines and `#` comments are ignored; unknown keys are rejected; missing keys keep
//! their defaults. `seed` is shared by the generator and the trainer.

use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::GeneratorConfig;
use crate::error::{MsfanError, Result};
use crate::ssl_losses::CpsDirection;
use crate::support::SscGradient;
use crate::trainer::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MSFAN_SEED";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "num_sources",
    "num_classes",
    "input_dim",
    "samples_per_class_per_domain",
    "shots_per_class",
    "class_separation",
    "domain_shift_scale",
    "noise_sigma",
    "lambda_mps",
    "lambda_ssc",
    "lambda_mi",
    "batch_size",
    "labeled_batch_size",
    "steps",
    "cluster_interval",
    "metrics_interval",
    "enable_ips",
    "enable_cps",
    "enable_ssc",
    "enable_mi",
    "enable_weight_refresh",
    "train_classifier_weights",
    "hidden_dim",
    "feature_dim",
    "temperature",
    "k_list",
    "bank_eta",
    "phi",
    "margin",
    "tau",
    "cps_direction",
    "cps_all_clusterings",
    "support_threshold",
    "psi",
    "ssc_gradient",
    "mi_beta",
    "learning_rate",
    "momentum",
    "kmeans_max_iters",
    "kmeans_restarts",
];

fn bad(key: &str, value: &str, expected: &str) -> MsfanError {
    MsfanError::Config(format!("key `{key}`: cannot parse `{value}` as {expected}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, expected))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true/false")),
    }
}

fn parse_k_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value == "auto" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_num(key, v.trim(), "a comma-separated list of cluster counts"))
        .collect()
}

fn ssc_gradient_str(g: SscGradient) -> &'static str {
    match g {
        SscGradient::Prediction => "prediction",
        SscGradient::Target => "target",
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let g = &mut self.generator;
        let t = &mut self.train;
        let uint = |v: &str| parse_num::<usize>(key, v, "a non-negative integer");
        let float = |v: &str| parse_num::<f64>(key, v, "a number");
        match key {
            "seed" => {
                let s = parse_num::<u64>(key, value, "a non-negative integer")?;
                g.seed = s;
                t.seed = s;
            }
            "num_sources" => g.num_sources = uint(value)?,
            "num_classes" => g.num_classes = uint(value)?,
            "input_dim" => g.input_dim = uint(value)?,
            "samples_per_class_per_domain" => g.samples_per_class_per_domain = uint(value)?,
            "shots_per_class" => g.shots_per_class = uint(value)?,
            "class_separation" => g.class_separation = float(value)?,
            "domain_shift_scale" => g.domain_shift_scale = float(value)?,
            "noise_sigma" => g.noise_sigma = float(value)?,
            "lambda_mps" => t.lambda_mps = float(value)?,
            "lambda_ssc" => t.lambda_ssc = float(value)?,
            "lambda_mi" => t.lambda_mi = float(value)?,
            "batch_size" => t.batch_size = uint(value)?,
            "labeled_batch_size" => t.labeled_batch_size = uint(value)?,
            "steps" => t.steps = uint(value)?,
            "cluster_interval" => t.cluster_interval = uint(value)?,
            "metrics_interval" => t.metrics_interval = uint(value)?,
            "enable_ips" => t.enable_ips = parse_bool(key, value)?,
            "enable_cps" => t.enable_cps = parse_bool(key, value)?,
            "enable_ssc" => t.enable_ssc = parse_bool(key, value)?,
            "enable_mi" => t.enable_mi = parse_bool(key, value)?,
            "enable_weight_refresh" => t.enable_weight_refresh = parse_bool(key, value)?,
            "train_classifier_weights" => t.train_classifier_weights = parse_bool(key, value)?,
            "hidden_dim" => t.hidden_dim = uint(value)?,
            "feature_dim" => t.feature_dim = uint(value)?,
            "temperature" => t.temperature = float(value)?,
            "k_list" => t.k_list = parse_k_list(key, value)?,
            "bank_eta" => t.bank_eta = float(value)?,
            "phi" => t.ssl.phi = float(value)?,
            "margin" => t.ssl.margin = float(value)?,
            "tau" => t.ssl.tau = float(value)?,
            "cps_direction" => {
                t.cps.direction = CpsDirection::parse(value)
                    .ok_or_else(|| bad(key, value, "src_to_tgt/tgt_to_src/bidirectional/all_pairs"))?
            }
            "cps_all_clusterings" => t.cps.all_clusterings = parse_bool(key, value)?,
            "support_threshold" => t.support.threshold = float(value)?,
            "psi" => t.support.psi = float(value)?,
            "ssc_gradient" => {
                t.support.gradient = match value {
                    "prediction" => SscGradient::Prediction,
                    "target" => SscGradient::Target,
                    _ => return Err(bad(key, value, "prediction/target")),
                }
            }
            "mi_beta" => t.mi.beta = float(value)?,
            "learning_rate" => t.sgd.learning_rate = float(value)?,
            "momentum" => t.sgd.momentum = float(value)?,
            "kmeans_max_iters" => t.kmeans.max_iters = uint(value)?,
            "kmeans_restarts" => t.kmeans.restarts = uint(value)?,
            _ => return Err(MsfanError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of one key, in the form [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.generator;
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "num_sources" => g.num_sources.to_string(),
            "num_classes" => g.num_classes.to_string(),
            "input_dim" => g.input_dim.to_string(),
            "samples_per_class_per_domain" => g.samples_per_class_per_domain.to_string(),
            "shots_per_class" => g.shots_per_class.to_string(),
            "class_separation" => g.class_separation.to_string(),
            "domain_shift_scale" => g.domain_shift_scale.to_string(),
            "noise_sigma" => g.noise_sigma.to_string(),
            "lambda_mps" => t.lambda_mps.to_string(),
            "lambda_ssc" => t.lambda_ssc.to_string(),
            "lambda_mi" => t.lambda_mi.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "labeled_batch_size" => t.labeled_batch_size.to_string(),
            "steps" => t.steps.to_string(),
            "cluster_interval" => t.cluster_interval.to_string(),
            "metrics_interval" => t.metrics_interval.to_string(),
            "enable_ips" => t.enable_ips.to_string(),
            "enable_cps" => t.enable_cps.to_string(),
            "enable_ssc" => t.enable_ssc.to_string(),
            "enable_mi" => t.enable_mi.to_string(),
            "enable_weight_refresh" => t.enable_weight_refresh.to_string(),
            "train_classifier_weights" => t.train_classifier_weights.to_string(),
            "hidden_dim" => t.hidden_dim.to_string(),
            "feature_dim" => t.feature_dim.to_string(),
            "temperature" => t.temperature.to_string(),
            "k_list" if t.k_list.is_empty() => "auto".into(),
            "k_list" => t
                .k_list
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "bank_eta" => t.bank_eta.to_string(),
            "phi" => t.ssl.phi.to_string(),
            "margin" => t.ssl.margin.to_string(),
            "tau" => t.ssl.tau.to_string(),
            "cps_direction" => t.cps.direction.as_str().into(),
            "cps_all_clusterings" => t.cps.all_clusterings.to_string(),
            "support_threshold" => t.support.threshold.to_string(),
            "psi" => t.support.psi.to_string(),
            "ssc_gradient" => ssc_gradient_str(t.support.gradient).into(),
            "mi_beta" => t.mi.beta.to_string(),
            "learning_rate" => t.sgd.learning_rate.to_string(),
            "momentum" => t.sgd.momentum.to_string(),
            "kmeans_max_iters" => t.kmeans.max_iters.to_string(),
            "kmeans_restarts" => t.kmeans.restarts.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MsfanError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MsfanError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()
    }

    /// Replaces the seed of both halves.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            writeln!(out, "{key} = {value}").expect("writing to a String");
        }
        out
    }
}

/// Parses the seed override from the environment, if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| MsfanError::Config(format!("{SEED_ENV}=`{v}` is not a non-negative integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(MsfanError::Config(format!("{SEED_ENV}: {e}"))),
    }
}
