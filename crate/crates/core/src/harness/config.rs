//! Experiment configuration: defaults, a YAML key-value file, and `--key value` flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{AttackRecipe, MatchMethod, ReidConfig, ReidMethod};
use crate::data::{PriorKind, WorldConfig};
use crate::fed::RoundConfig;
use crate::nn::{Head, ModelSpec};
use crate::store::ReprConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}` has the wrong type: {message}")]
    TypeError { key: String, message: String },
    #[error("config key `{key}` is out of range: {message}")]
    RangeViolation { key: String, message: String },
    #[error("malformed config: {0}")]
    Syntax(String),
    #[error("cannot read config {path}: {message}")]
    Unreadable { path: String, message: String },
}

impl ConfigError {
    /// The offending key, when the error is about one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key }
            | ConfigError::TypeError { key, .. }
            | ConfigError::RangeViolation { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorName {
    Random,
    Chrono,
    Photoset,
    Profile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    Linear,
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Noise,
    BkgRepl,
    RandAug,
    MmAug,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

/// Every knob of an experiment. Keys are flat; the same names work in a
/// config file and as `--key value` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // world
    pub users: usize,
    pub classes: usize,
    pub features: usize,
    pub n_per_user: usize,
    pub concentration: f64,
    pub noise: f64,
    pub drift: f64,
    pub albums: usize,
    pub background_size: usize,
    pub test_fraction: f64,
    // adversary prior
    pub prior_kind: PriorName,
    pub prior_fraction: f64,
    pub profile_class: usize,
    // model and federation
    pub model: ModelName,
    pub hidden: usize,
    pub rounds: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub seed: u64,
    // representation
    pub layer: String,
    pub normalize: bool,
    // attack recipe
    pub reid_methods: Vec<ReidMethod>,
    pub match_methods: Vec<MatchMethod>,
    pub match_pairs: usize,
    pub seen_fractions: Vec<f64>,
    /// Prior examples per user.
    pub prior_amounts: Vec<usize>,
    /// Shadow deltas per user available for training the attack.
    pub train_amounts: Vec<usize>,
    pub epoch_ranges: usize,
    pub set_sizes: Vec<usize>,
    // mitigation
    pub strategies: Vec<StrategyName>,
    pub noise_grid: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub clusters: usize,
    // output
    pub output_dir: String,
    pub format: ReportFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let f = RoundConfig::default();
        ExperimentConfig {
            users: w.users,
            classes: w.classes,
            features: w.features,
            n_per_user: w.n_per_user,
            concentration: w.concentration,
            noise: w.noise,
            drift: w.drift,
            albums: w.albums_per_user,
            background_size: w.background_size,
            test_fraction: w.test_fraction,
            prior_kind: PriorName::Random,
            prior_fraction: 0.5,
            profile_class: 0,
            model: ModelName::Mlp1,
            hidden: 32,
            rounds: f.rounds,
            client_fraction: f.fraction,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            eta: f.eta,
            seed: 0,
            layer: "w2".into(),
            normalize: true,
            reid_methods: ReidMethod::ALL.to_vec(),
            match_methods: MatchMethod::ALL.to_vec(),
            match_pairs: 2000,
            seen_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            prior_amounts: vec![1, 2, 5, 10, 25, 50, 100],
            train_amounts: vec![1, 2, 4, 8, 16],
            epoch_ranges: 5,
            set_sizes: vec![1, 4, 16],
            strategies: vec![
                StrategyName::Noise,
                StrategyName::BkgRepl,
                StrategyName::RandAug,
                StrategyName::MmAug,
            ],
            noise_grid: vec![1e-2, 1e-1, 1.0, 1e1, 1e2],
            alpha_grid: vec![0.5, 1.0, 2.0],
            clusters: crate::mitigation::DEFAULT_CLUSTERS,
            output_dir: "out".into(),
            format: ReportFormat::Csv,
        }
    }
}

fn range(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::RangeViolation {
        key: key.to_owned(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("users", self.users, 3),
            ("classes", self.classes, 2),
            ("features", self.features, 1),
            ("n_per_user", self.n_per_user, 4),
            ("albums", self.albums, 1),
            ("background_size", self.background_size, 1),
            ("rounds", self.rounds, 1),
            ("local_epochs", self.local_epochs, 1),
            ("batch_size", self.batch_size, 1),
            ("hidden", self.hidden, 1),
            ("match_pairs", self.match_pairs, 2),
            ("epoch_ranges", self.epoch_ranges, 1),
            ("clusters", self.clusters, 1),
        ];
        for (key, v, min) in positive {
            if v < min {
                return Err(range(key, format!("must be at least {min}, got {v}")));
            }
        }
        let unit = [
            ("drift", self.drift),
            ("test_fraction", self.test_fraction),
            ("prior_fraction", self.prior_fraction),
            ("client_fraction", self.client_fraction),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(range(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.test_fraction >= 1.0 {
            return Err(range("test_fraction", "must be below 1"));
        }
        if !(self.prior_fraction > 0.0 && self.prior_fraction < 1.0) {
            return Err(range("prior_fraction", "must lie strictly between 0 and 1"));
        }
        if self.client_fraction <= 0.0 {
            return Err(range("client_fraction", "must be positive"));
        }
        for (key, v) in [("concentration", self.concentration), ("noise", self.noise)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(range(key, format!("must be positive, got {v}")));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(range("eta", format!("must be non-negative, got {}", self.eta)));
        }
        if self.profile_class >= self.classes {
            return Err(range("profile_class", format!("must be below classes ({})", self.classes)));
        }
        if self.epoch_ranges > self.rounds {
            return Err(range("epoch_ranges", "cannot exceed rounds"));
        }
        if self.seen_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(range("seen_fractions", "entries must lie in [0, 1]"));
        }
        for (key, grid) in [
            ("prior_amounts", &self.prior_amounts),
            ("train_amounts", &self.train_amounts),
            ("set_sizes", &self.set_sizes),
        ] {
            if grid.contains(&0) {
                return Err(range(key, "entries must be at least 1"));
            }
        }
        if self.noise_grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(range("noise_grid", "entries must be non-negative"));
        }
        if self.alpha_grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(range("alpha_grid", "entries must be non-negative"));
        }
        if !self.model_spec().layout().iter().any(|l| l.name == self.layer) {
            return Err(range(
                "layer",
                format!("`{}` is not a layer of the {:?} model", self.layer, self.model),
            ));
        }
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            users: self.users,
            classes: self.classes,
            features: self.features,
            n_per_user: self.n_per_user,
            concentration: self.concentration,
            noise: self.noise,
            drift: self.drift,
            albums_per_user: self.albums,
            background_size: self.background_size,
            test_fraction: self.test_fraction,
            seed: self.seed,
        }
    }

    pub fn prior(&self) -> PriorKind {
        match self.prior_kind {
            PriorName::Random => PriorKind::Random,
            PriorName::Chrono => PriorKind::Chrono,
            PriorName::Photoset => PriorKind::Photoset,
            PriorName::Profile => PriorKind::Profile {
                class: self.profile_class,
            },
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelName::Linear => ModelSpec::linear(self.features, self.classes, Head::SoftmaxCe),
            ModelName::Mlp1 => ModelSpec::mlp1(self.features, self.hidden, self.classes, Head::SoftmaxCe),
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            fraction: self.client_fraction,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            eta: self.eta,
            rounds: self.rounds,
            seed: self.seed,
        }
    }

    pub fn repr(&self) -> ReprConfig {
        ReprConfig {
            layer: self.layer.clone(),
            normalize: self.normalize,
        }
    }

    pub fn recipe(&self) -> AttackRecipe {
        AttackRecipe {
            repr: self.repr(),
            reid: ReidConfig::default(),
            seed: self.seed,
        }
    }

    /// SHA-256 over the canonical JSON of every result-affecting key.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
            m.remove("format");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// A layer of overrides: key to raw value.
pub type Overrides = BTreeMap<String, Value>;

/// Reads a YAML key-value document. An empty document yields no overrides.
pub fn read_config_file(path: &Path) -> Result<Overrides, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_text(&text)
}

pub fn parse_config_text(text: &str) -> Result<Overrides, ConfigError> {
    let v: Value = serde_yaml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    match v {
        Value::Null => Ok(Overrides::new()),
        Value::Object(m) => Ok(m.into_iter().collect()),
        other => Err(ConfigError::Syntax(format!("expected a mapping of keys, got {other}"))),
    }
}

/// Parses `--key value` and `--key=value` pairs. Values are read as YAML
/// scalars or flow sequences, so `--users 5` is a number and `--set_sizes [1,4]`
/// a list. Dashes in keys are accepted in place of underscores.
pub fn parse_flags<S: AsRef<str>>(args: &[S]) -> Result<Overrides, ConfigError> {
    let mut out = Overrides::new();
    let mut it = args.iter().map(|s| s.as_ref());
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return Err(ConfigError::Syntax(format!("expected a --key flag, got `{a}`")));
        };
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| ConfigError::Syntax(format!("flag --{body} needs a value")))?;
                (body.to_owned(), v.to_owned())
            }
        };
        let key = key.replace('-', "_");
        let value: Value = serde_yaml::from_str(&raw).unwrap_or(Value::String(raw));
        out.insert(key, value);
    }
    Ok(out)
}

/// Applies override layers in order (later wins) on top of the defaults and
/// validates the result.
pub fn resolve(layers: &[Overrides]) -> Result<ExperimentConfig, ConfigError> {
    let defaults = match serde_json::to_value(ExperimentConfig::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    };
    let mut merged: Map<String, Value> = defaults.clone();
    for layer in layers {
        for (key, value) in layer {
            let Some(default) = defaults.get(key) else {
                return Err(ConfigError::UnknownKey { key: key.clone() });
            };
            check_sign(key, default, value)?;
            // type-check the key on its own so the diagnostic can name it
            let mut probe = defaults.clone();
            probe.insert(key.clone(), value.clone());
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(Value::Object(probe)) {
                return Err(ConfigError::TypeError {
                    key: key.clone(),
                    message: e.to_string(),
                });
            }
            merged.insert(key.clone(), value.clone());
        }
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A negative number for an unsigned key is a range problem, not a type problem.
fn check_sign(key: &str, default: &Value, value: &Value) -> Result<(), ConfigError> {
    let negative = |v: &Value| v.as_i64().is_some_and(|n| n < 0) || v.as_f64().is_some_and(|f| f < 0.0);
    let unsigned = |v: &Value| v.is_u64();
    let bad = match (default, value) {
        (d, v) if unsigned(d) => negative(v),
        (Value::Array(d), Value::Array(v)) if d.first().is_some_and(unsigned) => v.iter().any(negative),
        _ => false,
    };
    if bad {
        return Err(range(key, format!("must not be negative, got {value}")));
    }
    Ok(())
}

/// Defaults, then the optional file, then flags.
pub fn parse_config<S: AsRef<str>>(path: Option<&Path>, flags: &[S]) -> Result<ExperimentConfig, ConfigError> {
    let mut layers = Vec::new();
    if let Some(p) = path {
        layers.push(read_config_file(p)?);
    }
    layers.push(parse_flags(flags)?);
    resolve(&layers)
}
