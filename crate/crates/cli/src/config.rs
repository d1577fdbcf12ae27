use std::fs;
use std::path::{Path, PathBuf};

use comanip::checkpoint::config_hash;
use comanip::dyad::{GenerationConfig, PrimitiveKind};
use comanip::intent::{EpsNetConfig, TrainConfig};
use comanip::metrics::MetricsConfig;
use comanip::ppo::{EnvConfig, PolicyConfig, PpoConfig, RandomizationConfig};
use comanip::wavelet::ScalingFilter;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` needs a value")]
    MissingValue(String),
    #[error("invalid value for `{key}`: {detail}")]
    Value { key: String, detail: String },
    #[error("inconsistent config: {0}")]
    Invalid(String),
}

/// Diffusion-policy section: the network plus its training and held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntentSection {
    pub net: EpsNetConfig,
    /// `T̂`
    pub diffusion_steps: usize,
    /// DDIM steps `K`.
    pub sampling_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub normalize: bool,
    pub norm_floor: f64,
    pub filter: ScalingFilter,
    /// Repetition index kept out of training and used for evaluation; with
    /// fewer repetitions nothing is held out.
    pub holdout_repetition: u32,
    /// Label speed below which a window is ignored for sign agreement [m/s].
    pub min_speed: f64,
    /// Windows per DDIM batch during evaluation.
    pub eval_batch: usize,
}

impl Default for IntentSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            net: EpsNetConfig::default(),
            diffusion_steps: t.diffusion_steps,
            sampling_steps: t.sampling_steps,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            normalize: t.normalize,
            norm_floor: t.norm_floor,
            filter: t.filter,
            holdout_repetition: 2,
            min_speed: 0.05,
            eval_batch: 64,
        }
    }
}

impl IntentSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            diffusion_steps: self.diffusion_steps,
            sampling_steps: self.sampling_steps,
            normalize: self.normalize,
            norm_floor: self.norm_floor,
            filter: self.filter,
        }
    }
}

/// PPO evaluation conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoEvalSection {
    /// Held-out payload force [N].
    pub payload: f64,
    pub episodes: usize,
}

impl Default for PpoEvalSection {
    fn default() -> Self {
        Self {
            payload: 12.0,
            episodes: 100,
        }
    }
}

/// Closed-loop trials scored by the dyadic metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub primitives: Vec<PrimitiveKind>,
    /// Payload carried during the trials [kg].
    pub payload: f64,
    /// Primitive duration [s].
    pub duration: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            primitives: PrimitiveKind::ALL.to_vec(),
            payload: 1.0,
            duration: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random substream.
    pub seed: u64,
    /// Artifact directory.
    pub out: PathBuf,
    pub dyad: GenerationConfig,
    pub intent: IntentSection,
    pub ppo: PpoConfig,
    pub randomization: RandomizationConfig,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo_eval: PpoEvalSection,
    pub rollout: RolloutSection,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut dyad = GenerationConfig::default();
        dyad.window.stride = 4;
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dyad,
            intent: IntentSection::default(),
            ppo: PpoConfig::default(),
            randomization: RandomizationConfig::default(),
            env: EnvConfig::default(),
            policy: PolicyConfig::default(),
            ppo_eval: PpoEvalSection::default(),
            rollout: RolloutSection::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let net = &self.intent.net;
        if self.dyad.window.horizon != net.horizon {
            return bad(format!(
                "dyad.window.horizon {} differs from intent.net.horizon {}",
                self.dyad.window.horizon, net.horizon
            ));
        }
        if self.dyad.window.window != net.window_len() {
            return bad(format!(
                "dyad.window.window {} must equal horizon × block = {}",
                self.dyad.window.window,
                net.window_len()
            ));
        }
        net.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.dyad
            .dyad
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.randomization
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.env
            .validate(&self.randomization)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.ppo_eval.episodes == 0 || self.intent.eval_batch == 0 {
            return bad("ppo_eval.episodes and intent.eval_batch must be positive".into());
        }
        if self.rollout.primitives.is_empty() {
            return bad("rollout.primitives is empty".into());
        }
        Ok(())
    }

    /// Hash of everything except the output directory, so runs that differ
    /// only in where they write agree.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        config_hash(&c).expect("config serializes")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// `--key value` pair whose key is a dotted path into the config tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

/// Defaults, then the file (TOML, or JSON by `.json` extension), then the
/// overrides. Keys absent from the defaults are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[Override]) -> Result<ExperimentConfig, ConfigError> {
    let mut tree = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: shown.clone(),
            source,
        })?;
        let file: Value = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: shown.clone(),
                detail: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: shown.clone(),
                detail: e.to_string(),
            })?
        };
        merge(&mut tree, file, "")?;
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(tree).map_err(|e| ConfigError::Value {
        key: e.path().to_string(),
        detail: e.inner().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn merge(base: &mut Value, incoming: Value, prefix: &str) -> Result<(), ConfigError> {
    let Value::Object(b) = base else {
        *base = incoming;
        return Ok(());
    };
    let Value::Object(i) = incoming else {
        return Err(ConfigError::Value {
            key: prefix.to_string(),
            detail: format!("expected a table, got {incoming}"),
        });
    };
    for (k, v) in i {
        let path = join(prefix, &k);
        let slot = b.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(path.clone()))?;
        merge(slot, v, &path)?;
    }
    Ok(())
}

fn apply_override(tree: &mut Value, o: &Override) -> Result<(), ConfigError> {
    let mut node = tree;
    for part in o.key.split('.') {
        node = match node {
            Value::Object(m) => m.get_mut(part),
            _ => None,
        }
        .ok_or_else(|| ConfigError::UnknownKey(o.key.clone()))?;
    }
    if node.is_object() {
        return Err(ConfigError::Value {
            key: o.key.clone(),
            detail: "is a table; override one of its fields".into(),
        });
    }
    // JSON literals cover numbers, booleans and arrays; anything else is a string.
    *node = serde_json::from_str(&o.value).unwrap_or_else(|_| Value::String(o.value.clone()));
    Ok(())
}
