//! TOML run configuration. Field names match `TrainConfig` one-to-one and
//! every field is optional; missing ones take the library defaults.
//!
//! ```toml
//! [model]
//! seq_len = 16
//! token_dim = 16
//! hidden = [500, 500, 2000]
//!
//! [loss]
//! lambda = 1.0
//! ascl_mode = "self-excluded"
//!
//! [optim]
//! batch_size = 256
//!
//! [run]
//! seed = 7
//! mode = "full"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tmcn_core::ascl::AsclMode;
use tmcn_core::model::HeadInput;
use tmcn_core::train::{Mode, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid value for {field}: {reason}")]
    Value { field: &'static str, reason: String },
    #[error(transparent)]
    Invalid(#[from] tmcn_core::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub seq_len: Option<usize>,
    pub token_dim: Option<usize>,
    pub expansion: Option<usize>,
    pub state_size: Option<usize>,
    pub conv_width: Option<usize>,
    pub proj_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub head_input: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub ascl_mode: Option<String>,
    pub denominator_floor: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub joint_epochs: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub clusters: Option<usize>,
    pub kmeans_restarts: Option<usize>,
    pub eval_every: Option<usize>,
    pub normalize: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub run: RunSection,
}

fn parse_enum<T: std::str::FromStr<Err = tmcn_core::Error>>(field: &'static str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|e: tmcn_core::Error| ConfigError::Value {
        field,
        reason: e.to_string(),
    })
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies every set field on top of `base`.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig, ConfigError> {
        let mut c = base.clone();
        let m = &self.model;
        set(&mut c.seq_len, m.seq_len);
        set(&mut c.token_dim, m.token_dim);
        set(&mut c.expansion, m.expansion);
        set(&mut c.state_size, m.state_size);
        set(&mut c.conv_width, m.conv_width);
        set(&mut c.proj_dim, m.proj_dim);
        set(&mut c.hidden, m.hidden.clone());
        if let Some(v) = &m.head_input {
            c.head_input = parse_enum::<HeadInput>("head_input", v)?;
        }
        let l = &self.loss;
        set(&mut c.lambda, l.lambda);
        set(&mut c.tau, l.tau);
        set(&mut c.denominator_floor, l.denominator_floor);
        if let Some(v) = &l.ascl_mode {
            c.ascl_mode = parse_enum::<AsclMode>("ascl_mode", v)?;
        }
        let o = &self.optim;
        set(&mut c.learning_rate, o.learning_rate);
        set(&mut c.batch_size, o.batch_size);
        set(&mut c.pretrain_epochs, o.pretrain_epochs);
        set(&mut c.joint_epochs, o.joint_epochs);
        let r = &self.run;
        set(&mut c.seed, r.seed);
        set(&mut c.kmeans_restarts, r.kmeans_restarts);
        set(&mut c.eval_every, r.eval_every);
        set(&mut c.normalize, r.normalize);
        if r.clusters.is_some() {
            c.clusters = r.clusters;
        }
        if let Some(v) = &r.mode {
            c.mode = parse_enum::<Mode>("mode", v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// The fully populated file form of `c`.
    pub fn from_train_config(c: &TrainConfig) -> Self {
        Self {
            model: ModelSection {
                seq_len: Some(c.seq_len),
                token_dim: Some(c.token_dim),
                expansion: Some(c.expansion),
                state_size: Some(c.state_size),
                conv_width: Some(c.conv_width),
                proj_dim: Some(c.proj_dim),
                hidden: Some(c.hidden.clone()),
                head_input: Some(c.head_input.as_str().into()),
            },
            loss: LossSection {
                lambda: Some(c.lambda),
                tau: Some(c.tau),
                ascl_mode: Some(c.ascl_mode.as_str().into()),
                denominator_floor: Some(c.denominator_floor),
            },
            optim: OptimSection {
                learning_rate: Some(c.learning_rate),
                batch_size: Some(c.batch_size),
                pretrain_epochs: Some(c.pretrain_epochs),
                joint_epochs: Some(c.joint_epochs),
            },
            run: RunSection {
                seed: Some(c.seed),
                mode: Some(c.mode.as_str().into()),
                clusters: c.clusters,
                kmeans_restarts: Some(c.kmeans_restarts),
                eval_every: Some(c.eval_every),
                normalize: Some(c.normalize),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Loads `path` (if any) over the library defaults.
pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig, ConfigError> {
    match path {
        Some(p) => ConfigFile::load(p)?.apply(&TrainConfig::default()),
        None => Ok(TrainConfig::default()),
    }
}
