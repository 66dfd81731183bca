//! Experiment configuration files.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bootstrap::InfluenceConfig;
use crate::bounds::Method;
use crate::enn::EnnConfig;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::scm_highdim::{HighDimDefaults, HighDimScm};
use crate::scm_lowdim::{LowDimScm, LI_MODEL_1};

/// Bundled presets: `(name, TOML text)`.
pub const PRESETS: [(&str, &str); 5] = [
    ("lowdim-desk", include_str!("../../presets/lowdim-desk.toml")),
    ("lowdim-sweep", include_str!("../../presets/lowdim-sweep.toml")),
    ("highdim-desk", include_str!("../../presets/highdim-desk.toml")),
    ("smoke", include_str!("../../presets/smoke.toml")),
    ("paper-scale", include_str!("../../presets/paper-scale.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub replicates: usize,
    /// Replicates run concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    /// Nominal miscoverage for interval scores and the bootstrap.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub enn: EnnConfig,
    #[serde(default)]
    pub bootstrap: InfluenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn one() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_obs: usize,
    pub n_exp: usize,
    pub n_test: usize,
    pub scm: ScmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScmConfig {
    /// Binary covariates; either a named preset or explicit coefficients.
    Lowdim {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preset: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<LowDimScm>,
    },
    /// Real covariates from a file, or seeded standard normals when no file
    /// is given. Coefficients are generated unless `model` is supplied.
    Highdim {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariates: Option<String>,
        #[serde(default = "default_rows")]
        synthetic_rows: usize,
        #[serde(default = "default_cols")]
        synthetic_cols: usize,
        #[serde(default)]
        generator: HighDimDefaults,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<HighDimScm>,
    },
}

fn default_rows() -> usize {
    4802
}

fn default_cols() -> usize {
    20
}

impl ScmConfig {
    pub fn lowdim_model(&self) -> Result<Option<LowDimScm>> {
        match self {
            ScmConfig::Lowdim { preset, model } => {
                let scm = match (preset, model) {
                    (_, Some(m)) => m.clone(),
                    (Some(p), None) => LowDimScm::preset(p).ok_or_else(|| Error::Config {
                        path: "data.scm.preset".into(),
                        message: format!("unknown preset `{p}` (known: {LI_MODEL_1})"),
                    })?,
                    (None, None) => LowDimScm::li_model_1(),
                };
                scm.validate()?;
                Ok(Some(scm))
            }
            ScmConfig::Highdim { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 3,
        }
    }
}

/// Grid of sample sizes; the base `data` sizes fill unspecified axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub n_obs: Vec<usize>,
    #[serde(default)]
    pub n_exp: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: String::new(),
            message: e.message().to_string(),
        })?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown preset `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            path: String::new(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: path.into(),
                message: message.into(),
            })
        };
        if self.replicates == 0 {
            return bad("replicates", "must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        if self.methods.is_empty() {
            return bad("methods", "list at least one method");
        }
        if self.methods.contains(&Method::PlugIn) {
            return bad("methods", "`plug_in` is a label, not a runnable method");
        }
        if self.data.n_obs == 0 || self.data.n_exp == 0 || self.data.n_test == 0 {
            return bad("data", "n_obs, n_exp and n_test must be positive");
        }
        if self.network.hidden == 0 {
            return bad("network.hidden", "must be positive");
        }
        self.train.validate().map_err(|e| Error::Config {
            path: "train".into(),
            message: e.to_string(),
        })?;
        self.enn.validate().map_err(|e| Error::Config {
            path: "enn".into(),
            message: e.to_string(),
        })?;
        if self.bootstrap.replicates < 100 {
            return bad("bootstrap.replicates", "must be at least 100");
        }
        if !(self.bootstrap.damping > 0.0) {
            return bad("bootstrap.damping", "must be positive");
        }
        if let Some(s) = &self.sweep {
            if s.n_obs.iter().chain(&s.n_exp).any(|&n| n == 0) {
                return bad("sweep", "sample sizes must be positive");
            }
        }
        self.data.scm.lowdim_model()?;
        Ok(())
    }

    /// `(n_obs, n_exp)` settings in run order.
    pub fn settings(&self) -> Vec<(usize, usize)> {
        match &self.sweep {
            None => vec![(self.data.n_obs, self.data.n_exp)],
            Some(s) => {
                let obs = if s.n_obs.is_empty() { vec![self.data.n_obs] } else { s.n_obs.clone() };
                let exp = if s.n_exp.is_empty() { vec![self.data.n_exp] } else { s.n_exp.clone() };
                obs.iter()
                    .flat_map(|&o| exp.iter().map(move |&e| (o, e)))
                    .collect()
            }
        }
    }
}
