//! Experiment configuration.
//!
//! Every field has a default, unknown keys are rejected, and the resolved
//! configuration is embedded in each run's outputs. `common_dim = 0` means
//! "the widest client feature".

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::Variant;
use crate::data::SyntheticSpec;
use crate::model::{BodySpec, ClientId, LossWeights};
use crate::netsim::FaultPlan;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda_loc: f64,
    pub lambda_moe: f64,
    /// Learning rate of local body + head training.
    pub lr_a: f64,
    /// Learning rate of feature-space transform + MoE training.
    pub lr_c: f64,
    pub epochs_a: usize,
    pub epochs_c: usize,
    pub batch_size: usize,
    pub common_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_loc: 0.5,
            lambda_moe: 0.5,
            lr_a: 0.02,
            lr_c: 0.05,
            epochs_a: 1,
            epochs_c: 1,
            batch_size: 32,
            common_dim: 0,
        }
    }
}

impl TrainingConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            local: self.lambda_loc,
            moe: self.lambda_moe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub examples_per_client: usize,
    pub noise_sigma: f64,
    pub mean_scale: f64,
    pub dirichlet_alpha: f64,
    pub train_fraction: f64,
    /// Used when `source = "csv"`; `classes` and `dim` then come from the file.
    pub csv_path: String,
    pub label_column: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 4,
            dim: 32,
            examples_per_client: 600,
            noise_sigma: SyntheticSpec::DEFAULT_NOISE_SIGMA,
            mean_scale: SyntheticSpec::DEFAULT_MEAN_SCALE,
            dirichlet_alpha: 0.5,
            train_fraction: 0.7,
            csv_path: String::new(),
            label_column: "label".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    /// Block-average factor applied to this client's inputs (1, 2, 4 or 8).
    #[serde(default = "one")]
    pub feature_shift: usize,
}

fn one() -> usize {
    1
}

impl ClientConfig {
    pub fn new(hidden_dims: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            hidden_dims,
            feature_dim,
            feature_shift: 1,
        }
    }

    pub fn body_spec(&self, input_dim: usize) -> BodySpec {
        BodySpec::new(input_dim, self.hidden_dims.clone(), self.feature_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Seeds data, partitioning, initialisation and minibatch order.
    pub seed: u64,
    /// Seeds link drops only.
    pub fault_seed: u64,
    pub rounds: u32,
    pub variant: Variant,
    pub relay_enabled: bool,
    /// Train clients on the rayon pool; results are identical either way.
    pub parallel: bool,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub faults: FaultPlan,
    pub clients: Vec<ClientConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            fault_seed: 0,
            rounds: 100,
            variant: Variant::Full,
            relay_enabled: false,
            parallel: false,
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            faults: FaultPlan::default(),
            clients: vec![
                ClientConfig::new(vec![64], 16),
                ClientConfig::new(vec![48], 12),
                ClientConfig::new(vec![64, 32], 20),
                ClientConfig::new(vec![32], 16),
            ],
        }
    }
}

impl ExperimentConfig {
    /// Four clients with different hidden layers but one shared feature
    /// width, as every ablation variant requires.
    pub fn homogeneous() -> Self {
        Self {
            clients: vec![
                ClientConfig::new(vec![64], 16),
                ClientConfig::new(vec![48], 16),
                ClientConfig::new(vec![64, 32], 16),
                ClientConfig::new(vec![32], 16),
            ],
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        (0..self.clients.len() as ClientId).collect()
    }

    /// Width of the common feature space.
    pub fn common_dim(&self) -> usize {
        if self.training.common_dim > 0 {
            self.training.common_dim
        } else {
            self.clients
                .iter()
                .map(|c| c.feature_dim)
                .max()
                .unwrap_or(1)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.clients.len() < 2 {
            return Err(invalid("clients", "at least 2 clients are required"));
        }
        let t = &self.training;
        for (field, v) in [
            ("training.lambda_loc", t.lambda_loc),
            ("training.lambda_moe", t.lambda_moe),
            ("training.lr_a", t.lr_a),
            ("training.lr_c", t.lr_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (field, v) in [
            ("training.epochs_a", t.epochs_a),
            ("training.epochs_c", t.epochs_c),
            ("training.batch_size", t.batch_size),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        self.validate_data()?;
        self.validate_clients()?;
        let rate = self.faults.link_drop_rate;
        if !(0.0..=1.0).contains(&rate) {
            return Err(invalid(
                "faults.link_drop_rate",
                format!("{rate} is outside [0, 1]"),
            ));
        }
        let ids: BTreeSet<ClientId> = self.client_ids().into_iter().collect();
        if let Some(bad) = self
            .faults
            .removed_clients
            .iter()
            .find(|id| !ids.contains(id))
        {
            return Err(invalid(
                "faults.removed_clients",
                format!("unknown client {bad}"),
            ));
        }
        if self.faults.removed_clients.len() == ids.len() {
            return Err(invalid(
                "faults.removed_clients",
                "cannot remove every client",
            ));
        }
        if let Some(&(a, b)) = self
            .faults
            .severed_links
            .iter()
            .find(|(a, b)| !ids.contains(a) || !ids.contains(b) || a == b)
        {
            return Err(invalid(
                "faults.severed_links",
                format!("invalid link ({a}, {b})"),
            ));
        }
        self.validate_variant()
    }

    fn validate_data(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.source == DataSource::Csv {
            if d.csv_path.is_empty() {
                return Err(invalid("data.csv_path", "required when source = \"csv\""));
            }
            if d.label_column.is_empty() {
                return Err(invalid("data.label_column", "must not be empty"));
            }
        } else {
            if d.classes < 2 {
                return Err(invalid("data.classes", "must be at least 2"));
            }
            if d.dim < d.classes {
                return Err(invalid("data.dim", "must be at least data.classes"));
            }
            if d.examples_per_client < 4 {
                return Err(invalid("data.examples_per_client", "must be at least 4"));
            }
            for (field, v) in [
                ("data.noise_sigma", d.noise_sigma),
                ("data.mean_scale", d.mean_scale),
            ] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(field, "must be positive"));
                }
            }
        }
        if !(d.dirichlet_alpha > 0.0 && d.dirichlet_alpha.is_finite()) {
            return Err(invalid("data.dirichlet_alpha", "must be positive"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(invalid(
                "data.train_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        Ok(())
    }

    fn validate_clients(&self) -> Result<(), ConfigError> {
        for (i, c) in self.clients.iter().enumerate() {
            if c.feature_dim == 0 {
                return Err(invalid(
                    format!("clients[{i}].feature_dim"),
                    "must be positive",
                ));
            }
            if c.hidden_dims.contains(&0) {
                return Err(invalid(
                    format!("clients[{i}].hidden_dims"),
                    "widths must be positive",
                ));
            }
            if ![1, 2, 4, 8].contains(&c.feature_shift) {
                return Err(invalid(
                    format!("clients[{i}].feature_shift"),
                    "must be one of 1, 2, 4, 8",
                ));
            }
            if self.data.source == DataSource::Synthetic
                && !self.data.dim.is_multiple_of(c.feature_shift)
            {
                return Err(invalid(
                    format!("clients[{i}].feature_shift"),
                    format!("does not divide data.dim = {}", self.data.dim),
                ));
            }
        }
        Ok(())
    }

    fn validate_variant(&self) -> Result<(), ConfigError> {
        let first = &self.clients[0];
        let requirement = match self.variant {
            Variant::FedAvg => Some("identical hidden_dims and feature_dim"),
            Variant::NoFst | Variant::CentralizedMoeFst | Variant::AggregatedHead => {
                Some("identical feature_dim")
            }
            _ => None,
        };
        let Some(requirement) = requirement else {
            return Ok(());
        };
        for (i, c) in self.clients.iter().enumerate().skip(1) {
            let same_body = c.hidden_dims == first.hidden_dims;
            if c.feature_dim != first.feature_dim || (self.variant == Variant::FedAvg && !same_body)
            {
                return Err(invalid(
                    format!("clients[{i}]"),
                    format!(
                        "variant {} needs {requirement} across clients",
                        self.variant
                    ),
                ));
            }
        }
        Ok(())
    }
}
