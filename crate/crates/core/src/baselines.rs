//! Comparators: local-only training, FedAvg, and the ablation variants.
//!
//! Every variant runs the same phase A. They differ only in whether heads
//! are exchanged, how experts are fused, and what is averaged afterwards;
//! [`Variant`] exposes those choices and the orchestrator consults it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClientModel, Fusion, Head, ParamGroup, ParamKey};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("models are not homogeneous: {0}")]
    HeterogeneousModels(String),
    #[error("nothing to aggregate")]
    Empty,
    #[error("{models} models but {counts} sample counts")]
    CountMismatch { models: usize, counts: usize },
}

pub type Result<T, E = BaselineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    LocalOnly,
    FedAvg,
    NoMoe,
    NoFst,
    CentralizedMoeFst,
    AggregatedHead,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::LocalOnly,
        Variant::FedAvg,
        Variant::NoMoe,
        Variant::NoFst,
        Variant::CentralizedMoeFst,
        Variant::AggregatedHead,
    ];

    /// Rows of the ablation table, in order.
    pub const ABLATIONS: [Variant; 6] = [
        Variant::Full,
        Variant::NoMoe,
        Variant::NoFst,
        Variant::CentralizedMoeFst,
        Variant::AggregatedHead,
        Variant::LocalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LocalOnly => "local_only",
            Variant::FedAvg => "fed_avg",
            Variant::NoMoe => "no_moe",
            Variant::NoFst => "no_fst",
            Variant::CentralizedMoeFst => "centralized_moe_fst",
            Variant::AggregatedHead => "aggregated_head",
        }
    }

    pub fn fusion(self) -> Fusion {
        match self {
            Variant::NoMoe => Fusion::Gate,
            Variant::NoFst => Fusion::Attention { use_fst: false },
            _ => Fusion::Attention { use_fst: true },
        }
    }

    /// Whether heads travel over the simulated network.
    pub fn exchanges_heads(self) -> bool {
        !matches!(self, Variant::LocalOnly | Variant::FedAvg)
    }

    /// Whether phase C runs and evaluation reads the fused output. The other
    /// variants train with the MoE loss term off and evaluate the local head.
    pub fn uses_moe(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoMoe | Variant::NoFst | Variant::CentralizedMoeFst
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

fn group_shapes(model: &ClientModel, groups: &[ParamGroup]) -> Vec<(ParamKey, Vec<usize>)> {
    model
        .keys()
        .into_iter()
        .filter(|k| groups.contains(&k.group()))
        .map(|k| (k, model.param(k).expect("key from keys()").shape().to_vec()))
        .collect()
}

/// Σ (wᵢ / Σ w)·xᵢ, element by element, in the order given. Normalising
/// first keeps a lone model bit-exact.
fn weighted_mean(tensors: &[&Tensor], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    (0..tensors[0].numel())
        .map(|k| {
            tensors
                .iter()
                .zip(&norm)
                .map(|(t, w)| w * t.data()[k])
                .sum()
        })
        .collect()
}

fn assign(model: &mut ClientModel, key: ParamKey, values: &[f64]) {
    model
        .param_mut(key)
        .expect("shape-checked key")
        .assign(values)
        .expect("mean of finite values is finite");
}

/// Sample-weighted average of body and head over `models`; every model
/// receives the same aggregate. Transform and MoE parameters are untouched.
pub fn fedavg_round(models: &mut [&mut ClientModel], counts: &[usize]) -> Result<()> {
    if models.is_empty() {
        return Err(BaselineError::Empty);
    }
    if models.len() != counts.len() {
        return Err(BaselineError::CountMismatch {
            models: models.len(),
            counts: counts.len(),
        });
    }
    let groups = [ParamGroup::Body, ParamGroup::Head];
    let layout = group_shapes(models[0], &groups);
    for m in models.iter().skip(1) {
        if group_shapes(m, &groups) != layout {
            return Err(BaselineError::HeterogeneousModels(format!(
                "client {} body/head shapes differ from client {}",
                m.id, models[0].id
            )));
        }
    }
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(BaselineError::Empty);
    }
    for (key, _) in layout {
        let mean = {
            let ts: Vec<&Tensor> = models
                .iter()
                .map(|m| m.param(key).expect("checked"))
                .collect();
            weighted_mean(&ts, &weights)
        };
        for m in models.iter_mut() {
            assign(m, key, &mean);
        }
    }
    Ok(())
}

/// Unweighted mean of the transform and MoE parameters. Shared parameters
/// average over all models; each per-expert map averages over the models
/// that hold one for that expert.
pub fn average_moe_fst(models: &mut [&mut ClientModel]) -> Result<()> {
    if models.is_empty() {
        return Err(BaselineError::Empty);
    }
    let mut keys: Vec<ParamKey> = Vec::new();
    for m in models.iter() {
        for k in m.keys() {
            if matches!(k.group(), ParamGroup::Fst | ParamGroup::Moe) && !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    keys.sort();
    for key in keys {
        let holders: Vec<usize> = (0..models.len())
            .filter(|&i| models[i].param(key).is_some())
            .collect();
        let mean = {
            let ts: Vec<&Tensor> = holders
                .iter()
                .map(|&i| models[i].param(key).unwrap())
                .collect();
            if ts.iter().any(|t| t.shape() != ts[0].shape()) {
                return Err(BaselineError::HeterogeneousModels(format!(
                    "{key:?} shapes differ across clients"
                )));
            }
            weighted_mean(&ts, &vec![1.0; ts.len()])
        };
        for &i in &holders {
            assign(models[i], key, &mean);
        }
    }
    Ok(())
}

/// Unweighted mean of `own` and `received`, keeping `own`'s owner and version.
pub fn aggregate_head(own: &Head, received: &[&Head]) -> Result<Head> {
    let mut all = vec![own];
    all.extend_from_slice(received);
    for h in &all {
        if h.weight.shape() != own.weight.shape() || h.bias.is_some() != own.bias.is_some() {
            return Err(BaselineError::HeterogeneousModels(format!(
                "head of client {} has shape {:?}, expected {:?}",
                h.owner_id,
                h.weight.shape(),
                own.weight.shape()
            )));
        }
    }
    let ones = vec![1.0; all.len()];
    let weights: Vec<&Tensor> = all.iter().map(|h| &h.weight).collect();
    let weight = Tensor::new(own.weight.shape().to_vec(), weighted_mean(&weights, &ones))
        .expect("mean of finite values is finite");
    let bias = own.bias.as_ref().map(|b| {
        let biases: Vec<&Tensor> = all.iter().map(|h| h.bias.as_ref().unwrap()).collect();
        Tensor::new(b.shape().to_vec(), weighted_mean(&biases, &ones)).expect("finite mean")
    });
    Ok(Head {
        weight,
        bias,
        owner_id: own.owner_id,
        version: own.version,
    })
}
