//! Client architecture: body, head, feature-space transform and MoE fusion.
//!
//! A client's prediction is built in three steps:
//!
//! 1. the body maps an input row to a local feature of width `d_i`;
//! 2. every expert head produces class logits from that feature. The local
//!    head reads it directly; a remote head `j` reads `W_j(W_com(feature))`,
//!    which lands the feature in head `j`'s own input space;
//! 3. the local feature, projected to class width by `query_proj`, attends
//!    over the stacked expert logits (used as both keys and values).
//!
//! Freezing is expressed through `requires_grad` on each parameter tensor:
//! [`ClientModel::set_trainable`] flips whole [`ParamGroup`]s, and anything
//! frozen enters the graph as a constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Gradients, Graph, Tensor, TensorError, Var};
use crate::Rng;

pub type ClientId = u32;

const HEAD_MAGIC: &[u8; 4] = b"DFLH";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expert {0} has no feature-space transform on this client")]
    UnknownExpert(ClientId),
    #[error("expert list has duplicate ids or includes the local client: {0:?}")]
    ExpertOrder(Vec<ClientId>),
    #[error("expert {expert} expects feature width {expected}, local feature width is {actual}")]
    DimensionalIncompatibility {
        expert: ClientId,
        expected: usize,
        actual: usize,
    },
    #[error("input width {actual} does not match body input width {expected}")]
    InputWidth { expected: usize, actual: usize },
    #[error("malformed head bytes: {0}")]
    Decode(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl BodySpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            feature_dim,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.feature_dim);
        w
    }
}

// Uniform fan-in init. `gain2` is the variance gain: 2 ahead of a ReLU, 1 otherwise.
fn fan_in_uniform(fan_in: usize, fan_out: usize, gain2: f64, rng: &mut Rng) -> Tensor {
    let bound = (3.0 * gain2 / fan_in as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[d_i × C]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Option<Tensor>,
    pub owner_id: ClientId,
    pub version: u32,
}

impl Head {
    pub fn new(weight: Tensor, bias: Option<Tensor>, owner_id: ClientId) -> Self {
        Self {
            weight,
            bias,
            owner_id,
            version: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }

    /// Frozen copy suitable for use as a remote expert.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detached(),
            bias: self.bias.as_ref().map(Tensor::detached),
            owner_id: self.owner_id,
            version: self.version,
        }
    }

    /// `magic "DFLH" | u32 owner | u32 version | u32 tensor count | tensors`,
    /// all little-endian, tensors in the layout of [`tensor::write_tensor`].
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&self.owner_id.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        let count: u32 = if self.bias.is_some() { 2 } else { 1 };
        out.extend_from_slice(&count.to_le_bytes());
        tensor::write_tensor(&self.weight, &mut out);
        if let Some(b) = &self.bias {
            tensor::write_tensor(b, &mut out);
        }
        out
    }

    pub fn encoded_len(&self) -> usize {
        16 + tensor::tensor_byte_len(&self.weight)
            + self.bias.as_ref().map_or(0, tensor::tensor_byte_len)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ModelError::Decode(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != HEAD_MAGIC {
            return Err(bad("missing magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (owner_id, version, count) = (word(4), word(8), word(12));
        let mut rest = &bytes[16..];
        let weight = tensor::read_tensor(&mut rest).map_err(|e| bad(&e.to_string()))?;
        let bias = match count {
            1 => None,
            2 => Some(tensor::read_tensor(&mut rest).map_err(|e| bad(&e.to_string()))?),
            n => return Err(bad(&format!("expected 1 or 2 tensors, got {n}"))),
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        if weight.rank() != 2 || bias.as_ref().is_some_and(|b| b.numel() != weight.cols()) {
            return Err(bad("inconsistent head shapes"));
        }
        Ok(Self {
            weight,
            bias,
            owner_id,
            version,
        })
    }

    /// Bitwise equality of parameters and header.
    pub fn bit_eq(&self, other: &Head) -> bool {
        self.owner_id == other.owner_id
            && self.version == other.version
            && self.weight.bit_eq(&other.weight)
            && match (&self.bias, &other.bias) {
                (Some(a), Some(b)) => a.bit_eq(b),
                (None, None) => true,
                _ => false,
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpaceTransform {
    /// `[d_i × d_c]`, shared by all remote experts.
    pub w_com: Tensor,
    /// expert id → `[d_c × d_j]`
    pub per_expert: BTreeMap<ClientId, Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeHead {
    /// `[d_i × C]`, produces the attention query.
    pub query_proj: Tensor,
    /// Softmax-gate columns `[d_i × 1]` keyed by expert id (own id included).
    /// Only populated for the classic gated-MoE ablation.
    pub gate: BTreeMap<ClientId, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Body,
    Head,
    Fst,
    Moe,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Body, Self::Head, Self::Fst, Self::Moe];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    BodyWeight(usize),
    BodyBias(usize),
    HeadWeight,
    HeadBias,
    CommonProj,
    ExpertProj(ClientId),
    QueryProj,
    Gate(ClientId),
}

impl ParamKey {
    pub fn group(self) -> ParamGroup {
        match self {
            Self::BodyWeight(_) | Self::BodyBias(_) => ParamGroup::Body,
            Self::HeadWeight | Self::HeadBias => ParamGroup::Head,
            Self::CommonProj | Self::ExpertProj(_) => ParamGroup::Fst,
            Self::QueryProj | Self::Gate(_) => ParamGroup::Moe,
        }
    }
}

/// How expert predictions are fused into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Cross-attention with the local feature as query. With `use_fst` off,
    /// remote heads read the local feature directly.
    Attention { use_fst: bool },
    /// Classic softmax gate over experts, conditioned on the local feature.
    Gate,
}

impl Default for Fusion {
    fn default() -> Self {
        Fusion::Attention { use_fst: true }
    }
}

/// A remote head acting as an expert.
#[derive(Debug, Clone, Copy)]
pub struct Expert<'a> {
    pub id: ClientId,
    pub head: &'a Head,
}

/// Weights of the local-training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub local: f64,
    pub moe: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            local: 0.5,
            moe: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub id: ClientId,
    pub spec: BodySpec,
    pub classes: usize,
    pub common_dim: usize,
    /// Linear layers; ReLU between consecutive layers, none after the last.
    pub body: Vec<Linear>,
    pub head: Head,
    pub fst: FeatureSpaceTransform,
    pub moe: MoeHead,
}

impl ClientModel {
    pub fn new(
        id: ClientId,
        spec: BodySpec,
        classes: usize,
        common_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let widths = spec.widths();
        let depth = widths.len() - 1;
        let body = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                weight: fan_in_uniform(w[0], w[1], if i + 1 < depth { 2.0 } else { 1.0 }, rng),
                bias: Some(Tensor::zeros(&[w[1]])),
            })
            .collect();
        let d = spec.feature_dim;
        let head = Head::new(
            fan_in_uniform(d, classes, 1.0, rng),
            Some(Tensor::zeros(&[classes])),
            id,
        );
        let fst = FeatureSpaceTransform {
            w_com: fan_in_uniform(d, common_dim, 1.0, rng),
            per_expert: BTreeMap::new(),
        };
        let moe = MoeHead {
            query_proj: fan_in_uniform(d, classes, 1.0, rng),
            gate: BTreeMap::new(),
        };
        let mut model = Self {
            id,
            spec,
            classes,
            common_dim,
            body,
            head,
            fst,
            moe,
        };
        model.set_trainable(&[]);
        model
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// Keys of every parameter, in a fixed order.
    pub fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, layer) in self.body.iter().enumerate() {
            keys.push(ParamKey::BodyWeight(i));
            if layer.bias.is_some() {
                keys.push(ParamKey::BodyBias(i));
            }
        }
        keys.push(ParamKey::HeadWeight);
        if self.head.bias.is_some() {
            keys.push(ParamKey::HeadBias);
        }
        keys.push(ParamKey::CommonProj);
        keys.extend(
            self.fst
                .per_expert
                .keys()
                .map(|&id| ParamKey::ExpertProj(id)),
        );
        keys.push(ParamKey::QueryProj);
        keys.extend(self.moe.gate.keys().map(|&id| ParamKey::Gate(id)));
        keys
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::BodyWeight(i) => self.body.get(i).map(|l| &l.weight),
            ParamKey::BodyBias(i) => self.body.get(i).and_then(|l| l.bias.as_ref()),
            ParamKey::HeadWeight => Some(&self.head.weight),
            ParamKey::HeadBias => self.head.bias.as_ref(),
            ParamKey::CommonProj => Some(&self.fst.w_com),
            ParamKey::ExpertProj(id) => self.fst.per_expert.get(&id),
            ParamKey::QueryProj => Some(&self.moe.query_proj),
            ParamKey::Gate(id) => self.moe.gate.get(&id),
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::BodyWeight(i) => self.body.get_mut(i).map(|l| &mut l.weight),
            ParamKey::BodyBias(i) => self.body.get_mut(i).and_then(|l| l.bias.as_mut()),
            ParamKey::HeadWeight => Some(&mut self.head.weight),
            ParamKey::HeadBias => self.head.bias.as_mut(),
            ParamKey::CommonProj => Some(&mut self.fst.w_com),
            ParamKey::ExpertProj(id) => self.fst.per_expert.get_mut(&id),
            ParamKey::QueryProj => Some(&mut self.moe.query_proj),
            ParamKey::Gate(id) => self.moe.gate.get_mut(&id),
        }
    }

    /// Mutable references to every parameter, in [`keys`](Self::keys) order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.body {
            out.push(&mut layer.weight);
            if let Some(b) = &mut layer.bias {
                out.push(b);
            }
        }
        out.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            out.push(b);
        }
        out.push(&mut self.fst.w_com);
        out.extend(self.fst.per_expert.values_mut());
        out.push(&mut self.moe.query_proj);
        out.extend(self.moe.gate.values_mut());
        out
    }

    /// Makes exactly `groups` trainable; every other parameter is frozen and
    /// loses any pending gradient.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        for key in self.keys() {
            let on = groups.contains(&key.group());
            let t = self.param_mut(key).expect("key from keys()");
            t.set_requires_grad(on);
            if !on {
                t.zero_grad();
            }
        }
    }

    /// Number of scalars in `group`.
    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.keys()
            .into_iter()
            .filter(|k| k.group() == group)
            .map(|k| self.param(k).map_or(0, Tensor::numel))
            .sum()
    }

    /// Body plus head: what full-model sharing would transmit.
    pub fn local_network_params(&self) -> usize {
        self.param_count(ParamGroup::Body) + self.param_count(ParamGroup::Head)
    }

    /// Value copies of one group, in key order.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<(ParamKey, Tensor)> {
        self.keys()
            .into_iter()
            .filter(|k| k.group() == group)
            .map(|k| (k, self.param(k).expect("key from keys()").detached()))
            .collect()
    }

    /// True when every parameter of `group` is bit-identical to `snapshot`.
    pub fn matches_snapshot(&self, snapshot: &[(ParamKey, Tensor)]) -> bool {
        let group_keys: Vec<ParamKey> = match snapshot.first() {
            Some((k, _)) => self
                .keys()
                .into_iter()
                .filter(|key| key.group() == k.group())
                .collect(),
            None => return true,
        };
        group_keys.len() == snapshot.len()
            && snapshot
                .iter()
                .all(|(k, t)| self.param(*k).is_some_and(|p| p.bit_eq(t)))
    }

    /// Adds transforms (and gate columns, if `with_gate`) for experts seen for
    /// the first time. `experts` yields `(id, feature width)`; existing
    /// entries are kept.
    pub fn register_experts(
        &mut self,
        experts: impl IntoIterator<Item = (ClientId, usize)>,
        with_gate: bool,
        rng: &mut Rng,
    ) {
        let d = self.feature_dim();
        if with_gate && !self.moe.gate.contains_key(&self.id) {
            self.moe.gate.insert(self.id, Tensor::zeros(&[d, 1]));
        }
        for (id, width) in experts {
            if id == self.id {
                continue;
            }
            if !self.fst.per_expert.contains_key(&id) {
                let w = fan_in_uniform(self.common_dim, width, 1.0, rng);
                self.fst.per_expert.insert(id, w);
            }
            if with_gate {
                self.moe
                    .gate
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(&[d, 1]));
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.spec.input_dim {
            return Err(ModelError::InputWidth {
                expected: self.spec.input_dim,
                actual: if x.rank() == 2 { x.cols() } else { x.numel() },
            });
        }
        Ok(())
    }

    pub fn body_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut pass = Pass::new(self);
        let xv = pass.input(x)?;
        let f = pass.body_forward(xv)?;
        Ok(pass.value(f).clone())
    }

    pub fn local_output(&self, x: &Tensor) -> Result<Tensor> {
        let mut pass = Pass::new(self);
        let xv = pass.input(x)?;
        let out = pass.local_output(xv)?;
        Ok(pass.value(out).clone())
    }

    /// Prediction of `expert` on an already computed local feature. Passing the
    /// local head's id selects the local head with no transform.
    pub fn expert_prediction(
        &self,
        feature: &Tensor,
        expert: Option<Expert<'_>>,
        fusion: Fusion,
    ) -> Result<Tensor> {
        let mut pass = Pass::new(self);
        let f = pass.graph.constant(feature.detached());
        let out = match expert {
            None => pass.local_head(f)?,
            Some(e) => pass.remote_prediction(f, e, fusion)?,
        };
        Ok(pass.value(out).clone())
    }

    pub fn moe_output(&self, x: &Tensor, experts: &[Expert<'_>], fusion: Fusion) -> Result<Tensor> {
        let mut pass = Pass::new(self);
        let xv = pass.input(x)?;
        let feature = pass.body_forward(xv)?;
        let out = pass.moe_output(feature, experts, fusion)?;
        Ok(pass.value(out).clone())
    }

    /// Argmax of the fused output; ties go to the lowest class index.
    pub fn inference(
        &self,
        x: &Tensor,
        experts: &[Expert<'_>],
        fusion: Fusion,
    ) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.moe_output(x, experts, fusion)?))
    }

    /// Local-training objective `w.local·CE(local) + w.moe·CE(fused)`.
    /// Gradients are accumulated into body and head only.
    pub fn local_loss(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        experts: &[Expert<'_>],
        weights: LossWeights,
        fusion: Fusion,
    ) -> Result<f64> {
        self.set_trainable(&[ParamGroup::Body, ParamGroup::Head]);
        let (loss, bound) = {
            let mut pass = Pass::new(self);
            let xv = pass.input(x)?;
            let loss = pass.local_loss(xv, labels, experts, weights, fusion)?;
            pass.backward(loss)?
        };
        bound.apply(self)?;
        Ok(loss)
    }

    /// Fusion-training objective `CE(fused)`. Gradients are accumulated into
    /// the feature-space transform and MoE groups only.
    pub fn moe_decision_loss(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        experts: &[Expert<'_>],
        fusion: Fusion,
    ) -> Result<f64> {
        self.set_trainable(&[ParamGroup::Fst, ParamGroup::Moe]);
        let (loss, bound) = {
            let mut pass = Pass::new(self);
            let xv = pass.input(x)?;
            let loss = pass.moe_decision_loss(xv, labels, experts, fusion)?;
            pass.backward(loss)?
        };
        bound.apply(self)?;
        Ok(loss)
    }

    /// Plain SGD over every trainable parameter.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        tensor::sgd_step(&mut self.params_mut(), lr)?;
        Ok(())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Remote experts in canonical (ascending id) order. Duplicate ids and the
/// local id are rejected.
pub fn canonical_experts<'a>(local: ClientId, experts: &[Expert<'a>]) -> Result<Vec<Expert<'a>>> {
    let mut sorted = experts.to_vec();
    sorted.sort_by_key(|e| e.id);
    if sorted.iter().any(|e| e.id == local) || sorted.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(ModelError::ExpertOrder(
            experts.iter().map(|e| e.id).collect(),
        ));
    }
    Ok(sorted)
}

/// One forward pass of a [`ClientModel`] on a fresh graph. Parameters are
/// bound lazily, once each.
pub struct Pass<'m> {
    pub graph: Graph,
    model: &'m ClientModel,
    bound: BTreeMap<ParamKey, Var>,
}

/// Gradients of one pass, ready to be written into the model.
pub struct BoundGradients {
    bound: BTreeMap<ParamKey, Var>,
    grads: Gradients,
}

impl BoundGradients {
    /// Accumulates into every trainable parameter of `model`. Trainable
    /// parameters the loss never touched get an explicit zero gradient.
    pub fn apply(&self, model: &mut ClientModel) -> Result<()> {
        for key in model.keys() {
            let t = model.param_mut(key).expect("key from keys()");
            match self.bound.get(&key) {
                Some(&var) => self.grads.write_into(var, t)?,
                None if t.requires_grad() => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?;
                }
                None => {}
            }
        }
        Ok(())
    }
}

impl<'m> Pass<'m> {
    pub fn new(model: &'m ClientModel) -> Self {
        Self {
            graph: Graph::new(),
            model,
            bound: BTreeMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn input(&mut self, x: &Tensor) -> Result<Var> {
        self.model.check_input(x)?;
        Ok(self.graph.constant(x.detached()))
    }

    fn bind(&mut self, key: ParamKey) -> Result<Var> {
        if let Some(&v) = self.bound.get(&key) {
            return Ok(v);
        }
        let t = self.model.param(key).ok_or(match key {
            ParamKey::ExpertProj(id) | ParamKey::Gate(id) => ModelError::UnknownExpert(id),
            _ => ModelError::Decode(format!("missing parameter {key:?}")),
        })?;
        let v = self.graph.leaf(t);
        self.bound.insert(key, v);
        Ok(v)
    }

    pub fn body_forward(&mut self, x: Var) -> Result<Var> {
        let depth = self.model.body.len();
        let mut h = x;
        for i in 0..depth {
            let w = self.bind(ParamKey::BodyWeight(i))?;
            h = self.graph.matmul(h, w)?;
            if self.model.body[i].bias.is_some() {
                let b = self.bind(ParamKey::BodyBias(i))?;
                h = self.graph.add_bias(h, b)?;
            }
            if i + 1 < depth {
                h = self.graph.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn local_head(&mut self, feature: Var) -> Result<Var> {
        let w = self.bind(ParamKey::HeadWeight)?;
        let mut out = self.graph.matmul(feature, w)?;
        if self.model.head.bias.is_some() {
            let b = self.bind(ParamKey::HeadBias)?;
            out = self.graph.add_bias(out, b)?;
        }
        Ok(out)
    }

    pub fn local_output(&mut self, x: Var) -> Result<Var> {
        let f = self.body_forward(x)?;
        self.local_head(f)
    }

    fn apply_frozen_head(&mut self, input: Var, head: &Head) -> Result<Var> {
        let w = self.graph.constant(head.weight.detached());
        let mut out = self.graph.matmul(input, w)?;
        if let Some(b) = &head.bias {
            let b = self.graph.constant(b.detached());
            out = self.graph.add_bias(out, b)?;
        }
        Ok(out)
    }

    /// `head_j(W_j(W_com(feature)))`, or `head_j(feature)` without transforms.
    pub fn remote_prediction(
        &mut self,
        feature: Var,
        expert: Expert<'_>,
        fusion: Fusion,
    ) -> Result<Var> {
        let use_fst = !matches!(fusion, Fusion::Attention { use_fst: false });
        let input = if use_fst {
            if !self.model.fst.per_expert.contains_key(&expert.id) {
                return Err(ModelError::UnknownExpert(expert.id));
            }
            let w_com = self.bind(ParamKey::CommonProj)?;
            let w_j = self.bind(ParamKey::ExpertProj(expert.id))?;
            let common = self.graph.matmul(feature, w_com)?;
            self.graph.matmul(common, w_j)?
        } else {
            let actual = self.model.feature_dim();
            if expert.head.feature_dim() != actual {
                return Err(ModelError::DimensionalIncompatibility {
                    expert: expert.id,
                    expected: expert.head.feature_dim(),
                    actual,
                });
            }
            feature
        };
        self.apply_frozen_head(input, expert.head)
    }

    /// Fused prediction over the local head followed by `experts` in
    /// ascending id order.
    pub fn moe_output(
        &mut self,
        feature: Var,
        experts: &[Expert<'_>],
        fusion: Fusion,
    ) -> Result<Var> {
        let experts = canonical_experts(self.model.id, experts)?;
        let mut preds = vec![self.local_head(feature)?];
        for &e in &experts {
            preds.push(self.remote_prediction(feature, e, fusion)?);
        }
        match fusion {
            Fusion::Attention { .. } => {
                let wq = self.bind(ParamKey::QueryProj)?;
                let query = self.graph.matmul(feature, wq)?;
                Ok(self.graph.row_attention(query, &preds, &preds)?)
            }
            Fusion::Gate => {
                let mut cols = vec![self.bind(ParamKey::Gate(self.model.id))?];
                for e in &experts {
                    cols.push(self.bind(ParamKey::Gate(e.id))?);
                }
                let g = self.graph.concat_cols(&cols)?;
                let logits = self.graph.matmul(feature, g)?;
                let weights = self.graph.softmax(logits, 1)?;
                Ok(self.graph.mixture(weights, &preds)?)
            }
        }
    }

    pub fn local_loss(
        &mut self,
        x: Var,
        labels: &[usize],
        experts: &[Expert<'_>],
        weights: LossWeights,
        fusion: Fusion,
    ) -> Result<Var> {
        let feature = self.body_forward(x)?;
        let local = self.local_head(feature)?;
        let ce_local = self.graph.cross_entropy(local, labels)?;
        let mut loss = self.graph.scale(ce_local, weights.local)?;
        if weights.moe != 0.0 {
            let fused = self.moe_output(feature, experts, fusion)?;
            let ce_moe = self.graph.cross_entropy(fused, labels)?;
            let term = self.graph.scale(ce_moe, weights.moe)?;
            loss = self.graph.add(loss, term)?;
        }
        Ok(loss)
    }

    pub fn moe_decision_loss(
        &mut self,
        x: Var,
        labels: &[usize],
        experts: &[Expert<'_>],
        fusion: Fusion,
    ) -> Result<Var> {
        let feature = self.body_forward(x)?;
        let fused = self.moe_output(feature, experts, fusion)?;
        Ok(self.graph.cross_entropy(fused, labels)?)
    }

    /// Runs backward from `loss`, returning its value and the bound gradients.
    pub fn backward(self, loss: Var) -> Result<(f64, BoundGradients)> {
        let value = self.graph.value(loss).data()[0];
        let grads = self.graph.backward(loss)?;
        Ok((
            value,
            BoundGradients {
                bound: self.bound,
                grads,
            },
        ))
    }
}
