//! The three-phase round and the experiment driver.
//!
//! A round is a barrier-synchronised schedule:
//!
//! - **A**, local training: body + head on `λ_loc·CE(local) + λ_MoE·CE(fused)`,
//!   transforms and MoE frozen. The head is stamped with the round index.
//! - **B**, exchange: heads go through [`NetSim`]; receivers keep the newest
//!   version of each peer's head.
//! - **C**, MoE decision: transforms + MoE on `CE(fused)`, body and head
//!   frozen. Experts seen for the first time get fresh transform maps first.
//!
//! then every active client is evaluated on its test split.
//!
//! Each client owns two random streams: one for initialisation and phase-A
//! minibatch order, one for new transform maps and phase-C minibatch order.
//! Phase C therefore never perturbs phase A, and clients can be trained on
//! separate threads without changing any result.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::baselines::{self, BaselineError, Variant};
use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::data::{self, CsvSchema, DataError, Dataset, PartitionSpec, SyntheticSpec};
use crate::metrics::{self, MetricError};
use crate::model::{
    argmax_rows, BodySpec, ClientId, ClientModel, Expert, Fusion, Head, LossWeights, ModelError,
    ParamGroup, ParamKey,
};
use crate::netsim::{self, comm_report, DeliveryReport, ExpertRegistry, NetError, NetSim, Traffic};
use crate::report::{ClientSummary, RoundRecord, Summary};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("client {0} has no training data")]
    DataEmpty(ClientId),
    #[error("client {client}: phase {phase} modified frozen {group:?} parameters")]
    PhaseIsolation {
        client: ClientId,
        phase: char,
        group: ParamGroup,
    },
    #[error("no client with id {0}")]
    UnknownClient(ClientId),
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: ClientId,
    pub model: ClientModel,
    pub train: Dataset,
    pub test: Dataset,
    pub registry: ExpertRegistry,
    pub lr_a: f64,
    pub lr_c: f64,
    pub rng: Rng,
    pub rng_moe: Rng,
}

impl ClientState {
    /// Builds a client whose model is initialised from stream
    /// `streams::client(id)` of `seed`. Learning rates start at zero.
    pub fn new(
        id: ClientId,
        spec: BodySpec,
        common_dim: usize,
        train: Dataset,
        test: Dataset,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::with_stream(seed, streams::client(id));
        let model = ClientModel::new(id, spec, train.classes, common_dim, &mut rng);
        Self {
            id,
            model,
            train,
            test,
            registry: ExpertRegistry::default(),
            lr_a: 0.0,
            lr_c: 0.0,
            rng,
            rng_moe: Rng::with_stream(seed, streams::client_moe(id)),
        }
    }

    pub fn with_lrs(mut self, lr_a: f64, lr_c: f64) -> Self {
        self.lr_a = lr_a;
        self.lr_c = lr_c;
        self
    }

    /// Received heads as experts, ascending by owner.
    pub fn experts(&self) -> Vec<Expert<'_>> {
        experts_of(&self.registry)
    }

    /// Gives every registry entry a transform map (and a gate column when
    /// `with_gate`), drawing new maps from the phase-C stream.
    pub fn sync_experts(&mut self, with_gate: bool) {
        let widths: Vec<(ClientId, usize)> = self
            .registry
            .heads()
            .map(|h| (h.owner_id, h.feature_dim()))
            .collect();
        self.model
            .register_experts(widths, with_gate, &mut self.rng_moe);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundPlan {
    pub round_index: u32,
    pub epochs_a: usize,
    pub epochs_c: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub fusion: Fusion,
    /// Verify frozen groups are bit-identical after each phase.
    pub check_isolation: bool,
}

fn experts_of(registry: &ExpertRegistry) -> Vec<Expert<'_>> {
    registry
        .heads()
        .map(|h| Expert {
            id: h.owner_id,
            head: h,
        })
        .collect()
}

fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

type Snapshots = Vec<(ParamGroup, Vec<(ParamKey, Tensor)>)>;

fn frozen_snapshots(model: &ClientModel, groups: &[ParamGroup], on: bool) -> Snapshots {
    if !on {
        return Vec::new();
    }
    groups.iter().map(|&g| (g, model.snapshot(g))).collect()
}

fn check_frozen(client: &ClientState, phase: char, snapshots: &Snapshots) -> Result<()> {
    for (group, snap) in snapshots {
        if !client.model.matches_snapshot(snap) {
            return Err(FedError::PhaseIsolation {
                client: client.id,
                phase,
                group: *group,
            });
        }
    }
    Ok(())
}

/// Phase A. Returns the loss of every minibatch.
pub fn phase_local_train(client: &mut ClientState, plan: &RoundPlan) -> Result<Vec<f64>> {
    if client.train.is_empty() {
        return Err(FedError::DataEmpty(client.id));
    }
    let frozen = frozen_snapshots(
        &client.model,
        &[ParamGroup::Fst, ParamGroup::Moe],
        plan.check_isolation,
    );
    let mut trace = Vec::new();
    for _ in 0..plan.epochs_a {
        for batch in minibatches(client.train.len(), plan.batch_size, &mut client.rng) {
            let x = client.train.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| client.train.labels[i]).collect();
            let experts = experts_of(&client.registry);
            trace.push(
                client
                    .model
                    .local_loss(&x, &y, &experts, plan.loss, plan.fusion)?,
            );
            client.model.sgd_step(client.lr_a)?;
        }
    }
    client.model.set_trainable(&[]);
    client.model.head.version = plan.round_index;
    check_frozen(client, 'A', &frozen)?;
    Ok(trace)
}

/// Phase B over the `active` clients.
pub fn phase_exchange(
    clients: &mut [ClientState],
    active: &[ClientId],
    net: &mut NetSim,
    round: u32,
) -> Result<DeliveryReport> {
    let mut heads = BTreeMap::new();
    let mut registries = BTreeMap::new();
    for c in clients.iter_mut().filter(|c| active.contains(&c.id)) {
        heads.insert(c.id, c.model.head.detached());
        registries.insert(c.id, std::mem::take(&mut c.registry));
    }
    let report = net.exchange(round, &heads, &mut registries);
    for c in clients.iter_mut() {
        if let Some(r) = registries.remove(&c.id) {
            c.registry = r;
        }
    }
    Ok(report?)
}

/// Phase C. Returns the loss of every minibatch.
pub fn phase_moe_train(client: &mut ClientState, plan: &RoundPlan) -> Result<Vec<f64>> {
    if client.train.is_empty() {
        return Err(FedError::DataEmpty(client.id));
    }
    client.sync_experts(plan.fusion == Fusion::Gate);
    let frozen = frozen_snapshots(
        &client.model,
        &[ParamGroup::Body, ParamGroup::Head],
        plan.check_isolation,
    );
    let mut trace = Vec::new();
    for _ in 0..plan.epochs_c {
        for batch in minibatches(client.train.len(), plan.batch_size, &mut client.rng_moe) {
            let x = client.train.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| client.train.labels[i]).collect();
            let experts = experts_of(&client.registry);
            trace.push(
                client
                    .model
                    .moe_decision_loss(&x, &y, &experts, plan.fusion)?,
            );
            client.model.sgd_step(client.lr_c)?;
        }
    }
    client.model.set_trainable(&[]);
    check_frozen(client, 'C', &frozen)?;
    Ok(trace)
}

/// Test-split predictions: the fused output, or the local head alone when
/// `use_moe` is off.
pub fn predict_test(client: &ClientState, use_moe: bool, fusion: Fusion) -> Result<Vec<usize>> {
    let x = &client.test.features;
    Ok(if use_moe {
        client.model.inference(x, &client.experts(), fusion)?
    } else {
        argmax_rows(&client.model.local_output(x)?)
    })
}

pub fn evaluate(client: &ClientState, use_moe: bool, fusion: Fusion) -> Result<(f64, f64)> {
    let preds = predict_test(client, use_moe, fusion)?;
    let labels = &client.test.labels;
    Ok((
        metrics::accuracy(&preds, labels)?,
        metrics::macro_f1(&preds, labels, client.test.classes)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Settings {
    pub epochs_a: usize,
    pub epochs_c: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub parallel: bool,
    pub check_isolation: bool,
}

/// Per-client results of one phase.
pub type PhaseLosses = BTreeMap<ClientId, Vec<f64>>;

pub struct Federation {
    /// Every client in ascending id order, removed ones included.
    pub clients: Vec<ClientState>,
    pub active: Vec<ClientId>,
    pub net: NetSim,
    pub variant: Variant,
    pub settings: Settings,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Federation {
    pub fn new(
        mut clients: Vec<ClientState>,
        active: Vec<ClientId>,
        net: NetSim,
        variant: Variant,
        settings: Settings,
    ) -> Self {
        clients.sort_by_key(|c| c.id);
        if variant.fusion() == Fusion::Gate {
            for c in &mut clients {
                c.sync_experts(true);
            }
        }
        Self {
            clients,
            active,
            net,
            variant,
            settings,
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = client_datasets(cfg)?;
        let input_dim = splits[0].0.dim();
        let common_dim = cfg.common_dim();
        let clients: Vec<ClientState> = splits
            .into_iter()
            .zip(&cfg.clients)
            .enumerate()
            .map(|(i, ((train, test), cc))| {
                ClientState::new(
                    i as ClientId,
                    cc.body_spec(input_dim),
                    common_dim,
                    train,
                    test,
                    cfg.seed,
                )
                .with_lrs(cfg.training.lr_a, cfg.training.lr_c)
            })
            .collect();
        let ids: Vec<ClientId> = clients.iter().map(|c| c.id).collect();
        let active = netsim::apply_client_disconnect(&cfg.faults, &ids)?;
        let net = NetSim::new(cfg.faults.clone(), cfg.fault_seed, cfg.relay_enabled)?;
        let mut loss = cfg.training.loss_weights();
        if !cfg.variant.uses_moe() {
            loss.moe = 0.0;
        }
        let settings = Settings {
            epochs_a: cfg.training.epochs_a,
            epochs_c: cfg.training.epochs_c,
            batch_size: cfg.training.batch_size,
            loss,
            parallel: cfg.parallel,
            check_isolation: cfg!(debug_assertions),
        };
        Ok(Self::new(clients, active, net, cfg.variant, settings))
    }

    pub fn plan(&self, round: u32) -> RoundPlan {
        RoundPlan {
            round_index: round,
            epochs_a: self.settings.epochs_a,
            epochs_c: self.settings.epochs_c,
            batch_size: self.settings.batch_size,
            loss: self.settings.loss,
            fusion: self.variant.fusion(),
            check_isolation: self.settings.check_isolation,
        }
    }

    pub fn client(&self, id: ClientId) -> Result<&ClientState> {
        self.clients
            .iter()
            .find(|c| c.id == id)
            .ok_or(FedError::UnknownClient(id))
    }

    fn for_active<F>(&mut self, f: F) -> Result<PhaseLosses>
    where
        F: Fn(&mut ClientState) -> Result<Vec<f64>> + Sync + Send,
    {
        let active = &self.active;
        let selected: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .filter(|c| active.contains(&c.id))
            .collect();
        let results: Vec<(ClientId, Result<Vec<f64>>)> = if self.settings.parallel {
            selected.into_par_iter().map(|c| (c.id, f(c))).collect()
        } else {
            selected.into_iter().map(|c| (c.id, f(c))).collect()
        };
        results
            .into_iter()
            .map(|(id, r)| r.map(|t| (id, t)))
            .collect()
    }

    /// Phase A, then the FedAvg aggregate when that variant is selected.
    pub fn phase_a(&mut self, round: u32) -> Result<PhaseLosses> {
        let plan = self.plan(round);
        let losses = self.for_active(|c| phase_local_train(c, &plan))?;
        if self.variant == Variant::FedAvg {
            let active = &self.active;
            let mut models: Vec<&mut ClientModel> = Vec::new();
            let mut counts = Vec::new();
            for c in self.clients.iter_mut().filter(|c| active.contains(&c.id)) {
                counts.push(c.train.len());
                models.push(&mut c.model);
            }
            baselines::fedavg_round(&mut models, &counts)?;
        }
        Ok(losses)
    }

    /// Phase B; `None` for variants that do not exchange heads. Under
    /// aggregated-head, each client then replaces its head by the mean of
    /// its own and all received heads.
    pub fn phase_b(&mut self, round: u32) -> Result<Option<DeliveryReport>> {
        if !self.variant.exchanges_heads() {
            return Ok(None);
        }
        let report = phase_exchange(&mut self.clients, &self.active, &mut self.net, round)?;
        if self.variant == Variant::AggregatedHead {
            for c in self
                .clients
                .iter_mut()
                .filter(|c| self.active.contains(&c.id))
            {
                let received: Vec<&Head> = c.registry.heads().collect();
                c.model.head = baselines::aggregate_head(&c.model.head, &received)?;
            }
        }
        Ok(Some(report))
    }

    /// Phase C, then the central transform/MoE average when selected.
    pub fn phase_c(&mut self, round: u32) -> Result<PhaseLosses> {
        if !self.variant.uses_moe() {
            return Ok(PhaseLosses::new());
        }
        let plan = self.plan(round);
        let losses = self.for_active(|c| phase_moe_train(c, &plan))?;
        if self.variant == Variant::CentralizedMoeFst {
            let active = &self.active;
            let mut models: Vec<&mut ClientModel> = self
                .clients
                .iter_mut()
                .filter(|c| active.contains(&c.id))
                .map(|c| &mut c.model)
                .collect();
            baselines::average_moe_fst(&mut models)?;
        }
        Ok(losses)
    }

    /// One record per client, metrics for active clients only.
    pub fn evaluate(&self, round: i64) -> Result<Vec<RoundRecord>> {
        let fusion = self.variant.fusion();
        self.clients
            .iter()
            .map(|c| {
                let active = self.active.contains(&c.id);
                let mut rec = RoundRecord::new(round, c.id, self.variant, active);
                if active {
                    let (acc, mf1) = evaluate(c, self.variant.uses_moe(), fusion)?;
                    rec.acc = Some(acc);
                    rec.mf1 = Some(mf1);
                }
                Ok(rec)
            })
            .collect()
    }

    /// A → B → C → evaluate.
    pub fn run_round(&mut self, round: u32) -> Result<Vec<RoundRecord>> {
        let loss_a = self.phase_a(round)?;
        let exchanged = self.phase_b(round)?.is_some();
        let loss_c = self.phase_c(round)?;
        let traffic = if exchanged {
            self.net.ledger().last().map(|r| r.per_client.clone())
        } else {
            None
        };
        let mut records = self.evaluate(round as i64)?;
        for rec in &mut records {
            rec.loss_a_mean = loss_a.get(&rec.client_id).and_then(|t| mean(t));
            rec.loss_c_mean = loss_c.get(&rec.client_id).and_then(|t| mean(t));
            if let Some(t) = traffic.as_ref().and_then(|t| t.get(&rec.client_id)) {
                rec.set_traffic(t);
            }
        }
        Ok(records)
    }

    /// `(client, head params, body + head params)` for every active client.
    pub fn model_sizes(&self) -> Vec<(ClientId, usize, usize)> {
        self.clients
            .iter()
            .filter(|c| self.active.contains(&c.id))
            .map(|c| {
                (
                    c.id,
                    c.model.param_count(ParamGroup::Head),
                    c.model.local_network_params(),
                )
            })
            .collect()
    }
}

/// Train/test splits for every configured client, in id order.
pub fn client_datasets(cfg: &ExperimentConfig) -> Result<Vec<(Dataset, Dataset)>> {
    let n_clients = cfg.clients.len();
    let full = match cfg.data.source {
        DataSource::Synthetic => data::make_synthetic(&SyntheticSpec {
            classes: cfg.data.classes,
            dim: cfg.data.dim,
            n: cfg.data.examples_per_client * n_clients,
            seed: cfg.seed,
            noise_sigma: cfg.data.noise_sigma,
            mean_scale: cfg.data.mean_scale,
        })?,
        DataSource::Csv => data::load_csv(
            std::path::Path::new(&cfg.data.csv_path),
            &CsvSchema {
                label_column: cfg.data.label_column.clone(),
            },
        )?,
    };
    let parts = data::dirichlet_partition(
        &full,
        &PartitionSpec::new(n_clients, cfg.data.dirichlet_alpha, cfg.seed),
    )?;
    let mut rng = Rng::with_stream(cfg.seed, streams::SPLIT);
    parts
        .iter()
        .zip(&cfg.clients)
        .map(|(part, cc)| {
            let shifted = data::feature_shift(part, cc.feature_shift)?;
            Ok(data::train_test_split(
                &shifted,
                cfg.data.train_fraction,
                &mut rng,
            )?)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Round −1 evaluation, then `cfg.rounds` rounds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut fed = Federation::from_config(cfg)?;
    let mut records = fed.evaluate(-1)?;
    for round in 0..cfg.rounds {
        records.extend(fed.run_round(round)?);
    }
    let summary = summarize(&fed, cfg, &records);
    Ok(ExperimentReport { records, summary })
}

pub fn summarize(fed: &Federation, cfg: &ExperimentConfig, records: &[RoundRecord]) -> Summary {
    let last_round = records.iter().map(|r| r.round).max().unwrap_or(-1);
    let finals: Vec<&RoundRecord> = records.iter().filter(|r| r.round == last_round).collect();
    let comm = comm_report(fed.net.ledger(), &fed.model_sizes());
    let clients = fed
        .clients
        .iter()
        .filter_map(|c| {
            let rec = finals.iter().find(|r| r.client_id == c.id)?;
            let sharing = comm
                .per_client
                .iter()
                .find(|s| s.client_id == c.id)
                .cloned();
            let sharing = sharing.unwrap_or_else(|| netsim::ClientRatio {
                client_id: c.id,
                head_params: c.model.param_count(ParamGroup::Head),
                full_model_params: c.model.local_network_params(),
                ratio: c.model.param_count(ParamGroup::Head) as f64
                    / c.model.local_network_params() as f64,
                params_per_round: 0.0,
                full_params_per_round: 0.0,
            });
            Some(ClientSummary {
                client_id: c.id,
                active: rec.active,
                acc: rec.acc,
                mf1: rec.mf1,
                train_examples: c.train.len(),
                test_examples: c.test.len(),
                sharing,
            })
        })
        .collect();
    let accs: Vec<f64> = finals.iter().filter_map(|r| r.acc).collect();
    let mf1s: Vec<f64> = finals.iter().filter_map(|r| r.mf1).collect();
    let comm_total: Traffic = fed.net.ledger().cumulative;
    Summary {
        schema_version: crate::report::SCHEMA_VERSION,
        variant: cfg.variant,
        rounds: cfg.rounds,
        rng_algorithm: rng::ALGORITHM.to_string(),
        mean_acc: mean(&accs).unwrap_or(0.0),
        mean_mf1: mean(&mf1s).unwrap_or(0.0),
        clients,
        comm: comm_total,
        mean_ratio: comm.mean_ratio,
        config: cfg.clone(),
    }
}
