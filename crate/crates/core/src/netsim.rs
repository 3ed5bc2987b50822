//! Simulated peer-to-peer head exchange.
//!
//! Every round each active client attempts one packet to every other active
//! client. A packet on directed link `(from, to)` is delivered iff a uniform
//! draw from the dedicated fault stream is `>= link_drop_rate`; draws are
//! consumed in `(from, to)` lexicographic order over active clients only, so
//! the schedule depends on nothing but the fault seed, the active set and the
//! rate. Severed links consume their draw and always drop.
//!
//! With relay enabled, each client then forwards every head it held at the
//! *start* of the round to every peer except the head's origin. Relayed
//! copies therefore trail direct delivery by one round and are discarded by
//! receivers that already hold a newer version.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ClientId, Head, ModelError};
use crate::rng::streams;
use crate::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("fault plan removes every client")]
    RemovingAllClients,
    #[error("removed client {0} is not part of the experiment")]
    UnknownClient(ClientId),
    #[error("link drop rate {0} is outside [0, 1]")]
    InvalidRate(f64),
    #[error(transparent)]
    Payload(#[from] ModelError),
}

/// Serialized head in flight.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPacket {
    pub origin_id: ClientId,
    pub version: u32,
    pub payload: Vec<u8>,
    pub size_bytes: usize,
    pub size_params: usize,
}

impl HeadPacket {
    pub fn from_head(head: &Head) -> Self {
        let payload = head.encode();
        Self {
            origin_id: head.owner_id,
            version: head.version,
            size_bytes: payload.len(),
            size_params: head.param_count(),
            payload,
        }
    }

    pub fn open(&self) -> Result<Head, NetError> {
        Ok(Head::decode(&self.payload)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultPlan {
    /// Independent drop probability per directed link per round.
    pub link_drop_rate: f64,
    pub removed_clients: BTreeSet<ClientId>,
    /// Directed links that never deliver.
    pub severed_links: BTreeSet<(ClientId, ClientId)>,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            link_drop_rate: 0.0,
            removed_clients: BTreeSet::new(),
            severed_links: BTreeSet::new(),
        }
    }
}

impl FaultPlan {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.link_drop_rate) {
            return Err(NetError::InvalidRate(self.link_drop_rate));
        }
        Ok(())
    }
}

/// Clients that take part in the experiment under `plan`.
pub fn apply_client_disconnect(
    plan: &FaultPlan,
    clients: &[ClientId],
) -> Result<Vec<ClientId>, NetError> {
    if let Some(&unknown) = plan.removed_clients.iter().find(|id| !clients.contains(id)) {
        return Err(NetError::UnknownClient(unknown));
    }
    let active: Vec<ClientId> = clients
        .iter()
        .copied()
        .filter(|id| !plan.removed_clients.contains(id))
        .collect();
    if active.is_empty() {
        return Err(NetError::RemovingAllClients);
    }
    Ok(active)
}

/// Heads a client has received, keyed by owner. Versions never decrease.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertRegistry {
    heads: BTreeMap<ClientId, Head>,
}

impl ExpertRegistry {
    /// Stores `head` if its owner is unknown or it is strictly newer.
    pub fn upsert(&mut self, head: Head) -> bool {
        match self.heads.get(&head.owner_id) {
            Some(have) if have.version >= head.version => false,
            _ => {
                self.heads.insert(head.owner_id, head);
                true
            }
        }
    }

    pub fn get(&self, id: ClientId) -> Option<&Head> {
        self.heads.get(&id)
    }

    /// Heads in ascending owner order.
    pub fn heads(&self) -> impl Iterator<Item = &Head> {
        self.heads.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.heads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn versions(&self) -> BTreeMap<ClientId, u32> {
        self.heads.iter().map(|(&id, h)| (id, h.version)).collect()
    }
}

/// Per-sender packet counters. `received` counts deliveries *into* the client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub sent: u64,
    pub delivered: u64,
    pub received: u64,
    pub bytes: u64,
    pub params: u64,
    pub relay_sent: u64,
    pub relay_delivered: u64,
    pub relay_received: u64,
    pub relay_bytes: u64,
    pub relay_params: u64,
}

impl AddAssign for Traffic {
    fn add_assign(&mut self, o: Self) {
        self.sent += o.sent;
        self.delivered += o.delivered;
        self.received += o.received;
        self.bytes += o.bytes;
        self.params += o.params;
        self.relay_sent += o.relay_sent;
        self.relay_delivered += o.relay_delivered;
        self.relay_received += o.relay_received;
        self.relay_bytes += o.relay_bytes;
        self.relay_params += o.relay_params;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundTraffic {
    pub round: u32,
    pub per_client: BTreeMap<ClientId, Traffic>,
}

impl RoundTraffic {
    pub fn total(&self) -> Traffic {
        let mut t = Traffic::default();
        for c in self.per_client.values() {
            t += *c;
        }
        t
    }
}

/// Packet accounting. Bytes and params are charged per attempt.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommLedger {
    pub rounds: Vec<RoundTraffic>,
    pub cumulative: Traffic,
}

impl CommLedger {
    pub fn last(&self) -> Option<&RoundTraffic> {
        self.rounds.last()
    }

    pub fn client_total(&self, id: ClientId) -> Traffic {
        let mut t = Traffic::default();
        for r in &self.rounds {
            if let Some(c) = r.per_client.get(&id) {
                t += *c;
            }
        }
        t
    }
}

/// One packet attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attempt {
    pub from: ClientId,
    pub to: ClientId,
    pub origin: ClientId,
    pub delivered: bool,
    pub relay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeliveryReport {
    pub round: u32,
    pub attempts: Vec<Attempt>,
}

impl DeliveryReport {
    pub fn delivered(&self) -> usize {
        self.attempts.iter().filter(|a| a.delivered).count()
    }

    pub fn direct(&self) -> impl Iterator<Item = &Attempt> {
        self.attempts.iter().filter(|a| !a.relay)
    }
}

#[derive(Debug, Clone)]
pub struct NetSim {
    plan: FaultPlan,
    relay_enabled: bool,
    rng: Rng,
    ledger: CommLedger,
}

impl NetSim {
    pub fn new(plan: FaultPlan, fault_seed: u64, relay_enabled: bool) -> Result<Self, NetError> {
        plan.validate()?;
        Ok(Self {
            plan,
            relay_enabled,
            rng: Rng::with_stream(fault_seed, streams::FAULTS),
            ledger: CommLedger::default(),
        })
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    fn draw(&mut self, from: ClientId, to: ClientId) -> bool {
        let u = self.rng.uniform();
        !self.plan.severed_links.contains(&(from, to)) && u >= self.plan.link_drop_rate
    }

    /// Runs phase B for one round. `heads` maps each active client to its
    /// current head; `registries` holds each active client's received heads.
    pub fn exchange(
        &mut self,
        round: u32,
        heads: &BTreeMap<ClientId, Head>,
        registries: &mut BTreeMap<ClientId, ExpertRegistry>,
    ) -> Result<DeliveryReport, NetError> {
        let active: Vec<ClientId> = heads.keys().copied().collect();
        let mut traffic = RoundTraffic {
            round,
            per_client: active.iter().map(|&id| (id, Traffic::default())).collect(),
        };
        let mut report = DeliveryReport {
            round,
            attempts: Vec::new(),
        };
        // Relay forwards what was known before this round's deliveries.
        let known: BTreeMap<ClientId, Vec<HeadPacket>> = if self.relay_enabled {
            active
                .iter()
                .map(|&id| {
                    let held = registries
                        .get(&id)
                        .map_or_else(Vec::new, |r| r.heads().map(HeadPacket::from_head).collect());
                    (id, held)
                })
                .collect()
        } else {
            BTreeMap::new()
        };

        for &from in &active {
            let packet = HeadPacket::from_head(&heads[&from]);
            for &to in &active {
                if to == from {
                    continue;
                }
                let delivered = self.draw(from, to);
                let t = traffic.per_client.get_mut(&from).expect("active sender");
                t.sent += 1;
                t.bytes += packet.size_bytes as u64;
                t.params += packet.size_params as u64;
                if delivered {
                    t.delivered += 1;
                    traffic
                        .per_client
                        .get_mut(&to)
                        .expect("active receiver")
                        .received += 1;
                    registries.entry(to).or_default().upsert(packet.open()?);
                }
                report.attempts.push(Attempt {
                    from,
                    to,
                    origin: from,
                    delivered,
                    relay: false,
                });
            }
        }

        for (&relayer, packets) in &known {
            for packet in packets {
                for &to in &active {
                    if to == relayer || to == packet.origin_id {
                        continue;
                    }
                    let delivered = self.draw(relayer, to);
                    let t = traffic
                        .per_client
                        .get_mut(&relayer)
                        .expect("active relayer");
                    t.relay_sent += 1;
                    t.relay_bytes += packet.size_bytes as u64;
                    t.relay_params += packet.size_params as u64;
                    if delivered {
                        t.relay_delivered += 1;
                        traffic
                            .per_client
                            .get_mut(&to)
                            .expect("active receiver")
                            .relay_received += 1;
                        registries.entry(to).or_default().upsert(packet.open()?);
                    }
                    report.attempts.push(Attempt {
                        from: relayer,
                        to,
                        origin: packet.origin_id,
                        delivered,
                        relay: true,
                    });
                }
            }
        }

        self.ledger.cumulative += traffic.total();
        self.ledger.rounds.push(traffic);
        Ok(report)
    }
}

/// Head-only sharing versus hypothetical full-model sharing for one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRatio {
    pub client_id: ClientId,
    pub head_params: usize,
    pub full_model_params: usize,
    pub ratio: f64,
    /// Head parameters this client sent per round, averaged over rounds.
    pub params_per_round: f64,
    /// The same attempts charged at full-model size.
    pub full_params_per_round: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub per_client: Vec<ClientRatio>,
    pub mean_ratio: f64,
    pub total: Traffic,
}

/// `sizes` yields `(client, head params, body + head params)`.
pub fn comm_report(ledger: &CommLedger, sizes: &[(ClientId, usize, usize)]) -> CommReport {
    let rounds = ledger.rounds.len().max(1) as f64;
    let per_client: Vec<ClientRatio> = sizes
        .iter()
        .map(|&(id, head, full)| {
            let sent = ledger.client_total(id).sent as f64;
            ClientRatio {
                client_id: id,
                head_params: head,
                full_model_params: full,
                ratio: head as f64 / full as f64,
                params_per_round: sent * head as f64 / rounds,
                full_params_per_round: sent * full as f64 / rounds,
            }
        })
        .collect();
    let mean_ratio = if per_client.is_empty() {
        0.0
    } else {
        per_client.iter().map(|c| c.ratio).sum::<f64>() / per_client.len() as f64
    };
    CommReport {
        per_client,
        mean_ratio,
        total: ledger.cumulative,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn head(owner: ClientId, version: u32) -> Head {
        let mut h = Head::new(
            Tensor::filled(&[2, 2], owner as f64),
            Some(Tensor::zeros(&[2])),
            owner,
        );
        h.version = version;
        h
    }

    #[test]
    fn registry_keeps_newest() {
        let mut r = ExpertRegistry::default();
        assert!(r.upsert(head(1, 3)));
        assert!(!r.upsert(head(1, 2)));
        assert!(!r.upsert(head(1, 3)));
        assert!(r.upsert(head(1, 4)));
        assert_eq!(r.versions()[&1], 4);
    }

    #[test]
    fn disconnect_rules() {
        let ids = [0, 1, 2, 3];
        let mut plan = FaultPlan::default();
        assert_eq!(apply_client_disconnect(&plan, &ids).unwrap(), ids);
        plan.removed_clients = [1].into();
        assert_eq!(apply_client_disconnect(&plan, &ids).unwrap(), vec![0, 2, 3]);
        plan.removed_clients = ids.into();
        assert_eq!(
            apply_client_disconnect(&plan, &ids),
            Err(NetError::RemovingAllClients)
        );
        plan.removed_clients = [9].into();
        assert_eq!(
            apply_client_disconnect(&plan, &ids),
            Err(NetError::UnknownClient(9))
        );
    }

    #[test]
    fn rate_is_validated() {
        let plan = FaultPlan {
            link_drop_rate: 1.5,
            ..FaultPlan::default()
        };
        assert!(matches!(
            NetSim::new(plan, 0, false),
            Err(NetError::InvalidRate(_))
        ));
    }

    #[test]
    fn packet_roundtrip() {
        let h = head(5, 7);
        let p = HeadPacket::from_head(&h);
        assert_eq!(p.size_params, 6);
        assert_eq!(p.size_bytes, h.encoded_len());
        assert!(p.open().unwrap().bit_eq(&h));
    }

    #[test]
    fn comm_ratio_arithmetic() {
        let report = comm_report(&CommLedger::default(), &[(0, 68, 20_068), (1, 68, 20_068)]);
        assert!((report.mean_ratio - 68.0 / 20_068.0).abs() < 1e-15);
        assert!((report.mean_ratio - 0.00339).abs() < 1e-5);
        assert_eq!(report.per_client[0].ratio, report.mean_ratio);
    }
}
