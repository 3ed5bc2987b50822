//! Decentralized federated learning with a cross-attention mixture of experts.
//!
//! Each client trains a body and a lightweight head on private data, shares
//! only the head with its peers over a simulated, fault-injectable network,
//! and fuses its own head with every received head through a client-specific
//! attention layer.
//!
//! Module map:
//!
//! - [`tensor`]: `f64` tensors, reverse-mode tape, SGD, binary layout
//! - [`model`]: body / head / feature-space transform / MoE fusion
//! - [`data`] and [`metrics`]: synthetic non-IID data, CSV ingestion, ACC and macro-F1
//! - [`netsim`]: head packets, per-link drops, client removal, relay, accounting
//! - [`federation`]: the three-phase round and experiment driver
//! - [`baselines`]: local-only, FedAvg and the ablation variants
//! - [`config`] and [`report`]: experiment configuration and output records

pub mod baselines;
pub mod config;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod netsim;
pub mod report;
pub mod rng;
pub mod tensor;

pub use rng::Rng;
