//! Run outputs: one JSON line per client per round, a JSON summary, and the
//! resolved configuration.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::Variant;
use crate::config::ExperimentConfig;
use crate::model::ClientId;
use crate::netsim::{ClientRatio, Traffic};

pub const SCHEMA_VERSION: u32 = 1;
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{dir}: missing {file}")]
    MissingArtifacts { dir: PathBuf, file: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Metrics and traffic of one client in one round. Round −1 is the
/// evaluation of the untrained models. Removed clients appear with
/// `active = false` and no metrics. Traffic counts are for packets this
/// client sent, except `heads_received`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub schema_version: u32,
    pub round: i64,
    pub client_id: ClientId,
    pub variant: Variant,
    pub active: bool,
    pub acc: Option<f64>,
    pub mf1: Option<f64>,
    #[serde(rename = "loss_A_mean")]
    pub loss_a_mean: Option<f64>,
    #[serde(rename = "loss_C_mean")]
    pub loss_c_mean: Option<f64>,
    pub heads_sent: u64,
    pub heads_delivered: u64,
    pub heads_received: u64,
    pub params_shared: u64,
    pub bytes_shared: u64,
    pub relay_sent: u64,
    pub relay_delivered: u64,
    pub relay_params: u64,
    pub relay_bytes: u64,
}

impl RoundRecord {
    pub fn new(round: i64, client_id: ClientId, variant: Variant, active: bool) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            round,
            client_id,
            variant,
            active,
            acc: None,
            mf1: None,
            loss_a_mean: None,
            loss_c_mean: None,
            heads_sent: 0,
            heads_delivered: 0,
            heads_received: 0,
            params_shared: 0,
            bytes_shared: 0,
            relay_sent: 0,
            relay_delivered: 0,
            relay_params: 0,
            relay_bytes: 0,
        }
    }

    pub fn set_traffic(&mut self, t: &Traffic) {
        self.heads_sent = t.sent;
        self.heads_delivered = t.delivered;
        self.heads_received = t.received + t.relay_received;
        self.params_shared = t.params;
        self.bytes_shared = t.bytes;
        self.relay_sent = t.relay_sent;
        self.relay_delivered = t.relay_delivered;
        self.relay_params = t.relay_params;
        self.relay_bytes = t.relay_bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: ClientId,
    pub active: bool,
    pub acc: Option<f64>,
    pub mf1: Option<f64>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub sharing: ClientRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub variant: Variant,
    pub rounds: u32,
    pub rng_algorithm: String,
    /// Mean final accuracy over active clients.
    pub mean_acc: f64,
    pub mean_mf1: f64,
    pub clients: Vec<ClientSummary>,
    pub comm: Traffic,
    /// Mean over clients of head params / (body + head) params.
    pub mean_ratio: f64,
    pub config: ExperimentConfig,
}

pub fn to_jsonl(records: &[RoundRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<RoundRecord>, ReportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write(path: PathBuf, contents: &str) -> Result<(), ReportError> {
    fs::write(&path, contents).map_err(|source| ReportError::Io { path, source })
}

/// Writes the three run artifacts into `dir`, creating it if needed.
pub fn write_run(
    dir: &Path,
    records: &[RoundRecord],
    summary: &Summary,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(dir.join(ROUNDS_FILE), &to_jsonl(records))?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write(dir.join(SUMMARY_FILE), &(json + "\n"))?;
    write(dir.join(CONFIG_FILE), &summary.config.to_toml())
}

fn read(dir: &Path, file: &'static str) -> Result<String, ReportError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(ReportError::MissingArtifacts {
            dir: dir.to_path_buf(),
            file,
        });
    }
    fs::read_to_string(&path).map_err(|source| ReportError::Io { path, source })
}

/// Reads a run directory back.
pub fn load_run(dir: &Path) -> Result<(Vec<RoundRecord>, Summary), ReportError> {
    let rounds = read(dir, ROUNDS_FILE)?;
    let records = parse_jsonl(&rounds, &dir.join(ROUNDS_FILE))?;
    let summary_text = read(dir, SUMMARY_FILE)?;
    let summary = serde_json::from_str(&summary_text).map_err(|e| ReportError::Malformed {
        path: dir.join(SUMMARY_FILE),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok((records, summary))
}

/// Column totals of the per-round traffic fields.
pub fn traffic_totals(records: &[RoundRecord]) -> Traffic {
    let mut t = Traffic::default();
    for r in records {
        t.sent += r.heads_sent;
        t.delivered += r.heads_delivered;
        t.received += r.heads_received;
        t.params += r.params_shared;
        t.bytes += r.bytes_shared;
        t.relay_sent += r.relay_sent;
        t.relay_delivered += r.relay_delivered;
        t.relay_params += r.relay_params;
        t.relay_bytes += r.relay_bytes;
    }
    t
}

/// Long-format CSV for plotting: one row per client per round.
pub fn tidy_csv(records: &[RoundRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(
        "round,client_id,variant,active,acc,mf1,loss_A_mean,loss_C_mean,heads_sent,heads_delivered,heads_received,params_shared,bytes_shared\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.round,
            r.client_id,
            r.variant,
            r.active,
            opt(r.acc),
            opt(r.mf1),
            opt(r.loss_a_mean),
            opt(r.loss_c_mean),
            r.heads_sent,
            r.heads_delivered,
            r.heads_received,
            r.params_shared,
            r.bytes_shared
        ));
    }
    out
}
