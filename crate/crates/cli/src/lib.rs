//! Command implementations behind the `dflmoe` binary.
//!
//! Every command returns the text it would print, so tests can drive them
//! without spawning a process. Exit codes: 0 success, 2 bad configuration or
//! input, 3 failure while running.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use dflmoe::baselines::Variant;
use dflmoe::config::{ConfigError, ExperimentConfig};
use dflmoe::federation::{run_experiment, ExperimentReport, FedError};
use dflmoe::model::ClientId;
use dflmoe::report::{self, ReportError};

pub const FAULTS_FILE: &str = "faults.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const TIDY_FILE: &str = "rounds_tidy.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Run(FedError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        match e {
            FedError::Config(c) => CliError::Config(c),
            other => CliError::Run(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Report(
                ReportError::MissingArtifacts { .. } | ReportError::Malformed { .. },
            ) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "dflmoe",
    version,
    about = "Decentralized federated learning with a mixture of remote heads"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write rounds.jsonl, summary.json and resolved_config.toml.
    Run(RunArgs),
    /// Sweep link-drop rates and client removals; one run per setting.
    Faults(FaultArgs),
    /// Run every ablation variant with shared seeds.
    Ablate(CommonArgs),
    /// Summarise a finished run and write a tidy CSV next to it.
    Report {
        /// Output directory of a previous `run`.
        dir: PathBuf,
    },
    /// Print the default configuration as documented TOML.
    PrintConfig {
        /// Use the single-feature-width client set the ablations need.
        #[arg(long)]
        homogeneous: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, env = "DFLMOE_SEED")]
    pub seed: Option<u64>,
    /// Overrides `fault_seed`.
    #[arg(long)]
    pub fault_seed: Option<u64>,
    /// Overrides `rounds`.
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long, env = "DFLMOE_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Overrides `variant`.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone, Args)]
pub struct FaultArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Link-drop rates to sweep, e.g. `0,0.25,0.5,0.75`.
    #[arg(long, value_delimiter = ',')]
    pub link_drop: Vec<f64>,
    /// Client sets to remove, one run each; `+` joins ids, e.g. `1,2,1+3`.
    #[arg(long, value_delimiter = ',')]
    pub remove_clients: Vec<ClientSet>,
    /// Overrides `variant`.
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSet(pub Vec<ClientId>);

impl FromStr for ClientSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split('+')
            .map(|id| {
                id.trim()
                    .parse::<ClientId>()
                    .map_err(|e| format!("bad client id `{id}`: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ClientSet)
    }
}

impl ClientSet {
    fn label(&self) -> String {
        self.0
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

pub const DEFAULT_DROP_RATES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

pub fn execute(command: &Command) -> Result<String> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Faults(args) => cmd_faults(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Report { dir } => cmd_report(dir),
        Command::PrintConfig { homogeneous } => Ok(print_config(*homogeneous)),
    }
}

/// The config file (or `fallback` when none is given) with CLI overrides.
pub fn resolve_config(
    args: &CommonArgs,
    fallback: fn() -> ExperimentConfig,
) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => fallback(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seed) = args.fault_seed {
        cfg.fault_seed = seed;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_into(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentReport> {
    let rep = run_experiment(cfg)?;
    report::write_run(dir, &rep.records, &rep.summary)?;
    Ok(rep)
}

fn write_file(path: PathBuf, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let mut cfg = resolve_config(&args.common, ExperimentConfig::default)?;
    if let Some(v) = args.variant {
        cfg.variant = v;
        cfg.validate()?;
    }
    let rep = run_into(&cfg, &args.common.out)?;
    Ok(format!(
        "{}: {} rounds, mean acc {:.4}, mean mf1 {:.4}\nwrote {}\n",
        cfg.variant,
        cfg.rounds,
        rep.summary.mean_acc,
        rep.summary.mean_mf1,
        args.common.out.display()
    ))
}

/// One row of the fault sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultRow {
    pub link_drop_rate: f64,
    pub removed: String,
    pub mean_acc: f64,
    pub mean_mf1: f64,
}

pub fn fault_csv(rows: &[FaultRow]) -> String {
    let mut out = String::from("link_drop_rate,removed_clients,mean_acc,mean_mf1\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.link_drop_rate, r.removed, r.mean_acc, r.mean_mf1
        );
    }
    out
}

pub fn cmd_faults(args: &FaultArgs) -> Result<String> {
    let mut base = resolve_config(&args.common, ExperimentConfig::default)?;
    if let Some(v) = args.variant {
        base.variant = v;
    }
    let rates: Vec<f64> = if args.link_drop.is_empty() && args.remove_clients.is_empty() {
        DEFAULT_DROP_RATES.to_vec()
    } else {
        args.link_drop.clone()
    };
    let mut settings = Vec::new();
    for &rate in &rates {
        let mut cfg = base.clone();
        cfg.faults.link_drop_rate = rate;
        settings.push((format!("link_drop_{rate}"), cfg, String::new()));
    }
    for set in &args.remove_clients {
        let mut cfg = base.clone();
        cfg.faults.removed_clients = set.0.iter().copied().collect();
        settings.push((format!("removed_{}", set.label()), cfg, set.label()));
    }
    // Reject every bad setting before spending time on any run.
    for (_, cfg, _) in &settings {
        cfg.validate()?;
    }
    let mut rows = Vec::new();
    for (name, cfg, removed) in &settings {
        let rep = run_into(cfg, &args.common.out.join(name))?;
        rows.push(FaultRow {
            link_drop_rate: cfg.faults.link_drop_rate,
            removed: removed.clone(),
            mean_acc: rep.summary.mean_acc,
            mean_mf1: rep.summary.mean_mf1,
        });
    }
    let csv = fault_csv(&rows);
    write_file(args.common.out.join(FAULTS_FILE), &csv)?;
    Ok(csv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_acc: f64,
    pub mean_mf1: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,mean_acc,mean_mf1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.variant, r.mean_acc, r.mean_mf1);
    }
    out
}

pub fn cmd_ablate(args: &CommonArgs) -> Result<String> {
    let base = resolve_config(args, ExperimentConfig::homogeneous)?;
    let configs: Vec<ExperimentConfig> = Variant::ABLATIONS
        .iter()
        .map(|&variant| ExperimentConfig {
            variant,
            ..base.clone()
        })
        .collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    let mut rows = Vec::new();
    for cfg in &configs {
        let rep = run_into(cfg, &args.out.join(cfg.variant.name()))?;
        rows.push(AblationRow {
            variant: cfg.variant,
            mean_acc: rep.summary.mean_acc,
            mean_mf1: rep.summary.mean_mf1,
        });
    }
    let csv = ablation_csv(&rows);
    write_file(args.out.join(ABLATION_FILE), &csv)?;
    let mut text = format!("{:<22} {:>8} {:>8}\n", "variant", "ACC", "MF1");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<22} {:>8.4} {:>8.4}",
            r.variant.name(),
            r.mean_acc,
            r.mean_mf1
        );
    }
    Ok(text)
}

pub fn cmd_report(dir: &Path) -> Result<String> {
    let (records, summary) = report::load_run(dir)?;
    write_file(dir.join(TIDY_FILE), &report::tidy_csv(&records))?;
    let totals = report::traffic_totals(&records);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} run, {} rounds, seed {}, fault seed {}",
        summary.variant, summary.rounds, summary.config.seed, summary.config.fault_seed
    );
    let _ = writeln!(
        out,
        "{:>6} {:>6} {:>8} {:>8} {:>8} {:>10} {:>12}",
        "client", "active", "ACC", "MF1", "head", "full", "head/full"
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for c in &summary.clients {
        let _ = writeln!(
            out,
            "{:>6} {:>6} {:>8} {:>8} {:>8} {:>10} {:>12.6}",
            c.client_id,
            c.active,
            opt(c.acc),
            opt(c.mf1),
            c.sharing.head_params,
            c.sharing.full_model_params,
            c.sharing.ratio
        );
    }
    let _ = writeln!(
        out,
        "mean ACC {:.4}, mean MF1 {:.4}",
        summary.mean_acc, summary.mean_mf1
    );
    let _ = writeln!(
        out,
        "heads sent {}, delivered {}, received {}, params {}, bytes {}",
        totals.sent, totals.delivered, totals.received, totals.params, totals.bytes
    );
    if totals.relay_sent > 0 {
        let _ = writeln!(
            out,
            "relayed sent {}, delivered {}, params {}, bytes {}",
            totals.relay_sent, totals.relay_delivered, totals.relay_params, totals.relay_bytes
        );
    }
    let _ = writeln!(out, "mean head/full ratio {:.6}", summary.mean_ratio);
    let _ = writeln!(out, "wrote {}", dir.join(TIDY_FILE).display());
    Ok(out)
}

const CONFIG_DOCS: &[(&str, &str)] = &[
    (
        "schema_version",
        "Config schema version; must match this build.",
    ),
    (
        "seed",
        "Seeds data, partitioning, initialisation and minibatch order.",
    ),
    ("fault_seed", "Seeds link drops only."),
    (
        "rounds",
        "Communication rounds after the round -1 baseline evaluation.",
    ),
    (
        "variant",
        "full | local_only | fed_avg | no_moe | no_fst | centralized_moe_fst | aggregated_head",
    ),
    (
        "relay_enabled",
        "Peers forward heads they hold to peers that lack them, one round later.",
    ),
    (
        "parallel",
        "Train clients on a thread pool; results are identical either way.",
    ),
    (
        "training.lambda_loc",
        "Weight of the local-head loss in local training.",
    ),
    (
        "training.lambda_moe",
        "Weight of the fused-output loss in local training.",
    ),
    ("training.lr_a", "SGD learning rate for body and head."),
    (
        "training.lr_c",
        "SGD learning rate for feature-space transforms and the MoE query.",
    ),
    ("training.epochs_a", "Local-training epochs per round."),
    ("training.epochs_c", "MoE-training epochs per round."),
    ("training.batch_size", "Minibatch size for both phases."),
    (
        "training.common_dim",
        "Width of the common feature space; 0 uses the widest client feature.",
    ),
    ("data.source", "synthetic | csv"),
    (
        "data.classes",
        "Number of classes of the synthetic mixture.",
    ),
    ("data.dim", "Input width of the synthetic mixture."),
    (
        "data.examples_per_client",
        "Synthetic pool size is this times the number of clients.",
    ),
    ("data.noise_sigma", "Within-class standard deviation."),
    (
        "data.mean_scale",
        "Standard deviation of each class-mean coordinate.",
    ),
    (
        "data.dirichlet_alpha",
        "Label-skew concentration; small values give skewed clients.",
    ),
    (
        "data.train_fraction",
        "Per-client train share; the rest is the test split.",
    ),
    ("data.csv_path", "Input file when source = \"csv\"."),
    ("data.label_column", "Label column of the CSV file."),
    (
        "faults.link_drop_rate",
        "Probability that each directed packet is dropped.",
    ),
    (
        "faults.removed_clients",
        "Client ids that never train, send or receive.",
    ),
    (
        "faults.severed_links",
        "Directed [from, to] pairs that always drop.",
    ),
    (
        "clients.hidden_dims",
        "Hidden widths of this client's body.",
    ),
    (
        "clients.feature_dim",
        "Width of the body output fed to the head.",
    ),
    (
        "clients.feature_shift",
        "Block-average factor applied to this client's inputs (1, 2, 4 or 8).",
    ),
];

/// `cfg` as TOML with a comment above each key.
pub fn documented_toml(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = String::new();
    for line in cfg.to_toml().lines() {
        if line.starts_with('[') {
            section = line.trim_matches(|c| c == '[' || c == ']').to_string();
        } else if let Some((key, _)) = line.split_once(" = ") {
            let path = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some((_, doc)) = CONFIG_DOCS.iter().find(|(k, _)| *k == path) {
                let _ = writeln!(out, "# {doc}");
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn print_config(homogeneous: bool) -> String {
    let cfg = if homogeneous {
        ExperimentConfig::homogeneous()
    } else {
        ExperimentConfig::default()
    };
    documented_toml(&cfg)
}
