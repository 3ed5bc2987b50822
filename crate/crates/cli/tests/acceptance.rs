//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dflmoe::baselines::{fedavg_round, BaselineError, Variant};
use dflmoe::config::ExperimentConfig;
use dflmoe::federation::{run_experiment, Federation};
use dflmoe::model::{BodySpec, ClientModel, Expert, Fusion, ParamGroup};
use dflmoe::report::{self, ROUNDS_FILE};
use dflmoe::tensor::{Graph, Tensor, Var};
use dflmoe::Rng;
use dflmoe_cli::{cmd_ablate, cmd_faults, cmd_run, CommonArgs, FaultArgs, RunArgs};
use gradcheck::{max_grad_error, random_nonzero, random_tensor, TOLERANCE};
use tempfile::TempDir;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const SEEDS: [u64; 3] = [1, 2, 3];
const TRANSFER_ROUNDS: u32 = 30;
const TRANSFER_MARGIN: f64 = 0.02;
const DROP_RATES: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

// ---------------------------------------------------------------- 1

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// Inputs and graph builder for one random case of `op`.
fn gradient_case(op: &str, rng: &mut Rng) -> (Vec<Tensor>, Build) {
    let t = |shape: &[usize], rng: &mut Rng| random_tensor(shape, rng);
    match op {
        "matmul" => (
            vec![t(&[3, 4], rng), t(&[4, 2], rng)],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        "add_bias" => (
            vec![t(&[3, 4], rng), t(&[4], rng)],
            Box::new(|g, v| g.add_bias(v[0], v[1]).unwrap()),
        ),
        "add" => (
            vec![t(&[2, 3], rng), t(&[2, 3], rng)],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        "mul" => (
            vec![t(&[2, 3], rng), t(&[2, 3], rng)],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        "scale" => {
            let f = rng.normal();
            (
                vec![t(&[2, 3], rng)],
                Box::new(move |g, v| g.scale(v[0], f).unwrap()),
            )
        }
        "transpose" => (
            vec![t(&[2, 3], rng)],
            Box::new(|g, v| g.transpose(v[0]).unwrap()),
        ),
        "relu" => (
            vec![random_nonzero(&[3, 4], 1e-2, rng)],
            Box::new(|g, v| g.relu(v[0]).unwrap()),
        ),
        "softmax" => {
            let axis = rng.below(2);
            (
                vec![t(&[3, 4], rng)],
                Box::new(move |g, v| g.softmax(v[0], axis).unwrap()),
            )
        }
        "sum" => (vec![t(&[3, 2], rng)], Box::new(|g, v| g.sum(v[0]).unwrap())),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..3).map(|_| rng.below(4)).collect();
            (
                vec![t(&[3, 4], rng)],
                Box::new(move |g, v| g.cross_entropy(v[0], &labels).unwrap()),
            )
        }
        "concat_cols" => (
            vec![t(&[2, 3], rng), t(&[2, 1], rng)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        "scaled_attention" => (
            vec![t(&[1, 3], rng), t(&[4, 3], rng), t(&[4, 2], rng)],
            Box::new(|g, v| g.scaled_attention(v[0], v[1], v[2]).unwrap()),
        ),
        "row_attention" => (
            vec![t(&[2, 3], rng), t(&[2, 3], rng), t(&[2, 3], rng)],
            Box::new(|g, v| g.row_attention(v[0], &[v[1], v[2]], &[v[1], v[2]]).unwrap()),
        ),
        "mixture" => (
            vec![t(&[2, 2], rng), t(&[2, 3], rng), t(&[2, 3], rng)],
            Box::new(|g, v| {
                let w = g.softmax(v[0], 1).unwrap();
                g.mixture(w, &[v[1], v[2]]).unwrap()
            }),
        ),
        other => unreachable!("no case for {other}"),
    }
}

fn gradient_suite() -> Outcome {
    const OPS: [&str; 14] = [
        "matmul",
        "add_bias",
        "add",
        "mul",
        "scale",
        "transpose",
        "relu",
        "softmax",
        "sum",
        "cross_entropy",
        "concat_cols",
        "scaled_attention",
        "row_attention",
        "mixture",
    ];
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst = (0.0f64, "");
    for op in OPS {
        for _ in 0..100 {
            let (inputs, build) = gradient_case(op, &mut rng);
            let err = max_grad_error(&inputs, |g, v| build(g, v), &mut rng);
            if err > worst.0 {
                worst = (err, op);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < TOLERANCE && secs < 10.0,
        format!(
            "{} ops x 100 cases, max rel err {:.2e} ({}) < 1e-4, {secs:.2} s < 10 s",
            OPS.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_model(id: u32, rng: &mut Rng, input: usize, classes: usize) -> ClientModel {
    let hidden = vec![2 + rng.below(5)];
    let feature = 2 + rng.below(4);
    ClientModel::new(id, BodySpec::new(input, hidden, feature), classes, 4, rng)
}

fn attention_identity() -> Outcome {
    let mut rng = Rng::new(77);
    let fusion = Fusion::Attention { use_fst: true };
    let mut identity_worst = 0.0f64;
    for _ in 0..100 {
        let (input, classes) = (3 + rng.below(4), 2 + rng.below(4));
        let m = random_model(0, &mut rng, input, classes);
        let x = random_tensor(&[5, input], &mut rng);
        let fused = m.moe_output(&x, &[], fusion).unwrap();
        let local = m.local_output(&x).unwrap();
        for (a, b) in fused.data().iter().zip(local.data()) {
            identity_worst = identity_worst.max((a - b).abs());
        }
    }
    let mut hull_violations = 0;
    for _ in 0..1000 {
        let (input, classes) = (3 + rng.below(4), 2 + rng.below(4));
        let n_experts = 1 + rng.below(4);
        let mut m = random_model(0, &mut rng, input, classes);
        let peers: Vec<ClientModel> = (1..=n_experts as u32)
            .map(|id| random_model(id, &mut rng, input, classes))
            .collect();
        m.register_experts(
            peers.iter().map(|p| (p.id, p.feature_dim())),
            false,
            &mut rng,
        );
        let experts: Vec<Expert> = peers
            .iter()
            .map(|p| Expert {
                id: p.id,
                head: &p.head,
            })
            .collect();
        let x = random_tensor(&[4, input], &mut rng);
        let fused = m.moe_output(&x, &experts, fusion).unwrap();
        let feature = m.body_forward(&x).unwrap();
        let mut preds = vec![m.expert_prediction(&feature, None, fusion).unwrap()];
        for e in &experts {
            preds.push(m.expert_prediction(&feature, Some(*e), fusion).unwrap());
        }
        for r in 0..fused.rows() {
            for c in 0..classes {
                let vals: Vec<f64> = preds.iter().map(|p| p.at(r, c)).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = fused.at(r, c);
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    hull_violations += 1;
                }
            }
        }
    }
    outcome(
        identity_worst <= 1e-12 && hull_violations == 0,
        format!("E=1 max |fused - local| {identity_worst:e} <= 1e-12; convex-hull violations {hull_violations} elements over 1000 instances"),
    )
}

// ---------------------------------------------------------------- 3

#[allow(clippy::field_reassign_with_default)]
fn toy_four_clients(rounds: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = rounds;
    cfg.seed = 8;
    cfg.data.examples_per_client = 200;
    cfg
}

fn freezing_contract() -> Outcome {
    let start = Instant::now();
    let cfg = toy_four_clients(10);
    let mut fed = Federation::from_config(&cfg).unwrap();
    fed.settings.check_isolation = false;
    let mut violations = Vec::new();
    for round in 0..cfg.rounds {
        let before: Vec<_> = fed
            .clients
            .iter()
            .map(|c| {
                (
                    c.model.snapshot(ParamGroup::Fst),
                    c.model.snapshot(ParamGroup::Moe),
                    c.registry.clone(),
                )
            })
            .collect();
        fed.phase_a(round).unwrap();
        for (c, (fst, moe, reg)) in fed.clients.iter().zip(&before) {
            if !c.model.matches_snapshot(fst)
                || !c.model.matches_snapshot(moe)
                || &c.registry != reg
            {
                violations.push(format!("round {round} A client {}", c.id));
            }
        }
        fed.phase_b(round).unwrap();
        let before: Vec<_> = fed
            .clients
            .iter()
            .map(|c| {
                (
                    c.model.snapshot(ParamGroup::Body),
                    c.model.snapshot(ParamGroup::Head),
                    c.registry.clone(),
                )
            })
            .collect();
        fed.phase_c(round).unwrap();
        for (c, (body, head, reg)) in fed.clients.iter().zip(&before) {
            if !c.model.matches_snapshot(body)
                || !c.model.matches_snapshot(head)
                || &c.registry != reg
            {
                violations.push(format!("round {round} C client {}", c.id));
            }
        }
        fed.evaluate(round as i64).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations.is_empty() && secs < 60.0,
        format!(
            "4 clients x 10 rounds, frozen-group violations {} {:?}, {secs:.2} s",
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 4 and 6

#[allow(clippy::field_reassign_with_default)]
fn transfer_config(seed: u64, variant: Variant, drop: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.rounds = TRANSFER_ROUNDS;
    cfg.variant = variant;
    cfg.faults.link_drop_rate = drop;
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Local-only mean final accuracy per seed, shared by criteria 4 and 6.
fn local_only_accs() -> Vec<f64> {
    SEEDS
        .iter()
        .map(|&s| {
            run_experiment(&transfer_config(s, Variant::LocalOnly, 0.0))
                .unwrap()
                .summary
                .mean_acc
        })
        .collect()
}

fn knowledge_transfer(local: &[f64], local_secs: f64) -> Outcome {
    let start = Instant::now();
    let full: Vec<f64> = SEEDS
        .iter()
        .map(|&s| {
            run_experiment(&transfer_config(s, Variant::Full, 0.0))
                .unwrap()
                .summary
                .mean_acc
        })
        .collect();
    let secs = start.elapsed().as_secs_f64() + local_secs;
    let diffs: Vec<String> = full
        .iter()
        .zip(local)
        .map(|(f, l)| format!("{:+.4}", f - l))
        .collect();
    let diff = mean(&full) - mean(local);
    outcome(
        diff >= TRANSFER_MARGIN && secs < 300.0,
        format!(
            "seeds {SEEDS:?}: full {:.4} vs local-only {:.4}, diff {diff:+.4} >= {TRANSFER_MARGIN} (per seed {}), {secs:.1} s",
            mean(&full),
            mean(local),
            diffs.join(" ")
        ),
    )
}

fn disconnect_robustness(local: &[f64]) -> Outcome {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("transfer.toml");
    fs::write(&cfg_path, transfer_config(0, Variant::Full, 0.0).to_toml()).unwrap();
    let mut per_rate = vec![Vec::new(); DROP_RATES.len()];
    for seed in SEEDS {
        let args = FaultArgs {
            common: common_args(
                Some(&cfg_path),
                Some(seed),
                &dir.path().join(format!("seed{seed}")),
            ),
            link_drop: DROP_RATES.to_vec(),
            remove_clients: Vec::new(),
            variant: None,
        };
        let csv = cmd_faults(&args).unwrap();
        for (i, line) in csv.lines().skip(1).enumerate() {
            per_rate[i].push(line.split(',').nth(2).unwrap().parse::<f64>().unwrap());
        }
    }
    let accs: Vec<f64> = per_rate.iter().map(|a| mean(a)).collect();
    let mut monotone = true;
    for i in 0..accs.len() {
        for j in i + 1..accs.len() {
            monotone &= accs[j] <= accs[i] + 0.01;
        }
    }
    let floor = mean(local) - 0.005;
    let at_75 = accs[DROP_RATES.len() - 1];
    let shown: Vec<String> = DROP_RATES
        .iter()
        .zip(&accs)
        .map(|(r, a)| format!("{r}:{a:.4}"))
        .collect();
    outcome(
        monotone && at_75 >= floor,
        format!(
            "mean acc by drop rate [{}], non-increasing within 0.01: {monotone}; at 0.75 {at_75:.4} >= local-only - 0.005 = {floor:.4}",
            shown.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Σ (in·out + out) over the body layers plus the head, from the config alone.
fn counts_from_config(cfg: &ExperimentConfig, client: usize) -> (u64, u64) {
    let c = &cfg.clients[client];
    let mut widths = vec![cfg.data.dim];
    widths.extend(&c.hidden_dims);
    widths.push(c.feature_dim);
    let body: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let head = c.feature_dim * cfg.data.classes + cfg.data.classes;
    (head as u64, (body + head) as u64)
}

fn communication_accounting() -> Outcome {
    let cfg = toy_four_clients(5);
    let rep = run_experiment(&cfg).unwrap();
    let mut attempts_ok = true;
    let mut per_round: BTreeMap<i64, u64> = BTreeMap::new();
    for r in rep.records.iter().filter(|r| r.round >= 0) {
        *per_round.entry(r.round).or_default() += r.heads_sent;
    }
    attempts_ok &= per_round.len() == cfg.rounds as usize && per_round.values().all(|&n| n == 12);
    let mut ratio_ok = true;
    for c in &rep.summary.clients {
        let (head, full) = counts_from_config(&cfg, c.client_id as usize);
        let sent: u64 = rep
            .records
            .iter()
            .filter(|r| r.client_id == c.client_id)
            .map(|r| r.heads_sent)
            .sum();
        let params: u64 = rep
            .records
            .iter()
            .filter(|r| r.client_id == c.client_id)
            .map(|r| r.params_shared)
            .sum();
        // params / (sent · full) == head / full, compared as exact rationals
        ratio_ok &= params * full == head * sent * full;
        ratio_ok &= c.sharing.ratio == head as f64 / full as f64;
        ratio_ok &= (
            c.sharing.head_params as u64,
            c.sharing.full_model_params as u64,
        ) == (head, full);
    }
    outcome(
        attempts_ok && ratio_ok,
        format!(
            "attempts per round {:?} (expect 12 each); shared/full ratio equals head/full exactly: {ratio_ok}; mean ratio {:.6}",
            per_round.values().collect::<Vec<_>>(),
            rep.summary.mean_ratio
        ),
    )
}

// ---------------------------------------------------------------- 7

fn relay_reachability() -> Outcome {
    let base = || {
        let mut cfg = toy_four_clients(5);
        cfg.faults.removed_clients = [0].into();
        cfg.faults.severed_links = [(1, 2)].into();
        cfg
    };
    let first_heard = |relay: bool| -> Option<u32> {
        let mut cfg = base();
        cfg.relay_enabled = relay;
        let mut fed = Federation::from_config(&cfg).unwrap();
        (0..cfg.rounds).find(|&round| {
            fed.run_round(round).unwrap();
            fed.client(2).unwrap().registry.get(1).is_some()
        })
    };
    let (with, without) = (first_heard(true), first_heard(false));
    outcome(
        with.is_some_and(|r| r < 2) && without.is_none(),
        format!(
            "1->2 severed: relay on, client 2 first holds client 1's head after round {}; relay off: {}",
            with.map_or("never".into(), |r| (r + 1).to_string()),
            without.map_or("never (5 rounds)".into(), |r| format!("after round {}", r + 1))
        ),
    )
}

// ---------------------------------------------------------------- 8

fn fedavg_oracle() -> Outcome {
    let mut rng = Rng::new(31);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let spec = BodySpec::new(3 + rng.below(3), vec![2 + rng.below(4)], 2 + rng.below(3));
        let originals: Vec<ClientModel> = (0..3)
            .map(|i| ClientModel::new(i, spec.clone(), 3, 4, &mut rng))
            .collect();
        let counts: Vec<usize> = (0..3).map(|_| 1 + rng.below(300)).collect();
        let mut models = originals.clone();
        fedavg_round(&mut models.iter_mut().collect::<Vec<_>>(), &counts).unwrap();
        let total: f64 = counts.iter().map(|&n| n as f64).sum();
        for key in originals[0].keys() {
            if !matches!(key.group(), ParamGroup::Body | ParamGroup::Head) {
                continue;
            }
            for k in 0..originals[0].param(key).unwrap().numel() {
                let mut acc = 0.0;
                for (m, &n) in originals.iter().zip(&counts) {
                    acc += n as f64 * m.param(key).unwrap().data()[k];
                }
                let want = acc / total;
                for m in &models {
                    worst = worst.max((m.param(key).unwrap().data()[k] - want).abs());
                }
            }
        }
    }
    let mut a = ClientModel::new(0, BodySpec::new(4, vec![3], 2), 3, 4, &mut rng);
    let mut b = ClientModel::new(1, BodySpec::new(4, vec![5], 2), 3, 4, &mut rng);
    let hetero = matches!(
        fedavg_round(&mut [&mut a, &mut b], &[1, 1]),
        Err(BaselineError::HeterogeneousModels(_))
    );
    outcome(
        worst <= 1e-12 && hetero,
        format!("200 random 3-client instances, max |aggregate - oracle| {worst:e} <= 1e-12; heterogeneous -> HeterogeneousModels: {hetero}"),
    )
}

// ---------------------------------------------------------------- 9

fn common_args(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CommonArgs {
    CommonArgs {
        config: config.map(Path::to_path_buf),
        seed,
        fault_seed: None,
        rounds: None,
        out: out.to_path_buf(),
    }
}

fn determinism() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut cfg = toy_four_clients(6);
    cfg.faults.link_drop_rate = 0.3;
    cfg.relay_enabled = true;
    let cfg_path = dir.path().join("c.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        cmd_run(&RunArgs {
            common: common_args(Some(&cfg_path), None, &out),
            variant: None,
        })
        .unwrap();
        fs::read(out.join(ROUNDS_FILE)).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    cfg.parallel = true;
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let c = run("c");
    outcome(
        a == b && a == c,
        format!(
            "two runs byte-identical rounds.jsonl: {}; parallel schedule identical: {} ({} bytes)",
            a == b,
            a == c,
            a.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn ablation_harness() -> Outcome {
    let dir = TempDir::new().unwrap();
    let mut cfg = ExperimentConfig::homogeneous();
    cfg.rounds = 20;
    cfg.seed = 6;
    let cfg_path = dir.path().join("h.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let abl = dir.path().join("abl");
    cmd_ablate(&common_args(Some(&cfg_path), None, &abl)).unwrap();
    let csv = fs::read_to_string(abl.join(dflmoe_cli::ABLATION_FILE)).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    let expected: Vec<&str> = Variant::ABLATIONS.iter().map(|v| v.name()).collect();
    let filled = rows
        .iter()
        .all(|r| r.len() == 3 && r.iter().all(|c| !c.is_empty()));

    let local = dir.path().join("local");
    cmd_run(&RunArgs {
        common: common_args(Some(&cfg_path), None, &local),
        variant: Some(Variant::LocalOnly),
    })
    .unwrap();
    let (_, standalone) = report::load_run(&local).unwrap();
    let row = rows.iter().find(|r| r[0] == "local_only").unwrap();
    let diff = (row[1].parse::<f64>().unwrap() - standalone.mean_acc).abs();
    outcome(
        names == expected && filled && diff <= 1e-12,
        format!("rows {names:?}, all cells filled: {filled}; |local_only row - standalone| {diff:e} <= 1e-12"),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() -> ExitCode {
    let start = Instant::now();
    let local_start = Instant::now();
    let local = local_only_accs();
    let local_secs = local_start.elapsed().as_secs_f64();

    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("attention identity", Box::new(attention_identity)),
        ("freezing contract", Box::new(freezing_contract)),
        (
            "knowledge transfer",
            Box::new(|| knowledge_transfer(&local, local_secs)),
        ),
        (
            "communication accounting",
            Box::new(communication_accounting),
        ),
        (
            "disconnect robustness",
            Box::new(|| disconnect_robustness(&local)),
        ),
        ("relay reachability", Box::new(relay_reachability)),
        ("fedavg oracle", Box::new(fedavg_oracle)),
        ("determinism", Box::new(determinism)),
        ("ablation harness", Box::new(ablation_harness)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail
        );
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
