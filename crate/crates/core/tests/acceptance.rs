//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any fail.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use splitfed::analysis::{count_macs, count_params, predict_splitfed_traffic};
use splitfed::data::{generate_synthetic_dataset, partition_dataset, PartitionSpec};
use splitfed::engine::{run_splitfed, train_centralized, train_local_baselines, ClientShard, RoundConfig, RunHistory, SplitFedSetup, TransportKind};
use splitfed::model::{build, check_split_equivalence, EquivalenceTolerances, NetConfig, Network};
use splitfed::tensor::optim::AdamConfig;

// Reference model size and tolerances.
const UNET_PARAMS: f64 = 7.76e6;
const UNET_PARAMS_TOL: f64 = 0.07;
const UNET_MACS: f64 = 10.52e9;
const UNET_MACS_TOL: f64 = 0.15;

// Regime comparison setup.
const SEEDS: [u64; 3] = [0, 1, 2];
const REGIME_MARGIN: f64 = 0.01;
const REGIME_SEEDS_NEEDED: usize = 2;
const REGIME_BASE_WIDTH: usize = 8;
const REGIME_SIZE: usize = 64;
const REGIME_CLASSES: usize = 5;
const REGIME_PRESET: &str = "synthetic-4client";

const GRAD_TOL: f64 = 1e-3;
const GRAD_CASES_PER_PRIMITIVE: usize = 7;
const WIRE_CASES: u32 = 1200;

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs one criterion, turning panics into failures, and prints its line.
fn criterion(id: u8, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let in_time = took <= budget;
    let pass = out.pass && in_time;
    let late = if in_time { String::new() } else { format!(", over the {:?} budget", budget) };
    println!("{} {id} {name}: {} ({:.1}s{late})", if pass { "PASS" } else { "FAIL" }, out.detail, took.as_secs_f64());
    pass
}

fn split_equivalence() -> Outcome {
    let (x, m) = common::random_batch::<f32>(11, 2, 32, 5);
    let tol = EquivalenceTolerances::default();
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut failed = Vec::new();
    for net in Network::ALL {
        let g = build(net, &NetConfig { input_hw: (32, 32), ..NetConfig::default() }).unwrap();
        let r = check_split_equivalence(&g, g.default_plan, 3, &x, &m, 5, AdamConfig::default(), tol).unwrap();
        worst = (worst.0.max(r.forward_max_abs), worst.1.max(r.grad_max_rel), worst.2.max(r.param_max_abs));
        if !r.passed {
            failed.push(net.name());
        }
    }
    outcome(
        failed.is_empty(),
        format!("forward {:.1e} (<{:.0e}), grad {:.1e} (<{:.0e}), params after 5 steps {:.1e} (<{:.0e}){}", worst.0, tol.forward_abs, worst.1, tol.grad_rel, worst.2, tol.param_abs, if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(" ")) }),
    )
}

fn unet_size() -> Outcome {
    let g = build(Network::Unet, &NetConfig { input_hw: (240, 240), ..NetConfig::default() }).unwrap();
    let params = count_params(&g) as f64;
    let macs = count_macs(&g, [3, 240, 240]).unwrap() as f64;
    let (dp, dm) = (params / UNET_PARAMS - 1.0, macs / UNET_MACS - 1.0);
    outcome(
        dp.abs() <= UNET_PARAMS_TOL && dm.abs() <= UNET_MACS_TOL,
        format!("{:.3}M params ({:+.1}%, tol {:.0}%), {:.2} GMAC ({:+.1}%, tol {:.0}%)", params / 1e6, 100.0 * dp, 100.0 * UNET_PARAMS_TOL, macs / 1e9, 100.0 * dm, 100.0 * UNET_MACS_TOL),
    )
}

fn regime_setup(seed: u64) -> SplitFedSetup {
    let spec = PartitionSpec::preset(REGIME_PRESET, seed).unwrap();
    let samples = generate_synthetic_dataset(spec.total(), REGIME_SIZE, REGIME_CLASSES, seed).unwrap();
    let (shards, test) = partition_dataset(&samples, &spec).unwrap();
    let graph = build(Network::Unet, &NetConfig { num_classes: REGIME_CLASSES, base_width: REGIME_BASE_WIDTH, input_hw: (REGIME_SIZE, REGIME_SIZE), ..NetConfig::default() }).unwrap();
    let config = RoundConfig { global_rounds: 5, local_epochs: 4, batch_size: 4, lr: 1e-3, seed, ..Default::default() };
    SplitFedSetup {
        plan: graph.default_plan,
        graph,
        shards: shards.iter().enumerate().map(|(i, s)| ClientShard::split(i, s, seed)).collect(),
        config,
        test,
    }
}

struct RegimeRun {
    setup: SplitFedSetup,
    splitfed: RunHistory,
}

fn regimes(runs: &mut Vec<RegimeRun>) -> Outcome {
    let mut ok_seeds = 0;
    let mut cells = Vec::new();
    for seed in SEEDS {
        let s = regime_setup(seed);
        let c = train_centralized::<f32>(&s.graph, &s.config, &s.shards, &s.test).unwrap().history.test.mean_iou;
        let locals = train_local_baselines::<f32>(&s.graph, &s.config, &s.shards, &s.test).unwrap();
        let l = locals.iter().map(|t| t.history.test.mean_iou).sum::<f64>() / locals.len() as f64;
        let h = run_splitfed::<f32>(&s, TransportKind::Inproc).unwrap();
        let sf = h.test.mean_iou;
        let ok = c - sf >= REGIME_MARGIN && sf - l >= REGIME_MARGIN;
        ok_seeds += ok as usize;
        cells.push(format!("seed {seed} C {c:.4} S {sf:.4} L {l:.4}{}", if ok { "" } else { " (no)" }));
        runs.push(RegimeRun { setup: s, splitfed: h });
    }
    outcome(
        ok_seeds >= REGIME_SEEDS_NEEDED,
        format!("{ok_seeds}/{} seeds with C-S and S-L >= {REGIME_MARGIN}, need {REGIME_SEEDS_NEEDED}; {}", SEEDS.len(), cells.join("; ")),
    )
}

fn gradients() -> Outcome {
    let results = common::gradsuite::run(GRAD_CASES_PER_PRIMITIVE);
    let worst = results.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    let bad = results.iter().filter(|r| !(r.rel_err < GRAD_TOL)).count();
    outcome(
        bad == 0 && results.len() >= 100,
        format!("{} cases over {} primitives, {bad} over {GRAD_TOL:.0e}, worst {:.1e} ({})", results.len(), common::gradsuite::PRIMITIVES.len(), worst.rel_err, worst.primitive),
    )
}

fn oracles() -> Outcome {
    use common::oracles::*;
    let iou = iou_exhaustive();
    let dice = dice_exhaustive();
    let avg = fedavg_oracle(200);
    let rec = recommend_matches_enumeration();
    outcome(true, format!("IoU {iou} mask pairs, Dice {dice} mask pairs, fedavg {avg} trials exact, recommend_split {rec} constraint sets"))
}

fn transport() -> Outcome {
    let wire = common::wire::round_trips(WIRE_CASES);
    let samples = generate_synthetic_dataset(28, 16, 3, 11).unwrap();
    let (shards, test) = partition_dataset(&samples, &PartitionSpec { client_counts: vec![9, 13], test_count: 6, seed: 3 }).unwrap();
    let graph = build(Network::Unet, &NetConfig { num_classes: 3, base_width: 4, depth: 2, input_hw: (16, 16), ..NetConfig::default() }).unwrap();
    let config = RoundConfig { global_rounds: 2, local_epochs: 1, batch_size: 4, lr: 5e-3, seed: 7, ..Default::default() };
    let setup = SplitFedSetup { plan: graph.default_plan, graph, shards: shards.iter().enumerate().map(|(i, s)| ClientShard::split(i, s, 7)).collect(), config, test };
    let a = run_splitfed::<f32>(&setup, TransportKind::Inproc).unwrap().to_json_lines();
    let b = run_splitfed::<f32>(&setup, TransportKind::Tcp).unwrap().to_json_lines();
    match wire {
        Ok(n) => outcome(a == b, format!("{n} random messages round-trip, 2-client TCP and in-process histories {}", if a == b { "identical" } else { "differ" })),
        Err(e) => outcome(false, format!("round trip: {e}")),
    }
}

fn accounting(runs: &[RegimeRun]) -> Outcome {
    let mut mismatches = 0;
    let mut total = 0u64;
    for r in runs {
        let s = &r.setup;
        let sizes: Vec<(usize, usize)> = s.shards.iter().map(|c| (c.train.len(), c.val.len())).collect();
        let pred = predict_splitfed_traffic(&s.graph, s.plan, s.config.local_epochs, s.config.global_rounds, &sizes, 4).unwrap();
        for (i, round) in r.splitfed.rounds.iter().enumerate() {
            for c in &round.clients {
                let p = &pred[i][c.client];
                mismatches += ((c.bytes_up, c.bytes_down) != (p.bytes_up, p.bytes_down)) as usize;
                total += c.bytes_up + c.bytes_down;
            }
        }
        let sum_up: u64 = pred.iter().flatten().map(|p| p.bytes_up).sum();
        let sum_down: u64 = pred.iter().flatten().map(|p| p.bytes_down).sum();
        mismatches += ((r.splitfed.comm.bytes_up, r.splitfed.comm.bytes_down) != (sum_up, sum_down)) as usize;
    }
    outcome(
        mismatches == 0 && !runs.is_empty(),
        format!("{} runs, {:.1} MB measured, {mismatches} counters differ from the static prediction", runs.len(), total as f64 / 1e6),
    )
}

fn determinism(runs: &[RegimeRun]) -> Outcome {
    let Some(first) = runs.first() else { return outcome(false, "no run to repeat") };
    let again = run_splitfed::<f32>(&first.setup, TransportKind::Inproc).unwrap().to_json_lines();
    let same = again == first.splitfed.to_json_lines();
    outcome(same, format!("seed {} rerun metrics {} ({} bytes)", first.setup.config.seed, if same { "byte-identical" } else { "differ" }, again.len()))
}

fn main() {
    let mut runs = Vec::new();
    let results = [
        criterion(1, "split equals monolithic", minutes(2), split_equivalence),
        criterion(2, "UNet size", minutes(1), unet_size),
        criterion(3, "C >= S >= L", minutes(15), || regimes(&mut runs)),
        criterion(4, "gradient suite", minutes(1), gradients),
        criterion(5, "oracle suites", minutes(1), oracles),
        criterion(6, "protocol and transport", minutes(2), transport),
        criterion(7, "byte accounting", minutes(1), || accounting(&runs)),
        criterion(8, "determinism", minutes(5), || determinism(&runs)),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
