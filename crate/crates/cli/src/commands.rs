//! Command implementations. Every command writes under its output
//! directory only; a `FAILED` file marks a run that stopped part way.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use splitfed::analysis::{cut_cost_report, evaluate_plan, export_report, recommend_split, RecommendError, SplitConstraints};
use splitfed::data::{
    generate_synthetic_dataset, load_image_mask_dir, partition_dataset, save_mask_png, save_rgb_png, write_dataset_dir, Sample,
};
use splitfed::engine::{self, predict_masks, run_client, summary_table, train_local_baselines, ClientShard, RunHistory, SplitFedSetup, SummaryRow, Trained};
use splitfed::model::{build, ModelGraph, NetConfig, Network, SplitPlan};
use splitfed::transport::{tcp_connect, tcp_listen};

use crate::config::ExperimentConfig;
use crate::{runtime, CliError};

const RUNNING: &str = "RUNNING";
const FAILED: &str = "FAILED";

/// Creates `dir`, marks it as in progress and runs `f`; on failure the
/// marker becomes `FAILED` with the error.
fn in_run_dir(dir: &Path, f: impl FnOnce() -> Result<(), CliError>) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let _ = fs::remove_file(dir.join(FAILED));
    fs::write(dir.join(RUNNING), "").map_err(runtime)?;
    let result = f();
    let _ = fs::remove_file(dir.join(RUNNING));
    if let Err(e) = &result {
        let _ = fs::write(dir.join(FAILED), format!("{e}\n"));
    }
    result
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

pub fn gen_data(out: &Path, samples: usize, size: usize, classes: usize, seed: u64) -> Result<(), CliError> {
    if classes < 2 || classes > splitfed::data::PALETTE.len() {
        return Err(CliError::Config(format!("--classes must be in 2..={}", splitfed::data::PALETTE.len())));
    }
    let data = generate_synthetic_dataset(samples, size, classes, seed).map_err(|e| CliError::Config(e.to_string()))?;
    in_run_dir(out, || {
        write_dataset_dir(out, &data).map_err(runtime)?;
        println!("wrote {samples} samples of {size}x{size} to {}", out.display());
        Ok(())
    })
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Vec<ClientShard>, Vec<Sample>), CliError> {
    let spec = cfg.partition_spec()?;
    let (size, classes) = (cfg.model.input_size, cfg.model.num_classes);
    let samples = match &cfg.dataset.dir {
        Some(dir) => load_image_mask_dir(&dir.join("images"), &dir.join("masks"), classes, size).map_err(runtime)?,
        None => generate_synthetic_dataset(cfg.dataset.samples.unwrap_or(spec.total()), size, classes, cfg.seed).map_err(runtime)?,
    };
    let (shards, test) = partition_dataset(&samples, &spec).map_err(runtime)?;
    Ok((shards.iter().enumerate().map(|(i, s)| ClientShard::split(i, s, cfg.seed)).collect(), test))
}

/// Ground-truth and predicted masks of the first test samples.
fn dump_masks(dir: &Path, cfg: &ExperimentConfig, graph: &ModelGraph, trained: &Trained<f32>, test: &[Sample]) -> Result<(), CliError> {
    let picked = &test[..cfg.mask_samples.min(test.len())];
    if picked.is_empty() {
        return Ok(());
    }
    fs::create_dir_all(dir).map_err(runtime)?;
    let preds = predict_masks(graph, &trained.state, picked, cfg.training.batch_size).map_err(runtime)?;
    for (s, pred) in picked.iter().zip(preds) {
        save_rgb_png(&dir.join(format!("{}_image.png", s.id)), s).map_err(runtime)?;
        save_mask_png(&dir.join(format!("{}_truth.png", s.id)), &s.mask, s.width, s.height).map_err(runtime)?;
        save_mask_png(&dir.join(format!("{}_pred.png", s.id)), &pred, s.width, s.height).map_err(runtime)?;
    }
    Ok(())
}

fn write_histories(dir: &Path, histories: &[&RunHistory]) -> Result<(), CliError> {
    let lines: String = histories.iter().map(|h| h.to_json_lines()).collect();
    write(&dir.join("metrics.jsonl"), &lines)?;
    write(&dir.join("history.json"), &(serde_json::to_string_pretty(histories).map_err(runtime)? + "\n"))
}

fn print_result(h: &RunHistory) {
    let who = h.client.map_or(String::new(), |c| format!(" client {c}"));
    println!("{:?}{who}: test IoU {:.4}, bytes up {} down {}", h.regime, h.test.mean_iou, h.comm.bytes_up, h.comm.bytes_down);
}

pub fn train_centralized(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let dir = cfg.output_dir.clone();
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        let (shards, test) = load_data(cfg)?;
        let t = engine::train_centralized::<f32>(&graph, &cfg.training, &shards, &test).map_err(runtime)?;
        write_histories(&dir, &[&t.history])?;
        dump_masks(&dir.join("masks"), cfg, &graph, &t, &test)?;
        print_result(&t.history);
        Ok(())
    })
}

pub fn train_local(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let dir = cfg.output_dir.clone();
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        let (shards, test) = load_data(cfg)?;
        let runs = train_local_baselines::<f32>(&graph, &cfg.training, &shards, &test).map_err(runtime)?;
        write_histories(&dir, &runs.iter().map(|t| &t.history).collect::<Vec<_>>())?;
        for (i, t) in runs.iter().enumerate() {
            dump_masks(&dir.join("masks").join(format!("client{i}")), cfg, &graph, t, &test)?;
            print_result(&t.history);
        }
        Ok(())
    })
}

pub fn train_splitfed(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let plan = cfg.plan()?;
    let dir = cfg.output_dir.clone();
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        let (shards, test) = load_data(cfg)?;
        let setup = SplitFedSetup { graph: graph.clone(), plan, config: cfg.training.clone(), shards, test };
        let t = engine::train_splitfed::<f32>(&setup, cfg.transport).map_err(runtime)?;
        write_histories(&dir, &[&t.history])?;
        dump_masks(&dir.join("masks"), cfg, &graph, &t, &setup.test)?;
        print_result(&t.history);
        Ok(())
    })
}

pub fn plan_split(cfg: &ExperimentConfig, max_client_share: Option<f64>, max_cut_bytes: Option<u64>) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let dir = cfg.output_dir.clone();
    let constraints = SplitConstraints { max_client_mac_share: max_client_share, max_cut_bytes };
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        let mut text = format!(
            "{:>7} {:>8} {:>8} {:<12} {:>14} {:>8} {:>8} {:>13}\n",
            "fe_last", "be_first", "FE/BE", "deepest FE", "bytes/sample", "closure", "privacy", "client share"
        );
        for plan in SplitPlan::enumerate(graph.num_stages()) {
            let c = evaluate_plan(&graph, plan).map_err(runtime)?;
            text += &format!(
                "{:>7} {:>8} {:>8} {:<12} {:>14} {:>8} {:>8} {:>13.4}\n",
                plan.fe_last,
                plan.be_first,
                format!("{}/{}", c.fe_stages, c.be_stages),
                c.fe_last_stage,
                c.cut_bytes_per_sample,
                c.dimension_closure,
                c.privacy_placement,
                c.client_mac_share
            );
        }
        write(&dir.join("plans.txt"), &text)?;
        print!("{text}");
        match recommend_split(&graph, &constraints) {
            Ok(r) => {
                let cost = cut_cost_report(&graph, r.plan, graph.meta.input_shape(), cfg.training.batch_size).map_err(runtime)?;
                let out = export_report(std::slice::from_ref(&cost), &cost);
                write(&dir.join("recommendation.json"), &(serde_json::to_string_pretty(&r.criteria).map_err(runtime)? + "\n"))?;
                write(&dir.join("cost.csv"), &out.csv)?;
                println!("recommended plan: fe_last {} be_first {}", r.plan.fe_last, r.plan.be_first);
                Ok(())
            }
            Err(RecommendError::Infeasible(inf)) => {
                write(&dir.join("infeasible.txt"), &inf.to_string())?;
                Err(CliError::Runtime(inf.to_string()))
            }
            Err(e) => Err(runtime(e)),
        }
    })
}

pub fn report(runs: &[PathBuf], out: &Path, costs: Option<(usize, usize)>) -> Result<(), CliError> {
    let mut histories: Vec<RunHistory> = Vec::new();
    for dir in runs {
        let path = dir.join("history.json");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let hs: Vec<RunHistory> = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        histories.extend(hs);
    }
    in_run_dir(out, || {
        let rows: Vec<SummaryRow> =
            Network::ALL.into_iter().filter(|n| histories.iter().any(|h| h.network == *n)).map(|n| SummaryRow::from_histories(n, &histories)).collect();
        let table = summary_table(&rows);
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut csv = String::from("network,C,L,S\n");
        for r in &rows {
            csv += &format!("{},{},{},{}\n", r.network.name(), cell(r.centralized), cell(r.local), cell(r.splitfed));
        }
        write(&out.join("summary.txt"), &table)?;
        write(&out.join("summary.csv"), &csv)?;
        print!("{table}");
        if let Some((size, base_width)) = costs {
            let cfg = NetConfig { base_width, input_hw: (size, size), ..NetConfig::default() };
            let reports = Network::ALL
                .into_iter()
                .map(|n| {
                    let g = build(n, &cfg).map_err(|e| CliError::Config(e.to_string()))?;
                    cut_cost_report(&g, g.default_plan, [3, size, size], 1).map_err(runtime)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let exported = export_report(&reports, &reports[0]);
            write(&out.join("costs.txt"), &exported.text)?;
            write(&out.join("costs.csv"), &exported.csv)?;
            print!("{}", exported.text);
        }
        Ok(())
    })
}

pub fn serve(cfg: &ExperimentConfig, clients: Option<usize>) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let plan = cfg.plan()?;
    let n = clients.unwrap_or(cfg.partition_spec()?.client_counts.len());
    let dir = cfg.output_dir.clone();
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        let (_, test) = load_data(cfg)?;
        let listener = tcp_listen(cfg.address.as_str()).map_err(runtime)?;
        println!("listening on {}", listener.local_addr().map_err(runtime)?);
        std::io::stdout().flush().map_err(runtime)?;
        let t = engine::serve::<f32>(&listener, &graph, plan, &cfg.training, n, &test).map_err(runtime)?;
        write_histories(&dir, &[&t.history])?;
        dump_masks(&dir.join("masks"), cfg, &graph, &t, &test)?;
        print_result(&t.history);
        Ok(())
    })
}

pub fn client(cfg: &ExperimentConfig, id: usize) -> Result<(), CliError> {
    let graph = cfg.graph()?;
    let plan = cfg.plan()?;
    let (mut shards, _) = load_data(cfg)?;
    if id >= shards.len() {
        return Err(CliError::Config(format!("--client-id {id} is outside the {} partition clients", shards.len())));
    }
    let shard = shards.swap_remove(id);
    let dir = cfg.output_dir.clone();
    in_run_dir(&dir, || {
        cfg.echo(&dir)?;
        // The server may still be starting.
        let mut attempt = 0;
        let ch = loop {
            match tcp_connect::<f32>(cfg.address.as_str()) {
                Ok(ch) => break ch,
                Err(e) if attempt >= 100 => return Err(runtime(e)),
                Err(_) => {
                    attempt += 1;
                    thread::sleep(Duration::from_millis(100));
                }
            }
        };
        run_client(ch, &graph, plan, &cfg.training, shard).map_err(runtime)?;
        println!("client {id} finished {} rounds", cfg.training.global_rounds);
        Ok(())
    })
}
