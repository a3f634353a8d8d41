//! Static cost accounting: parameters, MACs and cut traffic per split plan,
//! plan scoring and the split recommender.

use std::cmp::Ordering;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::model::{split_graph, CutKey, ModelGraph, ModelError, Network, Node, Partition, Payload, Result, SplitPlan, SubModel};
use crate::nn::FeatureShape;

/// Bytes per element on the wire; training runs in `f32`.
pub const WIRE_DTYPE_BYTES: usize = 4;

/// Trainable parameters (BN affine included, running statistics excluded).
pub fn count_params(graph: &ModelGraph) -> u64 {
    graph.param_count()
}

/// Convolution and linear multiply-accumulates for one sample of `input`.
pub fn count_macs(graph: &ModelGraph, input: FeatureShape) -> Result<u64> {
    graph.macs(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCost {
    pub partition: Partition,
    pub params: u64,
    /// Per sample.
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutCost {
    pub key: CutKey,
    pub from: Partition,
    pub to: Partition,
    pub shape: FeatureShape,
    pub payload: Payload,
    /// Zero for values that stay on the client.
    pub bytes_per_sample: u64,
}

impl CutCost {
    pub fn on_wire(&self) -> bool {
        self.bytes_per_sample > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: Network,
    pub plan: SplitPlan,
    pub input: FeatureShape,
    pub batch: usize,
    pub dtype_size: usize,
    /// Front-end, server, back-end.
    pub partitions: [PartitionCost; 3],
    pub total_params: u64,
    pub total_macs: u64,
    pub cuts: Vec<CutCost>,
    /// Per batch: activations client to server and server outputs back.
    pub forward_up_bytes: u64,
    pub forward_down_bytes: u64,
    /// Per batch: output gradients to the server and activation gradients back.
    pub grad_up_bytes: u64,
    pub grad_down_bytes: u64,
    /// (FE + BE MACs) / total MACs.
    pub client_mac_share: f64,
}

impl CostReport {
    pub fn partition(&self, p: Partition) -> &PartitionCost {
        self.partitions.iter().find(|c| c.partition == p).expect("three partitions")
    }

    pub fn client_macs(&self) -> u64 {
        self.partition(Partition::Fe).macs + self.partition(Partition::Be).macs
    }

    pub fn total_cut_bytes(&self) -> u64 {
        self.forward_up_bytes + self.forward_down_bytes + self.grad_up_bytes + self.grad_down_bytes
    }

    /// `(params, MACs)` relative to `reference`.
    pub fn ratios_vs(&self, reference: &CostReport) -> (f64, f64) {
        (self.total_params as f64 / reference.total_params as f64, self.total_macs as f64 / reference.total_macs as f64)
    }
}

fn owner(plan: &SplitPlan, node: Node) -> Partition {
    match node {
        Node::Input => Partition::Fe,
        Node::Stage(s) => plan.partition_of(s),
    }
}

/// Every distinct `(value, destination partition)` crossing a partition
/// boundary, priced per sample. Works for plans that fail validation too.
fn plan_cuts(graph: &ModelGraph, plan: SplitPlan, input: FeatureShape, dtype_size: usize) -> Result<Vec<CutCost>> {
    let outs = graph.infer_shapes(input)?;
    let mut cuts: Vec<CutCost> = Vec::new();
    for e in &graph.edges {
        let Node::Stage(_) = e.src else { continue };
        let (from, to) = (owner(&plan, e.src), plan.partition_of(e.dst));
        let key = CutKey { src: e.src, port: e.port };
        if from == to || cuts.iter().any(|c| c.key == key && c.to == to) {
            continue;
        }
        let shape = graph.port_shape(e.src, e.port, &outs, input);
        let payload = e.port.payload();
        let local = from == Partition::Fe && to == Partition::Be;
        let bytes_per_sample = if local { 0 } else { (shape.iter().product::<usize>() * dtype_size) as u64 };
        cuts.push(CutCost { key, from, to, shape, payload, bytes_per_sample });
    }
    cuts.sort_by_key(|c| (c.key, c.to));
    Ok(cuts)
}

fn cost_report(graph: &ModelGraph, plan: SplitPlan, input: FeatureShape, batch: usize, dtype_size: usize) -> Result<CostReport> {
    split_graph(graph, plan)?;
    let stage_macs = graph.stage_macs(input)?;
    let n = graph.num_stages();
    let part = |p: Partition| {
        let r = plan.range(p, n);
        PartitionCost {
            partition: p,
            params: graph.stages[r.clone()].iter().map(|s| s.block.param_count()).sum(),
            macs: stage_macs[r].iter().sum(),
        }
    };
    let partitions = [part(Partition::Fe), part(Partition::Server), part(Partition::Be)];
    let cuts = plan_cuts(graph, plan, input, dtype_size)?;
    let per_batch = |from, to| cuts.iter().filter(|c| c.from == from && c.to == to).map(|c| c.bytes_per_sample).sum::<u64>() * batch as u64;
    let up = per_batch(Partition::Fe, Partition::Server);
    let down = per_batch(Partition::Server, Partition::Be);
    let total_macs: u64 = stage_macs.iter().sum();
    let client = partitions[0].macs + partitions[2].macs;
    Ok(CostReport {
        network: graph.meta.network,
        plan,
        input,
        batch,
        dtype_size,
        partitions,
        total_params: graph.param_count(),
        total_macs,
        cuts,
        forward_up_bytes: up,
        forward_down_bytes: down,
        grad_up_bytes: down,
        grad_down_bytes: up,
        client_mac_share: if total_macs == 0 { 0.0 } else { client as f64 / total_macs as f64 },
    })
}

/// Costs of `plan` for batches of `batch` samples of shape `input`, with
/// `f32` payloads. Front-end to back-end values are priced at zero.
pub fn cut_cost_report(graph: &ModelGraph, plan: SplitPlan, input: FeatureShape, batch: usize) -> Result<CostReport> {
    cost_report(graph, plan, input, batch, WIRE_DTYPE_BYTES)
}

/// The five split-point criteria for one plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCriteriaReport {
    pub plan: SplitPlan,
    /// Task-layer placement, informational: stages kept on the front-end
    /// and back-end, and the deepest front-end stage.
    pub fe_stages: usize,
    pub be_stages: usize,
    pub fe_last_stage: String,
    /// Wire bytes per sample, forward and gradient, both directions.
    pub cut_bytes_per_sample: u64,
    /// Every value crossing to or from the server is a tensor whose shape
    /// the receiving partition can consume.
    pub dimension_closure: bool,
    /// The image enters only the front-end and only the back-end emits
    /// logits, so raw data and labels stay on the client.
    pub privacy_placement: bool,
    pub client_mac_share: f64,
}

/// Scores `plan` at the graph's own input size. Plans that fail closure
/// or placement are still scored so they can be reported.
pub fn evaluate_plan(graph: &ModelGraph, plan: SplitPlan) -> Result<SplitCriteriaReport> {
    let n = graph.num_stages();
    plan.check_bounds(n)?;
    let input = graph.meta.input_shape();
    let cuts = plan_cuts(graph, plan, input, WIRE_DTYPE_BYTES)?;
    let dimension_closure = cuts.iter().all(|c| c.payload == Payload::Tensor || !c.on_wire());
    let image_ok = graph.edges.iter().filter(|e| e.src == Node::Input).all(|e| plan.partition_of(e.dst) == Partition::Fe);
    let logits_ok = plan.partition_of(n - 1) == Partition::Be;
    let macs = graph.stage_macs(input)?;
    let total: u64 = macs.iter().sum();
    let client: u64 = macs[plan.range(Partition::Fe, n)].iter().chain(&macs[plan.range(Partition::Be, n)]).sum();
    Ok(SplitCriteriaReport {
        plan,
        fe_stages: plan.fe_last + 1,
        be_stages: n - plan.be_first,
        fe_last_stage: graph.stages[plan.fe_last].name.clone(),
        cut_bytes_per_sample: 2 * cuts.iter().filter(|c| c.payload == Payload::Tensor).map(|c| c.bytes_per_sample).sum::<u64>(),
        dimension_closure,
        privacy_placement: image_ok && logits_ok,
        client_mac_share: if total == 0 { 0.0 } else { client as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConstraints {
    /// Upper bound on (FE + BE MACs) / total.
    pub max_client_mac_share: Option<f64>,
    /// Upper bound on wire bytes per sample, forward plus gradient.
    pub max_cut_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub plan: SplitPlan,
    pub criteria: SplitCriteriaReport,
    /// Batch of one at the graph's input size.
    pub cost: CostReport,
}

/// No plan met the constraints; lists why each candidate was rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Infeasible {
    pub rejected: Vec<(SplitPlan, String)>,
}

impl fmt::Display for Infeasible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "no split plan satisfies the constraints:")?;
        for (p, why) in &self.rejected {
            writeln!(f, "  ({}, {}): {why}", p.fe_last, p.be_first)?;
        }
        Ok(())
    }
}

impl std::error::Error for Infeasible {}

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Infeasible(Infeasible),
}

/// First failing criterion of `c` under `k`, if any.
fn rejection(c: &SplitCriteriaReport, k: &SplitConstraints) -> Option<String> {
    if !c.dimension_closure {
        return Some("dimension closure: pooling indices would cross to or from the server".into());
    }
    if !c.privacy_placement {
        return Some("privacy placement: image or logits would leave the client".into());
    }
    if let Some(max) = k.max_client_mac_share {
        if c.client_mac_share > max {
            return Some(format!("client compute share {:.4} exceeds {max}", c.client_mac_share));
        }
    }
    if let Some(max) = k.max_cut_bytes {
        if c.cut_bytes_per_sample > max {
            return Some(format!("cut bytes {} per sample exceed {max}", c.cut_bytes_per_sample));
        }
    }
    None
}

/// Exhaustive search over plans: filter by closure, placement and the
/// constraints, then take the fewest cut bytes, breaking ties by smaller
/// client share, then smaller `fe_last`, then smaller `be_first`.
pub fn recommend_split(graph: &ModelGraph, constraints: &SplitConstraints) -> Result<Recommendation, RecommendError> {
    let mut best: Option<SplitCriteriaReport> = None;
    let mut rejected = Vec::new();
    for plan in SplitPlan::enumerate(graph.num_stages()) {
        let c = evaluate_plan(graph, plan)?;
        if let Some(why) = rejection(&c, constraints) {
            rejected.push((plan, why));
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let ord = c
                    .cut_bytes_per_sample
                    .cmp(&b.cut_bytes_per_sample)
                    .then(c.client_mac_share.partial_cmp(&b.client_mac_share).unwrap_or(Ordering::Equal))
                    .then(plan.fe_last.cmp(&b.plan.fe_last))
                    .then(plan.be_first.cmp(&b.plan.be_first));
                ord == Ordering::Less
            }
        };
        if better {
            best = Some(c);
        }
    }
    let criteria = best.ok_or(RecommendError::Infeasible(Infeasible { rejected }))?;
    let cost = cut_cost_report(graph, criteria.plan, graph.meta.input_shape(), 1)?;
    Ok(Recommendation { plan: criteria.plan, criteria, cost })
}

/// Aligned text and CSV renderings of a set of reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedReport {
    pub text: String,
    pub csv: String,
}

pub const CSV_HEADER: &str = "network,fe_last,be_first,input_c,input_h,input_w,batch,params,params_ratio_vs_unet,macs,macs_ratio_vs_unet,\
fe_params,server_params,be_params,fe_macs,server_macs,be_macs,client_mac_share,forward_up_bytes,forward_down_bytes,grad_up_bytes,grad_down_bytes";

/// Renders `reports` with parameter and MAC ratios against `reference`
/// (normally the UNet row). Ratios are plain fractions, not percentages.
pub fn export_report(reports: &[CostReport], reference: &CostReport) -> ExportedReport {
    let mut text = format!(
        "{:<16} {:>8} {:>12} {:>14} {:>12} {:>14} {:>14} {:>12} {:>12}\n",
        "network", "plan", "params", "ratio vs UNet", "GMAC", "ratio vs UNet", "client share", "up B/batch", "down B/batch"
    );
    let mut csv = format!("{CSV_HEADER}\n");
    for r in reports {
        let (pr, mr) = r.ratios_vs(reference);
        let [fe, sv, be] = r.partitions;
        writeln!(
            text,
            "{:<16} {:>8} {:>12} {:>14.4} {:>12.4} {:>14.4} {:>14.4} {:>12} {:>12}",
            r.network.name(),
            format!("{}/{}", r.plan.fe_last, r.plan.be_first),
            r.total_params,
            pr,
            r.total_macs as f64 / 1e9,
            mr,
            r.client_mac_share,
            r.forward_up_bytes + r.grad_up_bytes,
            r.forward_down_bytes + r.grad_down_bytes
        )
        .unwrap();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.network.name(),
            r.plan.fe_last,
            r.plan.be_first,
            r.input[0],
            r.input[1],
            r.input[2],
            r.batch,
            r.total_params,
            pr,
            r.total_macs,
            mr,
            fe.params,
            sv.params,
            be.params,
            fe.macs,
            sv.macs,
            be.macs,
            r.client_mac_share,
            r.forward_up_bytes,
            r.forward_down_bytes,
            r.grad_up_bytes,
            r.grad_down_bytes
        )
        .unwrap();
    }
    ExportedReport { text, csv }
}

/// Expected tensor payload bytes `(up, down)` of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficPrediction {
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Payload bytes a SplitFed run will move per round and client, from the
/// plan and the schedule alone. `clients` holds `(train, val)` sample
/// counts; each round every training sample crosses once per local epoch
/// (activations up, server outputs down, then both gradients), every
/// validation sample once forward, and the FE and BE state goes up and
/// comes back once.
pub fn predict_splitfed_traffic(
    graph: &ModelGraph,
    plan: SplitPlan,
    local_epochs: usize,
    global_rounds: usize,
    clients: &[(usize, usize)],
    dtype_size: usize,
) -> Result<Vec<Vec<TrafficPrediction>>> {
    let per_sample = cost_report(graph, plan, graph.meta.input_shape(), 1, dtype_size)?;
    let [fe, _, be] = split_graph(graph, plan)?;
    let state_numel: usize = [fe, be].into_iter().flat_map(|p| SubModel::<f32>::build(p, 0).state_dict()).map(|(_, t)| t.numel()).sum();
    let state = (state_numel * dtype_size) as u64;
    let (fu, fd) = (per_sample.forward_up_bytes, per_sample.forward_down_bytes);
    let (gu, gd) = (per_sample.grad_up_bytes, per_sample.grad_down_bytes);
    let round: Vec<TrafficPrediction> = clients
        .iter()
        .map(|&(train, val)| {
            let (t, v, e) = (train as u64, val as u64, local_epochs as u64);
            TrafficPrediction { bytes_up: e * t * (fu + gu) + v * fu + state, bytes_down: e * t * (fd + gd) + v * fd + state }
        })
        .collect();
    Ok(vec![round; global_rounds])
}
