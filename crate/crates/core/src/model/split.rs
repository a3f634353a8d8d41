//! Split plans and graph partitioning.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Edge, GraphMeta, ModelError, ModelGraph, Node, Payload, Port, Result, StageSpec};
use crate::nn::FeatureShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Fe,
    Server,
    Be,
    /// The unsplit network.
    Whole,
}

impl Partition {
    pub fn name(self) -> &'static str {
        match self {
            Partition::Fe => "front-end",
            Partition::Server => "server",
            Partition::Be => "back-end",
            Partition::Whole => "whole",
        }
    }

    pub fn is_client(self) -> bool {
        matches!(self, Partition::Fe | Partition::Be)
    }
}

/// Front-end is stages `0..=fe_last`, server `fe_last+1..be_first`,
/// back-end `be_first..`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub fe_last: usize,
    pub be_first: usize,
}

impl SplitPlan {
    pub fn new(fe_last: usize, be_first: usize) -> Self {
        Self { fe_last, be_first }
    }

    pub fn partition_of(&self, stage: usize) -> Partition {
        if stage <= self.fe_last {
            Partition::Fe
        } else if stage < self.be_first {
            Partition::Server
        } else {
            Partition::Be
        }
    }

    pub fn range(&self, part: Partition, num_stages: usize) -> Range<usize> {
        match part {
            Partition::Fe => 0..self.fe_last + 1,
            Partition::Server => self.fe_last + 1..self.be_first,
            Partition::Be => self.be_first..num_stages,
            Partition::Whole => 0..num_stages,
        }
    }

    pub fn check_bounds(&self, num_stages: usize) -> Result<()> {
        if self.fe_last + 1 >= self.be_first || self.be_first >= num_stages {
            return Err(ModelError::InvalidSplit(format!(
                "plan (fe_last {}, be_first {}) needs 0 <= fe_last < fe_last + 1 < be_first <= {} so every part is non-empty",
                self.fe_last,
                self.be_first,
                num_stages.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Every plan with non-empty parts, in `(fe_last, be_first)` order.
    pub fn enumerate(num_stages: usize) -> Vec<SplitPlan> {
        let mut plans = Vec::new();
        for fe_last in 0..num_stages {
            for be_first in fe_last + 2..num_stages {
                plans.push(SplitPlan { fe_last, be_first });
            }
        }
        plans
    }
}

fn node_partition(plan: &SplitPlan, node: Node) -> Partition {
    match node {
        Node::Input => Partition::Fe,
        Node::Stage(s) => plan.partition_of(s),
    }
}

fn describe_edge(graph: &ModelGraph, e: &Edge) -> String {
    let src = match e.src {
        Node::Input => "input".to_string(),
        Node::Stage(s) => graph.stages[s].name.clone(),
    };
    format!("{src} -> {} ({:?})", graph.stages[e.dst].name, e.port)
}

/// Checks bounds, image placement and that no pooling-indices edge
/// crosses between client and server.
///
/// Indices may pass from the front-end to the back-end: both live on the
/// client, so they never reach the wire.
pub fn validate_plan(graph: &ModelGraph, plan: SplitPlan) -> Result<()> {
    plan.check_bounds(graph.num_stages())?;
    for e in &graph.edges {
        let from = node_partition(&plan, e.src);
        let to = plan.partition_of(e.dst);
        if e.src == Node::Input && to != Partition::Fe {
            return Err(ModelError::InvalidSplit(format!("edge {} feeds the image outside the front-end", describe_edge(graph, e))));
        }
        let on_wire = from != to && !(from == Partition::Fe && to == Partition::Be);
        if e.port.payload() == Payload::PoolIndices && on_wire {
            return Err(ModelError::InvalidSplit(format!(
                "pooling indices edge {} would cross from the {} to the {}",
                describe_edge(graph, e),
                from.name(),
                to.name()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CutKey {
    pub src: Node,
    pub port: Port,
}

/// A value produced in one partition and consumed in another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutTensor {
    pub key: CutKey,
    /// Per-sample `(C, H, W)`; for pooling indices, the pooled extent.
    pub shape: FeatureShape,
    pub payload: Payload,
    pub from: Partition,
    pub to: Partition,
}

impl CutTensor {
    /// Front-end to back-end values stay on the client.
    pub fn client_local(&self) -> bool {
        self.from == Partition::Fe && self.to == Partition::Be
    }

    pub fn numel_per_sample(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bytes one sample contributes on the wire.
    pub fn wire_bytes_per_sample(&self, dtype_size: usize) -> usize {
        if self.client_local() || self.payload != Payload::Tensor {
            0
        } else {
            self.numel_per_sample() * dtype_size
        }
    }
}

/// One partition of a graph: its stages, their incoming edges and the cut
/// signatures at its boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPart {
    pub partition: Partition,
    pub meta: GraphMeta,
    pub range: Range<usize>,
    pub stages: Vec<StageSpec>,
    /// Incoming edges of this part's stages, global indices.
    pub edges: Vec<Edge>,
    pub cut_inputs: Vec<CutTensor>,
    pub cut_outputs: Vec<CutTensor>,
    pub reads_image: bool,
    pub emits_logits: bool,
}

impl GraphPart {
    pub fn whole(graph: &ModelGraph) -> Self {
        let n = graph.num_stages();
        Self {
            partition: Partition::Whole,
            meta: graph.meta.clone(),
            range: 0..n,
            stages: graph.stages.clone(),
            edges: graph.edges.clone(),
            cut_inputs: Vec::new(),
            cut_outputs: Vec::new(),
            reads_image: true,
            emits_logits: true,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.stages.iter().map(|s| s.block.param_count()).sum()
    }
}

/// Partitions `graph` under `plan` into front-end, server and back-end.
pub fn split_graph(graph: &ModelGraph, plan: SplitPlan) -> Result<[GraphPart; 3]> {
    validate_plan(graph, plan)?;
    let input = graph.meta.input_shape();
    let outs = graph.infer_shapes(input)?;
    let mut cuts: Vec<CutTensor> = Vec::new();
    for e in &graph.edges {
        let Node::Stage(_) = e.src else { continue };
        let from = node_partition(&plan, e.src);
        let to = plan.partition_of(e.dst);
        if from == to {
            continue;
        }
        let key = CutKey { src: e.src, port: e.port };
        if cuts.iter().any(|c| c.key == key && c.to == to) {
            continue;
        }
        let shape = graph.port_shape(e.src, e.port, &outs, input);
        cuts.push(CutTensor { key, shape, payload: e.port.payload(), from, to });
    }
    cuts.sort_by_key(|c| (c.key, c.to));
    let n = graph.num_stages();
    let part = |p: Partition| {
        let range = plan.range(p, n);
        GraphPart {
            partition: p,
            meta: graph.meta.clone(),
            stages: graph.stages[range.clone()].to_vec(),
            edges: graph.edges.iter().copied().filter(|e| range.contains(&e.dst)).collect(),
            cut_inputs: cuts.iter().copied().filter(|c| c.to == p).collect(),
            cut_outputs: cuts.iter().copied().filter(|c| c.from == p).collect(),
            reads_image: p == Partition::Fe,
            emits_logits: p == Partition::Be,
            range,
        }
    };
    Ok([part(Partition::Fe), part(Partition::Server), part(Partition::Be)])
}

/// Reassembles partitions into one graph. The result's default plan is the
/// plan the parts were split with.
pub fn merge_parts(parts: &[GraphPart; 3]) -> Result<ModelGraph> {
    let mut stages = Vec::new();
    let mut edges = Vec::new();
    for p in parts {
        if p.range.start != stages.len() || p.range.len() != p.stages.len() {
            return Err(ModelError::Build(format!("{} part does not continue the stage order", p.partition.name())));
        }
        stages.extend(p.stages.iter().cloned());
        edges.extend(p.edges.iter().copied());
    }
    let plan = SplitPlan { fe_last: parts[0].range.end - 1, be_first: parts[2].range.start };
    ModelGraph::new(parts[0].meta.clone(), stages, edges, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_segnet, build_unet, NetConfig};

    fn unet() -> ModelGraph {
        build_unet(&NetConfig { input_hw: (32, 32), ..NetConfig::default() }).unwrap()
    }

    #[test]
    fn default_unet_cuts() {
        let g = unet();
        let [fe, server, be] = split_graph(&g, g.default_plan).unwrap();
        assert_eq!(fe.cut_outputs.len(), 2);
        let wire_up: Vec<_> = fe.cut_outputs.iter().filter(|c| !c.client_local()).collect();
        assert_eq!(wire_up.len(), 1);
        assert_eq!(wire_up[0].shape, [32, 16, 16]);
        let local: Vec<_> = be.cut_inputs.iter().filter(|c| c.client_local()).collect();
        assert_eq!(local.len(), 1);
        assert_eq!(local[0].key, CutKey { src: Node::Stage(0), port: Port::Skip });
        assert_eq!(server.cut_outputs.len(), 1);
        assert_eq!(server.cut_outputs[0].shape, [64, 16, 16]);
        assert_eq!(server.cut_inputs, wire_up.into_iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn parts_concatenate_and_merge_back() {
        let g = unet();
        for plan in SplitPlan::enumerate(g.num_stages()) {
            let parts = split_graph(&g, plan).unwrap();
            let names: Vec<_> = parts.iter().flat_map(|p| p.stages.iter().map(|s| s.name.clone())).collect();
            assert_eq!(names, g.stages.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
            let merged = merge_parts(&parts).unwrap();
            assert_eq!((merged.stages, merged.edges, merged.meta), (g.stages.clone(), g.edges.clone(), g.meta.clone()));
        }
    }

    #[test]
    fn segnet_rejects_indices_over_the_wire() {
        let g = build_segnet(&NetConfig { input_hw: (32, 32), ..NetConfig::default() }).unwrap();
        split_graph(&g, g.default_plan).unwrap();
        // enc1 on the client, dec1 on the server.
        let err = split_graph(&g, SplitPlan::new(1, 8)).unwrap_err();
        assert!(matches!(&err, ModelError::InvalidSplit(m) if m.contains("enc1 -> dec1")), "{err}");
    }

    #[test]
    fn bounds() {
        let g = unet();
        assert!(split_graph(&g, SplitPlan::new(3, 4)).is_err());
        assert!(split_graph(&g, SplitPlan::new(0, 10)).is_err());
        assert_eq!(SplitPlan::enumerate(4), vec![SplitPlan::new(0, 2), SplitPlan::new(0, 3), SplitPlan::new(1, 3)]);
    }
}
