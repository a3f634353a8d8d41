//! Segmentation networks as stage graphs, and their partitioning into
//! front-end, server and back-end sub-models.
//!
//! A [`ModelGraph`] is a pure description. Weights only exist once a graph
//! (or one of its partitions) is instantiated with a seed; because every
//! parameter is seeded by its own name, a partition built on its own holds
//! exactly the weights of the monolithic network.

mod equivalence;
mod exec;
mod split;
mod zoo;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BlockError, BlockSpec, FeatureShape, InputShapes, OutputShapes};
use crate::tensor::TensorError;

pub use equivalence::{check_split_equivalence, EquivalenceReport, EquivalenceTolerances};
pub use exec::{forward_monolithic, instantiate, route, split_model, CutValue, ForwardPass, SplitModel, SplitPass, SubModel};
pub use split::{merge_parts, split_graph, CutKey, CutTensor, GraphPart, Partition, SplitPlan};
pub use zoo::{build, build_attention_unet, build_cgnet, build_segnet, build_unet, CgConfig, NetConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("graph build error: {0}")]
    Build(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: BlockError },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("cut signature mismatch: {0}")]
    Signature(String),
    #[error("model state: {0}")]
    State(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Unet,
    Segnet,
    AttentionUnet,
    Cgnet,
}

impl Network {
    pub const ALL: [Network; 4] = [Network::Unet, Network::Segnet, Network::AttentionUnet, Network::Cgnet];

    pub fn name(self) -> &'static str {
        match self {
            Network::Unet => "unet",
            Network::Segnet => "segnet",
            Network::AttentionUnet => "attention_unet",
            Network::Cgnet => "cgnet",
        }
    }
}

impl std::fmt::Display for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Network {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Network::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| format!("unknown network {s:?} (expected unet, segnet, attention_unet or cgnet)"))
    }
}

/// A graph vertex: the external image input or a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Input,
    Stage(usize),
}

/// Stage output port; an edge delivers a port to the same-named input slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Port {
    Main,
    Skip,
    Indices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Tensor,
    PoolIndices,
}

impl Port {
    pub fn payload(self) -> Payload {
        match self {
            Port::Indices => Payload::PoolIndices,
            _ => Payload::Tensor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: Node,
    pub port: Port,
    pub dst: usize,
}

impl std::fmt::Display for Edge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.src {
            Node::Input => write!(f, "input -> {} ({:?})", self.dst, self.port),
            Node::Stage(s) => write!(f, "{s} -> {} ({:?})", self.dst, self.port),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub block: BlockSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub network: Network,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Spatial size the graph was validated at.
    pub input_hw: (usize, usize),
}

impl GraphMeta {
    pub fn input_shape(&self) -> FeatureShape {
        [self.in_channels, self.input_hw.0, self.input_hw.1]
    }
}

/// Immutable stage graph. Edges are kept sorted by `(dst, port)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub meta: GraphMeta,
    pub stages: Vec<StageSpec>,
    pub edges: Vec<Edge>,
    pub default_plan: SplitPlan,
}

/// Incoming edges of one stage, by slot.
#[derive(Debug, Clone, Copy)]
pub struct StageWiring {
    pub main: Edge,
    pub skip: Option<Edge>,
    pub indices: Option<Edge>,
}

impl ModelGraph {
    /// Validates structure and shapes at `meta.input_hw`.
    pub fn new(meta: GraphMeta, stages: Vec<StageSpec>, mut edges: Vec<Edge>, default_plan: SplitPlan) -> Result<Self> {
        edges.sort_by_key(|e| (e.dst, e.port));
        let graph = Self { meta, stages, edges, default_plan };
        graph.check_structure()?;
        graph.infer_shapes(graph.meta.input_shape())?;
        split::validate_plan(&graph, graph.default_plan)?;
        Ok(graph)
    }

    fn check_structure(&self) -> Result<()> {
        let n = self.stages.len();
        let bad = |m: String| Err(ModelError::Build(m));
        if n == 0 {
            return bad("graph has no stages".into());
        }
        let mut names = HashSet::new();
        for s in &self.stages {
            if !names.insert(s.name.as_str()) {
                return bad(format!("duplicate stage name {:?}", s.name));
            }
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.dst >= n {
                return bad(format!("edge {e} targets a missing stage"));
            }
            match e.src {
                Node::Input if e.port != Port::Main => return bad(format!("edge {e}: the input only has a main port")),
                Node::Stage(s) if s >= e.dst => return bad(format!("edge {e} does not point forward")),
                _ => {}
            }
            if !seen.insert((e.dst, e.port)) {
                return bad(format!("stage {} has two {:?} inputs", e.dst, e.port));
            }
        }
        for s in 0..n {
            if !seen.contains(&(s, Port::Main)) {
                return bad(format!("stage {:?} has no main input", self.stages[s].name));
            }
        }
        let inputs = self.edges.iter().filter(|e| e.src == Node::Input).count();
        if inputs != 1 {
            return bad(format!("expected a single input edge, found {inputs}"));
        }
        let sinks: Vec<_> = (0..n)
            .filter(|&s| !self.edges.iter().any(|e| e.src == Node::Stage(s) && e.port == Port::Main))
            .collect();
        if sinks != [n - 1] {
            return bad(format!("expected the last stage to be the only output, found sinks {sinks:?}"));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    pub fn wiring(&self, stage: usize) -> StageWiring {
        let find = |port| self.edges.iter().copied().find(|e| e.dst == stage && e.port == port);
        StageWiring { main: find(Port::Main).expect("validated: every stage has a main input"), skip: find(Port::Skip), indices: find(Port::Indices) }
    }

    /// Per-stage output shapes for a per-sample input `(C, H, W)`.
    pub fn infer_shapes(&self, input: FeatureShape) -> Result<Vec<OutputShapes>> {
        let mut outs: Vec<OutputShapes> = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let shapes = self.stage_input_shapes(s, input, &outs)?;
            let out = stage.block.infer(&shapes).map_err(|source| ModelError::Stage { stage: stage.name.clone(), source })?;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Input shapes of stage `s` given the outputs of all earlier stages.
    pub fn stage_input_shapes(&self, s: usize, input: FeatureShape, outs: &[OutputShapes]) -> Result<InputShapes> {
        let w = self.wiring(s);
        let port_shape = |e: Edge| -> Result<FeatureShape> {
            match (e.src, e.port) {
                (Node::Input, _) => Ok(input),
                (Node::Stage(p), Port::Main) => Ok(outs[p].main),
                (Node::Stage(p), Port::Skip) => outs[p].skip.ok_or_else(|| ModelError::Build(format!("edge {e}: stage {p} has no skip output"))),
                (Node::Stage(p), Port::Indices) => Err(ModelError::Build(format!("edge {e}: indices read as tensor {p}"))),
            }
        };
        let indices = match w.indices {
            Some(e) => match e.src {
                Node::Stage(p) => Some(outs[p].indices.ok_or_else(|| ModelError::Build(format!("edge {e}: stage {p} keeps no pooling indices")))?),
                Node::Input => unreachable!("validated: input only has a main port"),
            },
            None => None,
        };
        Ok(InputShapes { main: port_shape(w.main)?, skip: w.skip.map(port_shape).transpose()?, indices })
    }

    /// Shape carried by `port` of `node` at the given input size.
    pub fn port_shape(&self, node: Node, port: Port, outs: &[OutputShapes], input: FeatureShape) -> FeatureShape {
        match (node, port) {
            (Node::Input, _) => input,
            (Node::Stage(p), Port::Main) => outs[p].main,
            (Node::Stage(p), Port::Skip) => outs[p].skip.expect("validated skip port"),
            (Node::Stage(p), Port::Indices) => outs[p].indices.expect("validated indices port").0,
        }
    }

    /// Trainable parameters, from the closed-form block counts.
    pub fn param_count(&self) -> u64 {
        self.stages.iter().map(|s| s.block.param_count()).sum()
    }

    /// Per-stage multiply-accumulates of one sample.
    pub fn stage_macs(&self, input: FeatureShape) -> Result<Vec<u64>> {
        let outs = self.infer_shapes(input)?;
        (0..self.stages.len())
            .map(|s| {
                let shapes = self.stage_input_shapes(s, input, &outs)?;
                self.stages[s].block.macs(&shapes).map_err(|source| ModelError::Stage { stage: self.stages[s].name.clone(), source })
            })
            .collect()
    }

    pub fn macs(&self, input: FeatureShape) -> Result<u64> {
        Ok(self.stage_macs(input)?.iter().sum())
    }

    /// Human-readable listing of stages, shapes, parameter counts and edges.
    pub fn describe(&self) -> Result<String> {
        let input = self.meta.input_shape();
        let outs = self.infer_shapes(input)?;
        let macs = self.stage_macs(input)?;
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} (in {}, classes {}, base width {}, input {}x{})",
            m.network, m.in_channels, m.num_classes, m.base_width, m.input_hw.0, m.input_hw.1
        );
        let _ = writeln!(s, "{:>3}  {:<12} {:<16} {:<18} {:>12} {:>14}", "#", "stage", "block", "output", "params", "MAC/sample");
        for (i, st) in self.stages.iter().enumerate() {
            let [c, h, w] = outs[i].main;
            let _ = writeln!(
                s,
                "{:>3}  {:<12} {:<16} {:<18} {:>12} {:>14}",
                i,
                st.name,
                st.block.kind(),
                format!("{c}x{h}x{w}"),
                st.block.param_count(),
                macs[i]
            );
        }
        let _ = writeln!(s, "total params {}  total MAC/sample {}", self.param_count(), macs.iter().sum::<u64>());
        let _ = writeln!(s, "edges:");
        for e in &self.edges {
            let src = match e.src {
                Node::Input => "input".to_string(),
                Node::Stage(p) => self.stages[p].name.clone(),
            };
            let [c, h, w] = self.port_shape(e.src, e.port, &outs, input);
            let _ = writeln!(s, "  {src} -> {} [{:?}, {c}x{h}x{w}]", self.stages[e.dst].name, e.port);
        }
        let p = self.default_plan;
        let _ = writeln!(
            s,
            "default split: front-end through {}, back-end from {}",
            self.stages[p.fe_last].name, self.stages[p.be_first].name
        );
        Ok(s)
    }
}
