//! Instantiated partitions and their forward/backward execution.

use std::collections::HashMap;

use super::split::{split_graph, CutKey, CutTensor, GraphPart, Partition, SplitPlan};
use super::{ModelError, ModelGraph, Node, Payload, Port, Result};
use crate::nn::init::{NamedTensor, ParamFactory, StateKind};
use crate::nn::{Block, StageInputs, StageOutputs};
use crate::scalar::Scalar;
use crate::tensor::ops::{NormMode, PoolIndices};
use crate::tensor::{backward_seeded, Tensor, TensorData};

/// A detached cut value handed between partitions.
#[derive(Debug, Clone)]
pub enum CutValue<T: Scalar> {
    Tensor(TensorData<T>),
    /// Pooling switches; only ever passed within one client.
    Indices(PoolIndices),
}

impl<T: Scalar> CutValue<T> {
    pub fn tensor(&self) -> Option<&TensorData<T>> {
        match self {
            CutValue::Tensor(t) => Some(t),
            CutValue::Indices(_) => None,
        }
    }
}

#[derive(Clone)]
enum Live<T: Scalar> {
    Tensor(Tensor<T>),
    Indices(PoolIndices),
}

/// One partition with its own weights.
pub struct SubModel<T: Scalar> {
    part: GraphPart,
    blocks: Vec<Block<T>>,
    state: Vec<NamedTensor<T>>,
}

impl<T: Scalar> SubModel<T> {
    pub fn build(part: GraphPart, seed: u64) -> Self {
        let mut f = ParamFactory::new(seed);
        let blocks = part.stages.iter().map(|s| f.scoped(&s.name, |f| Block::build(&s.block, f))).collect();
        Self { part, blocks, state: f.finish() }
    }

    pub fn part(&self) -> &GraphPart {
        &self.part
    }

    pub fn partition(&self) -> Partition {
        self.part.partition
    }

    pub fn cut_inputs(&self) -> &[CutTensor] {
        &self.part.cut_inputs
    }

    pub fn cut_outputs(&self) -> &[CutTensor] {
        &self.part.cut_outputs
    }

    pub fn named_state(&self) -> &[NamedTensor<T>] {
        &self.state
    }

    /// Trainable tensors in creation order.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.state.iter().filter(|e| e.kind == StateKind::Parameter).map(|e| e.tensor.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Parameters and buffers, by name.
    pub fn state_dict(&self) -> Vec<(String, TensorData<T>)> {
        self.state.iter().map(|e| (e.name.clone(), e.tensor.detach())).collect()
    }

    /// Overwrites every named tensor. The name set must match exactly.
    pub fn load_state(&self, entries: &[(String, TensorData<T>)]) -> Result<()> {
        if entries.len() != self.state.len() {
            return Err(ModelError::State(format!(
                "{} part holds {} tensors, got {}",
                self.part.partition.name(),
                self.state.len(),
                entries.len()
            )));
        }
        let by_name: HashMap<&str, &TensorData<T>> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &self.state {
            let t = by_name.get(e.name.as_str()).ok_or_else(|| ModelError::State(format!("missing tensor {}", e.name)))?;
            if t.shape != e.tensor.shape() {
                return Err(ModelError::State(format!("{}: shape {:?} != {:?}", e.name, t.shape, e.tensor.shape())));
            }
        }
        for e in &self.state {
            e.tensor.data_mut().copy_from_slice(&by_name[e.name.as_str()].data);
        }
        Ok(())
    }

    pub fn block(&self, stage: &str) -> Option<&Block<T>> {
        self.part.stages.iter().position(|s| s.name == stage).map(|i| &self.blocks[i])
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Block<T>)> {
        self.part.stages.iter().map(|s| s.name.as_str()).zip(&self.blocks)
    }

    /// Toggles the global-context reweighting of every context-guided block.
    pub fn set_global_context(&self, on: bool) {
        for b in &self.blocks {
            b.cg_blocks().iter().for_each(|cg| cg.set_global_context(on));
        }
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    fn check_cut(&self, sig: &CutTensor, value: &CutValue<T>, batch: &mut Option<usize>) -> Result<()> {
        let shape: Vec<usize> = match (sig.payload, value) {
            (Payload::Tensor, CutValue::Tensor(t)) => t.shape.clone(),
            (Payload::PoolIndices, CutValue::Indices(i)) => i.shape.to_vec(),
            _ => return Err(ModelError::Signature(format!("{:?}: payload kind differs from {:?}", sig.key, sig.payload))),
        };
        if shape.len() != 4 || shape[1..] != sig.shape {
            return Err(ModelError::Signature(format!("{:?}: expected (N, {:?}), got {shape:?}", sig.key, sig.shape)));
        }
        match *batch {
            Some(n) if n != shape[0] => Err(ModelError::Signature(format!("{:?}: batch {} != {n}", sig.key, shape[0]))),
            _ => {
                *batch = Some(shape[0]);
                Ok(())
            }
        }
    }

    /// Runs the partition. `image` must be given exactly when the partition
    /// reads images; `cuts` follow [`Self::cut_inputs`] order.
    pub fn forward(&self, image: Option<&TensorData<T>>, cuts: &[CutValue<T>], mode: NormMode) -> Result<ForwardPass<T>> {
        let part = &self.part;
        if image.is_some() != part.reads_image {
            return Err(ModelError::Signature(format!(
                "the {} part {} an image",
                part.partition.name(),
                if part.reads_image { "needs" } else { "must not receive" }
            )));
        }
        if cuts.len() != part.cut_inputs.len() {
            return Err(ModelError::Signature(format!("expected {} cut inputs, got {}", part.cut_inputs.len(), cuts.len())));
        }
        let mut batch = image.map(|i| i.shape.first().copied().unwrap_or(0));
        let mut inputs: HashMap<CutKey, Live<T>> = HashMap::new();
        let mut leaves = Vec::with_capacity(cuts.len());
        for (sig, value) in part.cut_inputs.iter().zip(cuts) {
            self.check_cut(sig, value, &mut batch)?;
            let live = match value {
                CutValue::Tensor(t) => {
                    let leaf = Tensor::leaf(t.clone(), true);
                    leaves.push(Some(leaf.clone()));
                    Live::Tensor(leaf)
                }
                CutValue::Indices(i) => {
                    leaves.push(None);
                    Live::Indices(i.clone())
                }
            };
            inputs.insert(sig.key, live);
        }
        let image = image.map(|i| Tensor::leaf(i.clone(), false));

        let start = part.range.start;
        let mut outs: Vec<StageOutputs<T>> = Vec::with_capacity(self.blocks.len());
        let fetch = |outs: &[StageOutputs<T>], src: Node, port: Port| -> Result<Live<T>> {
            match src {
                Node::Input => image.clone().map(Live::Tensor).ok_or_else(|| ModelError::Signature("image missing".into())),
                Node::Stage(p) if part.range.contains(&p) => {
                    let o = &outs[p - start];
                    let v = match port {
                        Port::Main => Some(Live::Tensor(o.main.clone())),
                        Port::Skip => o.skip.clone().map(Live::Tensor),
                        Port::Indices => o.indices.clone().map(Live::Indices),
                    };
                    v.ok_or_else(|| ModelError::Build(format!("stage {p} produced no {port:?} output")))
                }
                Node::Stage(p) => inputs
                    .get(&CutKey { src, port })
                    .cloned()
                    .ok_or_else(|| ModelError::Signature(format!("no cut input for stage {p} {port:?}"))),
            }
        };
        let as_tensor = |v: Live<T>| match v {
            Live::Tensor(t) => Ok(t),
            Live::Indices(_) => Err(ModelError::Signature("indices where a tensor was expected".into())),
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let s = start + i;
            let wiring = part.edges.iter().filter(|e| e.dst == s);
            let mut stage_in = StageInputs { main: Tensor::zeros(&[0]), skip: None, indices: None };
            for e in wiring {
                let v = fetch(&outs, e.src, e.port)?;
                match e.port {
                    Port::Main => stage_in.main = as_tensor(v)?,
                    Port::Skip => stage_in.skip = Some(as_tensor(v)?),
                    Port::Indices => match v {
                        Live::Indices(idx) => stage_in.indices = Some(idx),
                        Live::Tensor(_) => return Err(ModelError::Signature("tensor where indices were expected".into())),
                    },
                }
            }
            let out = block.forward(stage_in, mode).map_err(ModelError::from)?;
            outs.push(out);
        }
        let outputs = part.cut_outputs.iter().map(|sig| fetch(&outs, sig.key.src, sig.key.port)).collect::<Result<Vec<_>>>()?;
        let logits = part.emits_logits.then(|| outs.last().expect("non-empty part").main.clone());
        Ok(ForwardPass { leaves, outputs, logits, batch: batch.unwrap_or(0) })
    }
}

/// The live tape of one partition's forward pass.
pub struct ForwardPass<T: Scalar> {
    leaves: Vec<Option<Tensor<T>>>,
    outputs: Vec<Live<T>>,
    logits: Option<Tensor<T>>,
    batch: usize,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Graph-connected logits of a back-end or whole model.
    pub fn logits(&self) -> Option<&Tensor<T>> {
        self.logits.as_ref()
    }

    /// Detached cut outputs, in cut-signature order.
    pub fn output_values(&self) -> Vec<CutValue<T>> {
        self.outputs
            .iter()
            .map(|o| match o {
                Live::Tensor(t) => CutValue::Tensor(t.detach()),
                Live::Indices(i) => CutValue::Indices(i.clone()),
            })
            .collect()
    }

    /// Back-propagates gradients of the cut outputs (signature order; `None`
    /// for indices or unused outputs).
    pub fn backward(&self, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.outputs.len() {
            return Err(ModelError::Signature(format!("expected {} output grads, got {}", self.outputs.len(), grads.len())));
        }
        let mut seeds = Vec::new();
        for (o, g) in self.outputs.iter().zip(grads) {
            match (o, g) {
                (Live::Tensor(t), Some(g)) => {
                    if g.len() != t.numel() {
                        return Err(ModelError::Signature(format!("gradient of {} values for {:?}", g.len(), t.shape())));
                    }
                    seeds.push((t.clone(), g.clone()));
                }
                (Live::Indices(_), Some(_)) => return Err(ModelError::Signature("gradient for pooling indices".into())),
                (_, None) => {}
            }
        }
        if seeds.is_empty() {
            return Ok(());
        }
        backward_seeded(&seeds)?;
        Ok(())
    }

    /// Gradients that reached each cut input (zeros if none did).
    pub fn input_grads(&self) -> Vec<Option<Vec<T>>> {
        self.leaves
            .iter()
            .map(|l| l.as_ref().map(|t| t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect()
    }
}

/// Picks, for each wanted signature, the value produced under the same
/// signature by one of `sources`.
pub fn route<V: Clone>(wanted: &[CutTensor], sources: &[(&[CutTensor], &[V])]) -> Result<Vec<V>> {
    wanted
        .iter()
        .map(|w| {
            sources
                .iter()
                .find_map(|(sigs, vals)| sigs.iter().position(|s| s == w).map(|i| vals[i].clone()))
                .ok_or_else(|| ModelError::Signature(format!("no producer for cut {:?}", w.key)))
        })
        .collect()
}

/// Whole-network instance.
pub fn instantiate<T: Scalar>(graph: &ModelGraph, seed: u64) -> SubModel<T> {
    SubModel::build(GraphPart::whole(graph), seed)
}

/// Reference forward pass of the unsplit network.
pub fn forward_monolithic<T: Scalar>(model: &SubModel<T>, x: &TensorData<T>, mode: NormMode) -> Result<Tensor<T>> {
    if model.partition() != Partition::Whole {
        return Err(ModelError::Signature(format!("{} part is not a whole network", model.partition().name())));
    }
    let pass = model.forward(Some(x), &[], mode)?;
    Ok(pass.logits.expect("whole networks emit logits"))
}

/// The three partitions of one client's view, run in-process.
pub struct SplitModel<T: Scalar> {
    pub fe: SubModel<T>,
    pub server: SubModel<T>,
    pub be: SubModel<T>,
}

pub fn split_model<T: Scalar>(graph: &ModelGraph, plan: SplitPlan, seed: u64) -> Result<SplitModel<T>> {
    let [fe, server, be] = split_graph(graph, plan)?;
    Ok(SplitModel { fe: SubModel::build(fe, seed), server: SubModel::build(server, seed), be: SubModel::build(be, seed) })
}

pub struct SplitPass<T: Scalar> {
    pub fe: ForwardPass<T>,
    pub server: ForwardPass<T>,
    pub be: ForwardPass<T>,
}

impl<T: Scalar> SplitPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.be.logits().expect("back-end emits logits")
    }
}

impl<T: Scalar> SplitModel<T> {
    pub fn parts(&self) -> [&SubModel<T>; 3] {
        [&self.fe, &self.server, &self.be]
    }

    pub fn forward(&self, image: &TensorData<T>, mode: NormMode) -> Result<SplitPass<T>> {
        let fe = self.fe.forward(Some(image), &[], mode)?;
        let fe_out = fe.output_values();
        let server_in = route(self.server.cut_inputs(), &[(self.fe.cut_outputs(), &fe_out)])?;
        let server = self.server.forward(None, &server_in, mode)?;
        let server_out = server.output_values();
        let be_in = route(self.be.cut_inputs(), &[(self.fe.cut_outputs(), &fe_out), (self.server.cut_outputs(), &server_out)])?;
        let be = self.be.forward(None, &be_in, mode)?;
        Ok(SplitPass { fe, server, be })
    }

    /// Relays gradients back through server and front-end once the loss has
    /// been back-propagated into the back-end.
    pub fn backward_relay(&self, pass: &SplitPass<T>) -> Result<()> {
        let be_grads = pass.be.input_grads();
        let server_out_grads = route(self.server.cut_outputs(), &[(self.be.cut_inputs(), &be_grads)])?;
        pass.server.backward(&server_out_grads)?;
        let server_grads = pass.server.input_grads();
        let fe_out_grads = route(self.fe.cut_outputs(), &[(self.server.cut_inputs(), &server_grads), (self.be.cut_inputs(), &be_grads)])?;
        pass.fe.backward(&fe_out_grads)
    }
}
