//! Builders for the shipped networks.

use serde::{Deserialize, Serialize};

use super::{Edge, GraphMeta, ModelError, ModelGraph, Network, Node, Port, Result, SplitPlan, StageSpec};
use crate::nn::{self, BlockSpec, Upsampling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of encoder (and decoder) stages for the U-shaped networks.
    pub depth: usize,
    pub input_hw: (usize, usize),
    pub cg: CgConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { in_channels: 3, num_classes: 5, base_width: 32, depth: 4, input_hw: (64, 64), cg: CgConfig::default() }
    }
}

/// CGNet stage layout: `m` blocks at 1/4 resolution, `n` blocks at 1/8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub stem_convs: usize,
    pub m: usize,
    pub n: usize,
    pub dilation_m: usize,
    pub dilation_n: usize,
    pub reduction: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { stem_convs: 3, m: 3, n: 3, dilation_m: 2, dilation_n: 4, reduction: 16 }
    }
}

pub fn build(network: Network, cfg: &NetConfig) -> Result<ModelGraph> {
    match network {
        Network::Unet => build_unet(cfg),
        Network::Segnet => build_segnet(cfg),
        Network::AttentionUnet => build_attention_unet(cfg),
        Network::Cgnet => build_cgnet(cfg),
    }
}

fn meta(network: Network, cfg: &NetConfig) -> GraphMeta {
    GraphMeta {
        network,
        in_channels: cfg.in_channels,
        num_classes: cfg.num_classes,
        base_width: cfg.base_width,
        input_hw: cfg.input_hw,
    }
}

fn check_divisible(cfg: &NetConfig, factor: usize) -> Result<()> {
    let (h, w) = cfg.input_hw;
    if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
        return Err(ModelError::Build(format!("input {h}x{w} is not divisible by {factor}")));
    }
    Ok(())
}

fn check_u_config(cfg: &NetConfig) -> Result<()> {
    if cfg.depth < 2 {
        return Err(ModelError::Build(format!("depth must be >= 2, got {}", cfg.depth)));
    }
    if cfg.base_width == 0 || cfg.in_channels == 0 || cfg.num_classes == 0 {
        return Err(ModelError::Build("widths and class count must be >= 1".into()));
    }
    check_divisible(cfg, 1 << cfg.depth)
}

fn stage(name: impl Into<String>, block: BlockSpec) -> StageSpec {
    StageSpec { name: name.into(), block }
}

fn chain(n: usize) -> Vec<Edge> {
    let mut edges = vec![Edge { src: Node::Input, port: Port::Main, dst: 0 }];
    edges.extend((1..n).map(|s| Edge { src: Node::Stage(s - 1), port: Port::Main, dst: s }));
    edges
}

fn unet_family(network: Network, cfg: &NetConfig, gated: bool) -> Result<ModelGraph> {
    check_u_config(cfg)?;
    let (b, d) = (cfg.base_width, cfg.depth);
    let width = |i: usize| b << i;
    let mut stages = Vec::new();
    for i in 0..d {
        let in_c = if i == 0 { cfg.in_channels } else { width(i - 1) };
        stages.push(stage(format!("enc{i}"), nn::encoder_stage(in_c, width(i), false)));
    }
    stages.push(stage("bottleneck", nn::double_conv(width(d - 1), width(d))));
    for i in (0..d).rev() {
        let gate = gated.then(|| (width(i) / 2).max(1));
        stages.push(stage(format!("dec{i}"), nn::decoder_stage(width(i + 1), width(i), width(i), Upsampling::Transpose, gate)));
    }
    stages.push(stage("head", nn::classifier_head(b, cfg.num_classes)));
    let mut edges = chain(stages.len());
    // enc i sits at stage i, dec i at stage 2d - i.
    edges.extend((0..d).map(|i| Edge { src: Node::Stage(i), port: Port::Skip, dst: 2 * d - i }));
    ModelGraph::new(meta(network, cfg), stages, edges, SplitPlan { fe_last: 0, be_first: 2 * d })
}

/// Encoder widths `b * 2^i`, a bottleneck, a mirrored decoder with
/// concatenated skips and a 1x1 classifier.
pub fn build_unet(cfg: &NetConfig) -> Result<ModelGraph> {
    unet_family(Network::Unet, cfg, false)
}

/// UNet with an additive attention gate on every skip.
pub fn build_attention_unet(cfg: &NetConfig) -> Result<ModelGraph> {
    unet_family(Network::AttentionUnet, cfg, true)
}

/// Encoder-decoder without skips: decoders unpool with the switches
/// recorded by the mirrored encoder.
pub fn build_segnet(cfg: &NetConfig) -> Result<ModelGraph> {
    check_u_config(cfg)?;
    let (b, d) = (cfg.base_width, cfg.depth);
    let width = |i: usize| b << i;
    let mut stages = Vec::new();
    for i in 0..d {
        let in_c = if i == 0 { cfg.in_channels } else { width(i - 1) };
        stages.push(stage(format!("enc{i}"), nn::encoder_stage(in_c, width(i), true)));
    }
    for i in (0..d).rev() {
        let out_c = if i == 0 { b } else { width(i - 1) };
        stages.push(stage(format!("dec{i}"), nn::decoder_stage(width(i), 0, out_c, Upsampling::Unpool, None)));
    }
    stages.push(stage("head", nn::classifier_head(b, cfg.num_classes)));
    let mut edges = chain(stages.len());
    // enc i at stage i pairs with dec i at stage 2d - 1 - i.
    edges.extend((0..d).map(|i| Edge { src: Node::Stage(i), port: Port::Indices, dst: 2 * d - 1 - i }));
    ModelGraph::new(meta(Network::Segnet, cfg), stages, edges, SplitPlan { fe_last: 0, be_first: 2 * d - 1 })
}

/// Stem at 1/2 resolution, two context-guided stages at 1/4 and 1/8, and a
/// classifier upsampled bilinearly by 8.
pub fn build_cgnet(cfg: &NetConfig) -> Result<ModelGraph> {
    let cg = &cfg.cg;
    check_divisible(cfg, 8)?;
    if cg.stem_convs == 0 || cg.m == 0 || cg.n == 0 {
        return Err(ModelError::Build("CGNet stem and stages need at least one layer each".into()));
    }
    let b = cfg.base_width;
    let stages = vec![
        stage("stem", BlockSpec::Stem { in_c: cfg.in_channels, out_c: b, convs: cg.stem_convs }),
        stage("stage1", BlockSpec::CgStage { in_c: b, out_c: 2 * b, blocks: cg.m, dilation: cg.dilation_m, reduction: cg.reduction }),
        stage("stage2", BlockSpec::CgStage { in_c: 2 * b, out_c: 4 * b, blocks: cg.n, dilation: cg.dilation_n, reduction: cg.reduction }),
        stage("head", BlockSpec::ClassifierHead { in_c: 4 * b, classes: cfg.num_classes, upsample: 8 }),
    ];
    let edges = chain(stages.len());
    ModelGraph::new(meta(Network::Cgnet, cfg), stages, edges, SplitPlan { fe_last: 0, be_first: 3 })
}
