//! Composite blocks the segmentation networks are assembled from.
//!
//! A [`BlockSpec`] is an immutable description: it knows its output shapes,
//! trainable parameter count and multiply-accumulate count in closed form.
//! [`Block`] is the instantiated, executable counterpart.

mod blocks;
pub mod init;
pub mod layers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{AttentionGate, Block, CgBlock, DoubleConv, StageInputs, StageOutputs, Upsampler};

/// Per-sample feature shape `(C, H, W)`.
pub type FeatureShape = [usize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlockError {
    #[error("block {block}: {detail}")]
    Shape { block: &'static str, detail: String },
    #[error("block {block}: invalid configuration: {detail}")]
    Config { block: &'static str, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Upsampling {
    /// 2x2 stride-2 transposed convolution followed by a skip concat.
    Transpose,
    /// Max unpooling with the paired encoder's switch indices; no skip.
    Unpool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockSpec {
    /// conv3x3 -> BN -> ReLU -> conv3x3 -> BN -> ReLU, size preserving.
    DoubleConv { in_c: usize, out_c: usize },
    /// DoubleConv then 2x2 max pool. Emits the pooled map, the pre-pool map
    /// (skip) and, if `keep_indices`, the pooling switches.
    Encoder { in_c: usize, out_c: usize, keep_indices: bool },
    /// Upsample x2, merge the skip (transpose mode), then DoubleConv.
    /// `gate` is the attention gate's intermediate width.
    Decoder { in_c: usize, skip_c: usize, out_c: usize, upsampling: Upsampling, gate: Option<usize> },
    /// Additive attention gate on a skip map `x` driven by a coarser `g`.
    AttentionGate { x_c: usize, g_c: usize, inter_c: usize },
    /// Context-guided block.
    CgBlock { in_c: usize, out_c: usize, dilation: usize, reduction: usize, stride: usize },
    /// A stride-2 CG block followed by `blocks - 1` residual CG blocks.
    CgStage { in_c: usize, out_c: usize, blocks: usize, dilation: usize, reduction: usize },
    /// `convs` conv-BN-PReLU layers, the first with stride 2.
    Stem { in_c: usize, out_c: usize, convs: usize },
    /// 1x1 conv to class logits, then bilinear upsampling by `upsample`.
    ClassifierHead { in_c: usize, classes: usize, upsample: usize },
}

/// Shapes a stage consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InputShapes {
    pub main: FeatureShape,
    pub skip: Option<FeatureShape>,
    /// Pooled extent `(C, Ho, Wo)` and pre-pool `(H, W)` of incoming switches.
    pub indices: Option<(FeatureShape, (usize, usize))>,
}

/// Shapes a stage produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputShapes {
    pub main: FeatureShape,
    pub skip: Option<FeatureShape>,
    pub indices: Option<(FeatureShape, (usize, usize))>,
}

pub fn double_conv(in_c: usize, out_c: usize) -> BlockSpec {
    BlockSpec::DoubleConv { in_c, out_c }
}

pub fn encoder_stage(in_c: usize, out_c: usize, keep_indices: bool) -> BlockSpec {
    BlockSpec::Encoder { in_c, out_c, keep_indices }
}

pub fn decoder_stage(in_c: usize, skip_c: usize, out_c: usize, upsampling: Upsampling, gate: Option<usize>) -> BlockSpec {
    BlockSpec::Decoder { in_c, skip_c, out_c, upsampling, gate }
}

pub fn attention_gate(x_c: usize, g_c: usize, inter_c: usize) -> BlockSpec {
    BlockSpec::AttentionGate { x_c, g_c, inter_c }
}

pub fn cg_block(in_c: usize, out_c: usize, dilation: usize) -> BlockSpec {
    BlockSpec::CgBlock { in_c, out_c, dilation, reduction: 16, stride: 1 }
}

pub fn classifier_head(in_c: usize, num_classes: usize) -> BlockSpec {
    BlockSpec::ClassifierHead { in_c, classes: num_classes, upsample: 1 }
}

fn conv_params(in_c: usize, out_c: usize, k: usize) -> u64 {
    (in_c * out_c * k * k + out_c) as u64
}

fn double_conv_params(in_c: usize, out_c: usize) -> u64 {
    conv_params(in_c, out_c, 3) + conv_params(out_c, out_c, 3) + 4 * out_c as u64
}

fn double_conv_macs(in_c: usize, out_c: usize, hw: usize) -> u64 {
    ((in_c * out_c + out_c * out_c) * 9 * hw) as u64
}

fn cg_hidden(out_c: usize, reduction: usize) -> usize {
    (out_c / reduction.max(1)).max(1)
}

fn cg_block_params(in_c: usize, out_c: usize, reduction: usize) -> u64 {
    let half = out_c / 2;
    let hid = cg_hidden(out_c, reduction);
    2 * conv_params(in_c, half, 3) + 3 * out_c as u64 + (out_c * hid + hid + hid * out_c + out_c) as u64
}

fn cg_block_macs(in_c: usize, out_c: usize, reduction: usize, out_hw: usize) -> u64 {
    let hid = cg_hidden(out_c, reduction);
    (2 * in_c * (out_c / 2) * 9 * out_hw + 2 * out_c * hid) as u64
}

impl BlockSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::DoubleConv { .. } => "double_conv",
            BlockSpec::Encoder { .. } => "encoder_stage",
            BlockSpec::Decoder { .. } => "decoder_stage",
            BlockSpec::AttentionGate { .. } => "attention_gate",
            BlockSpec::CgBlock { .. } => "cg_block",
            BlockSpec::CgStage { .. } => "cg_stage",
            BlockSpec::Stem { .. } => "stem",
            BlockSpec::ClassifierHead { .. } => "classifier_head",
        }
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        let kind = self.kind();
        let bad = |detail: String| Err(BlockError::Config { block: kind, detail });
        let widths: Vec<usize> = match *self {
            BlockSpec::DoubleConv { in_c, out_c } | BlockSpec::Encoder { in_c, out_c, .. } => vec![in_c, out_c],
            BlockSpec::Decoder { in_c, out_c, skip_c, upsampling, .. } => {
                if upsampling == Upsampling::Transpose && skip_c == 0 {
                    return bad("transpose decoders need a skip input".into());
                }
                vec![in_c, out_c]
            }
            BlockSpec::AttentionGate { x_c, g_c, inter_c } => vec![x_c, g_c, inter_c],
            BlockSpec::CgBlock { in_c, out_c, dilation, stride, .. } => {
                if out_c % 2 != 0 {
                    return bad(format!("out_c must be even, got {out_c}"));
                }
                vec![in_c, out_c, dilation, stride]
            }
            BlockSpec::CgStage { in_c, out_c, blocks, dilation, .. } => {
                if out_c % 2 != 0 {
                    return bad(format!("out_c must be even, got {out_c}"));
                }
                vec![in_c, out_c, blocks, dilation]
            }
            BlockSpec::Stem { in_c, out_c, convs } => vec![in_c, out_c, convs],
            BlockSpec::ClassifierHead { in_c, classes, upsample } => vec![in_c, classes, upsample],
        };
        if widths.contains(&0) {
            return bad(format!("all widths and counts must be >= 1: {self:?}"));
        }
        Ok(())
    }

    /// Output shapes for the given inputs; the single source of shape truth
    /// used to validate graphs before anything executes.
    pub fn infer(&self, input: &InputShapes) -> Result<OutputShapes, BlockError> {
        self.validate()?;
        let kind = self.kind();
        let err = |detail: String| Err(BlockError::Shape { block: kind, detail });
        let [c, h, w] = input.main;
        let main_only = |main| Ok(OutputShapes { main, skip: None, indices: None });
        match *self {
            BlockSpec::DoubleConv { in_c, out_c } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                main_only([out_c, h, w])
            }
            BlockSpec::Encoder { in_c, out_c, keep_indices } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                    return err(format!("input {h}x{w} not divisible by the pooling stride 2"));
                }
                let pooled = [out_c, h / 2, w / 2];
                Ok(OutputShapes {
                    main: pooled,
                    skip: Some([out_c, h, w]),
                    indices: keep_indices.then_some((pooled, (h, w))),
                })
            }
            BlockSpec::Decoder { in_c, skip_c, out_c, upsampling, .. } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                match upsampling {
                    Upsampling::Transpose => {
                        let Some(skip) = input.skip else { return err("missing skip input".into()) };
                        if skip != [skip_c, 2 * h, 2 * w] {
                            return err(format!("skip {skip:?} incompatible with upsampled [{skip_c}, {}, {}]", 2 * h, 2 * w));
                        }
                        main_only([out_c, 2 * h, 2 * w])
                    }
                    Upsampling::Unpool => {
                        let Some((pooled, (ph, pw))) = input.indices else { return err("missing pooling indices".into()) };
                        if pooled != input.main {
                            return err(format!("indices for {pooled:?} but input is {:?}", input.main));
                        }
                        main_only([out_c, ph, pw])
                    }
                }
            }
            BlockSpec::AttentionGate { x_c, g_c, .. } => {
                let Some(g) = input.skip else { return err("missing gating signal".into()) };
                if c != x_c || g[0] != g_c {
                    return err(format!("expects x {x_c} / g {g_c} channels, got {c} / {}", g[0]));
                }
                if g[1] == 0 || h % g[1] != 0 || w % g[2] != 0 || h / g[1] != w / g[2] {
                    return err(format!("gating grid {}x{} does not divide {h}x{w} evenly", g[1], g[2]));
                }
                main_only([x_c, h, w])
            }
            BlockSpec::CgBlock { in_c, out_c, stride, .. } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                if stride > 1 && (h % stride != 0 || w % stride != 0) {
                    return err(format!("input {h}x{w} not divisible by stride {stride}"));
                }
                main_only([out_c, h / stride, w / stride])
            }
            BlockSpec::CgStage { in_c, out_c, .. } | BlockSpec::Stem { in_c, out_c, .. } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                if h % 2 != 0 || w % 2 != 0 {
                    return err(format!("input {h}x{w} not divisible by stride 2"));
                }
                main_only([out_c, h / 2, w / 2])
            }
            BlockSpec::ClassifierHead { in_c, classes, upsample } => {
                if c != in_c {
                    return err(format!("expects {in_c} channels, got {c}"));
                }
                main_only([classes, h * upsample, w * upsample])
            }
        }
    }

    /// Trainable parameter count (batch-norm affine included, running
    /// statistics excluded).
    pub fn param_count(&self) -> u64 {
        match *self {
            BlockSpec::DoubleConv { in_c, out_c } | BlockSpec::Encoder { in_c, out_c, .. } => {
                double_conv_params(in_c, out_c)
            }
            BlockSpec::Decoder { in_c, skip_c, out_c, upsampling, gate } => match upsampling {
                Upsampling::Transpose => {
                    let gate = gate.map_or(0, |inter| BlockSpec::AttentionGate { x_c: skip_c, g_c: in_c, inter_c: inter }.param_count());
                    conv_params(in_c, out_c, 2) + gate + double_conv_params(out_c + skip_c, out_c)
                }
                Upsampling::Unpool => double_conv_params(in_c, out_c),
            },
            BlockSpec::AttentionGate { x_c, g_c, inter_c } => {
                conv_params(x_c, inter_c, 1) + conv_params(g_c, inter_c, 1) + conv_params(inter_c, 1, 1)
            }
            BlockSpec::CgBlock { in_c, out_c, reduction, .. } => cg_block_params(in_c, out_c, reduction),
            BlockSpec::CgStage { in_c, out_c, blocks, reduction, .. } => {
                cg_block_params(in_c, out_c, reduction) + (blocks as u64 - 1) * cg_block_params(out_c, out_c, reduction)
            }
            BlockSpec::Stem { in_c, out_c, convs } => {
                let layer = |i: usize| conv_params(i, out_c, 3) + 3 * out_c as u64;
                layer(in_c) + (convs as u64 - 1) * layer(out_c)
            }
            BlockSpec::ClassifierHead { in_c, classes, .. } => conv_params(in_c, classes, 1),
        }
    }

    /// Multiply-accumulates of one sample. Only convolutions and linear maps
    /// count; normalization, activations, pooling and resampling are free.
    pub fn macs(&self, input: &InputShapes) -> Result<u64, BlockError> {
        let out = self.infer(input)?;
        let [_, h, w] = input.main;
        let [_, oh, ow] = out.main;
        Ok(match *self {
            BlockSpec::DoubleConv { in_c, out_c } | BlockSpec::Encoder { in_c, out_c, .. } => {
                double_conv_macs(in_c, out_c, h * w)
            }
            BlockSpec::Decoder { in_c, skip_c, out_c, upsampling, gate } => match upsampling {
                Upsampling::Transpose => {
                    let up = (in_c * out_c * 4 * h * w) as u64;
                    let gate = match gate {
                        Some(inter) => BlockSpec::AttentionGate { x_c: skip_c, g_c: in_c, inter_c: inter }.macs(&InputShapes {
                            main: input.skip.expect("checked by infer"),
                            skip: Some(input.main),
                            indices: None,
                        })?,
                        None => 0,
                    };
                    up + gate + double_conv_macs(out_c + skip_c, out_c, oh * ow)
                }
                Upsampling::Unpool => double_conv_macs(in_c, out_c, oh * ow),
            },
            BlockSpec::AttentionGate { x_c, g_c, inter_c } => {
                let g = input.skip.expect("checked by infer");
                (x_c * inter_c * h * w + g_c * inter_c * g[1] * g[2] + inter_c * h * w) as u64
            }
            BlockSpec::CgBlock { in_c, out_c, reduction, .. } => cg_block_macs(in_c, out_c, reduction, oh * ow),
            BlockSpec::CgStage { in_c, out_c, blocks, reduction, .. } => {
                cg_block_macs(in_c, out_c, reduction, oh * ow)
                    + (blocks as u64 - 1) * cg_block_macs(out_c, out_c, reduction, oh * ow)
            }
            BlockSpec::Stem { in_c, out_c, convs } => {
                ((in_c * out_c * 9 + (convs - 1) * out_c * out_c * 9) * oh * ow) as u64
            }
            BlockSpec::ClassifierHead { in_c, classes, .. } => (in_c * classes * h * w) as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn main(shape: FeatureShape) -> InputShapes {
        InputShapes { main: shape, ..Default::default() }
    }

    #[test]
    fn double_conv_shape_and_params() {
        let b = double_conv(3, 32);
        assert_eq!(b.infer(&main([3, 64, 64])).unwrap().main, [32, 64, 64]);
        assert_eq!(b.param_count(), 3 * 32 * 9 + 32 + 32 * 32 * 9 + 32 + 2 * (2 * 32));
        assert_eq!(b.param_count(), 10_272);
    }

    #[test]
    fn encoder_halves_and_rejects_odd() {
        let e = encoder_stage(3, 8, true);
        let out = e.infer(&main([3, 64, 64])).unwrap();
        assert_eq!(out.main, [8, 32, 32]);
        assert_eq!(out.skip, Some([8, 64, 64]));
        assert_eq!(out.indices, Some(([8, 32, 32], (64, 64))));
        assert!(e.infer(&main([3, 63, 64])).is_err());
    }

    #[test]
    fn decoder_skip_contract() {
        let d = decoder_stage(64, 32, 32, Upsampling::Transpose, None);
        let ok = InputShapes { main: [64, 8, 8], skip: Some([32, 16, 16]), indices: None };
        assert_eq!(d.infer(&ok).unwrap().main, [32, 16, 16]);
        let bad = InputShapes { skip: Some([32, 15, 16]), ..ok };
        assert!(matches!(d.infer(&bad), Err(BlockError::Shape { .. })));
    }

    #[test]
    fn cg_block_requires_even_width() {
        assert!(matches!(cg_block(8, 7, 2).validate(), Err(BlockError::Config { .. })));
        assert_eq!(cg_block(8, 8, 2).infer(&main([8, 16, 16])).unwrap().main, [8, 16, 16]);
    }

    #[test]
    fn single_conv_mac_formula() {
        // 3->8 3x3 on 16x16 output: 8*3*9*256
        let stem = BlockSpec::Stem { in_c: 3, out_c: 8, convs: 1 };
        assert_eq!(stem.macs(&main([3, 32, 32])).unwrap(), 55_296);
    }

    #[test]
    fn head_emits_class_channels() {
        assert_eq!(classifier_head(32, 5).infer(&main([32, 8, 8])).unwrap().main, [5, 8, 8]);
        assert_eq!(classifier_head(32, 2).infer(&main([32, 8, 8])).unwrap().main, [2, 8, 8]);
    }
}
