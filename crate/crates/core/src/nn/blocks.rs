use std::cell::Cell;

use super::init::ParamFactory;
use super::layers::{BatchNorm2d, Conv2d, ConvBnPrelu, ConvTranspose2d, Linear, PRelu};
use super::{BlockSpec, Upsampling};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, Conv2dArgs, NormMode, PoolIndices};
use crate::tensor::{shape_err, Result, Tensor};

pub struct StageInputs<T: Scalar> {
    pub main: Tensor<T>,
    pub skip: Option<Tensor<T>>,
    pub indices: Option<PoolIndices>,
}

impl<T: Scalar> StageInputs<T> {
    pub fn main(x: Tensor<T>) -> Self {
        Self { main: x, skip: None, indices: None }
    }
}

pub struct StageOutputs<T: Scalar> {
    pub main: Tensor<T>,
    pub skip: Option<Tensor<T>>,
    pub indices: Option<PoolIndices>,
}

impl<T: Scalar> StageOutputs<T> {
    fn main(x: Tensor<T>) -> Self {
        Self { main: x, skip: None, indices: None }
    }
}

pub struct DoubleConv<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new(f: &mut ParamFactory<T>, in_c: usize, out_c: usize) -> Self {
        Self {
            conv1: Conv2d::new(f, "conv1", in_c, out_c, 3, Conv2dArgs::padded(1)),
            bn1: BatchNorm2d::new(f, "bn1", out_c),
            conv2: Conv2d::new(f, "conv2", out_c, out_c, 3, Conv2dArgs::padded(1)),
            bn2: BatchNorm2d::new(f, "bn2", out_c),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let y = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        Ok(ops::relu(&self.bn2.forward(&self.conv2.forward(&y)?, mode)?))
    }
}

/// `alpha = sigmoid(psi(relu(Wx x + Wg g)))`, output `alpha * x`.
pub struct AttentionGate<T: Scalar> {
    pub wx: Conv2d<T>,
    pub wg: Conv2d<T>,
    pub psi: Conv2d<T>,
}

impl<T: Scalar> AttentionGate<T> {
    pub fn new(f: &mut ParamFactory<T>, x_c: usize, g_c: usize, inter_c: usize) -> Self {
        let pw = Conv2dArgs::default();
        Self {
            wx: Conv2d::new(f, "wx", x_c, inter_c, 1, pw),
            wg: Conv2d::new(f, "wg", g_c, inter_c, 1, pw),
            psi: Conv2d::new(f, "psi", inter_c, 1, 1, pw),
        }
    }

    /// Single-channel coefficient map on `x`'s grid.
    pub fn coefficients(&self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (xh, gh) = (x.shape()[2], g.shape()[2]);
        if gh == 0 || xh % gh != 0 {
            return Err(shape_err("attention_gate", format!("gating grid {:?} does not divide skip {:?}", g.shape(), x.shape())));
        }
        let theta = self.wx.forward(x)?;
        // 1x1 conv commutes with bilinear resampling, so project first on the coarse grid.
        let phi = ops::upsample_bilinear(&self.wg.forward(g)?, xh / gh)?;
        let joint = ops::relu(&ops::add(&theta, &phi)?);
        Ok(ops::sigmoid(&self.psi.forward(&joint)?))
    }

    pub fn forward(&self, x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        ops::mul_broadcast(x, &self.coefficients(x, g)?)
    }
}

/// Local and dilated-surrounding 3x3 branches, joint BN + PReLU, global
/// context channel reweighting, residual when shapes allow.
pub struct CgBlock<T: Scalar> {
    pub local: Conv2d<T>,
    pub surround: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: PRelu<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub residual: bool,
    global_context: Cell<bool>,
}

impl<T: Scalar> CgBlock<T> {
    pub fn new(f: &mut ParamFactory<T>, in_c: usize, out_c: usize, dilation: usize, reduction: usize, stride: usize) -> Self {
        let half = out_c / 2;
        let hid = (out_c / reduction.max(1)).max(1);
        Self {
            local: Conv2d::new(f, "local", in_c, half, 3, Conv2dArgs::new(stride, 1, 1)),
            surround: Conv2d::new(f, "surround", in_c, half, 3, Conv2dArgs::new(stride, dilation, dilation)),
            bn: BatchNorm2d::new(f, "bn", out_c),
            act: PRelu::new(f, "act", out_c),
            fc1: Linear::new(f, "fc1", out_c, hid),
            fc2: Linear::new(f, "fc2", hid, out_c),
            residual: in_c == out_c && stride == 1,
            global_context: Cell::new(true),
        }
    }

    /// Disables (or re-enables) the global-context reweighting.
    pub fn set_global_context(&self, on: bool) {
        self.global_context.set(on);
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let joint = ops::concat_channels(&[self.local.forward(x)?, self.surround.forward(x)?])?;
        let mut y = self.act.forward(&self.bn.forward(&joint, mode)?)?;
        if self.global_context.get() {
            let (n, c) = (y.shape()[0], y.shape()[1]);
            let z = ops::global_avg_pool(&y)?;
            let z = ops::sigmoid(&self.fc2.forward(&ops::relu(&self.fc1.forward(&z)?))?);
            y = ops::mul_broadcast(&y, &ops::reshape(&z, &[n, c, 1, 1])?)?;
        }
        if self.residual {
            y = ops::add(x, &y)?;
        }
        Ok(y)
    }
}

pub enum Upsampler<T: Scalar> {
    Transpose(ConvTranspose2d<T>),
    Unpool,
}

/// Executable stage.
pub enum Block<T: Scalar> {
    DoubleConv(DoubleConv<T>),
    Encoder { conv: DoubleConv<T>, keep_indices: bool },
    Decoder { up: Upsampler<T>, gate: Option<AttentionGate<T>>, conv: DoubleConv<T> },
    AttentionGate(AttentionGate<T>),
    Cg(Vec<CgBlock<T>>),
    Stem(Vec<ConvBnPrelu<T>>),
    Head { conv: Conv2d<T>, upsample: usize },
}

impl<T: Scalar> Block<T> {
    /// Instantiates `spec`, registering its tensors in `f` under the current scope.
    pub fn build(spec: &BlockSpec, f: &mut ParamFactory<T>) -> Self {
        match *spec {
            BlockSpec::DoubleConv { in_c, out_c } => Block::DoubleConv(DoubleConv::new(f, in_c, out_c)),
            BlockSpec::Encoder { in_c, out_c, keep_indices } => {
                Block::Encoder { conv: DoubleConv::new(f, in_c, out_c), keep_indices }
            }
            BlockSpec::Decoder { in_c, skip_c, out_c, upsampling, gate } => {
                let up = match upsampling {
                    Upsampling::Transpose => Upsampler::Transpose(ConvTranspose2d::new(f, "up", in_c, out_c, 2, 2)),
                    Upsampling::Unpool => Upsampler::Unpool,
                };
                let gate = gate.map(|inter| f.scoped("gate", |f| AttentionGate::new(f, skip_c, in_c, inter)));
                let conv_in = match upsampling {
                    Upsampling::Transpose => out_c + skip_c,
                    Upsampling::Unpool => in_c,
                };
                Block::Decoder { up, gate, conv: DoubleConv::new(f, conv_in, out_c) }
            }
            BlockSpec::AttentionGate { x_c, g_c, inter_c } => Block::AttentionGate(AttentionGate::new(f, x_c, g_c, inter_c)),
            BlockSpec::CgBlock { in_c, out_c, dilation, reduction, stride } => {
                Block::Cg(vec![f.scoped("block0", |f| CgBlock::new(f, in_c, out_c, dilation, reduction, stride))])
            }
            BlockSpec::CgStage { in_c, out_c, blocks, dilation, reduction } => Block::Cg(
                (0..blocks)
                    .map(|i| {
                        let (ic, s) = if i == 0 { (in_c, 2) } else { (out_c, 1) };
                        f.scoped(&format!("block{i}"), |f| CgBlock::new(f, ic, out_c, dilation, reduction, s))
                    })
                    .collect(),
            ),
            BlockSpec::Stem { in_c, out_c, convs } => Block::Stem(
                (0..convs)
                    .map(|i| {
                        let (ic, s) = if i == 0 { (in_c, 2) } else { (out_c, 1) };
                        ConvBnPrelu::new(f, &format!("layer{i}"), ic, out_c, s)
                    })
                    .collect(),
            ),
            BlockSpec::ClassifierHead { in_c, classes, upsample } => {
                Block::Head { conv: Conv2d::new(f, "conv", in_c, classes, 1, Conv2dArgs::default()), upsample }
            }
        }
    }

    pub fn forward(&self, inputs: StageInputs<T>, mode: NormMode) -> Result<StageOutputs<T>> {
        let x = &inputs.main;
        match self {
            Block::DoubleConv(dc) => Ok(StageOutputs::main(dc.forward(x, mode)?)),
            Block::Encoder { conv, keep_indices } => {
                let feat = conv.forward(x, mode)?;
                let (pooled, idx) = ops::max_pool2d(&feat, 2, 2)?;
                Ok(StageOutputs { main: pooled, skip: Some(feat), indices: keep_indices.then_some(idx) })
            }
            Block::Decoder { up, gate, conv } => {
                let merged = match up {
                    Upsampler::Transpose(t) => {
                        let skip = inputs.skip.as_ref().ok_or_else(|| shape_err("decoder_stage", "missing skip input"))?;
                        let skip = match gate {
                            Some(g) => g.forward(skip, x)?,
                            None => skip.clone(),
                        };
                        ops::concat_channels(&[t.forward(x)?, skip])?
                    }
                    Upsampler::Unpool => {
                        let idx = inputs.indices.as_ref().ok_or_else(|| shape_err("decoder_stage", "missing pooling indices"))?;
                        ops::max_unpool2d(x, idx, idx.input_hw)?
                    }
                };
                Ok(StageOutputs::main(conv.forward(&merged, mode)?))
            }
            Block::AttentionGate(g) => {
                let gs = inputs.skip.as_ref().ok_or_else(|| shape_err("attention_gate", "missing gating signal"))?;
                Ok(StageOutputs::main(g.forward(x, gs)?))
            }
            Block::Cg(blocks) => {
                let mut y = x.clone();
                for b in blocks {
                    y = b.forward(&y, mode)?;
                }
                Ok(StageOutputs::main(y))
            }
            Block::Stem(layers) => {
                let mut y = x.clone();
                for l in layers {
                    y = l.forward(&y, mode)?;
                }
                Ok(StageOutputs::main(y))
            }
            Block::Head { conv, upsample } => {
                Ok(StageOutputs::main(ops::upsample_bilinear(&conv.forward(x)?, *upsample)?))
            }
        }
    }

    pub fn attention_gate(&self) -> Option<&AttentionGate<T>> {
        match self {
            Block::Decoder { gate, .. } => gate.as_ref(),
            Block::AttentionGate(g) => Some(g),
            _ => None,
        }
    }

    pub fn cg_blocks(&self) -> &[CgBlock<T>] {
        match self {
            Block::Cg(b) => b,
            _ => &[],
        }
    }
}
