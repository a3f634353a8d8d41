//! Parameterized layers over the tensor primitives.

use super::init::ParamFactory;
use crate::scalar::Scalar;
use crate::tensor::ops::{self, Conv2dArgs, NormMode, RunningStats};
use crate::tensor::{Result, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub args: Conv2dArgs,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, in_c: usize, out_c: usize, k: usize, args: Conv2dArgs) -> Self {
        f.scoped(name, |f| Self {
            weight: f.kaiming("weight", &[out_c, in_c, k, k], in_c * k * k),
            bias: f.constant("bias", &[out_c], 0.0),
            args,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, &self.weight, Some(&self.bias), self.args)
    }
}

pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        f.scoped(name, |f| Self {
            weight: f.kaiming("weight", &[in_c, out_c, k, k], out_c * k * k),
            bias: f.constant("bias", &[out_c], 0.0),
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv_transpose2d(x, &self.weight, Some(&self.bias), self.stride, 0)
    }
}

pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: RunningStats<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, c: usize) -> Self {
        f.scoped(name, |f| Self {
            gamma: f.constant("gamma", &[c], 1.0),
            beta: f.constant("beta", &[c], 0.0),
            running: RunningStats { mean: f.buffer("running_mean", &[c], 0.0), var: f.buffer("running_var", &[c], 1.0) },
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        ops::batch_norm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running,
            mode,
            T::from_f64_lossy(BN_MOMENTUM),
            T::from_f64_lossy(BN_EPS),
        )
    }
}

pub struct PRelu<T: Scalar> {
    pub slope: Tensor<T>,
}

impl<T: Scalar> PRelu<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, c: usize) -> Self {
        f.scoped(name, |f| Self { slope: f.constant("slope", &[c], 0.25) })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::prelu(x, &self.slope)
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, in_f: usize, out_f: usize) -> Self {
        f.scoped(name, |f| Self {
            weight: f.kaiming("weight", &[in_f, out_f], in_f),
            bias: f.constant("bias", &[out_f], 0.0),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}

/// conv -> BN -> PReLU
pub struct ConvBnPrelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    pub act: PRelu<T>,
}

impl<T: Scalar> ConvBnPrelu<T> {
    pub fn new(f: &mut ParamFactory<T>, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        f.scoped(name, |f| Self {
            conv: Conv2d::new(f, "conv", in_c, out_c, 3, Conv2dArgs::new(stride, 1, 1)),
            bn: BatchNorm2d::new(f, "bn", out_c),
            act: PRelu::new(f, "act", out_c),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        self.act.forward(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}
