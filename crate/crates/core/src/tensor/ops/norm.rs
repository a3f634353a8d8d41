use crate::scalar::Scalar;
use crate::tensor::{dims4, shape_err, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel running mean/variance buffers. Stored as tensors so they can
/// be named, serialized and averaged like parameters.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::one()) }
    }
}

/// Batch normalization over `(N,H,W)` per channel.
///
/// Train mode normalizes with biased batch statistics and moves the running
/// buffers by `momentum` toward them (`r = (1-m) r + m batch`); eval mode
/// normalizes with the running buffers.
pub fn batch_norm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    mode: NormMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    const OP: &str = "batch_norm2d";
    let [n, c, h, w] = dims4(OP, x)?;
    for (name, t) in [("gamma", gamma), ("beta", beta), ("running mean", &running.mean), ("running var", &running.var)] {
        if t.shape() != [c] {
            return Err(shape_err(OP, format!("{name} shape {:?} != [{c}]", t.shape())));
        }
    }
    let plane = h * w;
    let m = n * plane;
    let m_t = T::from_usize(m).unwrap();

    let (mean, invstd) = match mode {
        NormMode::Train => {
            let xv = x.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ci) * plane;
                    s += xv[off..off + plane].iter().fold(T::zero(), |a, &b| a + b);
                }
                let mu = s / m_t;
                let mut v = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ci) * plane;
                    v += xv[off..off + plane].iter().fold(T::zero(), |a, &b| a + (b - mu) * (b - mu));
                }
                mean[ci] = mu;
                var[ci] = v / m_t;
            }
            {
                let one_minus = T::one() - momentum;
                let mut rm = running.mean.data_mut();
                let mut rv = running.var.data_mut();
                for ci in 0..c {
                    rm[ci] = one_minus * rm[ci] + momentum * mean[ci];
                    rv[ci] = one_minus * rv[ci] + momentum * var[ci];
                }
            }
            let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
            (mean, invstd)
        }
        NormMode::Eval => {
            let mean = running.mean.to_vec();
            let invstd = running.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, invstd)
        }
    };

    let mut xhat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    {
        let xv = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in off..off + plane {
                    let xh = (xv[i] - mean[ci]) * invstd[ci];
                    xhat[i] = xh;
                    out[i] = gv[ci] * xh + bv[ci];
                }
            }
        }
    }

    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Ok(Tensor::from_op(OP, vec![n, c, h, w], out, vec![x.clone(), gamma.clone(), beta.clone()], move |g| {
        let gv = gc.data();
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                for i in off..off + plane {
                    sum_g[ci] += g[i];
                    sum_gx[ci] += g[i] * xhat[i];
                }
            }
        }
        let dx = xc.requires_grad().then(|| {
            let mut dx = vec![T::zero(); n * c * plane];
            for ni in 0..n {
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    let k = gv[ci] * invstd[ci];
                    match mode {
                        NormMode::Train => {
                            let (mg, mgx) = (sum_g[ci] / m_t, sum_gx[ci] / m_t);
                            for i in off..off + plane {
                                dx[i] = k * (g[i] - mg - xhat[i] * mgx);
                            }
                        }
                        NormMode::Eval => {
                            for i in off..off + plane {
                                dx[i] = k * g[i];
                            }
                        }
                    }
                }
            }
            dx
        });
        vec![dx, gc.requires_grad().then(|| sum_gx.clone()), bc.requires_grad().then(|| sum_g.clone())]
    }))
}
