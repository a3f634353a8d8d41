//! Differentiable primitives.

mod activation;
mod conv;
mod norm;
mod pool;
mod resample;

pub use activation::{prelu, relu, sigmoid, softmax_channel};
pub use conv::{conv2d, conv_output_extent, conv_transpose2d, conv_transpose_output_extent, Conv2dArgs};
pub use norm::{batch_norm2d, NormMode, RunningStats};
pub use pool::{max_pool2d, max_unpool2d, PoolIndices};
pub use resample::upsample_bilinear;

use super::{dims4, shape_err, Result, Tensor};
use crate::scalar::Scalar;

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op("add", a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        vec![ra.then(|| g.to_vec()), rb.then(|| g.to_vec())]
    }))
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = x.data().iter().map(|&v| v * factor).collect();
    Tensor::from_op("scale", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(g.iter().map(|&v| v * factor).collect())]
    })
}

/// Sum of all elements, as a scalar tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().fold(T::zero(), |a, &b| a + b);
    let n = x.numel();
    Tensor::from_op("sum", vec![], vec![s], vec![x.clone()], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = T::from_usize(x.numel()).unwrap();
    scale(&sum(x), T::one() / n)
}

/// Elementwise product `a * b` (same shape).
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op("mul", a.shape().to_vec(), out, vec![a.clone(), b.clone()], move |g| {
        let ga = ac.requires_grad().then(|| g.iter().zip(bc.data().iter()).map(|(&g, &y)| g * y).collect());
        let gb = bc.requires_grad().then(|| g.iter().zip(ac.data().iter()).map(|(&g, &x)| g * x).collect());
        vec![ga, gb]
    }))
}

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != x.numel() {
        return Err(shape_err("reshape", format!("{:?} -> {shape:?}", x.shape())));
    }
    Ok(Tensor::from_op("reshape", shape.to_vec(), x.to_vec(), vec![x.clone()], |g| vec![Some(g.to_vec())]))
}

/// `x * g` where `g` is 4-D and each of its extents is either 1 or equal to
/// `x`'s, e.g. a `(N,1,H,W)` spatial map or a `(N,C,1,1)` channel scale.
pub fn mul_broadcast<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let xd = dims4("mul_broadcast", x)?;
    let gd = dims4("mul_broadcast", gate)?;
    for i in 0..4 {
        if gd[i] != 1 && gd[i] != xd[i] {
            return Err(shape_err(
                "mul_broadcast",
                format!("gate {:?} does not broadcast to {:?}", gate.shape(), x.shape()),
            ));
        }
    }
    let index = move |n: usize, c: usize, h: usize, w: usize| -> usize {
        let pick = |i: usize, v: usize| if gd[i] == 1 { 0 } else { v };
        ((pick(0, n) * gd[1] + pick(1, c)) * gd[2] + pick(2, h)) * gd[3] + pick(3, w)
    };
    let [n, c, h, w] = xd;
    let mut out = Vec::with_capacity(x.numel());
    {
        let xv = x.data();
        let gv = gate.data();
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out.push(xv[i] * gv[index(ni, ci, hi, wi)]);
                        i += 1;
                    }
                }
            }
        }
    }
    let (xc, gc) = (x.clone(), gate.clone());
    Ok(Tensor::from_op("mul_broadcast", xd.to_vec(), out, vec![x.clone(), gate.clone()], move |g| {
        let xv = xc.data();
        let gv = gc.data();
        let mut dx = xc.requires_grad().then(|| vec![T::zero(); xv.len()]);
        let mut dg = gc.requires_grad().then(|| vec![T::zero(); gv.len()]);
        let mut i = 0;
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let j = index(ni, ci, hi, wi);
                        if let Some(dx) = dx.as_mut() {
                            dx[i] = g[i] * gv[j];
                        }
                        if let Some(dg) = dg.as_mut() {
                            dg[j] += g[i] * xv[i];
                        }
                        i += 1;
                    }
                }
            }
        }
        vec![dx, dg]
    }))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
    let [n, _, h, w] = dims4("concat_channels", first)?;
    let mut chans = Vec::with_capacity(xs.len());
    for x in xs {
        let [xn, xc, xh, xw] = dims4("concat_channels", x)?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(shape_err(
                "concat_channels",
                format!("N,H,W mismatch: {:?} vs {:?}", first.shape(), x.shape()),
            ));
        }
        chans.push(xc);
    }
    let c_total: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c_total * plane);
    for ni in 0..n {
        for (x, &c) in xs.iter().zip(&chans) {
            let d = x.data();
            out.extend_from_slice(&d[ni * c * plane..(ni + 1) * c * plane]);
        }
    }
    let parents: Vec<Tensor<T>> = xs.to_vec();
    let needs: Vec<bool> = xs.iter().map(|x| x.requires_grad()).collect();
    Ok(Tensor::from_op("concat_channels", vec![n, c_total, h, w], out, parents, move |g| {
        let mut grads: Vec<Option<Vec<T>>> =
            needs.iter().zip(&chans).map(|(&r, &c)| r.then(|| Vec::with_capacity(n * c * plane))).collect();
        let mut off = 0;
        for _ in 0..n {
            for (slot, &c) in grads.iter_mut().zip(&chans) {
                if let Some(v) = slot.as_mut() {
                    v.extend_from_slice(&g[off..off + c * plane]);
                }
                off += c * plane;
            }
        }
        grads
    }))
}

/// Mean over H and W: `(N,C,H,W) -> (N,C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("global_avg_pool", x)?;
    let plane = h * w;
    let inv = T::one() / T::from_usize(plane).unwrap();
    let out: Vec<T> = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv)
        .collect();
    Ok(Tensor::from_op("global_avg_pool", vec![n, c], out, vec![x.clone()], move |g| {
        let mut dx = Vec::with_capacity(n * c * plane);
        for &gv in g {
            dx.extend(std::iter::repeat(gv * inv).take(plane));
        }
        vec![Some(dx)]
    }))
}

/// Affine map `x (N,F) · w (F,G) + b (G)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, f) = match *x.shape() {
        [n, f] => (n, f),
        ref s => return Err(shape_err("linear", format!("input must be N x F, got {s:?}"))),
    };
    let g_out = match *w.shape() {
        [wf, g] if wf == f => g,
        ref s => return Err(shape_err("linear", format!("weight {s:?} incompatible with input features {f}"))),
    };
    if let Some(b) = b {
        if b.shape() != [g_out] {
            return Err(shape_err("linear", format!("bias {:?} != [{g_out}]", b.shape())));
        }
    }
    let mut out = vec![T::zero(); n * g_out];
    if let Some(b) = b {
        let bv = b.data();
        out.chunks_mut(g_out).for_each(|row| row.copy_from_slice(&bv));
    }
    T::gemm(n, f, g_out, T::one(), (&x.data(), f as isize, 1), (&w.data(), g_out as isize, 1), T::one(), (&mut out, g_out as isize, 1));
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (xc, wc, has_b) = (x.clone(), w.clone(), b.map(|b| b.requires_grad()));
    Ok(Tensor::from_op("linear", vec![n, g_out], out, parents, move |g| {
        let dx = xc.requires_grad().then(|| {
            let mut dx = vec![T::zero(); n * f];
            // dx = g · wᵀ
            T::gemm(n, g_out, f, T::one(), (g, g_out as isize, 1), (&wc.data(), 1, g_out as isize), T::zero(), (&mut dx, f as isize, 1));
            dx
        });
        let dw = wc.requires_grad().then(|| {
            let mut dw = vec![T::zero(); f * g_out];
            // dw = xᵀ · g
            T::gemm(f, n, g_out, T::one(), (&xc.data(), 1, f as isize), (g, g_out as isize, 1), T::zero(), (&mut dw, g_out as isize, 1));
            dw
        });
        let mut grads = vec![dx, dw];
        if let Some(rb) = has_b {
            grads.push(rb.then(|| {
                let mut db = vec![T::zero(); g_out];
                g.chunks(g_out).for_each(|row| db.iter_mut().zip(row).for_each(|(a, &b)| *a += b));
                db
            }));
        }
        grads
    }))
}
