use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{arg_err, dims4, shape_err, Result, Tensor};

/// Argmax switches recorded by [`max_pool2d`].
///
/// Each entry is the flat `h * W + w` position of the window maximum within
/// its input plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    /// Shape of the pooled output, `(N,C,Ho,Wo)`.
    pub shape: [usize; 4],
    /// Spatial extent of the pooled input, `(H,W)`.
    pub input_hw: (usize, usize),
    pub indices: Rc<Vec<u32>>,
}

/// Max pooling over `k x k` windows with stride `s`.
///
/// Ties resolve to the lowest flat offset in the window. When `k == s` the
/// input extents must be divisible by `s`.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> Result<(Tensor<T>, PoolIndices)> {
    const OP: &str = "max_pool2d";
    let [n, c, h, w] = dims4(OP, x)?;
    if k == 0 || s == 0 {
        return Err(arg_err(OP, "kernel and stride must be >= 1"));
    }
    if h < k || w < k {
        return Err(shape_err(OP, format!("window {k} larger than input {h}x{w}")));
    }
    if k == s && (h % s != 0 || w % s != 0) {
        return Err(shape_err(OP, format!("input {h}x{w} not divisible by stride {s}")));
    }
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    {
        let xv = x.data();
        for p in 0..planes {
            let plane = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (oy * s) * w + ox * s;
                    for dy in 0..k {
                        for dx in 0..k {
                            let pos = (oy * s + dy) * w + ox * s + dx;
                            if plane[pos] > plane[best] {
                                best = pos;
                            }
                        }
                    }
                    out.push(plane[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    let indices = PoolIndices { shape: [n, c, ho, wo], input_hw: (h, w), indices: Rc::new(idx) };
    let saved = Rc::clone(&indices.indices);
    let y = Tensor::from_op(OP, vec![n, c, ho, wo], out, vec![x.clone()], move |g| {
        let mut dx = vec![T::zero(); planes * h * w];
        let per = ho * wo;
        for (i, (&gv, &pos)) in g.iter().zip(saved.iter()).enumerate() {
            dx[(i / per) * h * w + pos as usize] += gv;
        }
        vec![Some(dx)]
    });
    Ok((y, indices))
}

/// Scatters `y` to the positions recorded in `indices`, zeros elsewhere.
pub fn max_unpool2d<T: Scalar>(y: &Tensor<T>, indices: &PoolIndices, output_hw: (usize, usize)) -> Result<Tensor<T>> {
    const OP: &str = "max_unpool2d";
    let [n, c, ho, wo] = dims4(OP, y)?;
    if [n, c, ho, wo] != indices.shape {
        return Err(shape_err(OP, format!("values {:?} do not match indices {:?}", y.shape(), indices.shape)));
    }
    let (h, w) = output_hw;
    let plane = h * w;
    if let Some(&bad) = indices.indices.iter().find(|&&i| i as usize >= plane) {
        return Err(shape_err(OP, format!("index {bad} out of range for output {h}x{w}")));
    }
    let per = ho * wo;
    let mut out = vec![T::zero(); n * c * plane];
    for (i, (&v, &pos)) in y.data().iter().zip(indices.indices.iter()).enumerate() {
        out[(i / per) * plane + pos as usize] = v;
    }
    let saved = Rc::clone(&indices.indices);
    Ok(Tensor::from_op(OP, vec![n, c, h, w], out, vec![y.clone()], move |g| {
        let dy = saved.iter().enumerate().map(|(i, &pos)| g[(i / per) * plane + pos as usize]).collect();
        vec![Some(dy)]
    }))
}
