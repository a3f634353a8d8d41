use crate::scalar::Scalar;
use crate::tensor::{dims4, shape_err, Result, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let xc = x.clone();
    Tensor::from_op("relu", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        let xv = xc.data();
        vec![Some(g.iter().zip(xv.iter()).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect())]
    })
}

/// Parametric ReLU with one learnable slope per channel: `a` has shape `(C)`.
pub fn prelu<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("prelu", x)?;
    if a.shape() != [c] {
        return Err(shape_err("prelu", format!("slope shape {:?} != [{c}]", a.shape())));
    }
    let plane = h * w;
    let mut out = x.to_vec();
    {
        let av = a.data();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let slope = av[i % c];
            chunk.iter_mut().for_each(|v| {
                if *v <= T::zero() {
                    *v *= slope
                }
            });
        }
    }
    let (xc, ac) = (x.clone(), a.clone());
    Ok(Tensor::from_op("prelu", vec![n, c, h, w], out, vec![x.clone(), a.clone()], move |g| {
        let xv = xc.data();
        let av = ac.data();
        let mut dx = xc.requires_grad().then(|| vec![T::zero(); xv.len()]);
        let mut da = ac.requires_grad().then(|| vec![T::zero(); c]);
        for i in 0..xv.len() {
            let ch = (i / plane) % c;
            let pos = xv[i] > T::zero();
            if let Some(dx) = dx.as_mut() {
                dx[i] = if pos { g[i] } else { g[i] * av[ch] };
            }
            if let Some(da) = da.as_mut() {
                if !pos {
                    da[ch] += g[i] * xv[i];
                }
            }
        }
        vec![dx, da]
    }))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = x.data().iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
    let saved = out.clone();
    Tensor::from_op("sigmoid", x.shape().to_vec(), out, vec![x.clone()], move |g| {
        vec![Some(g.iter().zip(&saved).map(|(&g, &s)| g * s * (T::one() - s)).collect())]
    })
}

/// Softmax across the channel axis at every pixel of an NCHW tensor.
pub fn softmax_channel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("softmax_channel", x)?;
    let plane = h * w;
    let mut out = vec![T::zero(); x.numel()];
    {
        let xv = x.data();
        for ni in 0..n {
            let base = ni * c * plane;
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for ci in 0..c {
                    mx = mx.max(xv[base + ci * plane + p]);
                }
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (xv[base + ci * plane + p] - mx).exp();
                    out[base + ci * plane + p] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[base + ci * plane + p] /= z;
                }
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op("softmax_channel", vec![n, c, h, w], out, vec![x.clone()], move |g| {
        let mut dx = vec![T::zero(); saved.len()];
        for ni in 0..n {
            let base = ni * c * plane;
            for p in 0..plane {
                let mut dot = T::zero();
                for ci in 0..c {
                    let i = base + ci * plane + p;
                    dot += g[i] * saved[i];
                }
                for ci in 0..c {
                    let i = base + ci * plane + p;
                    dx[i] = saved[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(dx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).to_vec(), vec![0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&Tensor::<f32>::scalar(0.0)).item(), 0.5);
    }

    #[test]
    fn prelu_scales_negatives_per_channel() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 1, 2], vec![-2.0, 3.0, -4.0, 1.0]).unwrap();
        let a = Tensor::<f32>::from_vec(&[2], vec![0.5, 0.25]).unwrap();
        assert_eq!(prelu(&x, &a).unwrap().to_vec(), vec![-1.0, 3.0, -1.0, 1.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let vals: Vec<f32> = (0..2 * 5 * 3 * 3).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let x = Tensor::from_vec(&[2, 5, 3, 3], vals).unwrap();
        let y = softmax_channel(&x).unwrap().to_vec();
        for n in 0..2 {
            for p in 0..9 {
                let s: f32 = (0..5).map(|c| y[n * 45 + c * 9 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
