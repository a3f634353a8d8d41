use crate::scalar::Scalar;
use crate::tensor::{arg_err, dims4, Result, Tensor};

/// Source taps for one output coordinate under the half-pixel
/// (`align_corners = false`) convention: `src = (dst + 0.5) / scale - 0.5`,
/// clamped at the borders.
fn taps(dst: usize, scale: usize, extent: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear upsampling of H and W by an integer factor.
pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("upsample_bilinear", x)?;
    if scale == 0 {
        return Err(arg_err("upsample_bilinear", "scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(Tensor::from_op("upsample_bilinear", x.shape().to_vec(), x.to_vec(), vec![x.clone()], |g| {
            vec![Some(g.to_vec())]
        }));
    }
    let (ho, wo) = (h * scale, w * scale);
    let ys: Vec<(usize, usize, T)> =
        (0..ho).map(|y| taps(y, scale, h)).map(|(a, b, f)| (a, b, T::from_f64_lossy(f))).collect();
    let xs: Vec<(usize, usize, T)> =
        (0..wo).map(|x| taps(x, scale, w)).map(|(a, b, f)| (a, b, T::from_f64_lossy(f))).collect();
    let planes = n * c;
    let mut out = vec![T::zero(); planes * ho * wo];
    {
        let xv = x.data();
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(Tensor::from_op("upsample_bilinear", vec![n, c, ho, wo], out, vec![x.clone()], move |g| {
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let gs = &g[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let gv = gs[oy * wo + ox];
                    let (top, bot) = (gv * (T::one() - fy), gv * fy);
                    dst[y0 * w + x0] += top * (T::one() - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (T::one() - fx);
                    dst[y1 * w + x1] += bot * fx;
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
    fn identity_and_constant() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_bilinear(&x, 1).unwrap().to_vec(), x.to_vec());
        let c = Tensor::<f64>::full(&[1, 2, 3, 3], 0.7);
        assert!(upsample_bilinear(&c, 3).unwrap().to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn half_pixel_grid_preserves_corners() {
        // Output (0,0) maps to src -0.25 -> clamped to 0 -> exactly x[0,0];
        // output (0,1) maps to src 0.25 -> 0.75*1 + 0.25*2 = 1.25.
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap().to_vec();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        for (a, e) in y.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{y:?}");
        }
    }
}
