//! 2-D convolution and its transpose, lowered to im2col + GEMM.

use crate::scalar::Scalar;
use crate::tensor::{arg_err, dims4, shape_err, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dArgs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dArgs {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

impl Conv2dArgs {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    pub fn padded(padding: usize) -> Self {
        Self { padding, ..Self::default() }
    }
}

/// `floor((extent + 2p - d(k-1) - 1) / s) + 1`, or `None` if the kernel does not fit.
pub fn conv_output_extent(extent: usize, k: usize, args: Conv2dArgs) -> Option<usize> {
    let span = args.dilation * (k - 1) + 1;
    let padded = extent + 2 * args.padding;
    (padded >= span).then(|| (padded - span) / args.stride + 1)
}

/// `(extent - 1)s - 2p + k`, or `None` if negative.
pub fn conv_transpose_output_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    ((extent - 1) * stride + k).checked_sub(2 * padding)
}

/// Patch geometry of one image plane stack.
#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    args: Conv2dArgs,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `ox` whose input column `ox*s + off - p` lies inside
    /// `0..w`, as a half-open range.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        let Conv2dArgs { stride, padding, .. } = self.args;
        // ox*s + off >= p  and  ox*s + off < w + p
        let lo = padding.saturating_sub(off).div_ceil(stride);
        let hi = if self.w + padding > off { (self.w + padding - off).div_ceil(stride) } else { 0 };
        (lo.min(self.wo), hi.min(self.wo).max(lo.min(self.wo)))
    }

    /// Unrolls `x (C,H,W)` into `cols (C*k*k, Ho*Wo)`.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let Conv2dArgs { stride, padding, dilation } = self.args;
        let n_cols = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    let (lo, hi) = self.valid_cols(kj * dilation);
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let first = lo * stride + kj * dilation - padding;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters-adds `cols` into `x`.
    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let Conv2dArgs { stride, padding, dilation } = self.args;
        let n_cols = self.cols();
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    let (lo, hi) = self.valid_cols(kj * dilation);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * stride + kj * dilation - padding;
                    for oy in 0..self.ho {
                        let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.wo + lo..oy * self.wo + hi];
                        if stride == 1 {
                            for (d, &s) in dst[first..first + line.len()].iter_mut().zip(line) {
                                *d += s;
                            }
                        } else {
                            for (d, &s) in dst[first..].iter_mut().step_by(stride).zip(line) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// 1x1, stride 1, no padding: the input already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.args.stride == 1 && self.args.padding == 0
    }
}

fn check_args(op: &'static str, args: Conv2dArgs) -> Result<()> {
    if args.stride == 0 || args.dilation == 0 {
        return Err(arg_err(op, format!("stride and dilation must be >= 1, got {args:?}")));
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => {
            Err(shape_err(op, format!("bias shape {:?} != [{channels}]", b.shape())))
        }
        _ => Ok(()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], b: Option<&Tensor<T>>, channels: usize, plane: usize) {
    if let Some(b) = b {
        let bv = b.data();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let v = bv[i % channels];
            chunk.iter_mut().for_each(|x| *x += v);
        }
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().fold(T::zero(), |a, &b| a + b);
    }
    db
}

/// Cross-correlation of `x (N,C,H,W)` with `w (O,C,k,k)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, args: Conv2dArgs) -> Result<Tensor<T>> {
    const OP: &str = "conv2d";
    check_args(OP, args)?;
    let [n, c, h, wd] = dims4(OP, x)?;
    let [o, wc, kh, kw] = dims4(OP, w)?;
    if wc != c {
        return Err(shape_err(OP, format!("input has {c} channels but weight expects {wc} (weight {:?})", w.shape())));
    }
    if kh != kw {
        return Err(shape_err(OP, format!("only square kernels are supported, got {kh}x{kw}")));
    }
    check_bias(OP, b, o)?;
    let (ho, wo) = match (conv_output_extent(h, kh, args), conv_output_extent(wd, kw, args)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => return Err(shape_err(OP, format!("kernel {kh} with {args:?} does not fit input {h}x{wd}"))),
    };
    let geo = Geometry { c, h, w: wd, k: kh, args, ho, wo };
    let (rows, ncols) = (geo.rows(), geo.cols());
    let in_len = c * h * wd;
    let out_len = o * ncols;
    let mut out = vec![T::zero(); n * out_len];
    {
        let xv = x.data();
        let wv = w.data();
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ncols] };
        for ni in 0..n {
            let xs = &xv[ni * in_len..(ni + 1) * in_len];
            let colm: &[T] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols
            };
            T::gemm(
                o,
                rows,
                ncols,
                T::one(),
                (&wv, rows as isize, 1),
                (colm, ncols as isize, 1),
                T::zero(),
                (&mut out[ni * out_len..(ni + 1) * out_len], ncols as isize, 1),
            );
        }
    }
    add_bias(&mut out, b, o, ncols);

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (xc, wc_t, bias_rg) = (x.clone(), w.clone(), b.map(|b| b.requires_grad()));
    Ok(Tensor::from_op(OP, vec![n, o, ho, wo], out, parents, move |g| {
        let xv = xc.data();
        let wv = wc_t.data();
        let need_x = xc.requires_grad();
        let need_w = wc_t.requires_grad();
        let mut dx = need_x.then(|| vec![T::zero(); n * in_len]);
        let mut dw = need_w.then(|| vec![T::zero(); o * rows]);
        let mut cols = vec![T::zero(); rows * ncols];
        let mut dcols = if need_x && !geo.is_pointwise() { vec![T::zero(); rows * ncols] } else { Vec::new() };
        for ni in 0..n {
            let gs = &g[ni * out_len..(ni + 1) * out_len];
            if let Some(dw) = dw.as_mut() {
                let xs = &xv[ni * in_len..(ni + 1) * in_len];
                let colm: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    geo.im2col(xs, &mut cols);
                    &cols
                };
                // dw += g · colsᵀ
                T::gemm(o, ncols, rows, T::one(), (gs, ncols as isize, 1), (colm, 1, ncols as isize), T::one(), (dw, rows as isize, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[ni * in_len..(ni + 1) * in_len];
                // dcols = wᵀ · g
                if geo.is_pointwise() {
                    T::gemm(rows, o, ncols, T::one(), (&wv, 1, rows as isize), (gs, ncols as isize, 1), T::zero(), (dxs, ncols as isize, 1));
                } else {
                    T::gemm(rows, o, ncols, T::one(), (&wv, 1, rows as isize), (gs, ncols as isize, 1), T::zero(), (&mut dcols, ncols as isize, 1));
                    geo.col2im(&dcols, dxs);
                }
            }
        }
        let mut grads = vec![dx, dw];
        if let Some(rb) = bias_rg {
            grads.push(rb.then(|| bias_grad(g, o, ncols)));
        }
        grads
    }))
}

/// Transposed convolution of `x (N,Cin,H,W)` with `w (Cin,Cout,k,k)`; the
/// adjoint of [`conv2d`] with the same stride and padding.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    const OP: &str = "conv_transpose2d";
    let args = Conv2dArgs::new(stride, padding, 1);
    check_args(OP, args)?;
    let [n, cin, hi, wi] = dims4(OP, x)?;
    let [wcin, cout, kh, kw] = dims4(OP, w)?;
    if wcin != cin {
        return Err(shape_err(OP, format!("input has {cin} channels but weight's input axis is {wcin} (weight {:?})", w.shape())));
    }
    if kh != kw {
        return Err(shape_err(OP, format!("only square kernels are supported, got {kh}x{kw}")));
    }
    check_bias(OP, b, cout)?;
    let (ho, wo) = match (
        conv_transpose_output_extent(hi, kh, stride, padding),
        conv_transpose_output_extent(wi, kw, stride, padding),
    ) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => return Err(shape_err(OP, format!("padding {padding} too large for input {hi}x{wi}"))),
    };
    // The output plays the role of the convolution input.
    let geo = Geometry { c: cout, h: ho, w: wo, k: kh, args, ho: hi, wo: wi };
    let (rows, ncols) = (geo.rows(), geo.cols());
    let in_len = cin * ncols;
    let out_len = cout * ho * wo;
    let mut out = vec![T::zero(); n * out_len];
    {
        let xv = x.data();
        let wv = w.data();
        let mut cols = vec![T::zero(); rows * ncols];
        for ni in 0..n {
            // cols = wᵀ · x
            T::gemm(rows, cin, ncols, T::one(), (&wv, 1, rows as isize), (&xv[ni * in_len..(ni + 1) * in_len], ncols as isize, 1), T::zero(), (&mut cols, ncols as isize, 1));
            geo.col2im(&cols, &mut out[ni * out_len..(ni + 1) * out_len]);
        }
    }
    add_bias(&mut out, b, cout, ho * wo);

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (xc, wc_t, bias_rg) = (x.clone(), w.clone(), b.map(|b| b.requires_grad()));
    Ok(Tensor::from_op(OP, vec![n, cout, ho, wo], out, parents, move |g| {
        let xv = xc.data();
        let wv = wc_t.data();
        let mut dx = xc.requires_grad().then(|| vec![T::zero(); n * in_len]);
        let mut dw = wc_t.requires_grad().then(|| vec![T::zero(); cin * rows]);
        let mut dcols = vec![T::zero(); rows * ncols];
        for ni in 0..n {
            geo.im2col(&g[ni * out_len..(ni + 1) * out_len], &mut dcols);
            if let Some(dx) = dx.as_mut() {
                // dx = w · dcols
                T::gemm(cin, rows, ncols, T::one(), (&wv, rows as isize, 1), (&dcols, ncols as isize, 1), T::zero(), (&mut dx[ni * in_len..(ni + 1) * in_len], ncols as isize, 1));
            }
            if let Some(dw) = dw.as_mut() {
                // dw += x · dcolsᵀ
                T::gemm(cin, ncols, rows, T::one(), (&xv[ni * in_len..(ni + 1) * in_len], ncols as isize, 1), (&dcols, 1, ncols as isize), T::one(), (dw, rows as isize, 1));
            }
        }
        let mut grads = vec![dx, dw];
        if let Some(rb) = bias_rg {
            grads.push(rb.then(|| bias_grad(g, cout, ho * wo)));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn scaling_kernel_doubles_input() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(&[1, 1, 1, 1], vec![2.0]);
        let y = conv2d(&x, &w, None, Conv2dArgs::default()).unwrap();
        assert_eq!(y.to_vec(), (1..=9).map(|v| 2.0 * v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn box_kernel_counts_overlap() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = conv2d(&x, &w, None, Conv2dArgs::padded(1)).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn output_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 3, 64, 64]);
        let w = Tensor::<f32>::zeros(&[8, 3, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, Conv2dArgs::padded(1)).unwrap().shape(), &[2, 8, 64, 64]);
        let x = Tensor::<f32>::zeros(&[1, 16, 30, 30]);
        let w = Tensor::<f32>::zeros(&[16, 8, 2, 2]);
        assert_eq!(conv_transpose2d(&x, &w, None, 2, 0).unwrap().shape(), &[1, 8, 60, 60]);
        assert_eq!(conv_output_extent(10, 3, Conv2dArgs::new(1, 2, 2)), Some(10));
    }

    #[test]
    fn channel_mismatch_names_dimensions() {
        let x = Tensor::<f32>::zeros(&[1, 4, 8, 8]);
        let w = Tensor::<f32>::zeros(&[8, 3, 3, 3]);
        let err = conv2d(&x, &w, None, Conv2dArgs::default()).unwrap_err();
        assert!(err.to_string().contains("4 channels"), "{err}");
        assert!(conv2d(&x, &Tensor::zeros(&[8, 4, 3, 3]), None, Conv2dArgs::new(0, 0, 1)).is_err());
    }

    #[test]
    fn transpose_places_inputs_on_even_grid() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let y = conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        #[rustfmt::skip]
        let expect = vec![
            1.0, 0.0, 2.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
            3.0, 0.0, 4.0, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(y.to_vec(), expect);
    }
}
