//! Tensor primitives missing from (or slow in) candle's CPU backend.
//!
//! Convolution is a fused custom op: per sample, an im2col into a scratch
//! buffer followed by one GEMM straight into the NCHW output. The backward
//! pass is two more GEMMs per sample plus a col2im scatter.

use candle_core::{backend::BackendStorage, CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType, D};
use gemm::Parallelism;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride + 1
    }

    /// Rows of one sample's patch matrix, `C·kh·kw`.
    fn rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Output pixels of one sample.
    fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.pixels()
    }

    /// 1×1, stride 1, unpadded: the sample itself is its patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Output range `[lo, hi)` whose taps at offset `k` land inside `[0, len)`.
    #[inline]
    fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k).div_ceil(stride);
        if len + pad <= k {
            return (0, 0);
        }
        let hi = ((len - 1 + pad - k) / stride + 1).min(out);
        (lo.min(hi), hi)
    }

    /// Calls `f(col_start, input_start, n)` for every in-bounds run of one
    /// patch-matrix row of a single sample; a run covers `n` outputs whose
    /// inputs are `stride` apart.
    #[inline]
    fn for_each_run(&self, c: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (y0, y1) = Self::valid_range(ky, self.stride, self.pad_h, self.height, oh);
        let (x0, x1) = Self::valid_range(kx, self.stride, self.pad_w, self.width, ow);
        if x0 >= x1 {
            return;
        }
        let plane = c * self.height * self.width;
        for oy in y0..y1 {
            let iy = oy * self.stride + ky - self.pad_h;
            let ix = x0 * self.stride + kx - self.pad_w;
            f(oy * ow + x0, plane + iy * self.width + ix, x1 - x0);
        }
    }
}

/// One sample `(C, H, W)` → `(C·kh·kw, oh·ow)` patch matrix, zero padded.
fn im2col<T: WithDType>(src: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let cols = g.pixels();
    dst.fill(T::zero());
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
                let dst = &mut dst[row..row + cols];
                g.for_each_run(c, ky, kx, |o, i, n| {
                    if g.stride == 1 {
                        dst[o..o + n].copy_from_slice(&src[i..i + n]);
                    } else {
                        for (d, s) in dst[o..o + n].iter_mut().zip(src[i..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                });
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch values onto one sample.
fn col2im<T: WithDType>(cols_data: &[T], g: &ConvGeometry, out: &mut [T]) {
    let cols = g.pixels();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
                let src = &cols_data[row..row + cols];
                g.for_each_run(c, ky, kx, |o, i, n| {
                    for (s, d) in src[o..o + n].iter().zip(out[i..].iter_mut().step_by(g.stride)) {
                        *d += *s;
                    }
                });
            }
        }
    }
}

/// A row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    /// Columns of the stored (untransposed) matrix.
    stride: usize,
    transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    fn n(data: &'a [T], stride: usize) -> Self {
        Self {
            data,
            stride,
            transposed: false,
        }
    }

    fn t(data: &'a [T], stride: usize) -> Self {
        Self {
            data,
            stride,
            transposed: true,
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }
}

/// `dst (m×n) = a (m×k) · b (k×n)`, plus the old `dst` when `accumulate`.
fn matmul<T: WithDType>(m: usize, n: usize, k: usize, a: Mat<T>, b: Mat<T>, dst: &mut [T], accumulate: bool) {
    debug_assert!(dst.len() >= m * n);
    let (a_rs, a_cs) = a.strides();
    let (b_rs, b_cs) = b.strides();
    // SAFETY: every operand slice covers the index range implied by its
    // strides and the m/n/k extents; `dst` is exclusively borrowed.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.data.as_ptr(),
            a_cs,
            a_rs,
            b.data.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        )
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires contiguous inputs"),
    }
}

fn conv_forward<T: WithDType>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (rows, px) = (g.rows(), g.pixels());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * px]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let patches = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
        matmul(
            g.out_channels,
            px,
            rows,
            Mat::n(w, rows),
            Mat::n(patches, px),
            ob,
            false,
        );
    }
    out
}

/// `dL/dx` from the output gradient and the weights.
fn conv_grad_input<T: WithDType>(grad: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (rows, px) = (g.rows(), g.pixels());
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * px]
    };
    for b in 0..g.batch {
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        let dxb = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
        if g.is_pointwise() {
            matmul(rows, px, g.out_channels, Mat::t(w, rows), Mat::n(gb, px), dxb, false);
        } else {
            matmul(
                rows,
                px,
                g.out_channels,
                Mat::t(w, rows),
                Mat::n(gb, px),
                &mut cols,
                false,
            );
            col2im(&cols, g, dxb);
        }
    }
    dx
}

/// `dL/dw` from the input and the output gradient.
fn conv_grad_weight<T: WithDType>(x: &[T], grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let (rows, px) = (g.rows(), g.pixels());
    let mut dw = vec![T::zero(); g.out_channels * rows];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * px]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_len()..(b + 1) * g.in_len()];
        let gb = &grad[b * g.out_len()..(b + 1) * g.out_len()];
        let patches = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        matmul(
            g.out_channels,
            rows,
            px,
            Mat::n(gb, px),
            Mat::t(patches, px),
            &mut dw,
            b > 0,
        );
    }
    dw
}

macro_rules! dispatch2 {
    ($name:expr, $a:expr, $la:expr, $b:expr, $lb:expr, $f:expr) => {
        match ($a, $b) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous_slice(a, $la, $name)?, contiguous_slice(b, $lb, $name)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous_slice(a, $la, $name)?, contiguous_slice(b, $lb, $name)?))
            }
            (a, b) => candle_core::bail!("{}: unsupported dtypes {:?}/{:?}", $name, a.dtype(), b.dtype()),
        }
    };
}

/// `conv(x, w)` without bias; differentiable in both arguments.
struct Conv(ConvGeometry);

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        lx: &Layout,
        w: &CpuStorage,
        lw: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!("conv2d", x, lx, w, lw, |x, w| conv_forward(x, w, g));
        Ok((out, Shape::from((g.batch, g.out_channels, g.out_h(), g.out_w()))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &ConvGradInput(self.0))?;
        let dw = x.apply_op2_no_bwd(&grad, &ConvGradWeight(self.0))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct ConvGradInput(ConvGeometry);

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        grad: &CpuStorage,
        lg: &Layout,
        w: &CpuStorage,
        lw: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!("conv2d-grad-input", grad, lg, w, lw, |gr, w| conv_grad_input(gr, w, g));
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

struct ConvGradWeight(ConvGeometry);

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        lx: &Layout,
        grad: &CpuStorage,
        lg: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch2!("conv2d-grad-weight", x, lx, grad, lg, |x, gr| conv_grad_weight(
            x, gr, g
        ));
        Ok((out, Shape::from((g.out_channels, g.channels, g.kernel_h, g.kernel_w))))
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `x`: `(B, C, H, W)`, `weight`: `(O, C, kh, kw)`, `bias`: `(O,)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!("conv expects {wc} input channels, got {c}")));
    }
    if h + 2 * padding.0 < kh || w + 2 * padding.1 < kw || stride == 0 {
        return Err(Error::Size(format!("{h}x{w} input too small for a {kh}x{kw} kernel")));
    }
    if x.dtype() != weight.dtype() {
        return Err(Error::Shape(format!(
            "conv input is {:?} but weights are {:?}",
            x.dtype(),
            weight.dtype()
        )));
    }
    let g = ConvGeometry {
        batch: b,
        channels: c,
        height: h,
        width: w,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        pad_h: padding.0,
        pad_w: padding.1,
    };
    let out = x.contiguous()?.apply_op2(&weight.contiguous()?, Conv(g))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, o, 1, 1))?)?,
        None => out,
    })
}

/// Reflection index (edge not repeated), valid for any offset.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn reflect_dim(x: &Tensor, dim: usize, before: usize, after: usize) -> Result<Tensor> {
    if before == 0 && after == 0 {
        return Ok(x.clone());
    }
    let n = x.dim(dim)?;
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect();
    let idx = Tensor::from_vec(idx, n + before + after, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Reflect-pads the two spatial dims of an NCHW tensor.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let x = reflect_dim(x, 2, top, bottom)?;
    reflect_dim(&x, 3, left, right)
}

/// Replicate-pads both spatial dims by `p`.
pub fn replicate_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    Ok(x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?)
}

/// Reflect-pads bottom/right so H and W become multiples of `multiple`.
/// Returns the padded tensor and the original `(H, W)`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    Ok((reflect_pad(x, 0, ph, 0, pw)?, (h, w)))
}

pub fn crop_to(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Ok(x.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x,0) + log(1 + exp(-|x|))
    let relu = x.relu()?;
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((relu + tail)?)
}

/// Depth-to-space: `(B, C·r², H, W)` → `(B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    Ok(x.avg_pool2d(k)?)
}

/// Non-overlapping `k×k` max pooling; trailing rows and columns are dropped.
///
/// Reduces over a reshaped view because the built-in pooling backward scales
/// the gradient of a unique maximum by `1/k²`.
pub fn max_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / k, w / k);
    if oh == 0 || ow == 0 {
        return Err(Error::Size(format!("{h}x{w} input too small for {k}x{k} pooling")));
    }
    let x = crop_to(x, oh * k, ow * k)?;
    Ok(x.reshape((b, c, oh, k, ow, k))?.max(5)?.max(3)?)
}

/// Nearest-neighbour upsampling by an integer factor.
///
/// Built from a broadcast rather than `upsample_nearest2d`, whose backward
/// overwrites the gradient already accumulated for its input.
pub fn upsample(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, k, w, k))?
        .reshape((b, c, h * k, w * k))?)
}

/// Global average pool to `(B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?)
}

pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_keepdim(D::Minus1)?.max_keepdim(D::Minus2)?)
}

/// Errors if any element is NaN or infinite.
pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(format!("{what} contains NaN or Inf")));
    }
    Ok(())
}

/// Like [`ensure_finite`] but reports a rejected input rather than a numerical failure.
pub fn validate_input(x: &Tensor, what: &str) -> Result<()> {
    ensure_finite(x, what).map_err(|_| Error::Validation(format!("{what} contains NaN or Inf")))
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let wv: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * wv[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(b, k, stride, pad) in &[
            (1, 3, 1, 1),
            (2, 3, 2, 1),
            (2, 1, 1, 0),
            (1, 5, 1, 2),
            (3, 3, 1, 0),
            (1, 3, 2, 0),
            (2, 5, 3, 2),
            (1, 2, 2, 0),
            (1, 3, 3, 3),
        ] {
            let x = rand_tensor(&[b, 3, 7, 6], 1);
            let w = rand_tensor(&[4, 3, k, k], 2);
            let got: Vec<f64> = conv2d(&x, &w, None, stride, (pad, pad))
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "b={b} k={k} s={stride}");
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (5, 3, 2), (2, 2, 0), (3, 3, 3)] {
            let g = ConvGeometry {
                batch: 1,
                channels: 2,
                height: 7,
                width: 6,
                out_channels: 1,
                kernel_h: k,
                kernel_w: k,
                stride,
                pad_h: pad,
                pad_w: pad,
            };
            let x: Vec<f64> = rand_tensor(&[2, 7, 6], 5).flatten_all().unwrap().to_vec1().unwrap();
            let c: Vec<f64> = rand_tensor(&[g.rows() * g.pixels()], 6).to_vec1().unwrap();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                "k={k} s={stride} p={pad}"
            );
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        for &(k, stride, pad) in &[(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let x = Var::from_tensor(&rand_tensor(&[2, 2, 5, 5], 3)).unwrap();
            let w = Var::from_tensor(&rand_tensor(&[3, 2, k, k], 4)).unwrap();
            let f = |x: &Tensor, w: &Tensor| -> f64 {
                let y = conv2d(x, w, None, stride, (pad, pad)).unwrap();
                scalar(&y.sqr().unwrap().sum_all().unwrap()).unwrap()
            };
            let y = conv2d(x.as_tensor(), w.as_tensor(), None, stride, (pad, pad)).unwrap();
            let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let gx: Vec<f64> = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let gw: Vec<f64> = grads.get(&w).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let h = 1e-6;
            for (var, g) in [(&x, &gx), (&w, &gw)] {
                let base: Vec<f64> = var.flatten_all().unwrap().to_vec1().unwrap();
                for i in [0, 7.min(base.len() - 1), base.len() / 2, base.len() - 1] {
                    let mut plus = base.clone();
                    plus[i] += h;
                    let mut minus = base.clone();
                    minus[i] -= h;
                    let tp = Tensor::from_vec(plus, var.shape(), &Device::Cpu).unwrap();
                    let tm = Tensor::from_vec(minus, var.shape(), &Device::Cpu).unwrap();
                    let (fp, fm) = if std::ptr::eq(var, &x) {
                        (f(&tp, w.as_tensor()), f(&tm, w.as_tensor()))
                    } else {
                        (f(x.as_tensor(), &tp), f(x.as_tensor(), &tm))
                    };
                    let fd = (fp - fm) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k}: {fd} vs {}", g[i]);
                }
            }
        }
    }

    #[test]
    fn reflect_index_wraps_any_distance() {
        let got: Vec<usize> = (-5..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn pixel_shuffle_places_channels_spatially() {
        let x = Tensor::arange(0f64, 16., &Device::Cpu)
            .unwrap()
            .reshape((1, 4, 2, 2))
            .unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        // output (2y+i, 2x+j) = input channel (2i+j) at (y, x)
        assert_eq!(&v[..4], &[0., 4., 1., 5.]);
        assert_eq!(&v[4..8], &[8., 12., 9., 13.]);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 1.0, 800.0], &Device::Cpu).unwrap();
        let s: Vec<f64> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert_eq!(s[2], 0.5);
        assert!((s[3] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        let sp: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        assert!(sp.iter().all(|v| v.is_finite()));
        assert!((sp[4] - 800.0).abs() < 1e-12);
        assert!((sp[2] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn padding_round_trip() {
        let x = rand_tensor(&[1, 2, 5, 3], 9);
        let (p, (h, w)) = pad_to_multiple(&x, 4).unwrap();
        assert_eq!(p.dims(), &[1, 2, 8, 4]);
        let back = crop_to(&p, h, w).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
    }

    fn grad_of(x: &Var, f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
        let g = f(x.as_tensor()).backward().unwrap();
        g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn upsample_gradient_accumulates_with_other_consumers() {
        let x = Var::from_tensor(&rand_tensor(&[1, 2, 3, 4], 5)).unwrap();
        let weight = rand_tensor(&[1, 2, 6, 8], 6);
        // the upsampled path alone, then together with a second use of x
        let up = grad_of(&x, |x| (upsample(x, 2).unwrap() * &weight).unwrap().sum_all().unwrap());
        let both = grad_of(&x, |x| {
            let a = (upsample(x, 2).unwrap() * &weight).unwrap().sum_all().unwrap();
            (a + (x * 3.0).unwrap().sum_all().unwrap()).unwrap()
        });
        let wv: Vec<f64> = weight.flatten_all().unwrap().to_vec1().unwrap();
        for (i, (u, b)) in up.iter().zip(&both).enumerate() {
            let (c, y, xx) = (i / 12, (i / 4) % 3, i % 4);
            let want: f64 = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| wv[(c * 6 + 2 * y + dy) * 8 + 2 * xx + dx])
                .sum();
            assert!((u - want).abs() < 1e-12);
            assert!((b - want - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn max_pool_routes_the_full_gradient_to_the_maximum() {
        let x = Var::from_tensor(&rand_tensor(&[1, 2, 5, 4], 7)).unwrap();
        let pooled = max_pool(x.as_tensor(), 2).unwrap();
        assert_eq!(pooled.dims(), &[1, 2, 2, 2]);
        let g = grad_of(&x, |x| max_pool(x, 2).unwrap().sum_all().unwrap());
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let pv: Vec<f64> = pooled.flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for xx in 0..4 {
                    let i = (c * 5 + y) * 4 + xx;
                    let is_max = y < 4 && xv[i] == pv[(c * 2 + y / 2) * 2 + xx / 2];
                    assert_eq!(g[i], if is_max { 1.0 } else { 0.0 }, "c={c} y={y} x={xx}");
                }
            }
        }
    }
}
