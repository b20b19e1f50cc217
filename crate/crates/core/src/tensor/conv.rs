//! Standard, depthwise and pointwise 2D convolution.
//!
//! Kernels are stored `(k, k, c_in, c_out)` for standard convolutions and
//! `(k, k, c)` for depthwise ones. Padding is symmetric zero padding.

use super::{same_shape, Element, Nhwc, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseGrads<T = f32> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `floor((size + 2*padding - k) / stride) + 1`, or an error when the
/// window does not fit.
pub fn output_extent(
    axis: &str,
    size: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::Config("stride must be positive".into()));
    }
    if k == 0 {
        return Err(TensorError::Config("kernel size must be positive".into()));
    }
    let padded = size + 2 * padding;
    if padded < k {
        return Err(TensorError::dim(axis, k, padded));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeometry {
    k: usize,
    c_in: usize,
    c_out: usize,
}

/// Borrowed convolution parameters, so weights owned elsewhere can be used
/// without copying.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvView<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DepthwiseView<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvParams<T> {
    pub(crate) fn view(&self) -> ConvView<'_, T> {
        ConvView {
            kernel: &self.kernel,
            bias: &self.bias,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }
}

impl<T: Element> DepthwiseParams<T> {
    pub(crate) fn view(&self) -> DepthwiseView<'_, T> {
        DepthwiseView {
            kernel: &self.kernel,
            bias: &self.bias,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

impl<T: Element> ConvView<'_, T> {
    fn geometry(&self) -> Result<ConvGeometry> {
        let (k, c_in, c_out) = match *self.kernel.shape() {
            [kh, kw, ci, co] => {
                if kh != kw {
                    return Err(TensorError::dim("kernel width", kh, kw));
                }
                (kh, ci, co)
            }
            _ => {
                return Err(TensorError::shape(
                    self.kernel.shape(),
                    "conv kernel must be (k, k, c_in, c_out)",
                ))
            }
        };
        same_shape(&[c_out], self.bias.shape())
            .map_err(|_| TensorError::dim("bias length", c_out, self.bias.len()))?;
        Ok(ConvGeometry { k, c_in, c_out })
    }
}

impl<T: Element> DepthwiseView<'_, T> {
    fn geometry(&self) -> Result<(usize, usize)> {
        let (k, c) = match *self.kernel.shape() {
            [kh, kw, c] => {
                if kh != kw {
                    return Err(TensorError::dim("kernel width", kh, kw));
                }
                (kh, c)
            }
            _ => {
                return Err(TensorError::shape(
                    self.kernel.shape(),
                    "depthwise kernel must be (k, k, c)",
                ))
            }
        };
        if self.bias.shape() != [c] {
            return Err(TensorError::dim("bias length", c, self.bias.len()));
        }
        Ok((k, c))
    }
}

fn conv_output(
    input: &Nhwc,
    k: usize,
    stride: usize,
    padding: usize,
    c_out: usize,
) -> Result<Nhwc> {
    let h = output_extent("height", input.h, k, stride, padding)?;
    let w = output_extent("width", input.w, k, stride, padding)?;
    Ok(input.with(h, w, c_out))
}

/// Input coordinate for output position `o` and kernel tap `t`, or `None`
/// when it falls into the zero padding.
#[inline]
fn source(o: usize, t: usize, stride: usize, padding: usize, size: usize) -> Option<usize> {
    let pos = (o * stride + t) as isize - padding as isize;
    if pos < 0 || pos as usize >= size {
        None
    } else {
        Some(pos as usize)
    }
}

pub fn conv2d<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_view(input, &p.view())
}

pub(crate) fn conv2d_view<T: Element>(input: &Tensor<T>, p: &ConvView<'_, T>) -> Result<Tensor<T>> {
    let src = Nhwc::of(input)?;
    let g = p.geometry()?;
    if src.c != g.c_in {
        return Err(TensorError::dim("input channels", g.c_in, src.c));
    }
    let dst = conv_output(&src, g.k, p.stride, p.padding, g.c_out)?;
    let x = input.data();
    let kern = p.kernel.data();
    let bias = p.bias.data();
    let mut out = vec![T::zero(); dst.len()];
    let mut acc = vec![0f64; g.c_out];

    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                for (a, &b) in acc.iter_mut().zip(bias) {
                    *a = b.wide();
                }
                for ky in 0..g.k {
                    let Some(iy) = source(oy, ky, p.stride, p.padding, src.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = source(ox, kx, p.stride, p.padding, src.w) else {
                            continue;
                        };
                        let xrow = &x[src.index(n, iy, ix, 0)..][..g.c_in];
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let xv = xv.wide();
                            let krow = &kern[((ky * g.k + kx) * g.c_in + ci) * g.c_out..][..g.c_out];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += xv * kv.wide();
                            }
                        }
                    }
                }
                let orow = &mut out[dst.index(n, oy, ox, 0)..][..g.c_out];
                for (o, &a) in orow.iter_mut().zip(&acc) {
                    *o = T::of(a);
                }
            }
        }
    }
    Tensor::new(&dst.shape(), out)
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_view(input, &p.view(), grad_out)
}

pub(crate) fn conv2d_backward_view<T: Element>(
    input: &Tensor<T>,
    p: &ConvView<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let src = Nhwc::of(input)?;
    let g = p.geometry()?;
    if src.c != g.c_in {
        return Err(TensorError::dim("input channels", g.c_in, src.c));
    }
    let dst = conv_output(&src, g.k, p.stride, p.padding, g.c_out)?;
    same_shape(&dst.shape(), grad_out.shape())?;

    let x = input.data();
    let kern = p.kernel.data();
    let gy = grad_out.data();
    let mut gx = vec![0f64; src.len()];
    let mut gk = vec![0f64; kern.len()];
    let mut gb = vec![0f64; g.c_out];

    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                let grow = &gy[dst.index(n, oy, ox, 0)..][..g.c_out];
                for (b, &v) in gb.iter_mut().zip(grow) {
                    *b += v.wide();
                }
                for ky in 0..g.k {
                    let Some(iy) = source(oy, ky, p.stride, p.padding, src.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = source(ox, kx, p.stride, p.padding, src.w) else {
                            continue;
                        };
                        let base = src.index(n, iy, ix, 0);
                        for ci in 0..g.c_in {
                            let xv = x[base + ci].wide();
                            let koff = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                            let krow = &kern[koff..][..g.c_out];
                            let gkrow = &mut gk[koff..][..g.c_out];
                            let mut dx = 0f64;
                            for co in 0..g.c_out {
                                let gv = grow[co].wide();
                                gkrow[co] += xv * gv;
                                dx += krow[co].wide() * gv;
                            }
                            gx[base + ci] += dx;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), narrow(gx))?,
        kernel: Tensor::new(p.kernel.shape(), narrow(gk))?,
        bias: Tensor::new(p.bias.shape(), narrow(gb))?,
    })
}

pub fn depthwise_conv2d<T: Element>(input: &Tensor<T>, p: &DepthwiseParams<T>) -> Result<Tensor<T>> {
    depthwise_view(input, &p.view())
}

pub(crate) fn depthwise_view<T: Element>(
    input: &Tensor<T>,
    p: &DepthwiseView<'_, T>,
) -> Result<Tensor<T>> {
    let src = Nhwc::of(input)?;
    let (k, c) = p.geometry()?;
    if src.c != c {
        return Err(TensorError::dim("input channels", c, src.c));
    }
    let dst = conv_output(&src, k, p.stride, p.padding, c)?;
    let x = input.data();
    let kern = p.kernel.data();
    let mut out = vec![T::zero(); dst.len()];
    let mut acc = vec![0f64; c];

    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                for (a, &b) in acc.iter_mut().zip(p.bias.data()) {
                    *a = b.wide();
                }
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, p.stride, p.padding, src.h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = source(ox, kx, p.stride, p.padding, src.w) else {
                            continue;
                        };
                        let xrow = &x[src.index(n, iy, ix, 0)..][..c];
                        let krow = &kern[(ky * k + kx) * c..][..c];
                        for ((a, &xv), &kv) in acc.iter_mut().zip(xrow).zip(krow) {
                            *a += xv.wide() * kv.wide();
                        }
                    }
                }
                let orow = &mut out[dst.index(n, oy, ox, 0)..][..c];
                for (o, &a) in orow.iter_mut().zip(&acc) {
                    *o = T::of(a);
                }
            }
        }
    }
    Tensor::new(&dst.shape(), out)
}

pub fn depthwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &DepthwiseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DepthwiseGrads<T>> {
    depthwise_backward_view(input, &p.view(), grad_out)
}

pub(crate) fn depthwise_backward_view<T: Element>(
    input: &Tensor<T>,
    p: &DepthwiseView<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<DepthwiseGrads<T>> {
    let src = Nhwc::of(input)?;
    let (k, c) = p.geometry()?;
    if src.c != c {
        return Err(TensorError::dim("input channels", c, src.c));
    }
    let dst = conv_output(&src, k, p.stride, p.padding, c)?;
    same_shape(&dst.shape(), grad_out.shape())?;

    let x = input.data();
    let kern = p.kernel.data();
    let gy = grad_out.data();
    let mut gx = vec![0f64; src.len()];
    let mut gk = vec![0f64; kern.len()];
    let mut gb = vec![0f64; c];

    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                let grow = &gy[dst.index(n, oy, ox, 0)..][..c];
                for (b, &v) in gb.iter_mut().zip(grow) {
                    *b += v.wide();
                }
                for ky in 0..k {
                    let Some(iy) = source(oy, ky, p.stride, p.padding, src.h) else {
                        continue;
                    };
                    for kx in 0..k {
                        let Some(ix) = source(ox, kx, p.stride, p.padding, src.w) else {
                            continue;
                        };
                        let base = src.index(n, iy, ix, 0);
                        let koff = (ky * k + kx) * c;
                        for ch in 0..c {
                            let gv = grow[ch].wide();
                            gk[koff + ch] += x[base + ch].wide() * gv;
                            gx[base + ch] += kern[koff + ch].wide() * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(DepthwiseGrads {
        input: Tensor::new(input.shape(), narrow(gx))?,
        kernel: Tensor::new(p.kernel.shape(), narrow(gk))?,
        bias: Tensor::new(p.bias.shape(), narrow(gb))?,
    })
}

fn require_pointwise<T: Element>(p: &ConvParams<T>) -> Result<()> {
    match p.kernel.shape().first() {
        Some(1) => Ok(()),
        Some(&k) => Err(TensorError::dim("pointwise kernel size", 1, k)),
        None => Err(TensorError::shape(p.kernel.shape(), "empty kernel")),
    }
}

/// 1x1 convolution mixing channels at every spatial position.
pub fn pointwise_conv2d<T: Element>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    require_pointwise(p)?;
    conv2d(input, p)
}

pub fn pointwise_conv2d_backward<T: Element>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    require_pointwise(p)?;
    conv2d_backward(input, p, grad_out)
}

pub(crate) fn narrow<T: Element>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::of).collect()
}
