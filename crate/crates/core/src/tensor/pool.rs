//! Spatial average and max pooling.
//!
//! Average pooling always divides by the full `window * window` count, so
//! padded positions contribute zeros. Max pooling never selects a padded
//! position. Ties in max pooling go to the first element in row-major
//! window order, both forward and backward.

use super::conv::{narrow, output_extent};
use super::{same_shape, Element, Nhwc, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, window: usize, stride: usize) -> Self {
        PoolSpec {
            kind,
            window,
            stride,
            padding: 0,
        }
    }

    fn output(&self, src: &Nhwc) -> Result<Nhwc> {
        if self.padding >= self.window {
            return Err(TensorError::Config(format!(
                "pool padding {} must be smaller than the window {}",
                self.padding, self.window
            )));
        }
        let h = output_extent("height", src.h, self.window, self.stride, self.padding)?;
        let w = output_extent("width", src.w, self.window, self.stride, self.padding)?;
        Ok(src.with(h, w, src.c))
    }

    /// In-bounds input coordinates covered by the window at `(oy, ox)`.
    fn taps(&self, src: &Nhwc, oy: usize, ox: usize) -> impl Iterator<Item = (usize, usize)> {
        let (stride, pad, win, h, w) = (self.stride, self.padding, self.window, src.h, src.w);
        (0..win).flat_map(move |ky| {
            (0..win).filter_map(move |kx| {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                (iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w)
                    .then_some((iy as usize, ix as usize))
            })
        })
    }
}

pub fn pool<T: Element>(input: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    let src = Nhwc::of(input)?;
    let dst = spec.output(&src)?;
    let x = input.data();
    let area = (spec.window * spec.window) as f64;
    let mut out = vec![T::zero(); dst.len()];
    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                for ch in 0..src.c {
                    let o = &mut out[dst.index(n, oy, ox, ch)];
                    match spec.kind {
                        PoolKind::Avg => {
                            let sum: f64 = spec
                                .taps(&src, oy, ox)
                                .map(|(iy, ix)| x[src.index(n, iy, ix, ch)].wide())
                                .sum();
                            *o = T::of(sum / area);
                        }
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            for (iy, ix) in spec.taps(&src, oy, ox) {
                                let v = x[src.index(n, iy, ix, ch)];
                                if v > best {
                                    best = v;
                                }
                            }
                            *o = best;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&dst.shape(), out)
}

pub fn pool_backward<T: Element>(
    input: &Tensor<T>,
    spec: &PoolSpec,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let src = Nhwc::of(input)?;
    let dst = spec.output(&src)?;
    same_shape(&dst.shape(), grad_out.shape())?;
    let x = input.data();
    let gy = grad_out.data();
    let area = (spec.window * spec.window) as f64;
    let mut gx = vec![0f64; src.len()];
    for n in 0..src.n {
        for oy in 0..dst.h {
            for ox in 0..dst.w {
                for ch in 0..src.c {
                    let g = gy[dst.index(n, oy, ox, ch)].wide();
                    match spec.kind {
                        PoolKind::Avg => {
                            for (iy, ix) in spec.taps(&src, oy, ox) {
                                gx[src.index(n, iy, ix, ch)] += g / area;
                            }
                        }
                        PoolKind::Max => {
                            let mut best: Option<(usize, T)> = None;
                            for (iy, ix) in spec.taps(&src, oy, ox) {
                                let idx = src.index(n, iy, ix, ch);
                                match best {
                                    Some((_, b)) if x[idx] <= b => {}
                                    _ => best = Some((idx, x[idx])),
                                }
                            }
                            if let Some((idx, _)) = best {
                                gx[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input.shape(), narrow(gx))
}
