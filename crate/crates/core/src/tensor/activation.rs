//! Parameter-free layers: ReLU, dropout, softmax, residual add and
//! channel concatenation.

use super::{same_shape, Element, Nhwc, Result, Tensor, TensorError};
use crate::rng::Rng;

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(input.shape(), grad_out.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
/// Returns the output and the scaling mask needed by the backward pass.
pub fn dropout_train<T: Element>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.next_f64() < rate { T::zero() } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.shape(), out)?, Tensor::new(input.shape(), mask)?))
}

pub fn dropout_backward<T: Element>(mask: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(mask.shape(), grad_out.shape())?;
    let data = mask.data().iter().zip(grad_out.data()).map(|(&m, &g)| m * g).collect();
    Tensor::new(mask.shape(), data)
}

/// Row-wise softmax of `(n)` or `(N, n)` logits, computed in f64.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let width = match *logits.shape() {
        [n] | [_, n] => n,
        _ => return Err(TensorError::shape(logits.shape(), "logits must be (n) or (N, n)")),
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(width) {
        let max = row.iter().map(|v| v.wide()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.wide() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| T::of(e / total)));
    }
    Tensor::new(logits.shape(), out)
}

/// Softmax probabilities and cross-entropy loss `-ln p[label]` for one
/// example.
pub fn softmax_xent<T: Element>(logits: &Tensor<T>, label: usize) -> Result<(Tensor<T>, f64)> {
    if logits.rank() != 1 {
        return Err(TensorError::shape(logits.shape(), "logits must be a vector"));
    }
    if label >= logits.len() {
        return Err(TensorError::Index {
            index: label,
            len: logits.len(),
        });
    }
    let max = logits.data().iter().map(|v| v.wide()).fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits
        .data()
        .iter()
        .map(|v| (v.wide() - max).exp())
        .sum::<f64>()
        .ln();
    let loss = -(logits.data()[label].wide() - max - log_total);
    Ok((softmax(logits)?, loss))
}

/// Gradient of the cross-entropy loss with respect to the logits:
/// `probs - onehot(label)`.
pub fn softmax_xent_backward<T: Element>(probs: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    if label >= probs.len() {
        return Err(TensorError::Index {
            index: label,
            len: probs.len(),
        });
    }
    let mut g = probs.clone();
    g.data_mut()[label] = g.data()[label] - T::one();
    Ok(g)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Concatenates feature maps along the channel axis; all inputs must share
/// batch and spatial dimensions.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::Config("concat needs at least one input".into()))?;
    let base = Nhwc::of(first)?;
    let mut views = Vec::with_capacity(inputs.len());
    for t in inputs {
        let v = Nhwc::of(t)?;
        if v.batched != base.batched {
            return Err(TensorError::dim("rank", first.rank(), t.rank()));
        }
        for (axis, e, a) in [("batch", base.n, v.n), ("height", base.h, v.h), ("width", base.w, v.w)] {
            if e != a {
                return Err(TensorError::dim(axis, e, a));
            }
        }
        views.push(v);
    }
    let total_c: usize = views.iter().map(|v| v.c).sum();
    let dst = base.with(base.h, base.w, total_c);
    let pixels = base.n * base.h * base.w;
    let mut out = Vec::with_capacity(dst.len());
    for px in 0..pixels {
        for (t, v) in inputs.iter().zip(&views) {
            out.extend_from_slice(&t.data()[px * v.c..][..v.c]);
        }
    }
    Tensor::new(&dst.shape(), out)
}

/// Splits a concatenated gradient back into per-input gradients.
pub fn concat_channels_backward<T: Element>(
    grad_out: &Tensor<T>,
    channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let dst = Nhwc::of(grad_out)?;
    let total: usize = channels.iter().sum();
    if total != dst.c {
        return Err(TensorError::dim("channels", total, dst.c));
    }
    let pixels = dst.n * dst.h * dst.w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(c * pixels)).collect();
    for row in grad_out.data().chunks_exact(dst.c) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| Tensor::new(&dst.with(dst.h, dst.w, c).shape(), data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::from_vec(vec![0.3f32; 7]).unwrap();
        let (p, loss) = softmax_xent(&logits, 2).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-7);
        }
        assert!((loss - 7f64.ln()).abs() < 1e-9);
        assert!((loss - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn shift_invariance() {
        let a = Tensor::from_vec(vec![1.0f64, -2.0, 0.5, 3.0]).unwrap();
        let b = a.map(|v| v + 100.0);
        let (pa, la) = softmax_xent(&a, 3).unwrap();
        let (pb, lb) = softmax_xent(&b, 3).unwrap();
        for (x, y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((la - lb).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::from_vec(vec![0.0f32; 3]).unwrap();
        assert!(matches!(softmax_xent(&logits, 3), Err(TensorError::Index { index: 3, len: 3 })));
    }

    #[test]
    fn relu_gradient_blocked_below_zero() {
        let x = Tensor::from_vec(vec![-0.5f32, 0.0, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::from_vec(vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut rng = Rng::new(3);
        let x = Tensor::full(&[1000], 1.0f32).unwrap();
        let (out, mask) = dropout_train(&x, 0.5, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(out, mask);
        let kept = out.data().iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn concat_and_split_round_trip() {
        let a = Tensor::new(&[1, 2, 1], vec![1.0f32, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2, 2], vec![3.0f32, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_channels_backward(&c, &[1, 2]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 2, 1]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3, 1]).unwrap();
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
