use super::conv::narrow;
use super::{same_shape, Element, Result, Tensor, TensorError};

/// Fully connected layer parameters; `weight` is `(n_in, n_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseView<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

impl<T: Element> DenseParams<T> {
    pub(crate) fn view(&self) -> DenseView<'_, T> {
        DenseView {
            weight: &self.weight,
            bias: &self.bias,
        }
    }
}

impl<T: Element> DenseView<'_, T> {
    fn dims(&self) -> Result<(usize, usize)> {
        let (n_in, n_out) = match *self.weight.shape() {
            [i, o] => (i, o),
            _ => {
                return Err(TensorError::shape(
                    self.weight.shape(),
                    "dense weight must be (n_in, n_out)",
                ))
            }
        };
        if self.bias.shape() != [n_out] {
            return Err(TensorError::dim("bias length", n_out, self.bias.len()));
        }
        Ok((n_in, n_out))
    }
}

/// Splits a `(n)` or `(N, n)` input into batch count and row width.
fn rows<T: Element>(input: &Tensor<T>, n_in: usize) -> Result<(usize, bool)> {
    match *input.shape() {
        [n] if n == n_in => Ok((1, false)),
        [b, n] if n == n_in => Ok((b, true)),
        [n] | [_, n] => Err(TensorError::dim("input features", n_in, n)),
        _ => Err(TensorError::shape(input.shape(), "dense input must be (n) or (N, n)")),
    }
}

/// `y = W^T x + b`, optionally followed by ReLU.
pub fn dense<T: Element>(
    input: &Tensor<T>,
    p: &DenseParams<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    dense_view(input, &p.view(), activation)
}

pub(crate) fn dense_view<T: Element>(
    input: &Tensor<T>,
    p: &DenseView<'_, T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let (n_in, n_out) = p.dims()?;
    let (batch, batched) = rows(input, n_in)?;
    let w = p.weight.data();
    let mut out = Vec::with_capacity(batch * n_out);
    let mut acc = vec![0f64; n_out];
    for x in input.data().chunks_exact(n_in) {
        for (a, &b) in acc.iter_mut().zip(p.bias.data()) {
            *a = b.wide();
        }
        for (i, &xv) in x.iter().enumerate() {
            let xv = xv.wide();
            if xv == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&w[i * n_out..][..n_out]) {
                *a += xv * wv.wide();
            }
        }
        out.extend(acc.iter().map(|&a| match activation {
            Activation::Relu if a < 0.0 => T::zero(),
            _ => T::of(a),
        }));
    }
    let shape = if batched { vec![batch, n_out] } else { vec![n_out] };
    Tensor::new(&shape, out)
}

/// Gradient of the linear part of [`dense`]; apply
/// [`relu_backward`](super::relu_backward) first when the layer used ReLU.
pub fn dense_backward<T: Element>(
    input: &Tensor<T>,
    p: &DenseParams<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    dense_backward_view(input, &p.view(), grad_out)
}

pub(crate) fn dense_backward_view<T: Element>(
    input: &Tensor<T>,
    p: &DenseView<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n_in, n_out) = p.dims()?;
    let (batch, batched) = rows(input, n_in)?;
    let expected = if batched { vec![batch, n_out] } else { vec![n_out] };
    same_shape(&expected, grad_out.shape())?;
    let w = p.weight.data();
    let mut gw = vec![0f64; n_in * n_out];
    let mut gb = vec![0f64; n_out];
    let mut gx = Vec::with_capacity(input.len());
    for (x, g) in input
        .data()
        .chunks_exact(n_in)
        .zip(grad_out.data().chunks_exact(n_out))
    {
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv.wide();
        }
        for (i, &xv) in x.iter().enumerate() {
            let xv = xv.wide();
            let wrow = &w[i * n_out..][..n_out];
            let gwrow = &mut gw[i * n_out..][..n_out];
            let mut dx = 0f64;
            for o in 0..n_out {
                let gv = g[o].wide();
                gwrow[o] += xv * gv;
                dx += wrow[o].wide() * gv;
            }
            gx.push(T::of(dx));
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(p.weight.shape(), narrow(gw))?,
        bias: Tensor::new(p.bias.shape(), narrow(gb))?,
    })
}
