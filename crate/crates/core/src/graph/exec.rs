//! Forward and backward execution of a [`ModelGraph`] against a
//! [`WeightStore`].

use thiserror::Error;

use super::{LayerOp, ModelGraph, WeightError, WeightStore};
use crate::rng::Rng;
use crate::tensor::{
    self, conv2d_backward_view, conv2d_view, depthwise_backward_view, depthwise_view,
    dense_backward_view, dense_view, Activation, BatchNormCache, BatchNormParams, ConvView,
    DenseView, DepthwiseView, Element, PoolKind, PoolSpec, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("input shape {actual:?} does not match the graph input {expected:?}")]
    Input {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    State(String),
}

type Result<T> = std::result::Result<T, ExecError>;

fn at<T>(layer: &str, r: std::result::Result<T, TensorError>) -> Result<T> {
    r.map_err(|source| ExecError::Layer {
        layer: layer.to_string(),
        source,
    })
}

/// Class probabilities for one `H x W x C` image.
pub fn forward_model<T: Element>(
    graph: &ModelGraph,
    store: &WeightStore<T>,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(&shape).map_err(|e| ExecError::Layer {
        layer: "input".into(),
        source: e,
    })?;
    let probs = forward_batch(graph, store, &batch)?;
    let n = probs.len();
    Ok(probs.reshape(&[n]).expect("single row"))
}

/// Inference-mode forward pass over an `N x H x W x C` batch, returning
/// `N x classes` probabilities. Batchnorm uses running statistics and
/// dropout is the identity. Weights are validated against the graph
/// before any compute.
pub fn forward_batch<T: Element>(
    graph: &ModelGraph,
    store: &WeightStore<T>,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    store.validate(graph)?;
    check_input(graph, batch)?;
    let mut acts: Vec<Option<Tensor<T>>> = vec![None; graph.layers().len()];
    let mut remaining = consumer_counts(graph);
    for (i, layer) in graph.layers().iter().enumerate() {
        let ins: Vec<&Tensor<T>> = graph
            .input_indices(i)
            .iter()
            .map(|&j| acts[j].as_ref().expect("kept until consumed"))
            .collect();
        let out = match &layer.op {
            LayerOp::Input { .. } => batch.clone(),
            LayerOp::BatchNorm { epsilon, momentum } => {
                let p = bn_params(store, &layer.name, *epsilon, *momentum)?;
                at(&layer.name, tensor::batchnorm(ins[0], &p))?
            }
            LayerOp::Dropout { .. } => ins[0].clone(),
            op => stateless_forward(&layer.name, op, store, &ins)?,
        };
        acts[i] = Some(out);
        // Drop activations no later layer needs to bound peak memory.
        for &j in graph.input_indices(i) {
            remaining[j] -= 1;
            if remaining[j] == 0 {
                acts[j] = None;
            }
        }
    }
    Ok(acts.pop().flatten().expect("softmax output"))
}

fn consumer_counts(graph: &ModelGraph) -> Vec<usize> {
    let mut counts = vec![0usize; graph.layers().len()];
    for i in 0..graph.layers().len() {
        for &j in graph.input_indices(i) {
            counts[j] += 1;
        }
    }
    counts
}

fn check_input<T: Element>(graph: &ModelGraph, batch: &Tensor<T>) -> Result<()> {
    let [h, w, c] = graph.input_shape();
    match *batch.shape() {
        [n, bh, bw, bc] if n > 0 && [bh, bw, bc] == [h, w, c] => Ok(()),
        _ => Err(ExecError::Input {
            expected: vec![h, w, c],
            actual: batch.shape().to_vec(),
        }),
    }
}

fn bn_params<T: Element>(
    store: &WeightStore<T>,
    layer: &str,
    epsilon: f64,
    momentum: f64,
) -> Result<BatchNormParams<T>> {
    Ok(BatchNormParams {
        gamma: store.require(layer, "gamma")?.clone(),
        beta: store.require(layer, "beta")?.clone(),
        running_mean: store.require(layer, "running_mean")?.clone(),
        running_var: store.require(layer, "running_var")?.clone(),
        epsilon,
        momentum,
    })
}

fn pool_spec(op: &LayerOp) -> PoolSpec {
    match *op {
        LayerOp::AvgPool { window, stride, padding } => PoolSpec {
            kind: PoolKind::Avg,
            window,
            stride,
            padding,
        },
        LayerOp::MaxPool { window, stride, padding } => PoolSpec {
            kind: PoolKind::Max,
            window,
            stride,
            padding,
        },
        _ => unreachable!("not a pool"),
    }
}

fn conv_view<'a, T: Element>(
    store: &'a WeightStore<T>,
    layer: &str,
    stride: usize,
    padding: usize,
) -> Result<ConvView<'a, T>> {
    Ok(ConvView {
        kernel: store.require(layer, "kernel")?,
        bias: store.require(layer, "bias")?,
        stride,
        padding,
    })
}

fn flatten<T: Element>(layer: &str, t: &Tensor<T>) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    at(layer, t.clone().reshape(&[n, t.len() / n.max(1)]))
}

/// Forward for every op whose behavior does not depend on the mode.
fn stateless_forward<T: Element>(
    name: &str,
    op: &LayerOp,
    store: &WeightStore<T>,
    ins: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    let x = ins[0];
    match *op {
        LayerOp::Conv { stride, padding, .. } => {
            at(name, conv2d_view(x, &conv_view(store, name, stride, padding)?))
        }
        LayerOp::Pointwise { .. } => at(name, conv2d_view(x, &conv_view(store, name, 1, 0)?)),
        LayerOp::Depthwise { stride, padding, .. } => {
            let v = DepthwiseView {
                kernel: store.require(name, "kernel")?,
                bias: store.require(name, "bias")?,
                stride,
                padding,
            };
            at(name, depthwise_view(x, &v))
        }
        LayerOp::Relu => Ok(tensor::relu(x)),
        LayerOp::AvgPool { .. } | LayerOp::MaxPool { .. } => at(name, tensor::pool(x, &pool_spec(op))),
        LayerOp::Dense { .. } => {
            let v = DenseView {
                weight: store.require(name, "weight")?,
                bias: store.require(name, "bias")?,
            };
            at(name, dense_view(&flatten(name, x)?, &v, Activation::None))
        }
        LayerOp::Softmax => at(name, tensor::softmax(x)),
        LayerOp::Concat => at(name, tensor::concat_channels(ins)),
        LayerOp::Add => at(name, tensor::add(ins[0], ins[1])),
        LayerOp::Input { .. } | LayerOp::BatchNorm { .. } | LayerOp::Dropout { .. } => {
            unreachable!("mode-dependent op")
        }
    }
}

enum Saved<T> {
    None,
    Norm(BatchNormCache<T>),
    Mask(Tensor<T>),
}

/// One training step's forward state: every activation plus the batchnorm
/// caches and dropout masks, so [`backward`](Self::backward) can run.
pub struct TrainingPass<T = f32> {
    acts: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
}

impl<T: Element> Default for TrainingPass<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> TrainingPass<T> {
    pub fn new() -> Self {
        TrainingPass {
            acts: Vec::new(),
            saved: Vec::new(),
        }
    }

    /// Training-mode forward: batchnorm uses batch statistics and updates
    /// the running statistics in `store`; dropout draws masks from `rng`.
    /// Returns the `N x classes` probabilities.
    pub fn forward(
        &mut self,
        graph: &ModelGraph,
        store: &mut WeightStore<T>,
        batch: &Tensor<T>,
        rng: &mut Rng,
    ) -> Result<&Tensor<T>> {
        store.validate(graph)?;
        check_input(graph, batch)?;
        self.acts.clear();
        self.saved.clear();
        for (i, layer) in graph.layers().iter().enumerate() {
            let name = layer.name.as_str();
            let ins: Vec<&Tensor<T>> = graph.input_indices(i).iter().map(|&j| &self.acts[j]).collect();
            let (out, saved) = match &layer.op {
                LayerOp::Input { .. } => (batch.clone(), Saved::None),
                LayerOp::BatchNorm { epsilon, momentum } => {
                    let mut p = bn_params(store, name, *epsilon, *momentum)?;
                    let (out, cache) = at(name, tensor::batchnorm_train(ins[0], &mut p))?;
                    *store.get_mut(name, "running_mean").expect("checked") = p.running_mean;
                    *store.get_mut(name, "running_var").expect("checked") = p.running_var;
                    (out, Saved::Norm(cache))
                }
                LayerOp::Dropout { rate } => {
                    let (out, mask) = at(name, tensor::dropout_train(ins[0], *rate, rng))?;
                    (out, Saved::Mask(mask))
                }
                op => (stateless_forward(name, op, store, &ins)?, Saved::None),
            };
            self.acts.push(out);
            self.saved.push(saved);
        }
        Ok(self.acts.last().expect("non-empty"))
    }

    pub fn probs(&self) -> Option<&Tensor<T>> {
        self.acts.last()
    }

    /// Mean cross-entropy of the last forward pass against `labels`.
    pub fn loss(&self, labels: &[usize]) -> Result<f64> {
        let probs = self.probs().ok_or_else(not_run)?;
        let classes = probs.shape()[1];
        check_labels(labels, probs.shape()[0], classes)?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| -(probs.data()[n * classes + y].wide().max(f64::MIN_POSITIVE)).ln())
            .sum();
        Ok(total / labels.len() as f64)
    }

    /// Gradients of the mean cross-entropy with respect to every learnable
    /// parameter, starting from `(probs - onehot) / N` at the logits.
    pub fn backward(
        &self,
        graph: &ModelGraph,
        store: &WeightStore<T>,
        labels: &[usize],
    ) -> Result<WeightStore<T>> {
        if self.acts.len() != graph.layers().len() {
            return Err(not_run());
        }
        let probs = self.acts.last().expect("non-empty");
        let (n, classes) = (probs.shape()[0], probs.shape()[1]);
        check_labels(labels, n, classes)?;
        let mut seed = probs.data().to_vec();
        for (row, &y) in labels.iter().enumerate() {
            seed[row * classes + y] = seed[row * classes + y] - T::one();
        }
        let scale = T::of(1.0 / n as f64);
        seed.iter_mut().for_each(|v| *v = *v * scale);

        let count = graph.layers().len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; count];
        let softmax = count - 1;
        let logits = graph.input_indices(softmax)[0];
        grads[logits] = Some(Tensor::new(probs.shape(), seed).expect("same shape"));

        let mut out = WeightStore::new();
        for i in (1..softmax).rev() {
            let Some(g) = grads[i].take() else { continue };
            let layer = &graph.layers()[i];
            let name = layer.name.as_str();
            let inputs = graph.input_indices(i);
            let x = &self.acts[inputs[0]];
            let to_inputs: Vec<Tensor<T>> = match &layer.op {
                LayerOp::Conv { stride, padding, .. } => {
                    let r = at(name, conv2d_backward_view(x, &conv_view(store, name, *stride, *padding)?, &g))?;
                    out.insert(name, "kernel", r.kernel);
                    out.insert(name, "bias", r.bias);
                    vec![r.input]
                }
                LayerOp::Pointwise { .. } => {
                    let r = at(name, conv2d_backward_view(x, &conv_view(store, name, 1, 0)?, &g))?;
                    out.insert(name, "kernel", r.kernel);
                    out.insert(name, "bias", r.bias);
                    vec![r.input]
                }
                LayerOp::Depthwise { stride, padding, .. } => {
                    let v = DepthwiseView {
                        kernel: store.require(name, "kernel")?,
                        bias: store.require(name, "bias")?,
                        stride: *stride,
                        padding: *padding,
                    };
                    let r = at(name, depthwise_backward_view(x, &v, &g))?;
                    out.insert(name, "kernel", r.kernel);
                    out.insert(name, "bias", r.bias);
                    vec![r.input]
                }
                LayerOp::BatchNorm { epsilon, momentum } => {
                    let Saved::Norm(cache) = &self.saved[i] else {
                        return Err(not_run());
                    };
                    let p = bn_params(store, name, *epsilon, *momentum)?;
                    let r = at(name, tensor::batchnorm_backward(&g, &p, cache))?;
                    out.insert(name, "gamma", r.gamma);
                    out.insert(name, "beta", r.beta);
                    vec![r.input]
                }
                LayerOp::Relu => vec![at(name, tensor::relu_backward(x, &g))?],
                LayerOp::AvgPool { .. } | LayerOp::MaxPool { .. } => {
                    vec![at(name, tensor::pool_backward(x, &pool_spec(&layer.op), &g))?]
                }
                LayerOp::Dense { .. } => {
                    let v = DenseView {
                        weight: store.require(name, "weight")?,
                        bias: store.require(name, "bias")?,
                    };
                    let r = at(name, dense_backward_view(&flatten(name, x)?, &v, &g))?;
                    out.insert(name, "weight", r.weight);
                    out.insert(name, "bias", r.bias);
                    vec![at(name, r.input.reshape(x.shape()))?]
                }
                LayerOp::Dropout { .. } => {
                    let Saved::Mask(mask) = &self.saved[i] else {
                        return Err(not_run());
                    };
                    vec![at(name, tensor::dropout_backward(mask, &g))?]
                }
                LayerOp::Concat => {
                    let channels: Vec<usize> = inputs
                        .iter()
                        .map(|&j| *self.acts[j].shape().last().expect("feature map"))
                        .collect();
                    at(name, tensor::concat_channels_backward(&g, &channels))?
                }
                LayerOp::Add => vec![g.clone(), g],
                LayerOp::Input { .. } | LayerOp::Softmax => unreachable!("outside the loop"),
            };
            for (&j, gj) in inputs.iter().zip(to_inputs) {
                match &mut grads[j] {
                    Some(acc) => at(name, acc.add_assign(&gj))?,
                    slot => *slot = Some(gj),
                }
            }
        }
        Ok(out)
    }
}

fn not_run() -> ExecError {
    ExecError::State("backward requires a completed training-mode forward pass".into())
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(ExecError::State(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(ExecError::Label { label, classes }),
        None => Ok(()),
    }
}
