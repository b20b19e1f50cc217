//! Declarative layer graphs.
//!
//! A [`ModelGraph`] is a topologically ordered list of [`LayerSpec`]s with
//! a single input node and a single softmax output. Construction validates
//! the graph and propagates shapes, so every layer's output shape is known
//! before any weights exist. The same graphs feed the efficiency analyzer
//! and the executor.

mod blocks;
mod exec;
mod text;
mod weights;

pub use blocks::{
    assemble_resmonet, BlockKind, GraphBuilder, HeadConfig, MobileConfig, ResMoNetConfig,
    ResidualConfig, StemConfig, TransitionConfig,
};
pub use exec::{forward_batch, forward_model, ExecError, TrainingPass};
pub use text::{format_graph, parse_graph};
pub use weights::{load_weights, load_weights_for, save_weights, ParamSpec, WeightError, WeightStore};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::tensor::{output_extent, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("layer `{layer}` references unknown input `{input}`")]
    UnknownInput { layer: String, input: String },
    #[error("layer `{layer}`: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        layer: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },
    #[error("invalid graph structure: {0}")]
    Structure(String),
    #[error("graph file line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl GraphError {
    fn layer(layer: &str, detail: impl Into<String>) -> Self {
        GraphError::Layer {
            layer: layer.to_string(),
            detail: detail.into(),
        }
    }
}

/// Kind-specific hyperparameters of a layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Input { h: usize, w: usize, c: usize },
    Conv { k: usize, stride: usize, padding: usize, c_out: usize },
    Depthwise { k: usize, stride: usize, padding: usize },
    Pointwise { c_out: usize },
    BatchNorm { epsilon: f64, momentum: f64 },
    Relu,
    AvgPool { window: usize, stride: usize, padding: usize },
    MaxPool { window: usize, stride: usize, padding: usize },
    /// Flattens any input to a vector before the affine map.
    Dense { units: usize },
    Dropout { rate: f64 },
    Softmax,
    /// Channel-axis concatenation.
    Concat,
    Add,
}

impl LayerOp {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerOp::Input { .. } => "input",
            LayerOp::Conv { .. } => "conv",
            LayerOp::Depthwise { .. } => "depthwise",
            LayerOp::Pointwise { .. } => "pointwise",
            LayerOp::BatchNorm { .. } => "batchnorm",
            LayerOp::Relu => "relu",
            LayerOp::AvgPool { .. } => "avgpool",
            LayerOp::MaxPool { .. } => "maxpool",
            LayerOp::Dense { .. } => "dense",
            LayerOp::Dropout { .. } => "dropout",
            LayerOp::Softmax => "softmax",
            LayerOp::Concat => "concat",
            LayerOp::Add => "add",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerOp::Conv { .. }
                | LayerOp::Depthwise { .. }
                | LayerOp::Pointwise { .. }
                | LayerOp::BatchNorm { .. }
                | LayerOp::Dense { .. }
        )
    }

    fn arity(&self) -> (usize, Option<usize>) {
        match self {
            LayerOp::Input { .. } => (0, Some(0)),
            LayerOp::Concat => (1, None),
            LayerOp::Add => (2, Some(2)),
            _ => (1, Some(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    /// Identifier of the architectural block this layer belongs to, e.g.
    /// `mobile1` or `residual0`.
    pub block: Option<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, op: LayerOp, inputs: &[&str]) -> Self {
        LayerSpec {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            block: None,
        }
    }

    pub fn in_block(mut self, block: impl Into<String>) -> Self {
        self.block = Some(block.into());
        self
    }

    pub fn kind(&self) -> &'static str {
        self.op.kind()
    }
}

/// Output shape of a layer for a single example: `[h, w, c]` for feature
/// maps or `[n]` for vectors.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureShape(pub Vec<usize>);

impl FeatureShape {
    pub fn elements(&self) -> usize {
        self.0.iter().product()
    }

    pub fn channels(&self) -> usize {
        *self.0.last().unwrap_or(&0)
    }

    fn spatial(&self, layer: &str) -> Result<(usize, usize, usize), GraphError> {
        match *self.0.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(GraphError::layer(
                layer,
                format!("expects an HxWxC feature map, got {:?}", self.0),
            )),
        }
    }
}

impl fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    shapes: Vec<FeatureShape>,
    input_indices: Vec<Vec<usize>>,
    input_shape: [usize; 3],
    num_classes: usize,
}

impl ModelGraph {
    /// Validates `layers` and propagates shapes.
    ///
    /// Layers must already be in topological order: every input refers to
    /// an earlier layer. The first layer is the only `input` node and the
    /// last is the only `softmax`.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, GraphError> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<FeatureShape> = Vec::with_capacity(layers.len());
        let mut input_indices = Vec::with_capacity(layers.len());

        let inputs = layers.iter().filter(|l| matches!(l.op, LayerOp::Input { .. })).count();
        if inputs != 1 {
            return Err(GraphError::Structure(format!(
                "expected exactly one input layer, found {inputs}"
            )));
        }
        let softmaxes = layers.iter().filter(|l| l.op == LayerOp::Softmax).count();
        if softmaxes != 1 || layers.last().map(|l| &l.op) != Some(&LayerOp::Softmax) {
            return Err(GraphError::Structure(
                "expected exactly one softmax layer, placed last".into(),
            ));
        }
        if !matches!(layers[0].op, LayerOp::Input { .. }) {
            return Err(GraphError::Structure("the first layer must be the input".into()));
        }

        for (i, layer) in layers.iter().enumerate() {
            if layer.name.is_empty() || layer.name.chars().any(|c| c.is_whitespace() || c == ',') {
                return Err(GraphError::layer(&layer.name, "invalid layer name"));
            }
            if index.insert(&layer.name, i).is_some() {
                return Err(GraphError::DuplicateName(layer.name.clone()));
            }
            let (min, max) = layer.op.arity();
            let n = layer.inputs.len();
            if n < min || max.is_some_and(|m| n > m) {
                return Err(GraphError::layer(
                    &layer.name,
                    format!("{} takes {} input(s), got {n}", layer.kind(), arity_text(min, max)),
                ));
            }
            let mut ids = Vec::with_capacity(n);
            for input in &layer.inputs {
                match index.get(input.as_str()) {
                    Some(&j) if j < i => ids.push(j),
                    _ => {
                        return Err(GraphError::UnknownInput {
                            layer: layer.name.clone(),
                            input: input.clone(),
                        })
                    }
                }
            }
            let in_shapes: Vec<&FeatureShape> = ids.iter().map(|&j| &shapes[j]).collect();
            shapes.push(infer_shape(layer, &in_shapes)?);
            input_indices.push(ids);
        }

        let input_shape = match layers[0].op {
            LayerOp::Input { h, w, c } => [h, w, c],
            _ => unreachable!("checked above"),
        };
        let output = shapes.last().expect("non-empty");
        if output.0.len() != 1 {
            return Err(GraphError::Structure(format!(
                "softmax must receive a vector, got {output}"
            )));
        }
        let num_classes = output.0[0];
        Ok(ModelGraph {
            layers,
            shapes,
            input_indices,
            input_shape,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Output shape of every layer, aligned with [`layers`](Self::layers).
    pub fn shapes(&self) -> &[FeatureShape] {
        &self.shapes
    }

    pub fn output_shape(&self, name: &str) -> Option<&FeatureShape> {
        self.layers.iter().position(|l| l.name == name).map(|i| &self.shapes[i])
    }

    pub(crate) fn input_indices(&self, layer: usize) -> &[usize] {
        &self.input_indices[layer]
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of distinct blocks whose identifier starts with `prefix`.
    pub fn count_blocks(&self, prefix: &str) -> usize {
        let mut ids: Vec<&str> = self
            .layers
            .iter()
            .filter_map(|l| l.block.as_deref())
            .filter(|b| b.starts_with(prefix))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    /// Mobile-depth: the number of Mobile blocks.
    pub fn mobile_depth(&self) -> usize {
        self.count_blocks("mobile")
    }

    /// Residual-depth: the number of Residual blocks.
    pub fn residual_depth(&self) -> usize {
        self.count_blocks("residual")
    }
}

fn arity_text(min: usize, max: Option<usize>) -> String {
    match max {
        Some(m) if m == min => min.to_string(),
        Some(m) => format!("{min}..{m}"),
        None => format!("at least {min}"),
    }
}

fn tensor_err(layer: &str, e: TensorError) -> GraphError {
    GraphError::layer(layer, e.to_string())
}

pub(crate) fn infer_shape(layer: &LayerSpec, inputs: &[&FeatureShape]) -> Result<FeatureShape, GraphError> {
    let name = layer.name.as_str();
    let positive = |v: usize, what: &str| {
        if v == 0 {
            Err(GraphError::layer(name, format!("{what} must be positive")))
        } else {
            Ok(v)
        }
    };
    let window = |h: usize, w: usize, k: usize, stride: usize, padding: usize| {
        let oh = output_extent("height", h, k, stride, padding).map_err(|e| tensor_err(name, e))?;
        let ow = output_extent("width", w, k, stride, padding).map_err(|e| tensor_err(name, e))?;
        Ok::<_, GraphError>((oh, ow))
    };

    Ok(match &layer.op {
        LayerOp::Input { h, w, c } => {
            FeatureShape(vec![positive(*h, "h")?, positive(*w, "w")?, positive(*c, "c")?])
        }
        LayerOp::Conv { k, stride, padding, c_out } => {
            let (h, w, _) = inputs[0].spatial(name)?;
            positive(*c_out, "c_out")?;
            let (oh, ow) = window(h, w, *k, *stride, *padding)?;
            FeatureShape(vec![oh, ow, *c_out])
        }
        LayerOp::Depthwise { k, stride, padding } => {
            let (h, w, c) = inputs[0].spatial(name)?;
            let (oh, ow) = window(h, w, *k, *stride, *padding)?;
            FeatureShape(vec![oh, ow, c])
        }
        LayerOp::Pointwise { c_out } => {
            let (h, w, _) = inputs[0].spatial(name)?;
            FeatureShape(vec![h, w, positive(*c_out, "c_out")?])
        }
        LayerOp::AvgPool { window: k, stride, padding }
        | LayerOp::MaxPool { window: k, stride, padding } => {
            let (h, w, c) = inputs[0].spatial(name)?;
            if padding >= k {
                return Err(GraphError::layer(name, "pool padding must be smaller than the window"));
            }
            let (oh, ow) = window(h, w, *k, *stride, *padding)?;
            FeatureShape(vec![oh, ow, c])
        }
        LayerOp::BatchNorm { epsilon, momentum } => {
            if !(*epsilon > 0.0) {
                return Err(GraphError::layer(name, "batchnorm epsilon must be positive"));
            }
            if !(*momentum > 0.0 && *momentum < 1.0) {
                return Err(GraphError::layer(name, "batchnorm momentum must lie in (0, 1)"));
            }
            inputs[0].clone()
        }
        LayerOp::Dropout { rate } => {
            if !(0.0..1.0).contains(rate) {
                return Err(GraphError::layer(name, "dropout rate must lie in [0, 1)"));
            }
            inputs[0].clone()
        }
        LayerOp::Relu => inputs[0].clone(),
        LayerOp::Dense { units } => FeatureShape(vec![positive(*units, "units")?]),
        LayerOp::Softmax => {
            if inputs[0].0.len() != 1 {
                return Err(GraphError::layer(name, "softmax expects a vector input"));
            }
            inputs[0].clone()
        }
        LayerOp::Add => {
            if inputs[0] != inputs[1] {
                return Err(GraphError::ShapeMismatch {
                    layer: name.to_string(),
                    left: inputs[0].0.clone(),
                    right: inputs[1].0.clone(),
                });
            }
            inputs[0].clone()
        }
        LayerOp::Concat => {
            let (h, w, _) = inputs[0].spatial(name)?;
            let mut c = 0;
            for s in inputs {
                let (sh, sw, sc) = s.spatial(name)?;
                if (sh, sw) != (h, w) {
                    return Err(GraphError::ShapeMismatch {
                        layer: name.to_string(),
                        left: inputs[0].0.clone(),
                        right: s.0.clone(),
                    });
                }
                c += sc;
            }
            FeatureShape(vec![h, w, c])
        }
    })
}
