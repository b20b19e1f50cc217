//! Named parameter storage and the binary weights format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic "RMNW" | u16 version (1) | u32 layer count
//! per layer:  u16 name length | name (UTF-8) | u8 tensor count
//! per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{LayerOp, ModelGraph};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"RMNW";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum WeightError {
    #[error("weights i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u16),
    #[error("weights file is truncated")]
    Truncated,
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error("layer `{layer}` is missing parameter `{param}`")]
    Missing { layer: String, param: String },
    #[error("layer `{layer}` parameter `{param}`: expected shape {expected:?}, found {actual:?}")]
    ShapeMismatch {
        layer: String,
        param: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("weights contain `{layer}`.`{param}` which the graph does not define")]
    Unexpected { layer: String, param: String },
}

/// Shape and role of one parameter tensor required by a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub layer: String,
    pub param: &'static str,
    pub shape: Vec<usize>,
    /// Updated by the optimizer (false for batchnorm running statistics).
    pub learnable: bool,
    /// Inputs feeding each output unit, used by weight initialization.
    pub fan_in: usize,
}

impl ParamSpec {
    /// Every parameter tensor the graph needs, in layer order.
    pub fn for_graph(graph: &ModelGraph) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (i, layer) in graph.layers().iter().enumerate() {
            let input = graph
                .input_indices(i)
                .first()
                .map(|&j| &graph.shapes()[j]);
            let mut push = |param, shape: Vec<usize>, learnable, fan_in| {
                out.push(ParamSpec {
                    layer: layer.name.clone(),
                    param,
                    shape,
                    learnable,
                    fan_in,
                })
            };
            match layer.op {
                LayerOp::Conv { k, c_out, .. } => {
                    let c_in = input.expect("validated").channels();
                    push("kernel", vec![k, k, c_in, c_out], true, k * k * c_in);
                    push("bias", vec![c_out], true, 0);
                }
                LayerOp::Pointwise { c_out } => {
                    let c_in = input.expect("validated").channels();
                    push("kernel", vec![1, 1, c_in, c_out], true, c_in);
                    push("bias", vec![c_out], true, 0);
                }
                LayerOp::Depthwise { k, .. } => {
                    let c = input.expect("validated").channels();
                    push("kernel", vec![k, k, c], true, k * k);
                    push("bias", vec![c], true, 0);
                }
                LayerOp::BatchNorm { .. } => {
                    let c = input.expect("validated").channels();
                    push("gamma", vec![c], true, 0);
                    push("beta", vec![c], true, 0);
                    push("running_mean", vec![c], false, 0);
                    push("running_var", vec![c], false, 0);
                }
                LayerOp::Dense { units } => {
                    let n_in = input.expect("validated").elements();
                    push("weight", vec![n_in, units], true, n_in);
                    push("bias", vec![units], true, 0);
                }
                _ => {}
            }
        }
        out
    }

    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parameters keyed by layer name, then parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore<T = f32> {
    layers: BTreeMap<String, BTreeMap<String, Tensor<T>>>,
}

impl<T: Element> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            layers: BTreeMap::new(),
        }
    }

    /// He-uniform kernels (limit `sqrt(6 / fan_in)`), zero biases, and
    /// identity batchnorm.
    pub fn init(graph: &ModelGraph, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = Self::new();
        for spec in ParamSpec::for_graph(graph) {
            let n = spec.elements();
            let data: Vec<T> = match spec.param {
                "kernel" | "weight" => {
                    let limit = (6.0 / spec.fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(rng.uniform(-limit, limit))).collect()
                }
                "gamma" | "running_var" => vec![T::one(); n],
                _ => vec![T::zero(); n],
            };
            store.insert(&spec.layer, spec.param, Tensor::new(&spec.shape, data).expect("sized"));
        }
        store
    }

    /// All parameters set to zero, with the shapes the graph expects.
    pub fn zeros(graph: &ModelGraph) -> Self {
        Self::zeros_for(&ParamSpec::for_graph(graph))
    }

    /// Zero tensors for the learnable parameters only: the shape of a
    /// gradient or optimizer state.
    pub fn zeros_learnable(graph: &ModelGraph) -> Self {
        let specs: Vec<ParamSpec> = ParamSpec::for_graph(graph)
            .into_iter()
            .filter(|s| s.learnable)
            .collect();
        Self::zeros_for(&specs)
    }

    fn zeros_for(specs: &[ParamSpec]) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(&spec.layer, spec.param, Tensor::zeros(&spec.shape).expect("sized"));
        }
        store
    }

    pub fn insert(&mut self, layer: &str, param: &str, value: Tensor<T>) {
        self.layers
            .entry(layer.to_string())
            .or_default()
            .insert(param.to_string(), value);
    }

    pub fn get(&self, layer: &str, param: &str) -> Option<&Tensor<T>> {
        self.layers.get(layer)?.get(param)
    }

    pub fn get_mut(&mut self, layer: &str, param: &str) -> Option<&mut Tensor<T>> {
        self.layers.get_mut(layer)?.get_mut(param)
    }

    pub fn require(&self, layer: &str, param: &str) -> Result<&Tensor<T>, WeightError> {
        self.get(layer, param).ok_or_else(|| WeightError::Missing {
            layer: layer.to_string(),
            param: param.to_string(),
        })
    }

    /// `(layer, param, tensor)` triples in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor<T>)> {
        self.layers.iter().flat_map(|(l, params)| {
            params.iter().map(move |(p, t)| (l.as_str(), p.as_str(), t))
        })
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Tensor<T>)> {
        self.layers.iter_mut().flat_map(|(l, params)| {
            params.iter_mut().map(move |(p, t)| (l.as_str(), p.as_str(), t))
        })
    }

    /// Total number of scalars stored.
    pub fn scalar_count(&self) -> usize {
        self.iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|(_, _, t)| t.all_finite())
    }

    pub fn cast<U: Element>(&self) -> WeightStore<U> {
        let mut out = WeightStore::new();
        for (l, p, t) in self.iter() {
            out.insert(l, p, t.cast());
        }
        out
    }

    /// Checks that the store holds exactly the parameters `graph` needs.
    pub fn validate(&self, graph: &ModelGraph) -> Result<(), WeightError> {
        let specs = ParamSpec::for_graph(graph);
        for spec in &specs {
            let t = self.require(&spec.layer, spec.param)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(WeightError::ShapeMismatch {
                    layer: spec.layer.clone(),
                    param: spec.param.to_string(),
                    expected: spec.shape.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        for (l, p, _) in self.iter() {
            if !specs.iter().any(|s| s.layer == l && s.param == p) {
                return Err(WeightError::Unexpected {
                    layer: l.to_string(),
                    param: p.to_string(),
                });
            }
        }
        Ok(())
    }
}

impl WeightStore<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>, WeightError> {
        let mut out = Vec::with_capacity(16 + 4 * self.scalar_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for (layer, params) in &self.layers {
            put_name(&mut out, layer)?;
            let count = u8::try_from(params.len())
                .map_err(|_| WeightError::Malformed(format!("layer `{layer}` has too many tensors")))?;
            out.push(count);
            for (name, t) in params {
                put_name(&mut out, name)?;
                let rank = u8::try_from(t.rank())
                    .map_err(|_| WeightError::Malformed(format!("tensor `{name}` rank too large")))?;
                out.push(rank);
                for &d in t.shape() {
                    let d = u32::try_from(d)
                        .map_err(|_| WeightError::Malformed(format!("tensor `{name}` too large")))?;
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightError> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(WeightError::BadMagic);
        }
        if r.take(4)? != MAGIC {
            return Err(WeightError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(WeightError::UnsupportedVersion(version));
        }
        let layers = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..layers {
            let layer = r.name()?;
            let count = r.u8()?;
            for _ in 0..count {
                let param = r.name()?;
                let rank = r.u8()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| WeightError::Malformed("tensor size overflows".into()))?;
                let raw = r.take(n.checked_mul(4).ok_or(WeightError::Truncated)?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::new(&shape, data).map_err(|e| WeightError::Malformed(e.to_string()))?;
                if store.get(&layer, &param).is_some() {
                    return Err(WeightError::Malformed(format!(
                        "duplicate tensor `{layer}`.`{param}`"
                    )));
                }
                store.insert(&layer, &param, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightError::Malformed("trailing bytes after the last tensor".into()));
        }
        Ok(store)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<(), WeightError> {
    let len = u16::try_from(name.len())
        .map_err(|_| WeightError::Malformed(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightError> {
        let end = self.pos.checked_add(n).ok_or(WeightError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WeightError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WeightError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, WeightError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn name(&mut self) -> Result<String, WeightError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| WeightError::Malformed("name is not UTF-8".into()))
    }
}

pub fn save_weights(store: &WeightStore, path: &Path) -> Result<(), WeightError> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightStore, WeightError> {
    WeightStore::from_bytes(&fs::read(path)?)
}

/// Loads weights and checks them against `graph`.
pub fn load_weights_for(path: &Path, graph: &ModelGraph) -> Result<WeightStore, WeightError> {
    let store = load_weights(path)?;
    store.validate(graph)?;
    Ok(store)
}
