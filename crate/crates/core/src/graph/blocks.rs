//! ResMoNet building blocks and the full network assembly.
//!
//! The network is Stem -> `m` Mobile blocks -> `r` Residual blocks ->
//! Transition -> Dense head -> softmax.
//!
//! * Stem: 3x3/2 conv, then two branches (1x1 conv -> 3x3/2 conv, and 2x2/2
//!   max pool) concatenated and fused by a 1x1 conv. Every conv is followed
//!   by batchnorm and ReLU.
//! * Mobile: depthwise conv, BN, ReLU, pointwise conv, BN, ReLU, average pool.
//! * Residual: two 3x3 conv + BN stages keeping the channel count, identity
//!   skip added before the final ReLU.
//! * Transition: conv, BN, ReLU, average pool.
//! * Dense head: dense + ReLU, dropout, dense to the class count.

use std::collections::HashMap;

use super::{infer_shape, FeatureShape, GraphError, LayerOp, LayerSpec, ModelGraph};
use crate::tensor::{DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemConfig {
    pub initial: usize,
    pub branch_mid: usize,
    pub branch_out: usize,
    pub fused: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MobileConfig {
    pub kernel: usize,
    pub c_out: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualConfig {
    pub kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionConfig {
    pub kernel: usize,
    pub c_out: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    Stem(StemConfig),
    Mobile(MobileConfig),
    Residual(ResidualConfig),
    Transition(TransitionConfig),
    DenseHead(HeadConfig),
}

/// Channel/filter profile and depths of a ResMoNet instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResMoNetConfig {
    pub input: [usize; 3],
    pub mobile_depth: usize,
    pub residual_depth: usize,
    pub stem: StemConfig,
    pub mobile: MobileConfig,
    pub residual: ResidualConfig,
    pub transition: TransitionConfig,
    pub head: HeadConfig,
}

impl Default for ResMoNetConfig {
    /// 224x224x3 input, m = r = 1, seven classes. Total parameter count is
    /// 1,712,055 (batchnorm running statistics included).
    fn default() -> Self {
        ResMoNetConfig {
            input: [224, 224, 3],
            mobile_depth: 1,
            residual_depth: 1,
            stem: StemConfig {
                initial: 32,
                branch_mid: 16,
                branch_out: 32,
                fused: 32,
            },
            mobile: MobileConfig {
                kernel: 3,
                c_out: 64,
                pool: 2,
            },
            residual: ResidualConfig { kernel: 3 },
            transition: TransitionConfig {
                kernel: 3,
                c_out: 32,
                pool: 2,
            },
            head: HeadConfig {
                hidden: 256,
                dropout: 0.5,
                num_classes: 7,
            },
        }
    }
}

impl ResMoNetConfig {
    /// Reduced profile for desk-scale experiments on small square inputs.
    pub fn desk(side: usize) -> Self {
        ResMoNetConfig {
            input: [side, side, 3],
            stem: StemConfig {
                initial: 8,
                branch_mid: 8,
                branch_out: 8,
                fused: 16,
            },
            mobile: MobileConfig {
                kernel: 3,
                c_out: 24,
                pool: 2,
            },
            transition: TransitionConfig {
                kernel: 3,
                c_out: 24,
                pool: 2,
            },
            head: HeadConfig {
                hidden: 64,
                dropout: 0.3,
                num_classes: 7,
            },
            ..Self::default()
        }
    }

    pub fn with_depths(mut self, m: usize, r: usize) -> Self {
        self.mobile_depth = m;
        self.residual_depth = r;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.head.num_classes = n;
        self
    }
}

/// Incrementally builds a validated layer list.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    shapes: HashMap<String, FeatureShape>,
}

impl GraphBuilder {
    /// Starts a graph with an input layer named `input`.
    pub fn new(input: [usize; 3]) -> Result<Self, GraphError> {
        let mut b = GraphBuilder {
            layers: Vec::new(),
            shapes: HashMap::new(),
        };
        let [h, w, c] = input;
        b.push(LayerSpec::new("input", LayerOp::Input { h, w, c }, &[]))?;
        Ok(b)
    }

    pub fn shape_of(&self, name: &str) -> Option<&FeatureShape> {
        self.shapes.get(name)
    }

    pub fn last(&self) -> &str {
        &self.layers.last().expect("builder always has an input").name
    }

    pub fn push(&mut self, spec: LayerSpec) -> Result<FeatureShape, GraphError> {
        if self.shapes.contains_key(&spec.name) {
            return Err(GraphError::DuplicateName(spec.name));
        }
        let mut inputs = Vec::with_capacity(spec.inputs.len());
        for input in &spec.inputs {
            inputs.push(self.shapes.get(input).ok_or_else(|| GraphError::UnknownInput {
                layer: spec.name.clone(),
                input: input.clone(),
            })?);
        }
        let shape = infer_shape(&spec, &inputs)?;
        self.shapes.insert(spec.name.clone(), shape.clone());
        self.layers.push(spec);
        Ok(shape)
    }

    fn conv_bn_relu(
        &mut self,
        prefix: &str,
        block: &str,
        input: &str,
        op: LayerOp,
    ) -> Result<String, GraphError> {
        self.push(LayerSpec::new(prefix, op, &[input]).in_block(block))?;
        let bn = format!("{prefix}_bn");
        self.push(LayerSpec::new(&bn, batchnorm(), &[prefix]).in_block(block))?;
        let relu = format!("{prefix}_relu");
        self.push(LayerSpec::new(&relu, LayerOp::Relu, &[&bn]).in_block(block))?;
        Ok(relu)
    }

    /// Appends one block fed by `entry`, naming its layers `<id>_*`, and
    /// returns the appended layers. The block output is the last of them.
    pub fn build_block(
        &mut self,
        kind: &BlockKind,
        entry: &str,
        id: &str,
    ) -> Result<Vec<LayerSpec>, GraphError> {
        let entry_shape = self
            .shape_of(entry)
            .ok_or_else(|| GraphError::UnknownInput {
                layer: id.to_string(),
                input: entry.to_string(),
            })?
            .clone();
        let start = self.layers.len();
        let p = |part: &str| format!("{id}_{part}");
        match *kind {
            BlockKind::Stem(cfg) => {
                let stem = self.conv_bn_relu(&p("conv"), id, entry, conv(3, 2, 1, cfg.initial))?;
                let mid = self.conv_bn_relu(&p("branch_a1"), id, &stem, conv(1, 1, 0, cfg.branch_mid))?;
                let a = self.conv_bn_relu(&p("branch_a2"), id, &mid, conv(3, 2, 1, cfg.branch_out))?;
                let b = p("branch_b_pool");
                self.push(
                    LayerSpec::new(&b, LayerOp::MaxPool { window: 2, stride: 2, padding: 0 }, &[&stem])
                        .in_block(id),
                )?;
                let cat = p("concat");
                self.push(LayerSpec::new(&cat, LayerOp::Concat, &[&a, &b]).in_block(id))?;
                self.conv_bn_relu(&p("fuse"), id, &cat, conv(1, 1, 0, cfg.fused))?;
            }
            BlockKind::Mobile(cfg) => {
                let dw = self.conv_bn_relu(
                    &p("dw"),
                    id,
                    entry,
                    LayerOp::Depthwise {
                        k: cfg.kernel,
                        stride: 1,
                        padding: cfg.kernel / 2,
                    },
                )?;
                let pw = self.conv_bn_relu(&p("pw"), id, &dw, LayerOp::Pointwise { c_out: cfg.c_out })?;
                self.push(LayerSpec::new(p("pool"), avgpool(cfg.pool), &[&pw]).in_block(id))?;
            }
            BlockKind::Residual(cfg) => {
                let c = entry_shape.channels();
                let same = |k: usize| conv(k, 1, k / 2, c);
                let a = self.conv_bn_relu(&p("conv1"), id, entry, same(cfg.kernel))?;
                let conv2 = p("conv2");
                self.push(LayerSpec::new(&conv2, same(cfg.kernel), &[&a]).in_block(id))?;
                let bn2 = p("conv2_bn");
                self.push(LayerSpec::new(&bn2, batchnorm(), &[&conv2]).in_block(id))?;
                let add = p("add");
                self.push(LayerSpec::new(&add, LayerOp::Add, &[entry, &bn2]).in_block(id))?;
                self.push(LayerSpec::new(p("relu"), LayerOp::Relu, &[&add]).in_block(id))?;
            }
            BlockKind::Transition(cfg) => {
                let c = self.conv_bn_relu(
                    &p("conv"),
                    id,
                    entry,
                    conv(cfg.kernel, 1, cfg.kernel / 2, cfg.c_out),
                )?;
                self.push(LayerSpec::new(p("pool"), avgpool(cfg.pool), &[&c]).in_block(id))?;
            }
            BlockKind::DenseHead(cfg) => {
                let fc1 = p("fc1");
                self.push(LayerSpec::new(&fc1, LayerOp::Dense { units: cfg.hidden }, &[entry]).in_block(id))?;
                let relu = p("fc1_relu");
                self.push(LayerSpec::new(&relu, LayerOp::Relu, &[&fc1]).in_block(id))?;
                let drop = p("dropout");
                self.push(
                    LayerSpec::new(&drop, LayerOp::Dropout { rate: cfg.dropout }, &[&relu]).in_block(id),
                )?;
                self.push(
                    LayerSpec::new(p("fc2"), LayerOp::Dense { units: cfg.num_classes }, &[&drop])
                        .in_block(id),
                )?;
            }
        }
        Ok(self.layers[start..].to_vec())
    }

    pub fn finish(self) -> Result<ModelGraph, GraphError> {
        ModelGraph::new(self.layers)
    }
}

fn conv(k: usize, stride: usize, padding: usize, c_out: usize) -> LayerOp {
    LayerOp::Conv {
        k,
        stride,
        padding,
        c_out,
    }
}

fn batchnorm() -> LayerOp {
    LayerOp::BatchNorm {
        epsilon: DEFAULT_BN_EPSILON,
        momentum: DEFAULT_BN_MOMENTUM,
    }
}

fn avgpool(window: usize) -> LayerOp {
    LayerOp::AvgPool {
        window,
        stride: window,
        padding: 0,
    }
}

pub fn assemble_resmonet(cfg: &ResMoNetConfig) -> Result<ModelGraph, GraphError> {
    if cfg.mobile_depth == 0 || cfg.residual_depth == 0 {
        return Err(GraphError::Structure(
            "mobile and residual depths must both be at least 1".into(),
        ));
    }
    let mut b = GraphBuilder::new(cfg.input)?;
    let exit = |b: &mut GraphBuilder, kind: BlockKind, id: &str| -> Result<(), GraphError> {
        let entry = b.last().to_string();
        b.build_block(&kind, &entry, id)?;
        Ok(())
    };
    exit(&mut b, BlockKind::Stem(cfg.stem), "stem")?;
    for i in 0..cfg.mobile_depth {
        exit(&mut b, BlockKind::Mobile(cfg.mobile), &format!("mobile{i}"))?;
    }
    for i in 0..cfg.residual_depth {
        exit(&mut b, BlockKind::Residual(cfg.residual), &format!("residual{i}"))?;
    }
    exit(&mut b, BlockKind::Transition(cfg.transition), "transition")?;
    exit(&mut b, BlockKind::DenseHead(cfg.head), "head")?;
    let last = b.last().to_string();
    b.push(LayerSpec::new("softmax", LayerOp::Softmax, &[&last]))?;
    b.finish()
}
