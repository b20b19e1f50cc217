//! Static parameter and multiply-add accounting for model graphs.
//!
//! NP counts every stored scalar: convolution and dense kernels plus
//! biases, and `4c` per batchnorm (gamma, beta and both running
//! statistics). The learnable-only subtotal (`2c` per batchnorm) is
//! reported alongside.
//!
//! Two multiply-add conventions are supported:
//!
//! * [`Convention::PerWeight`]: two operations per non-bias weight of a
//!   convolution or dense layer, plus `2c` per batchnorm. This tracks the
//!   2 x NP relation of published compact-model tables.
//! * [`Convention::PerActivation`]: the usual inference cost,
//!   `k*k*c_in*c_out*H'*W'` per convolution, `k*k*c*H'*W'` per depthwise
//!   convolution and `n_in*n_out` per dense layer. Batchnorm, pooling and
//!   elementwise layers cost nothing under this convention.

use std::fmt::Write as _;
use std::io;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{LayerOp, ModelGraph};

#[derive(Debug, Error)]
pub enum AnalyzerError {
    #[error("unknown mult-add convention `{0}` (expected per-weight or per-activation)")]
    UnknownConvention(String),
    #[error("report i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    PerWeight,
    PerActivation,
}

impl FromStr for Convention {
    type Err = AnalyzerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "per-weight" | "weight" => Ok(Convention::PerWeight),
            "per-activation" | "activation" => Ok(Convention::PerActivation),
            _ => Err(AnalyzerError::UnknownConvention(s.to_string())),
        }
    }
}

/// Cost of a single layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub np: u64,
    pub np_learnable: u64,
    pub bias: u64,
    pub multadds_per_weight: u64,
    pub multadds_per_activation: u64,
}

impl LayerCost {
    pub fn multadds(&self, convention: Convention) -> u64 {
        match convention {
            Convention::PerWeight => self.multadds_per_weight,
            Convention::PerActivation => self.multadds_per_activation,
        }
    }
}

/// Costs of every layer of `graph`, in graph order. Parameter-free layers
/// appear with zero cost.
pub fn layer_costs(graph: &ModelGraph) -> Vec<LayerCost> {
    let shapes = graph.shapes();
    graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let input = graph.input_indices(i).first().map(|&j| &shapes[j]);
            let out = &shapes[i];
            let spatial = || (out.0[0] * out.0[1]) as u64;
            let mut cost = LayerCost {
                name: layer.name.clone(),
                kind: layer.kind(),
                np: 0,
                np_learnable: 0,
                bias: 0,
                multadds_per_weight: 0,
                multadds_per_activation: 0,
            };
            let (weights, bias, activation_ops) = match layer.op {
                LayerOp::Conv { k, c_out, .. } => {
                    let c_in = input.expect("validated").channels() as u64;
                    let w = (k * k) as u64 * c_in * c_out as u64;
                    (w, c_out as u64, w * spatial())
                }
                LayerOp::Pointwise { c_out } => {
                    let c_in = input.expect("validated").channels() as u64;
                    let w = c_in * c_out as u64;
                    (w, c_out as u64, w * spatial())
                }
                LayerOp::Depthwise { k, .. } => {
                    let c = input.expect("validated").channels() as u64;
                    let w = (k * k) as u64 * c;
                    (w, c, w * spatial())
                }
                LayerOp::Dense { units } => {
                    let n_in = input.expect("validated").elements() as u64;
                    let w = n_in * units as u64;
                    (w, units as u64, w)
                }
                LayerOp::BatchNorm { .. } => {
                    let c = out.channels() as u64;
                    cost.np = 4 * c;
                    cost.np_learnable = 2 * c;
                    cost.multadds_per_weight = 2 * c;
                    return cost;
                }
                _ => return cost,
            };
            cost.np = weights + bias;
            cost.np_learnable = cost.np;
            cost.bias = bias;
            cost.multadds_per_weight = 2 * weights;
            cost.multadds_per_activation = activation_ops;
            cost
        })
        .collect()
}

/// Per-layer and total values of one metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
}

fn tally(graph: &ModelGraph, f: impl Fn(&LayerCost) -> u64) -> Tally {
    let per_layer: Vec<(String, u64)> = layer_costs(graph)
        .into_iter()
        .map(|c| {
            let v = f(&c);
            (c.name, v)
        })
        .collect();
    let total = per_layer.iter().map(|(_, v)| v).sum();
    Tally { per_layer, total }
}

/// NP per layer and in total (batchnorm counted as `4c`).
pub fn count_params(graph: &ModelGraph) -> Tally {
    tally(graph, |c| c.np)
}

pub fn count_multadds(graph: &ModelGraph, convention: Convention) -> Tally {
    tally(graph, |c| c.multadds(convention))
}

/// Values measured on a trained model, all optional.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Measured {
    pub accuracy: Option<f64>,
    pub rte_s: Option<f64>,
    pub mmu_mb: Option<f64>,
}

/// One row of an efficiency table.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub model: String,
    pub layers: Vec<LayerCost>,
    pub total_np: u64,
    pub total_np_learnable: u64,
    pub total_bias: u64,
    pub multadds_per_weight: u64,
    pub multadds_per_activation: u64,
    pub measured: Measured,
}

impl EfficiencyReport {
    pub fn new(model: impl Into<String>, graph: &ModelGraph, measured: Measured) -> Self {
        let layers = layer_costs(graph);
        let sum = |f: fn(&LayerCost) -> u64| layers.iter().map(f).sum();
        EfficiencyReport {
            model: model.into(),
            total_np: sum(|c| c.np),
            total_np_learnable: sum(|c| c.np_learnable),
            total_bias: sum(|c| c.bias),
            multadds_per_weight: sum(|c| c.multadds_per_weight),
            multadds_per_activation: sum(|c| c.multadds_per_activation),
            layers,
            measured,
        }
    }

    pub fn multadds(&self, convention: Convention) -> u64 {
        match convention {
            Convention::PerWeight => self.multadds_per_weight,
            Convention::PerActivation => self.multadds_per_activation,
        }
    }
}

const MISSING: &str = "-";

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.digits$}"))
}

pub const CSV_HEADER: &str =
    "model,np,multadds_per_weight,multadds_per_activation,accuracy,rte_s,mmu_mb";

/// Machine-readable rendering, one row per report in input order.
pub fn write_csv<W: io::Write>(reports: &[EfficiencyReport], mut out: W) -> Result<(), AnalyzerError> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.model),
            r.total_np,
            r.multadds_per_weight,
            r.multadds_per_activation,
            opt(r.measured.accuracy, 4),
            opt(r.measured.rte_s, 4),
            opt(r.measured.mmu_mb, 2),
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Text table with the columns Model, NP, Mult-Add Ops, Accuracy, RTE and
/// MMU. `convention` selects the Mult-Add column.
pub fn render_table(reports: &[EfficiencyReport], convention: Convention) -> String {
    let header = ["Model", "NP", "Mult-Add Ops.", "Accuracy", "RTE (s)", "MMU (MB)"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                group(r.total_np),
                group(r.multadds(convention)),
                opt(r.measured.accuracy, 2),
                opt(r.measured.rte_s, 3),
                opt(r.measured.mmu_mb, 2),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            if i == 0 {
                let _ = write!(out, "{cell}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "  {}{cell}", " ".repeat(pad));
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

/// Per-layer breakdown of one report.
pub fn render_layers(report: &EfficiencyReport) -> String {
    let mut out = format!(
        "{:<28} {:<10} {:>12} {:>14} {:>16}\n",
        "layer", "kind", "np", "ma_per_weight", "ma_per_activation"
    );
    for c in report.layers.iter().filter(|c| c.np > 0) {
        let _ = writeln!(
            out,
            "{:<28} {:<10} {:>12} {:>14} {:>16}",
            c.name, c.kind, c.np, c.multadds_per_weight, c.multadds_per_activation
        );
    }
    let _ = writeln!(
        out,
        "total np {} (learnable {}), biases {}",
        report.total_np, report.total_np_learnable, report.total_bias
    );
    out
}

/// Thousands-grouped integer, e.g. `1,712,055`.
pub fn group(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// A published (NP, Mult-Add) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub model: &'static str,
    pub np: u64,
    pub multadds: u64,
    pub accuracy: f64,
    pub rte_s: f64,
    pub mmu_mb: f64,
}

impl PublishedRow {
    /// `|2*NP - MultAdds| / MultAdds`.
    pub fn per_weight_residual(&self) -> f64 {
        (2.0 * self.np as f64 - self.multadds as f64).abs() / self.multadds as f64
    }
}

/// Reference efficiency figures for ResMoNet and the baselines it was
/// compared against. RTE and MMU were measured on an embedded board.
pub const PUBLISHED: [PublishedRow; 6] = [
    PublishedRow { model: "IDNN", np: 16_158_790, multadds: 32_302_489, accuracy: 0.92, rte_s: 0.33, mmu_mb: 296.45 },
    PublishedRow { model: "EDNN", np: 4_621_638, multadds: 9_235_929, accuracy: 0.95, rte_s: 0.15, mmu_mb: 245.86 },
    PublishedRow { model: "1.0 MobileNet", np: 3_235_014, multadds: 6_481_263, accuracy: 0.55, rte_s: 1.17, mmu_mb: 282.32 },
    PublishedRow { model: "0.75 MobileNet", np: 1_837_590, multadds: 3_683_679, accuracy: 0.48, rte_s: 0.99, mmu_mb: 274.43 },
    PublishedRow { model: "PeleeNet", np: 2_123_502, multadds: 4_239_183, accuracy: 0.84, rte_s: 0.44, mmu_mb: 457.42 },
    PublishedRow { model: "ResMoNet", np: 1_721_614, multadds: 3_439_778, accuracy: 0.90, rte_s: 0.16, mmu_mb: 235.62 },
];
