//! Plain-text graph files.
//!
//! One layer per line, `#` starts a comment:
//!
//! ```text
//! input input h=224 w=224 c=3
//! stem_conv conv k=3 stride=2 pad=1 c_out=32 block=stem <- input
//! ```
//!
//! Keys per kind: `input` h w c; `conv` k stride pad c_out; `depthwise`
//! k stride pad; `pointwise` c_out; `batchnorm` eps momentum; `avgpool` and
//! `maxpool` k stride pad; `dense` units; `dropout` rate. Any layer may
//! carry `block=<id>`. `stride` defaults to 1 for convolutions and to the
//! window for pools, `pad` to 0, and the batchnorm keys to the library
//! defaults.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{GraphError, LayerOp, LayerSpec, ModelGraph};
use crate::tensor::{DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};

pub fn parse_graph(text: &str) -> Result<ModelGraph, GraphError> {
    let mut layers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        layers.push(parse_line(line).map_err(|message| GraphError::Parse {
            line: line_no,
            message,
        })?);
    }
    ModelGraph::new(layers)
}

fn parse_line(line: &str) -> Result<LayerSpec, String> {
    let (decl, inputs) = match line.split_once("<-") {
        Some((d, i)) => (d.trim(), Some(i.trim())),
        None => (line, None),
    };
    let mut tokens = decl.split_whitespace();
    let name = tokens.next().ok_or("missing layer name")?.to_string();
    let kind = tokens.next().ok_or_else(|| format!("layer `{name}` is missing its kind"))?;
    let mut keys = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
        if keys.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("duplicate key `{k}`"));
        }
    }
    let block = keys.remove("block");
    let mut kv = Keys { keys };
    let op = match kind {
        "input" => LayerOp::Input {
            h: kv.usize("h")?,
            w: kv.usize("w")?,
            c: kv.usize("c")?,
        },
        "conv" => LayerOp::Conv {
            k: kv.usize("k")?,
            stride: kv.usize_or("stride", 1)?,
            padding: kv.usize_or("pad", 0)?,
            c_out: kv.usize("c_out")?,
        },
        "depthwise" => LayerOp::Depthwise {
            k: kv.usize("k")?,
            stride: kv.usize_or("stride", 1)?,
            padding: kv.usize_or("pad", 0)?,
        },
        "pointwise" => LayerOp::Pointwise {
            c_out: kv.usize("c_out")?,
        },
        "batchnorm" => LayerOp::BatchNorm {
            epsilon: kv.f64_or("eps", DEFAULT_BN_EPSILON)?,
            momentum: kv.f64_or("momentum", DEFAULT_BN_MOMENTUM)?,
        },
        "relu" => LayerOp::Relu,
        "avgpool" | "maxpool" => {
            let window = kv.usize("k")?;
            let stride = kv.usize_or("stride", window)?;
            let padding = kv.usize_or("pad", 0)?;
            if kind == "avgpool" {
                LayerOp::AvgPool { window, stride, padding }
            } else {
                LayerOp::MaxPool { window, stride, padding }
            }
        }
        "dense" => LayerOp::Dense {
            units: kv.usize("units")?,
        },
        "dropout" => LayerOp::Dropout {
            rate: kv.f64_or("rate", 0.5)?,
        },
        "softmax" => LayerOp::Softmax,
        "concat" => LayerOp::Concat,
        "add" => LayerOp::Add,
        other => return Err(format!("unknown layer kind `{other}`")),
    };
    if let Some(extra) = kv.keys.keys().next() {
        return Err(format!("unknown key `{extra}` for {kind}"));
    }
    let inputs = match inputs {
        Some(list) if !list.is_empty() => list.split(',').map(|s| s.trim().to_string()).collect(),
        Some(_) => return Err("empty input list after `<-`".into()),
        None => Vec::new(),
    };
    Ok(LayerSpec {
        name,
        op,
        inputs,
        block,
    })
}

struct Keys {
    keys: BTreeMap<String, String>,
}

impl Keys {
    fn usize(&mut self, key: &str) -> Result<usize, String> {
        let v = self.keys.remove(key).ok_or_else(|| format!("missing key `{key}`"))?;
        v.parse().map_err(|_| format!("`{key}` must be a non-negative integer, got `{v}`"))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, String> {
        if self.keys.contains_key(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, String> {
        match self.keys.remove(key) {
            Some(v) => v.parse().map_err(|_| format!("`{key}` must be a number, got `{v}`")),
            None => Ok(default),
        }
    }
}

/// Renders a graph in the text format; [`parse_graph`] reads it back to an
/// identical graph.
pub fn format_graph(graph: &ModelGraph) -> String {
    let mut out = String::new();
    for layer in graph.layers() {
        let _ = write!(out, "{} {}", layer.name, layer.kind());
        match &layer.op {
            LayerOp::Input { h, w, c } => {
                let _ = write!(out, " h={h} w={w} c={c}");
            }
            LayerOp::Conv { k, stride, padding, c_out } => {
                let _ = write!(out, " k={k} stride={stride} pad={padding} c_out={c_out}");
            }
            LayerOp::Depthwise { k, stride, padding } => {
                let _ = write!(out, " k={k} stride={stride} pad={padding}");
            }
            LayerOp::Pointwise { c_out } => {
                let _ = write!(out, " c_out={c_out}");
            }
            LayerOp::BatchNorm { epsilon, momentum } => {
                let _ = write!(out, " eps={epsilon:e} momentum={momentum}");
            }
            LayerOp::AvgPool { window, stride, padding }
            | LayerOp::MaxPool { window, stride, padding } => {
                let _ = write!(out, " k={window} stride={stride} pad={padding}");
            }
            LayerOp::Dense { units } => {
                let _ = write!(out, " units={units}");
            }
            LayerOp::Dropout { rate } => {
                let _ = write!(out, " rate={rate}");
            }
            LayerOp::Relu | LayerOp::Softmax | LayerOp::Concat | LayerOp::Add => {}
        }
        if let Some(block) = &layer.block {
            let _ = write!(out, " block={block}");
        }
        if !layer.inputs.is_empty() {
            let _ = write!(out, " <- {}", layer.inputs.join(","));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# a small graph
input input h=8 w=8 c=3
c1 conv k=3 stride=1 pad=1 c_out=4 block=stem <- input
bn batchnorm <- c1
r relu <- bn
p avgpool k=2 <- r   # stride defaults to the window
fc dense units=5 <- p
out softmax <- fc
";

    #[test]
    fn parses_with_defaults() {
        let g = parse_graph(SMALL).unwrap();
        assert_eq!(g.layers().len(), 7);
        assert_eq!(
            g.layer("p").unwrap().op,
            LayerOp::AvgPool { window: 2, stride: 2, padding: 0 }
        );
        assert_eq!(g.output_shape("p").unwrap().0, vec![4, 4, 4]);
        assert_eq!(g.layer("c1").unwrap().block.as_deref(), Some("stem"));
        assert_eq!(g.num_classes(), 5);
    }

    #[test]
    fn format_round_trips() {
        let g = parse_graph(SMALL).unwrap();
        let again = parse_graph(&format_graph(&g)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn reports_line_numbers() {
        let bad = "input input h=8 w=8 c=3\nc conv k=3 c_out=x <- input\n";
        match parse_graph(bad).unwrap_err() {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_kinds() {
        assert!(parse_graph("input input h=8 w=8 c=3 q=1\n").is_err());
        assert!(parse_graph("input input h=8 w=8 c=3\nx lstm <- input\n").is_err());
    }
}
