//! The model document: `{inputs, nodes, outputs}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::graph::{Extent, GraphInput, InputDim, LayerNode, ModelGraph, Op};
use crate::model_ir::meta::{DimPurpose, DimTag};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    inputs: Vec<RawInput>,
    nodes: Vec<RawNode>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    name: String,
    dims: Vec<RawDim>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDim {
    tag: String,
    index: u8,
    extent: RawExtent,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawExtent {
    Fixed(usize),
    Symbol(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    op: String,
    #[serde(default)]
    attrs: serde_json::Value,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default)]
    params: Vec<String>,
}

/// Parses a model document. Parameters are left empty.
pub fn parse_model(text: &str) -> Result<ModelGraph> {
    let raw: RawModel =
        serde_json::from_str(text).map_err(|e| Error::MalformedModel(e.to_string()))?;
    let mut inputs = Vec::with_capacity(raw.inputs.len());
    for i in raw.inputs {
        let mut dims = Vec::with_capacity(i.dims.len());
        for d in i.dims {
            let purpose = DimPurpose::from_letter(&d.tag)
                .ok_or_else(|| Error::MalformedModel(format!("bad dim tag `{}`", d.tag)))?;
            let extent = match d.extent {
                RawExtent::Fixed(e) => Extent::Fixed(e),
                RawExtent::Symbol(s) if s == "B" => Extent::Batch,
                RawExtent::Symbol(s) => {
                    return Err(Error::MalformedModel(format!("unknown extent symbol `{s}`")))
                }
            };
            dims.push(InputDim {
                tag: DimTag::new(purpose, d.index),
                extent,
            });
        }
        inputs.push(GraphInput { name: i.name, dims });
    }
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for n in raw.nodes {
        let op = Op::from_parts(&n.op, n.attrs)?;
        nodes.push(LayerNode {
            id: n.id,
            op,
            inputs: n.inputs,
            params: n.params,
            meta: None,
        });
    }
    Ok(ModelGraph {
        inputs,
        nodes,
        outputs: raw.outputs,
        params: Default::default(),
        batch: None,
    })
}

/// Serializes the structure of `g` (no parameters, no inferred shapes).
pub fn model_to_json(g: &ModelGraph) -> String {
    let raw = RawModel {
        inputs: g
            .inputs
            .iter()
            .map(|i| RawInput {
                name: i.name.clone(),
                dims: i
                    .dims
                    .iter()
                    .map(|d| RawDim {
                        tag: d.tag.purpose.letter().to_string(),
                        index: d.tag.index,
                        extent: match d.extent {
                            Extent::Fixed(e) => RawExtent::Fixed(e),
                            Extent::Batch => RawExtent::Symbol("B".into()),
                        },
                    })
                    .collect(),
            })
            .collect(),
        nodes: g
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id.clone(),
                op: n.op.name().to_string(),
                attrs: n.op.attrs_json(),
                inputs: n.inputs.clone(),
                params: n.params.clone(),
            })
            .collect(),
        outputs: g.outputs.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("model serializes")
}

pub fn save_model(g: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(g)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_symbolic_batch_and_pool_defaults() {
        let g = parse_model(
            r#"{"inputs":[{"name":"x","dims":[{"tag":"N","index":0,"extent":"B"},
                {"tag":"C","index":0,"extent":3},{"tag":"P","index":1,"extent":8},
                {"tag":"P","index":0,"extent":8}]}],
               "nodes":[{"id":"p","op":"MaxPool2d","attrs":{"kernel":2},"inputs":["x"]}],
               "outputs":["p"]}"#,
        )
        .unwrap();
        assert_eq!(g.inputs[0].dims[0].extent, Extent::Batch);
        match &g.nodes[0].op {
            Op::MaxPool2d(a) => {
                assert_eq!(a.stride(), [2, 2]);
                assert_eq!(a.min_init, f64::NEG_INFINITY);
                assert!(!a.count_padding);
            }
            other => panic!("{other:?}"),
        }
        let again = parse_model(&model_to_json(&g)).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn unknown_op_is_unsupported() {
        let err = parse_model(
            r#"{"inputs":[],"nodes":[{"id":"a","op":"LSTM","inputs":[]}],"outputs":[]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnsupportedOp(_)));
    }

    #[test]
    fn bad_json_is_malformed() {
        assert!(matches!(parse_model("{"), Err(Error::MalformedModel(_))));
        assert!(matches!(
            parse_model(r#"{"inputs":[],"nodes":[],"outputs":[],"extra":1}"#),
            Err(Error::MalformedModel(_))
        ));
    }
}
