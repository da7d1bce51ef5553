//! Layer graph: ops, attributes, nodes and the validated model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model_ir::meta::{DimTag, LayoutKind, TensorMeta};
use crate::tensor::ParamTensor;

/// Accepts either `3` or `[3, 3]`.
fn pair<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<[usize; 2], D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum P {
        One(usize),
        Two([usize; 2]),
    }
    Ok(match P::deserialize(d)? {
        P::One(v) => [v, v],
        P::Two(v) => v,
    })
}

fn opt_pair<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<[usize; 2]>, D::Error> {
    pair(d).map(Some)
}

mod neg_inf_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

fn one_pair() -> [usize; 2] {
    [1, 1]
}

fn one() -> usize {
    1
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub out_channels: usize,
    #[serde(deserialize_with = "pair")]
    pub kernel: [usize; 2],
    #[serde(default = "one_pair", deserialize_with = "pair")]
    pub stride: [usize; 2],
    #[serde(default, deserialize_with = "pair")]
    pub padding: [usize; 2],
    #[serde(default = "one")]
    pub groups: usize,
}

impl ConvAttrs {
    /// Depthwise: one group per channel, channel count preserved.
    pub fn is_depthwise(&self, in_channels: usize) -> bool {
        self.groups > 1 && self.groups == self.out_channels && self.groups == in_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAttrs {
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAttrs {
    #[serde(deserialize_with = "pair")]
    pub kernel: [usize; 2],
    #[serde(default, deserialize_with = "opt_pair", skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    #[serde(default, deserialize_with = "pair")]
    pub padding: [usize; 2],
    /// Initial value of the max accumulator; `null` in JSON means −∞.
    #[serde(default = "neg_inf", with = "neg_inf_as_null")]
    pub min_init: f64,
    #[serde(default)]
    pub count_padding: bool,
}

impl PoolAttrs {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolAttrs {
            kernel: [kernel, kernel],
            stride: Some([stride, stride]),
            padding: [padding, padding],
            min_init: f64::NEG_INFINITY,
            count_padding: false,
        }
    }

    pub fn stride(&self) -> [usize; 2] {
        self.stride.unwrap_or(self.kernel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormAttrs {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for BatchNormAttrs {
    fn default() -> Self {
        BatchNormAttrs {
            eps: default_eps(),
            momentum: default_momentum(),
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyAttrs {
    pub layout: LayoutKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d(ConvAttrs),
    Linear(LinearAttrs),
    ReLU,
    MaxPool2d(PoolAttrs),
    AvgPool2d(PoolAttrs),
    BatchNorm2d(BatchNormAttrs),
    Add,
    Flatten,
    GlobalAvgPool,
    Softmax,
    CrossEntropyLoss,
    /// Layout change; inserted by the layout planner.
    Copy(CopyAttrs),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "Conv2d",
            Op::Linear(_) => "Linear",
            Op::ReLU => "ReLU",
            Op::MaxPool2d(_) => "MaxPool2d",
            Op::AvgPool2d(_) => "AvgPool2d",
            Op::BatchNorm2d(_) => "BatchNorm2d",
            Op::Add => "Add",
            Op::Flatten => "Flatten",
            Op::GlobalAvgPool => "GlobalAvgPool",
            Op::Softmax => "Softmax",
            Op::CrossEntropyLoss => "CrossEntropyLoss",
            Op::Copy(_) => "Copy",
        }
    }

    pub fn from_parts(name: &str, attrs: serde_json::Value) -> Result<Op> {
        let attrs = if attrs.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            attrs
        };
        let bad = |e: serde_json::Error| Error::MalformedModel(format!("{name} attrs: {e}"));
        Ok(match name {
            "Conv2d" => Op::Conv2d(serde_json::from_value(attrs).map_err(bad)?),
            "Linear" => Op::Linear(serde_json::from_value(attrs).map_err(bad)?),
            "ReLU" => Op::ReLU,
            "MaxPool2d" => Op::MaxPool2d(serde_json::from_value(attrs).map_err(bad)?),
            "AvgPool2d" => Op::AvgPool2d(serde_json::from_value(attrs).map_err(bad)?),
            "BatchNorm2d" => Op::BatchNorm2d(serde_json::from_value(attrs).map_err(bad)?),
            "Add" => Op::Add,
            "Flatten" => Op::Flatten,
            "GlobalAvgPool" => Op::GlobalAvgPool,
            "Softmax" => Op::Softmax,
            "CrossEntropyLoss" => Op::CrossEntropyLoss,
            "Copy" => Op::Copy(serde_json::from_value(attrs).map_err(bad)?),
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    pub fn attrs_json(&self) -> serde_json::Value {
        let v = match self {
            Op::Conv2d(a) => serde_json::to_value(a),
            Op::Linear(a) => serde_json::to_value(a),
            Op::MaxPool2d(a) | Op::AvgPool2d(a) => serde_json::to_value(a),
            Op::BatchNorm2d(a) => serde_json::to_value(a),
            Op::Copy(a) => serde_json::to_value(a),
            _ => Ok(serde_json::json!({})),
        };
        v.expect("attrs serialize")
    }

    /// Conv2d (non-depthwise) and Linear go to library dispatch.
    pub fn is_heavy(&self, in_channels: usize) -> bool {
        match self {
            Op::Linear(_) => true,
            Op::Conv2d(c) => !c.is_depthwise(in_channels),
            _ => false,
        }
    }

    pub fn is_elementwise(&self) -> bool {
        matches!(self, Op::ReLU | Op::BatchNorm2d(_) | Op::Add)
    }

    /// Ops that only rearrange elements.
    pub fn is_shape_only(&self) -> bool {
        matches!(self, Op::Flatten | Op::Copy(_))
    }

    /// Number of leading params that receive gradients.
    pub fn trainable_params(&self, nparams: usize) -> usize {
        match self {
            Op::BatchNorm2d(_) => 2.min(nparams),
            _ => nparams,
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub params: Vec<String>,
    /// Output shape; filled in by shape inference.
    pub meta: Option<TensorMeta>,
}

impl LayerNode {
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str], params: &[&str]) -> Self {
        LayerNode {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: params.iter().map(|s| s.to_string()).collect(),
            meta: None,
        }
    }

    pub fn meta(&self) -> &TensorMeta {
        self.meta
            .as_ref()
            .unwrap_or_else(|| panic!("node `{}` has no inferred shape", self.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Extent {
    Fixed(usize),
    /// The symbolic batch size `B`.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InputDim {
    pub tag: DimTag,
    pub extent: Extent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GraphInput {
    pub name: String,
    pub dims: Vec<InputDim>,
}

impl GraphInput {
    pub fn meta(&self, batch: usize) -> TensorMeta {
        TensorMeta::new(
            self.dims
                .iter()
                .map(|d| crate::model_ir::Dim {
                    tag: d.tag,
                    extent: match d.extent {
                        Extent::Fixed(e) => e,
                        Extent::Batch => batch,
                    },
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelGraph {
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<LayerNode>,
    pub outputs: Vec<String>,
    pub params: BTreeMap<String, ParamTensor>,
    /// Concrete batch size once shapes are inferred.
    pub batch: Option<usize>,
}

/// Where a tensor comes from: a graph input or a node output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Source<'a> {
    Input(&'a GraphInput),
    Node(&'a LayerNode),
}

impl ModelGraph {
    pub fn node(&self, id: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut LayerNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    pub fn source(&self, id: &str) -> Option<Source<'_>> {
        self.input(id)
            .map(Source::Input)
            .or_else(|| self.node(id).map(Source::Node))
    }

    /// Shape of a tensor (graph input or inferred node output).
    pub fn meta_of(&self, id: &str) -> Option<TensorMeta> {
        match self.source(id)? {
            Source::Input(i) => Some(i.meta(self.batch.unwrap_or(1))),
            Source::Node(n) => n.meta.clone(),
        }
    }

    /// Ids of nodes consuming `id`, in graph order (with multiplicity).
    pub fn consumers(&self, id: &str) -> Vec<&LayerNode> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == id))
            .collect()
    }

    pub fn is_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
    }

    /// Redirects every reference to `from` (node inputs and graph outputs) to `to`.
    pub fn replace_uses(&mut self, from: &str, to: &str) {
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if i == from {
                    *i = to.to_string();
                }
            }
        }
        for o in &mut self.outputs {
            if o == from {
                *o = to.to_string();
            }
        }
    }

    pub fn loss_node(&self) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.op == Op::CrossEntropyLoss)
    }

    /// Total number of parameter elements.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    /// Checks references, uniqueness, parameter presence and acyclicity, then
    /// reorders nodes topologically (stable with respect to the given order).
    pub fn validate_and_sort(&mut self) -> Result<()> {
        let mut ids = HashSet::new();
        for i in &self.inputs {
            if !ids.insert(i.name.clone()) {
                return Err(Error::MalformedModel(format!("duplicate id `{}`", i.name)));
            }
            for d in &i.dims {
                if d.extent == Extent::Batch && d.tag != DimTag::N0 {
                    return Err(Error::MalformedModel(format!(
                        "batch symbol used on {} of input `{}`",
                        d.tag, i.name
                    )));
                }
            }
            i.meta(1).validate()?;
        }
        for n in &self.nodes {
            if !ids.insert(n.id.clone()) {
                return Err(Error::MalformedModel(format!("duplicate id `{}`", n.id)));
            }
        }
        for n in &self.nodes {
            for i in &n.inputs {
                if !ids.contains(i) {
                    return Err(Error::MalformedModel(format!(
                        "node `{}` references undefined `{i}`",
                        n.id
                    )));
                }
            }
            for p in &n.params {
                if !self.params.contains_key(p) {
                    return Err(Error::WeightsMismatch(format!(
                        "node `{}` needs missing parameter `{p}`",
                        n.id
                    )));
                }
            }
        }
        for o in &self.outputs {
            if !ids.contains(o) {
                return Err(Error::MalformedModel(format!("output `{o}` is undefined")));
            }
        }
        self.topo_sort()
    }

    fn topo_sort(&mut self) -> Result<()> {
        let index: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                if let Some(&p) = index.get(inp.as_str()) {
                    indegree[i] += 1;
                    users[p].push(i);
                }
            }
        }
        // Kahn's algorithm, always taking the lowest original index.
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            return Err(Error::MalformedModel("graph contains a cycle".into()));
        }
        let mut slots: Vec<Option<LayerNode>> = self.nodes.drain(..).map(Some).collect();
        self.nodes = order.into_iter().map(|i| slots[i].take().unwrap()).collect();
        Ok(())
    }

    /// Nodes needed to compute `targets`, in graph order.
    pub fn ancestors_of(&self, targets: &[String]) -> HashSet<String> {
        let mut live: HashSet<String> = targets.iter().cloned().collect();
        for n in self.nodes.iter().rev() {
            if live.contains(&n.id) {
                for i in &n.inputs {
                    live.insert(i.clone());
                }
            }
        }
        live
    }

    /// Copy of the graph restricted to what the outputs need (drops the loss
    /// node and anything only it uses).
    pub fn inference_graph(&self) -> ModelGraph {
        let live = self.ancestors_of(&self.outputs);
        let mut g = self.clone();
        g.nodes.retain(|n| live.contains(&n.id));
        g
    }
}
