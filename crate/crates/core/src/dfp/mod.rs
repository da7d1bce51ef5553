//! Depth-first fusion: partitioning into execution units, lowering of fused
//! groups to loop nests, interpretation and per-flavor source emission.

mod emit;
mod interp;
mod ir;
mod lower;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::ModelGraph;
use crate::passes::DeviceGraph;

pub use emit::{emit_source, SourceText};
pub use interp::{interpret, run_kernel, IrKernel};
pub use ir::{
    Annotation, BufRole, BufferDecl, Derived, Expr, Guard, Index, KernelIR, Loop, MapFn, Reduce,
    Stmt, Value,
};
pub use lower::lower_group;

/// SIMD lowering style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlavorId {
    Scalar,
    ShortVector { width: usize },
    LongVector { max_len: usize },
    WarpGroup { block_threads: usize, warp: usize, simd_groups: bool },
}

impl FlavorId {
    pub const ALL_NAMES: [&'static str; 4] = ["scalar", "shortvec", "longvec", "warp"];

    pub fn short_vector() -> Self {
        FlavorId::ShortVector { width: 8 }
    }

    pub fn long_vector() -> Self {
        FlavorId::LongVector { max_len: 256 }
    }

    pub fn warp_group() -> Self {
        FlavorId::WarpGroup {
            block_threads: 128,
            warp: 32,
            simd_groups: false,
        }
    }

    /// Every flavor with default parameters.
    pub fn all() -> [FlavorId; 4] {
        [
            FlavorId::Scalar,
            FlavorId::short_vector(),
            FlavorId::long_vector(),
            FlavorId::warp_group(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            FlavorId::Scalar => "scalar",
            FlavorId::ShortVector { .. } => "shortvec",
            FlavorId::LongVector { .. } => "longvec",
            FlavorId::WarpGroup { .. } => "warp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes: &[usize] = match self {
            FlavorId::Scalar => &[],
            FlavorId::ShortVector { width } => &[*width],
            FlavorId::LongVector { max_len } => &[*max_len],
            FlavorId::WarpGroup {
                block_threads,
                warp,
                ..
            } => &[*block_threads, *warp],
        };
        match sizes.iter().find(|s| !s.is_power_of_two()) {
            Some(s) => Err(Error::InvalidArgument(format!(
                "{} flavor size {s} is not a power of two",
                self.name()
            ))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for FlavorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlavorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(FlavorId::Scalar),
            "shortvec" => Ok(FlavorId::short_vector()),
            "longvec" => Ok(FlavorId::long_vector()),
            "warp" => Ok(FlavorId::warp_group()),
            _ => Err(Error::InvalidArgument(format!(
                "unknown flavor `{s}` (expected one of {:?})",
                FlavorId::ALL_NAMES
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitKind {
    /// Light layers fused into one loop nest.
    DfpGroup(Vec<String>),
    /// One heavy layer dispatched to a kernel provider.
    DnnNode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecUnit {
    pub kind: UnitKind,
    /// Tensors read from outside the unit, in first-use order.
    pub inputs: Vec<String>,
    /// Tensors produced here and needed elsewhere, in graph order.
    pub outputs: Vec<String>,
}

impl ExecUnit {
    pub fn nodes(&self) -> Vec<String> {
        match &self.kind {
            UnitKind::DfpGroup(n) => n.clone(),
            UnitKind::DnnNode(n) => vec![n.clone()],
        }
    }

    pub fn is_dfp(&self) -> bool {
        matches!(self.kind, UnitKind::DfpGroup(_))
    }

    /// Builds a unit from a node set, computing its boundary tensors.
    pub fn new(g: &ModelGraph, kind: UnitKind) -> ExecUnit {
        let nodes = match &kind {
            UnitKind::DfpGroup(n) => n.clone(),
            UnitKind::DnnNode(n) => vec![n.clone()],
        };
        let members: HashSet<&str> = nodes.iter().map(String::as_str).collect();
        let mut inputs: Vec<String> = Vec::new();
        for id in &nodes {
            for i in &g.node(id).expect("unit node").inputs {
                if !members.contains(i.as_str()) && !inputs.contains(i) {
                    inputs.push(i.clone());
                }
            }
        }
        let outputs = nodes
            .iter()
            .filter(|id| {
                g.is_output(id)
                    || g
                        .consumers(id)
                        .iter()
                        .any(|c| !members.contains(c.id.as_str()))
            })
            .cloned()
            .collect();
        ExecUnit {
            kind,
            inputs,
            outputs,
        }
    }
}

/// Whether a node runs through a kernel provider rather than fused loops.
pub fn is_heavy(g: &ModelGraph, id: &str) -> bool {
    let n = g.node(id).expect("node");
    let in_c = n
        .inputs
        .first()
        .and_then(|i| g.meta_of(i))
        .map_or(0, |m| m.channels());
    n.op.is_heavy(in_c)
}

/// Splits a shape-annotated graph into execution units in topological
/// order. A light node joins the earliest group of one of its producers that
/// does not precede any of its inputs; otherwise it starts a new group.
pub fn partition_graph(g: &ModelGraph) -> Vec<ExecUnit> {
    let mut kinds: Vec<UnitKind> = Vec::new();
    let mut unit_of: HashMap<String, usize> = HashMap::new();
    for node in &g.nodes {
        if is_heavy(g, &node.id) {
            unit_of.insert(node.id.clone(), kinds.len());
            kinds.push(UnitKind::DnnNode(node.id.clone()));
            continue;
        }
        let latest_input = node
            .inputs
            .iter()
            .filter_map(|i| unit_of.get(i).copied())
            .max();
        let target = node
            .inputs
            .iter()
            .filter_map(|i| unit_of.get(i).copied())
            .filter(|&u| matches!(kinds[u], UnitKind::DfpGroup(_)))
            .filter(|&u| latest_input.is_none_or(|l| u >= l))
            .min();
        let u = match target {
            Some(u) => u,
            None => {
                kinds.push(UnitKind::DfpGroup(Vec::new()));
                kinds.len() - 1
            }
        };
        if let UnitKind::DfpGroup(nodes) = &mut kinds[u] {
            nodes.push(node.id.clone());
        }
        unit_of.insert(node.id.clone(), u);
    }
    kinds.into_iter().map(|k| ExecUnit::new(g, k)).collect()
}

/// Partitions a device graph (see [`partition_graph`]).
pub fn partition(dg: &DeviceGraph) -> Vec<ExecUnit> {
    partition_graph(&dg.base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::infer_shapes;
    use crate::zoo::{self, GraphBuilder};

    fn kinds(units: &[ExecUnit]) -> Vec<String> {
        units
            .iter()
            .map(|u| match &u.kind {
                UnitKind::DfpGroup(n) => format!("dfp{}", n.len()),
                UnitKind::DnnNode(_) => "dnn".into(),
            })
            .collect()
    }

    #[test]
    fn conv_relu_pool_linear() {
        let mut b = GraphBuilder::new(0);
        let x = b.input_image("x", 2, 4, 4);
        let c = b.conv(&x, 2, 4, 3, 1, 1, 1);
        let r = b.relu(&c);
        let p = b.max_pool(&r, 2, 2, 0);
        let f = b.flatten(&p);
        let l = b.linear(&f, 16, 3);
        b.output(&l);
        let g = infer_shapes(&b.build().unwrap(), 1).unwrap();
        let u = partition_graph(&g);
        assert_eq!(kinds(&u), ["dnn", "dfp3", "dnn"]);
        assert_eq!(u[1].inputs, vec![c.clone()]);
        assert_eq!(u[1].outputs, vec![f]);
    }

    #[test]
    fn depthwise_stays_light_and_mlp_counts() {
        let g = infer_shapes(&zoo::depthwise_block(0), 1).unwrap();
        let u = partition_graph(&g);
        assert_eq!(kinds(&u), ["dnn", "dfp6", "dnn"]);
        let g = infer_shapes(&zoo::mlp(16, 0), 1).unwrap();
        assert_eq!(kinds(&partition_graph(&g)), ["dnn", "dfp1", "dnn", "dfp1", "dnn"]);
        assert!(partition_graph(&ModelGraph::default()).is_empty());
    }

    #[test]
    fn residual_join_goes_to_producer_group() {
        let g = infer_shapes(&zoo::mini_residual(0), 1).unwrap();
        let u = partition_graph(&g);
        // stem, relu | conv | bn relu | conv | bn add relu gap | fc
        assert_eq!(kinds(&u), ["dnn", "dfp1", "dnn", "dfp2", "dnn", "dfp4", "dnn"]);
        for (i, unit) in u.iter().enumerate() {
            for inp in &unit.inputs {
                if let Some(p) = u.iter().position(|v| v.nodes().contains(inp)) {
                    assert!(p < i);
                }
            }
        }
    }

    #[test]
    fn flavor_names_round_trip() {
        for f in FlavorId::all() {
            assert_eq!(f.name().parse::<FlavorId>().unwrap(), f);
            f.validate().unwrap();
        }
        assert!(FlavorId::ShortVector { width: 6 }.validate().is_err());
        assert!("avx".parse::<FlavorId>().is_err());
    }
}
