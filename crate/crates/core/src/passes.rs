//! Exact graph rewrites and per-device cloning.

use std::collections::BTreeMap;

use crate::dfp::{ExecUnit, FlavorId};
use crate::dnn::ImplChoice;
use crate::model_ir::{infer_shapes, LayerNode, LayoutKind, ModelGraph, Op};
use crate::runtime::DeviceKind;

/// A local rewrite. `apply_once` performs the first match in graph order and
/// reports whether anything changed. Every rule must preserve the computed
/// function and the graph's input/output arity.
pub trait RewriteRule: Send + Sync {
    fn name(&self) -> &str;
    fn apply_once(&self, g: &mut ModelGraph) -> bool;
}

fn sole_consumer<'a>(g: &'a ModelGraph, id: &str) -> Option<&'a LayerNode> {
    match g.consumers(id).as_slice() {
        [only] if !g.is_output(id) && only.inputs.iter().filter(|i| *i == id).count() == 1 => {
            Some(only)
        }
        _ => None,
    }
}

fn producer<'a>(g: &'a ModelGraph, n: &LayerNode) -> Option<&'a LayerNode> {
    n.inputs.first().and_then(|i| g.node(i))
}

/// Removes a ReLU adjacent to a MaxPool and seeds the pool with 0.
pub struct FuseReluPool;

impl RewriteRule for FuseReluPool {
    fn name(&self) -> &str {
        "fuse_relu_pool"
    }

    fn apply_once(&self, g: &mut ModelGraph) -> bool {
        for pool in &g.nodes {
            if !matches!(pool.op, Op::MaxPool2d(_)) {
                continue;
            }
            // ReLU -> MaxPool
            if let Some(relu) = producer(g, pool) {
                if relu.op == Op::ReLU && sole_consumer(g, &relu.id).is_some() {
                    let (relu_id, relu_in, pool_id) =
                        (relu.id.clone(), relu.inputs[0].clone(), pool.id.clone());
                    g.nodes.retain(|n| n.id != relu_id);
                    let p = g.node_mut(&pool_id).expect("pool");
                    p.inputs[0] = relu_in;
                    seed_zero(p);
                    return true;
                }
            }
            // MaxPool -> ReLU
            if let Some(relu) = sole_consumer(g, &pool.id) {
                if relu.op == Op::ReLU {
                    let (relu_id, pool_id) = (relu.id.clone(), pool.id.clone());
                    g.nodes.retain(|n| n.id != relu_id);
                    g.replace_uses(&relu_id, &pool_id);
                    seed_zero(g.node_mut(&pool_id).expect("pool"));
                    return true;
                }
            }
        }
        false
    }
}

fn seed_zero(n: &mut LayerNode) {
    if let Op::MaxPool2d(a) = &mut n.op {
        a.min_init = a.min_init.max(0.0);
    }
}

/// Swaps a ReLU with an adjacent shape-only node when that moves it toward
/// a MaxPool it can fuse with.
pub struct CommuteReluShapeOnly;

impl CommuteReluShapeOnly {
    /// Walks from `start` through single-consumer shape-only nodes in one
    /// direction and reports whether a fusable MaxPool is reached.
    fn reaches_pool(g: &ModelGraph, start: &LayerNode, upstream: bool) -> bool {
        let mut cur = start;
        loop {
            let next = if upstream {
                match producer(g, cur) {
                    Some(p) if sole_consumer(g, &p.id).is_some_and(|c| c.id == cur.id) => p,
                    _ => return false,
                }
            } else {
                match sole_consumer(g, &cur.id) {
                    Some(c) => c,
                    None => return false,
                }
            };
            if matches!(next.op, Op::MaxPool2d(_)) {
                return true;
            }
            if !next.op.is_shape_only() {
                return false;
            }
            cur = next;
        }
    }
}

impl RewriteRule for CommuteReluShapeOnly {
    fn name(&self) -> &str {
        "commute_relu_shape_only"
    }

    fn apply_once(&self, g: &mut ModelGraph) -> bool {
        for relu in &g.nodes {
            if relu.op != Op::ReLU {
                continue;
            }
            // X -> S -> ReLU  becomes  X -> ReLU -> S
            if let Some(s) = producer(g, relu) {
                if s.op.is_shape_only()
                    && sole_consumer(g, &s.id).is_some_and(|c| c.id == relu.id)
                    && Self::reaches_pool(g, s, true)
                {
                    let (r, s, x) = (relu.id.clone(), s.id.clone(), s.inputs[0].clone());
                    g.replace_uses(&r, &s);
                    g.node_mut(&r).expect("relu").inputs = vec![x];
                    g.node_mut(&s).expect("shape op").inputs = vec![r];
                    return true;
                }
            }
            // ReLU -> S -> Y  becomes  S -> ReLU -> Y
            if let Some(s) = sole_consumer(g, &relu.id) {
                if s.op.is_shape_only() && Self::reaches_pool(g, s, false) {
                    let (r, s, x) = (relu.id.clone(), s.id.clone(), relu.inputs[0].clone());
                    g.replace_uses(&s, &r);
                    g.node_mut(&s).expect("shape op").inputs = vec![x];
                    g.node_mut(&r).expect("relu").inputs = vec![s];
                    return true;
                }
            }
        }
        false
    }
}

fn finish(mut g: ModelGraph) -> ModelGraph {
    g.validate_and_sort().expect("rewrites keep the graph well formed");
    let batch = g.batch.unwrap_or(1);
    infer_shapes(&g, batch).expect("rewrites preserve shapes")
}

fn apply_to_fixpoint(g: &ModelGraph, rule: &dyn RewriteRule) -> ModelGraph {
    let mut g = g.clone();
    let mut changed = false;
    while rule.apply_once(&mut g) {
        g.validate_and_sort().expect("rewrites keep the graph well formed");
        changed = true;
    }
    if changed {
        finish(g)
    } else {
        g
    }
}

pub fn fuse_relu_pool(g: &ModelGraph) -> ModelGraph {
    apply_to_fixpoint(g, &FuseReluPool)
}

/// Moves ReLUs across shape-only nodes, but only toward a MaxPool.
pub fn reorder_commuting(g: &ModelGraph) -> ModelGraph {
    apply_to_fixpoint(g, &CommuteReluShapeOnly)
}

/// Runs the given rules in order until none fires.
pub fn run_rules(g: &ModelGraph, rules: &[&dyn RewriteRule]) -> ModelGraph {
    let mut g = g.clone();
    let mut changed = false;
    loop {
        let mut fired = false;
        for r in rules {
            while r.apply_once(&mut g) {
                g.validate_and_sort().expect("rewrites keep the graph well formed");
                fired = true;
            }
        }
        if !fired {
            break;
        }
        changed = true;
    }
    if changed {
        finish(g)
    } else {
        g
    }
}

/// The default pipeline: commuting reorders, then ReLU/MaxPool fusion,
/// repeated to a fixpoint.
pub fn run_pipeline(g: &ModelGraph) -> ModelGraph {
    run_rules(g, &[&CommuteReluShapeOnly, &FuseReluPool])
}

/// A graph specialised for one device. `base` never aliases the graph it
/// was cloned from.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceGraph {
    pub base: ModelGraph,
    pub device_kind: DeviceKind,
    pub flavor: FlavorId,
    pub units: Vec<ExecUnit>,
    pub choices: BTreeMap<String, ImplChoice>,
    pub layouts: BTreeMap<String, LayoutKind>,
}

pub fn clone_for_device(g: &ModelGraph, device_kind: DeviceKind, flavor: FlavorId) -> DeviceGraph {
    DeviceGraph {
        base: g.clone(),
        device_kind,
        flavor,
        units: Vec::new(),
        choices: BTreeMap::new(),
        layouts: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::GraphBuilder;

    fn ops(g: &ModelGraph) -> Vec<&'static str> {
        g.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn min_init(g: &ModelGraph) -> f64 {
        g.nodes
            .iter()
            .find_map(|n| match &n.op {
                Op::MaxPool2d(a) => Some(a.min_init),
                _ => None,
            })
            .unwrap()
    }

    fn shaped(b: GraphBuilder) -> ModelGraph {
        infer_shapes(&b.build().unwrap(), 2).unwrap()
    }

    #[test]
    fn relu_before_and_after_pool() {
        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let c = b.conv(&x, 2, 2, 3, 1, 1, 1);
        let r = b.relu(&c);
        let p = b.max_pool(&r, 2, 2, 0);
        b.output(&p);
        let g = fuse_relu_pool(&shaped(b));
        assert_eq!(ops(&g), ["Conv2d", "MaxPool2d"]);
        assert_eq!(min_init(&g), 0.0);

        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let c = b.conv(&x, 2, 2, 3, 1, 1, 1);
        let p = b.max_pool(&c, 2, 2, 0);
        let r = b.relu(&p);
        b.output(&r);
        let g = fuse_relu_pool(&shaped(b));
        assert_eq!(ops(&g), ["Conv2d", "MaxPool2d"]);
        assert_eq!(g.outputs, vec![g.nodes[1].id.clone()]);
    }

    #[test]
    fn avg_pool_keeps_relu() {
        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let r = b.relu(&x);
        let p = b.avg_pool(&r, 2, 2, 0);
        b.output(&p);
        let g = shaped(b);
        assert_eq!(run_pipeline(&g), g);
    }

    #[test]
    fn shared_relu_is_not_fused() {
        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let r = b.relu(&x);
        let p = b.max_pool(&r, 2, 2, 0);
        b.output(&p);
        b.output(&r);
        let g = shaped(b);
        assert_eq!(run_pipeline(&g), g);
    }

    #[test]
    fn reorder_enables_fusion() {
        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let p = b.max_pool(&x, 2, 2, 0);
        let f = b.flatten(&p);
        let r = b.relu(&f);
        b.output(&r);
        let g = run_pipeline(&shaped(b));
        assert_eq!(ops(&g), ["MaxPool2d", "Flatten"]);
        assert_eq!(min_init(&g), 0.0);
    }

    #[test]
    fn reorder_without_pool_is_noop() {
        let mut b = GraphBuilder::new(1);
        let x = b.input_image("x", 2, 4, 4);
        let r = b.relu(&x);
        let f = b.flatten(&r);
        let l = b.linear(&f, 32, 3);
        b.output(&l);
        let g = shaped(b);
        assert_eq!(reorder_commuting(&g), g);
    }

    #[test]
    fn pipeline_counts_and_fixpoint() {
        let g = infer_shapes(&crate::zoo::mini_vgg(3), 1).unwrap();
        let once = run_pipeline(&g);
        assert_eq!(once.nodes.len(), g.nodes.len() - 2);
        assert_eq!(run_pipeline(&once), once);
        let empty = ModelGraph::default();
        assert_eq!(run_pipeline(&empty), empty);
    }

    #[test]
    fn clones_are_independent() {
        let g = infer_shapes(&crate::zoo::mini_vgg(3), 1).unwrap();
        let mut a = clone_for_device(&g, DeviceKind::Host, FlavorId::Scalar);
        let b = clone_for_device(&g, DeviceKind::SimAccel, FlavorId::long_vector());
        a.base.nodes.pop();
        a.layouts.insert("x".into(), LayoutKind::ChannelsLast);
        assert_eq!(g.nodes.len(), b.base.nodes.len());
        assert!(b.layouts.is_empty());
    }
}
