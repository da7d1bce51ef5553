//! Reverse-mode differentiation over the graph IR, SGD and finite-difference
//! checking.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Ncs, Nchw};
use crate::model_ir::{evaluate, ForwardMode, ForwardRecord, LayerNode, ModelGraph, Op};
use crate::scalar::Scalar;
use crate::tensor::{ParamTensor, Tensor};
use crate::zoo;

/// How a gradient step differentiates its forward node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradKind {
    /// The node's own textbook rule.
    Standard,
    /// Cross-entropy over a softmax, differentiated straight to the
    /// softmax input as `(p - onehot) / N`.
    SoftmaxCrossEntropy { softmax: String },
}

/// Gradient computation for one forward node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradNode {
    pub forward: String,
    pub kind: GradKind,
    /// Gradient of the node output; `None` for the loss.
    pub dy: Option<String>,
    /// Per forward input of the differentiated node, where its gradient
    /// contribution is written.
    pub input_grads: Vec<Option<String>>,
    /// `(parameter, gradient buffer)` for each trainable parameter.
    pub param_grads: Vec<(String, String)>,
    /// Forward tensors the rule reads.
    pub saved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackwardStep {
    Node(GradNode),
    /// Sums the contributions of a tensor with several consumers.
    Sum { out: String, parts: Vec<String> },
}

/// Gradient program in reverse topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardGraph {
    pub loss: String,
    pub steps: Vec<BackwardStep>,
    /// Trainable parameter → its gradient buffer.
    pub param_grads: BTreeMap<String, String>,
    /// Trainable parameters the loss does not depend on.
    pub zero_grads: Vec<String>,
}

impl BackwardGraph {
    pub fn grad_nodes(&self) -> impl Iterator<Item = &GradNode> {
        self.steps.iter().filter_map(|s| match s {
            BackwardStep::Node(n) => Some(n),
            BackwardStep::Sum { .. } => None,
        })
    }
}

fn grad_name(tensor: &str) -> String {
    format!("d:{tensor}")
}

/// Trainable parameter names in graph order.
pub fn trainable_params(g: &ModelGraph) -> Vec<String> {
    let mut out = Vec::new();
    for n in &g.nodes {
        for p in &n.params[..n.op.trainable_params(n.params.len())] {
            if !out.contains(p) {
                out.push(p.clone());
            }
        }
    }
    out
}

pub fn build_backward(g: &ModelGraph) -> Result<BackwardGraph> {
    let loss = g.loss_node().ok_or(Error::NonDifferentiableGraph)?;
    let live = g.ancestors_of(std::slice::from_ref(&loss.id));
    let nodes: Vec<_> = g.nodes.iter().filter(|n| live.contains(&n.id)).collect();

    let mut requires: HashSet<&str> = HashSet::new();
    for n in &nodes {
        let trainable = n.op.trainable_params(n.params.len()) > 0;
        if trainable || n.inputs.iter().any(|i| requires.contains(i.as_str())) {
            requires.insert(&n.id);
        }
    }

    let fused_softmax = g
        .node(&loss.inputs[0])
        .filter(|p| p.op == Op::Softmax && g.consumers(&p.id).len() == 1)
        .map(|p| p.id.clone());

    // Contributions per tensor, in the order the backward sweep emits them.
    let mut parts: HashMap<String, Vec<String>> = HashMap::new();
    let mut planned: Vec<(usize, Vec<Option<String>>)> = Vec::new();
    for (k, n) in nodes.iter().enumerate().rev() {
        if Some(&n.id) == fused_softmax.as_ref() {
            continue;
        }
        let inputs: &[String] = if n.id == loss.id && fused_softmax.is_some() {
            &g.node(&n.inputs[0]).expect("softmax").inputs
        } else {
            &n.inputs
        };
        let slots = inputs
            .iter()
            .enumerate()
            .map(|(slot, i)| {
                requires.contains(i.as_str()).then(|| {
                    let v = parts.entry(i.clone()).or_default();
                    let name = format!("d:{i}@{}#{slot}", n.id);
                    v.push(name.clone());
                    name
                })
            })
            .collect();
        planned.push((k, slots));
    }

    let mut steps = Vec::new();
    let mut param_grads = BTreeMap::new();
    for (k, mut slots) in planned {
        let n = nodes[k];
        if !requires.contains(n.id.as_str()) && n.id != loss.id {
            continue;
        }
        let dy = if n.id == loss.id {
            None
        } else {
            let ps = parts.get(&n.id).cloned().unwrap_or_default();
            let total = grad_name(&n.id);
            match ps.len() {
                0 => continue,
                1 => {}
                _ => steps.push(BackwardStep::Sum {
                    out: total.clone(),
                    parts: ps,
                }),
            }
            Some(total)
        };
        // A single contribution is the total.
        for s in slots.iter_mut().flatten() {
            let tensor = s[2..s.find('@').expect("contribution name")].to_string();
            if parts[&tensor].len() == 1 {
                *s = grad_name(&tensor);
            }
        }
        let trainable = &n.params[..n.op.trainable_params(n.params.len())];
        let pg: Vec<(String, String)> = trainable.iter().map(|p| (p.clone(), grad_name(p))).collect();
        for (p, d) in &pg {
            if param_grads.insert(p.clone(), d.clone()).is_some() {
                return Err(Error::MalformedModel(format!("parameter `{p}` is shared between nodes")));
            }
        }
        let (kind, saved) = match (&fused_softmax, n.id == loss.id) {
            (Some(s), true) => (GradKind::SoftmaxCrossEntropy { softmax: s.clone() }, vec![s.clone()]),
            _ => (GradKind::Standard, saved_tensors(n)),
        };
        steps.push(BackwardStep::Node(GradNode {
            forward: n.id.clone(),
            kind,
            dy,
            input_grads: slots,
            param_grads: pg,
            saved,
        }));
    }
    let zero_grads = trainable_params(g)
        .into_iter()
        .filter(|p| !param_grads.contains_key(p))
        .collect();
    Ok(BackwardGraph {
        loss: loss.id.clone(),
        steps,
        param_grads,
        zero_grads,
    })
}

fn saved_tensors(n: &LayerNode) -> Vec<String> {
    match n.op {
        Op::Conv2d(_) | Op::Linear(_) | Op::ReLU | Op::BatchNorm2d(_) | Op::CrossEntropyLoss => {
            n.inputs.clone()
        }
        Op::Softmax => vec![n.id.clone()],
        Op::MaxPool2d(_) => vec![n.inputs[0].clone(), n.id.clone()],
        _ => Vec::new(),
    }
}

/// Result of one backward sweep. Tensors are canonical.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: f64,
    pub params: BTreeMap<String, Vec<T>>,
    /// Gradient of every differentiated tensor, by tensor id.
    pub tensors: HashMap<String, Vec<T>>,
}

/// Input gradients and parameter gradients of one node, in `inputs` and
/// `params` order.
pub type NodeGrads<T> = (Vec<Vec<T>>, Vec<Vec<T>>);

/// Gradients of one forward node: per input (only where requested) and per
/// trainable parameter. `dy` is the gradient of the node output; unused for
/// the loss.
pub fn node_backward<T: Scalar>(
    g: &ModelGraph,
    node: &LayerNode,
    kind: &GradKind,
    rec: &ForwardRecord<T>,
    dy: Option<&[T]>,
    labels: &[usize],
) -> Result<NodeGrads<T>> {
    let params: Vec<Vec<T>> = node.params.iter().map(|p| g.params[p].to_vec::<T>()).collect();
    node_backward_with(g, node, kind, rec, &params, dy, labels)
}

/// [`node_backward`] with the node's parameter values supplied in
/// `node.params` order; `g` only provides structure.
pub fn node_backward_with<T: Scalar>(
    g: &ModelGraph,
    node: &LayerNode,
    kind: &GradKind,
    rec: &ForwardRecord<T>,
    params: &[Vec<T>],
    dy: Option<&[T]>,
    labels: &[usize],
) -> Result<NodeGrads<T>> {
    let meta = |id: &str| rec.metas[id].clone();
    let x = |i: usize| rec.values[&node.inputs[i]].as_slice();
    let dy = || dy.expect("non-loss node has an output gradient");
    let param = |i: usize| params[i].clone();
    Ok(match (&node.op, kind) {
        (Op::CrossEntropyLoss, GradKind::SoftmaxCrossEntropy { softmax }) => {
            let v = Ncs::of(&meta(softmax));
            let p = rec.values[softmax].as_slice();
            (vec![kernels::cross_entropy_logits_backward(p, v.n, v.c, labels, true)], vec![])
        }
        (Op::CrossEntropyLoss, _) => {
            let v = Ncs::of(&meta(&node.inputs[0]));
            let probs = g.node(&node.inputs[0]).is_some_and(|p| p.op == Op::Softmax);
            let d = if probs {
                kernels::cross_entropy_probs_backward(x(0), v.n, v.c, labels)
            } else {
                kernels::cross_entropy_logits_backward(x(0), v.n, v.c, labels, false)
            };
            (vec![d], vec![])
        }
        (Op::Conv2d(a), _) => {
            let (dx, dw, db) = kernels::conv2d_backward(x(0), Nchw::of(&meta(&node.inputs[0])), &param(0), dy(), a);
            let mut pg = vec![dw];
            if node.params.len() > 1 {
                pg.push(db);
            }
            (vec![dx], pg)
        }
        (Op::Linear(a), _) => {
            let n = Ncs::of(&meta(&node.inputs[0])).n;
            let (dx, dw, db) = kernels::linear_backward(x(0), n, a.in_features, &param(0), dy(), a.out_features);
            let mut pg = vec![dw];
            if node.params.len() > 1 {
                pg.push(db);
            }
            (vec![dx], pg)
        }
        (Op::ReLU, _) => (vec![kernels::relu_backward(x(0), dy())], vec![]),
        (Op::MaxPool2d(_), _) => {
            let route = &rec.pool_routes[&node.id];
            (vec![kernels::max_pool_backward(route, dy(), x(0).len())], vec![])
        }
        (Op::AvgPool2d(a), _) => (
            vec![kernels::avg_pool_backward(dy(), Nchw::of(&meta(&node.inputs[0])), a)],
            vec![],
        ),
        (Op::BatchNorm2d(a), _) => {
            let v = Ncs::of(&meta(&node.inputs[0]));
            let (dx, dg, db) = kernels::batch_norm_backward(x(0), v, &param(0), dy(), a.eps);
            (vec![dx], vec![dg, db])
        }
        (Op::Add, _) => (vec![dy().to_vec(), dy().to_vec()], vec![]),
        (Op::Flatten | Op::Copy(_), _) => (vec![dy().to_vec()], vec![]),
        (Op::GlobalAvgPool, _) => (
            vec![kernels::global_avg_pool_backward(dy(), Ncs::of(&meta(&node.inputs[0])))],
            vec![],
        ),
        (Op::Softmax, _) => (
            vec![kernels::softmax_backward(&rec.values[&node.id], dy(), Ncs::of(&meta(&node.id)))],
            vec![],
        ),
    })
}

/// Naive per-layer backward sweep over a training-mode forward record.
pub fn backward<T: Scalar>(
    bg: &BackwardGraph,
    g: &ModelGraph,
    rec: &ForwardRecord<T>,
    labels: &[usize],
) -> Result<Gradients<T>> {
    let mut bufs: HashMap<String, Vec<T>> = HashMap::new();
    let put = |bufs: &mut HashMap<String, Vec<T>>, name: &str, v: Vec<T>| {
        let prev = bufs.insert(name.to_string(), v);
        assert!(prev.is_none(), "gradient buffer `{name}` written twice");
    };
    for step in &bg.steps {
        match step {
            BackwardStep::Sum { out, parts } => {
                let mut acc: Vec<T> = bufs[&parts[0]].clone();
                for p in &parts[1..] {
                    for (a, b) in acc.iter_mut().zip(&bufs[p]) {
                        *a += *b;
                    }
                }
                put(&mut bufs, out, acc);
            }
            BackwardStep::Node(gn) => {
                let node = g
                    .node(&gn.forward)
                    .ok_or_else(|| Error::MalformedModel(format!("unknown node `{}`", gn.forward)))?;
                let dy = gn.dy.as_ref().map(|d| bufs[d].clone());
                let (dx, dp) = node_backward(g, node, &gn.kind, rec, dy.as_deref(), labels)?;
                for (slot, v) in gn.input_grads.iter().zip(dx) {
                    if let Some(name) = slot {
                        put(&mut bufs, name, v);
                    }
                }
                for ((_, name), v) in gn.param_grads.iter().zip(dp) {
                    put(&mut bufs, name, v);
                }
            }
        }
    }
    let mut params = BTreeMap::new();
    for (p, d) in &bg.param_grads {
        params.insert(p.clone(), bufs[d].clone());
    }
    for p in &bg.zero_grads {
        params.insert(p.clone(), vec![T::zero(); g.params[p].numel()]);
    }
    let tensors = bufs
        .into_iter()
        .filter(|(k, _)| !k.contains('@'))
        .map(|(k, v)| (k[2..].to_string(), v))
        .collect();
    Ok(Gradients {
        loss: rec.loss.unwrap_or(f64::NAN),
        params,
        tensors,
    })
}

/// Training-mode forward plus backward in `T`.
pub fn loss_and_grads<T: Scalar>(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
    labels: &[usize],
) -> Result<(Gradients<T>, ForwardRecord<T>)> {
    let bg = build_backward(g)?;
    let rec = evaluate::<T>(g, inputs, Some(labels), ForwardMode::Training)?;
    let grads = backward(&bg, g, &rec, labels)?;
    Ok((grads, rec))
}

/// Finite-difference check on deterministic inputs (seed 0) with the
/// graph's batch size (2 when unset).
pub fn grad_check(g: &ModelGraph, eps: f64) -> Result<f64> {
    let loss = g.loss_node().ok_or(Error::NonDifferentiableGraph)?;
    let batch = g.batch.unwrap_or(2);
    let g = crate::model_ir::infer_shapes(g, batch)?;
    let classes = g
        .meta_of(&loss.inputs[0])
        .map(|m| Ncs::of(&m).c)
        .ok_or_else(|| Error::MalformedModel("loss input has no shape".into()))?;
    let inputs: BTreeMap<String, Tensor<f64>> = zoo::random_inputs(&g, batch, 0)
        .into_iter()
        .map(|(k, v)| (k, v.cast()))
        .collect();
    let labels = zoo::random_labels(batch, classes, 0);
    grad_check_with(&g, &inputs, &labels, eps)
}

/// Central differences in f64 against analytic gradients, as the maximum over
/// every trainable parameter element of `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// An element is skipped when the two perturbed evaluations take different
/// ReLU or pooling branches: the loss is not differentiable there.
pub fn grad_check_with(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<f64>>,
    labels: &[usize],
    eps: f64,
) -> Result<f64> {
    let (grads, _) = loss_and_grads::<f64>(g, inputs, labels)?;
    let mut g = g.clone();
    let mut worst: f64 = 0.0;
    let eval = |g: &ModelGraph| -> Result<(f64, u64)> {
        let r = evaluate::<f64>(g, inputs, Some(labels), ForwardMode::Training)?;
        Ok((r.loss.expect("loss"), r.fingerprint))
    };
    for p in trainable_params(&g) {
        let analytic = grads.params[&p].clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = g.params[&p].values[i];
            let mut central = |h: f64| -> Result<Option<f64>> {
                set_value(&mut g, &p, i, orig + h);
                let (lp, fp) = eval(&g)?;
                set_value(&mut g, &p, i, orig - h);
                let (lm, fm) = eval(&g)?;
                set_value(&mut g, &p, i, orig);
                Ok((fp == fm).then(|| (lp - lm) / (2.0 * h)))
            };
            let (Some(d1), Some(d2)) = (central(eps)?, central(eps / 2.0)?) else {
                continue;
            };
            // One Richardson step cancels the h² term of both estimates.
            let n = (4.0 * d2 - d1) / 3.0;
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn set_value(g: &mut ModelGraph, p: &str, i: usize, v: f64) {
    g.params.get_mut(p).expect("param").values[i] = v;
}

/// Plain SGD configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f32,
    pub params: Vec<String>,
}

impl OptimizerState {
    /// `lr` must be finite and non-negative; zero leaves parameters as they are.
    pub fn new(lr: f32, params: Vec<String>) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be finite and >= 0")));
        }
        Ok(OptimizerState { lr, params })
    }

    pub fn for_graph(g: &ModelGraph, lr: f32) -> Result<Self> {
        Self::new(lr, trainable_params(g))
    }
}

/// `θ ← θ − lr·∇θ` in f32 for one parameter buffer.
pub fn sgd_update(theta: &mut [f32], grad: &[f32], lr: f32) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * *g;
    }
}

/// Returns the parameters after one SGD step over `state.params`; other
/// entries pass through unchanged.
pub fn sgd_step(
    state: &OptimizerState,
    params: &BTreeMap<String, ParamTensor>,
    grads: &BTreeMap<String, Vec<f32>>,
) -> Result<BTreeMap<String, ParamTensor>> {
    let mut out = params.clone();
    for name in &state.params {
        let p = out
            .get_mut(name)
            .ok_or_else(|| Error::shape(name, "parameter not found"))?;
        let grad = grads
            .get(name)
            .ok_or_else(|| Error::shape(name, "no gradient"))?;
        if grad.len() != p.numel() {
            return Err(Error::shape(
                name,
                format!("gradient has {} elements, parameter {}", grad.len(), p.numel()),
            ));
        }
        let mut theta = p.to_vec::<f32>();
        sgd_update(&mut theta, grad, state.lr);
        p.set_values(&theta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::infer_shapes;
    use crate::zoo::GraphBuilder;

    fn linear_ce(features: usize, classes: usize) -> ModelGraph {
        let mut b = GraphBuilder::new(3);
        let x = b.input_features("x", features);
        let l = b.linear(&x, features, classes);
        b.cross_entropy(&l);
        b.output(&l);
        infer_shapes(&b.build().unwrap(), 3).unwrap()
    }

    #[test]
    fn single_linear_gradients_are_outer_products() {
        let g = linear_ce(4, 3);
        let inputs = zoo::random_inputs(&g, 3, 1);
        let x64: BTreeMap<String, Tensor<f64>> = inputs.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        let labels = [0, 2, 1];
        let (grads, rec) = loss_and_grads::<f64>(&g, &x64, &labels).unwrap();
        let out = &g.outputs[0];
        let delta = kernels::cross_entropy_logits_backward(rec.value(out), 3, 3, &labels, false);
        let x = &x64["x"].data;
        let node = &g.nodes[0];
        let dw = &grads.params[&node.params[0]];
        let db = &grads.params[&node.params[1]];
        for o in 0..3 {
            let want_b: f64 = (0..3).map(|n| delta[n * 3 + o]).sum();
            assert!((db[o] - want_b).abs() < 1e-12);
            for i in 0..4 {
                let want: f64 = (0..3).map(|n| delta[n * 3 + o] * x[n * 4 + i]).sum();
                assert!((dw[o * 4 + i] - want).abs() < 1e-12);
            }
        }
        assert!(grad_check(&g, 1e-3).unwrap() < 1e-6);
    }

    #[test]
    fn relu_blocks_negative_inputs() {
        assert_eq!(kernels::relu_backward(&[-1.0f64, 2.0], &[5.0, 5.0]), vec![0.0, 5.0]);
    }

    #[test]
    fn no_loss_node_is_rejected() {
        let g = zoo::mlp(4, 0);
        assert!(matches!(build_backward(&g), Err(Error::NonDifferentiableGraph)));
        assert!(matches!(grad_check(&g, 1e-3), Err(Error::NonDifferentiableGraph)));
    }

    #[test]
    fn zero_parameter_graph_checks_to_zero() {
        let mut b = GraphBuilder::new(0);
        let x = b.input_features("x", 5);
        let r = b.relu(&x);
        b.cross_entropy(&r);
        b.output(&r);
        let g = b.build().unwrap();
        assert_eq!(grad_check(&g, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn softmax_before_loss_is_fused() {
        let mut b = GraphBuilder::new(2);
        let x = b.input_features("x", 6);
        let l = b.linear(&x, 6, 4);
        let s = b.softmax(&l);
        b.cross_entropy(&s);
        b.output(&s);
        let g = b.build().unwrap();
        let bg = build_backward(&g).unwrap();
        let first = bg.grad_nodes().next().unwrap();
        assert_eq!(first.kind, GradKind::SoftmaxCrossEntropy { softmax: s.clone() });
        assert!(bg.grad_nodes().all(|n| n.forward != s));
        assert!(grad_check(&g, 1e-3).unwrap() < 1e-6);
    }

    #[test]
    fn every_trainable_parameter_has_one_gradient() {
        let g = zoo::with_loss(zoo::mini_residual(0));
        let bg = build_backward(&g).unwrap();
        let mut want = trainable_params(&g);
        want.sort();
        let got: Vec<String> = bg.param_grads.keys().cloned().collect();
        assert_eq!(got, want);
        // The stem output feeds the first conv and the residual add.
        assert_eq!(
            bg.steps.iter().filter(|s| matches!(s, BackwardStep::Sum { .. })).count(),
            1
        );
        let g = infer_shapes(&g, 2).unwrap();
        let inputs: BTreeMap<String, Tensor<f32>> = zoo::random_inputs(&g, 2, 4);
        let (grads, _) = loss_and_grads::<f32>(&g, &inputs, &[1, 7]).unwrap();
        for (p, v) in &grads.params {
            assert_eq!(v.len(), g.params[p].numel(), "{p}");
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), ParamTensor::f32(vec![1], vec![1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5f32]);
        let st = OptimizerState::new(0.1, vec!["w".into()]).unwrap();
        let out = sgd_step(&st, &params, &grads).unwrap();
        assert_eq!(out["w"].values[0] as f32, 0.95);
        let zero = OptimizerState::new(0.0, vec!["w".into()]).unwrap();
        assert_eq!(sgd_step(&zero, &params, &grads).unwrap(), params);
        // Two steps compose.
        let twice = sgd_step(&st, &sgd_step(&st, &params, &grads).unwrap(), &grads).unwrap();
        assert_eq!(twice["w"].values[0] as f32, 1.0f32 - 0.1 * 0.5 - 0.1 * 0.5);
        grads.insert("w".to_string(), vec![0.5, 0.5]);
        assert!(matches!(sgd_step(&st, &params, &grads), Err(Error::ShapeMismatch { .. })));
        assert!(OptimizerState::new(-1.0, vec![]).is_err());
    }
}
