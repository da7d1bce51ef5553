//! Unfused per-layer interpreter: the numerical oracle for every other path.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, Ncs, Nchw};
use crate::model_ir::graph::{ModelGraph, Op};
use crate::model_ir::meta::TensorMeta;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch norm uses running statistics.
    Inference,
    /// Batch norm uses batch statistics.
    Training,
}

/// Everything a forward evaluation produced, in canonical layout.
#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    pub values: HashMap<String, Vec<T>>,
    pub metas: HashMap<String, TensorMeta>,
    pub pool_routes: HashMap<String, Vec<Option<usize>>>,
    pub batch_stats: HashMap<String, (Vec<f64>, Vec<f64>)>,
    pub loss: Option<f64>,
    /// Hash of every data-dependent branch taken (ReLU signs, pooling routes).
    pub fingerprint: u64,
}

impl<T: Scalar> ForwardRecord<T> {
    pub fn value(&self, id: &str) -> &[T] {
        &self.values[id]
    }
}

pub(crate) fn param<T: Scalar>(g: &ModelGraph, name: &str) -> Vec<T> {
    g.params[name].to_vec()
}

pub(crate) fn check_inputs<T: Scalar>(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let batch = g.batch.unwrap_or(1);
    for gi in &g.inputs {
        let t = inputs
            .get(&gi.name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing input `{}`", gi.name)))?;
        if t.meta.canonical_dims() != gi.meta(batch).canonical_dims() || t.data.len() != t.meta.numel() {
            return Err(Error::InvalidArgument(format!(
                "input `{}` is {}, expected {}",
                gi.name,
                t.meta,
                gi.meta(batch)
            )));
        }
    }
    Ok(())
}

/// Evaluates the graph. The loss node is computed only when `labels` is given.
pub fn evaluate<T: Scalar>(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
    labels: Option<&[usize]>,
    mode: ForwardMode,
) -> Result<ForwardRecord<T>> {
    check_inputs(g, inputs)?;
    let mut rec = ForwardRecord {
        values: HashMap::new(),
        metas: HashMap::new(),
        pool_routes: HashMap::new(),
        batch_stats: HashMap::new(),
        loss: None,
        fingerprint: 0,
    };
    let mut hasher = DefaultHasher::new();
    for gi in &g.inputs {
        let t = inputs[&gi.name].canonical();
        rec.metas.insert(gi.name.clone(), t.meta.clone());
        rec.values.insert(gi.name.clone(), t.data);
    }
    for node in &g.nodes {
        if node.op == Op::CrossEntropyLoss && labels.is_none() {
            continue;
        }
        let meta = node.meta().canonical();
        let in_meta = |i: usize| rec.metas[&node.inputs[i]].clone();
        let x = |i: usize| rec.values[&node.inputs[i]].as_slice();
        let out: Vec<T> = match &node.op {
            Op::Conv2d(a) => {
                let w = param::<T>(g, &node.params[0]);
                let b = node.params.get(1).map(|p| param::<T>(g, p));
                kernels::conv2d(x(0), Nchw::of(&in_meta(0)), &w, b.as_deref(), a).0
            }
            Op::Linear(a) => {
                let w = param::<T>(g, &node.params[0]);
                let b = node.params.get(1).map(|p| param::<T>(g, p));
                let n = Ncs::of(&in_meta(0)).n;
                kernels::linear(x(0), n, a.in_features, &w, b.as_deref(), a.out_features)
            }
            Op::ReLU => {
                let v = x(0);
                for e in v {
                    (*e > T::zero()).hash(&mut hasher);
                }
                kernels::relu(v)
            }
            Op::MaxPool2d(a) => {
                let (y, route, _) = kernels::max_pool(x(0), Nchw::of(&in_meta(0)), a);
                route.hash(&mut hasher);
                rec.pool_routes.insert(node.id.clone(), route);
                y
            }
            Op::AvgPool2d(a) => kernels::avg_pool(x(0), Nchw::of(&in_meta(0)), a).0,
            Op::BatchNorm2d(a) => {
                let p: Vec<Vec<T>> = node.params.iter().map(|n| param::<T>(g, n)).collect();
                let v = Ncs::of(&in_meta(0));
                match mode {
                    ForwardMode::Inference => {
                        kernels::batch_norm_infer(x(0), v, &p[0], &p[1], &p[2], &p[3], a.eps)
                    }
                    ForwardMode::Training => {
                        let (y, mean, var) = kernels::batch_norm_train(x(0), v, &p[0], &p[1], a.eps);
                        rec.batch_stats.insert(node.id.clone(), (mean, var));
                        y
                    }
                }
            }
            Op::Add => kernels::add(x(0), x(1)),
            // Canonical data is already flattened in (C, P1, P0) order.
            Op::Flatten | Op::Copy(_) => x(0).to_vec(),
            Op::GlobalAvgPool => kernels::global_avg_pool(x(0), Ncs::of(&in_meta(0))),
            Op::Softmax => kernels::softmax(x(0), Ncs::of(&in_meta(0))),
            Op::CrossEntropyLoss => {
                let labels = labels.expect("checked above");
                let v = Ncs::of(&in_meta(0));
                if labels.len() != v.n || labels.iter().any(|&l| l >= v.c) {
                    return Err(Error::InvalidArgument(format!(
                        "need {} labels in 0..{}",
                        v.n, v.c
                    )));
                }
                let probs = g
                    .node(&node.inputs[0])
                    .is_some_and(|p| p.op == Op::Softmax);
                let loss = kernels::cross_entropy(x(0), v.n, v.c, labels, probs);
                rec.loss = Some(loss);
                vec![T::from_f64_lossy(loss)]
            }
        };
        debug_assert_eq!(out.len(), meta.numel(), "node {}", node.id);
        rec.metas.insert(node.id.clone(), meta);
        rec.values.insert(node.id.clone(), out);
    }
    rec.fingerprint = hasher.finish();
    Ok(rec)
}

/// Runs the graph's outputs with f64 arithmetic throughout and returns them
/// in each output node's own layout.
pub fn reference_forward<T: Scalar>(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
) -> Result<Vec<Tensor<T>>> {
    let g64 = g.inference_graph();
    let inputs64: BTreeMap<String, Tensor<f64>> =
        inputs.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let rec = evaluate::<f64>(&g64, &inputs64, None, ForwardMode::Inference)?;
    Ok(collect_outputs(g, &rec))
}

pub(crate) fn collect_outputs<T: Scalar, U: Scalar>(g: &ModelGraph, rec: &ForwardRecord<U>) -> Vec<Tensor<T>> {
    g.outputs
        .iter()
        .map(|id| {
            let canon = Tensor {
                meta: rec.metas[id].clone(),
                data: rec.values[id].clone(),
            };
            let target = g.meta_of(id).expect("output meta");
            canon.to_meta(&target).cast()
        })
        .collect()
}

/// Mean cross-entropy of the graph's loss node.
pub fn reference_loss<T: Scalar>(
    g: &ModelGraph,
    inputs: &BTreeMap<String, Tensor<T>>,
    labels: &[usize],
    mode: ForwardMode,
) -> Result<f64> {
    if g.loss_node().is_none() {
        return Err(Error::NonDifferentiableGraph);
    }
    let inputs64: BTreeMap<String, Tensor<f64>> =
        inputs.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let rec = evaluate::<f64>(g, &inputs64, Some(labels), mode)?;
    Ok(rec.loss.expect("loss computed"))
}
