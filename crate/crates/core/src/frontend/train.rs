//! Device-side training program: per-layer forward kernels in canonical
//! layout, the backward sweep, and the optimizer kernel.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::autodiff::{node_backward_with, sgd_update, BackwardGraph, BackwardStep, GradKind, GradNode};
use crate::dnn::{DnnKernel, HeavyCall, ImplChoice, Pass, ProviderRegistry};
use crate::error::Result;
use crate::kernels::{self, Ncs, Nchw};
use crate::model_ir::{ForwardRecord, LayerNode, ModelGraph, Op, TensorMeta};
use crate::runtime::{DeviceKernel, FnKernel};

/// One launch; arguments are buffer names. `p:` names are parameters.
pub(crate) struct Launch {
    pub kernel: Arc<dyn DeviceKernel>,
    pub args: Vec<String>,
}

pub(crate) struct TrainProgram {
    /// Per-step buffers (activations, gradients, routes, labels, loss) and
    /// their lengths in f32 elements. Fresh allocations read as zero.
    pub buffers: BTreeMap<String, usize>,
    /// Graph inputs in canonical layout, by buffer name.
    pub inputs: Vec<(String, String)>,
    pub labels: String,
    pub loss: String,
    pub launches: Vec<Launch>,
    /// Every trainable parameter → its gradient buffer.
    pub grads: BTreeMap<String, String>,
}

pub(crate) fn param_buf(p: &str) -> String {
    format!("p:{p}")
}

fn tensor_buf(t: &str) -> String {
    format!("t:{t}")
}

const LABELS: &str = "labels";
const LOSS: &str = "loss";

struct Builder<'a> {
    g: &'a ModelGraph,
    metas: HashMap<String, TensorMeta>,
    buffers: BTreeMap<String, usize>,
    launches: Vec<Launch>,
}

impl Builder<'_> {
    fn buffer(&mut self, name: String, len: usize) -> String {
        let prev = self.buffers.insert(name.clone(), len);
        debug_assert!(prev.is_none_or(|l| l == len), "buffer `{name}` resized");
        name
    }

    fn len_of(&self, name: &str) -> usize {
        match name.strip_prefix("p:") {
            Some(p) => self.g.params[p].numel(),
            None => self.buffers[name],
        }
    }

    fn push_fn(
        &mut self,
        name: String,
        args: Vec<String>,
        outputs: Vec<usize>,
        body: impl Fn(&mut [Vec<f32>]) + Send + Sync + 'static,
    ) {
        let lens = args.iter().map(|a| self.len_of(a)).collect();
        self.launches.push(Launch {
            kernel: Arc::new(FnKernel::new(name, lens, outputs, body)),
            args,
        });
    }
}

fn labels_of(v: &[f32]) -> Vec<usize> {
    v.iter().map(|&l| l as usize).collect()
}

/// Pool routes travel as f32 indices, `-1` for windows without an in-bounds
/// element.
fn encode_route(r: &[Option<usize>]) -> Vec<f32> {
    r.iter().map(|i| i.map_or(-1.0, |i| i as f32)).collect()
}

fn decode_route(v: &[f32]) -> Vec<Option<usize>> {
    v.iter().map(|&i| (i >= 0.0).then_some(i as usize)).collect()
}

fn forward_node(b: &mut Builder<'_>, node: &LayerNode, choices: &BTreeMap<String, ImplChoice>, reg: &ProviderRegistry) -> Result<()> {
    let out = tensor_buf(&node.id);
    let meta = b.metas[&node.id].clone();
    let in_metas: Vec<TensorMeta> = node.inputs.iter().map(|i| b.metas[i].clone()).collect();
    let in_meta = |i: usize| in_metas[i].clone();
    let x = tensor_buf(&node.inputs[0]);
    let params: Vec<String> = node.params.iter().map(|p| param_buf(p)).collect();
    let name = format!("fwd:{}", node.id);
    if let Some(choice) = choices.get(&node.id) {
        let call = HeavyCall::of(b.g, node)?;
        let k = DnnKernel::new(reg, name, choice.forward.clone(), call, Pass::Forward)?;
        let y = b.buffer(out, meta.numel());
        let mut args = vec![x];
        args.extend(params);
        args.push(y);
        b.launches.push(Launch {
            kernel: Arc::new(k),
            args,
        });
        return Ok(());
    }
    if node.op == Op::CrossEntropyLoss {
        let v = Ncs::of(&in_meta(0));
        let probs = b.g.node(&node.inputs[0]).is_some_and(|p| p.op == Op::Softmax);
        let loss = b.buffer(LOSS.into(), 1);
        b.push_fn(name, vec![x, LABELS.into(), loss], vec![2], move |a| {
            let labels = labels_of(&a[1]);
            a[2][0] = kernels::cross_entropy(&a[0], v.n, v.c, &labels, probs) as f32;
        });
        return Ok(());
    }
    let y = b.buffer(out, meta.numel());
    match node.op.clone() {
        Op::Conv2d(attrs) => {
            let xs = Nchw::of(&in_meta(0));
            let bias = params.len() > 1;
            let mut args = vec![x];
            args.extend(params);
            args.push(y);
            let last = args.len() - 1;
            b.push_fn(name, args, vec![last], move |a| {
                let bias = bias.then(|| a[2].clone());
                a[last] = kernels::conv2d(&a[0], xs, &a[1], bias.as_deref(), &attrs).0;
            });
        }
        Op::Linear(attrs) => {
            let n = Ncs::of(&in_meta(0)).n;
            let bias = params.len() > 1;
            let mut args = vec![x];
            args.extend(params);
            args.push(y);
            let last = args.len() - 1;
            b.push_fn(name, args, vec![last], move |a| {
                let bias = bias.then(|| a[2].clone());
                a[last] = kernels::linear(&a[0], n, attrs.in_features, &a[1], bias.as_deref(), attrs.out_features);
            });
        }
        Op::MaxPool2d(attrs) => {
            let xs = Nchw::of(&in_meta(0));
            let route = b.buffer(format!("route:{}", node.id), meta.numel());
            b.push_fn(name, vec![x, y, route], vec![1, 2], move |a| {
                let (y, r, _) = kernels::max_pool(&a[0], xs, &attrs);
                a[1] = y;
                a[2] = encode_route(&r);
            });
        }
        Op::AvgPool2d(attrs) => {
            let xs = Nchw::of(&in_meta(0));
            b.push_fn(name, vec![x, y], vec![1], move |a| {
                a[1] = kernels::avg_pool(&a[0], xs, &attrs).0;
            });
        }
        Op::BatchNorm2d(attrs) => {
            let v = Ncs::of(&in_meta(0));
            let mut args = vec![x];
            args.extend(params);
            args.push(y);
            // Running statistics are updated in place.
            b.push_fn(name, args, vec![3, 4, 5], move |a| {
                let (y, mean, var) = kernels::batch_norm_train(&a[0], v, &a[1], &a[2], attrs.eps);
                a[5] = y;
                let (rm, rest) = a[3..5].split_at_mut(1);
                kernels::batch_norm_update_running(&mut rm[0], &mut rest[0], &mean, &var, v.n * v.s, &attrs);
            });
        }
        Op::ReLU => b.push_fn(name, vec![x, y], vec![1], |a| a[1] = kernels::relu(&a[0])),
        Op::Add => {
            let x1 = tensor_buf(&node.inputs[1]);
            b.push_fn(name, vec![x, x1, y], vec![2], |a| a[2] = kernels::add(&a[0], &a[1]));
        }
        Op::Flatten | Op::Copy(_) => b.push_fn(name, vec![x, y], vec![1], |a| a[1] = a[0].clone()),
        Op::GlobalAvgPool => {
            let v = Ncs::of(&in_meta(0));
            b.push_fn(name, vec![x, y], vec![1], move |a| a[1] = kernels::global_avg_pool(&a[0], v));
        }
        Op::Softmax => {
            let v = Ncs::of(&in_meta(0));
            b.push_fn(name, vec![x, y], vec![1], move |a| a[1] = kernels::softmax(&a[0], v));
        }
        Op::CrossEntropyLoss => unreachable!("handled above"),
    }
    Ok(())
}

/// Where each value the generic backward rule reads sits in the argument
/// list.
#[derive(Clone)]
struct Slots {
    /// Tensor id → argument index, for forward values.
    values: Vec<(String, usize)>,
    route: Option<usize>,
    labels: Option<usize>,
    params: Vec<usize>,
    dy: Option<usize>,
}

fn backward_node(
    b: &mut Builder<'_>,
    g: &Arc<ModelGraph>,
    gn: &GradNode,
    choices: &BTreeMap<String, ImplChoice>,
    reg: &ProviderRegistry,
) -> Result<()> {
    let node = g.node(&gn.forward).expect("grad node").clone();
    let name = format!("bwd:{}", node.id);
    let param_grads: Vec<String> = gn
        .param_grads
        .iter()
        .map(|(p, d)| b.buffer(d.clone(), g.params[p].numel()))
        .collect();
    for (slot, i) in gn.input_grads.iter().zip(&node.inputs) {
        if let Some(d) = slot {
            let len = b.metas[i].numel();
            b.buffer(d.clone(), len);
        }
    }
    if let (Some(choice), Some(dy)) = (choices.get(&node.id), &gn.dy) {
        let call = HeavyCall::of(g, &node)?;
        let dx = match &gn.input_grads[0] {
            Some(d) => d.clone(),
            None => b.buffer(format!("scratch:{}", node.id), call.x.numel()),
        };
        let k = DnnKernel::new(reg, name, choice.backward.clone(), call, Pass::Backward)?;
        let mut args = vec![tensor_buf(&node.inputs[0]), param_buf(&node.params[0]), dy.clone(), dx];
        args.extend(param_grads);
        b.launches.push(Launch {
            kernel: Arc::new(k),
            args,
        });
        return Ok(());
    }

    let mut args: Vec<String> = Vec::new();
    let mut slots = Slots {
        values: Vec::new(),
        route: None,
        labels: None,
        params: Vec::new(),
        dy: None,
    };
    let mut read = |args: &mut Vec<String>, t: &str| {
        if !slots.values.iter().any(|(v, _)| v == t) {
            slots.values.push((t.to_string(), args.len()));
            args.push(tensor_buf(t));
        }
    };
    let mut tensors: Vec<String> = node.inputs.clone();
    if let GradKind::SoftmaxCrossEntropy { softmax } = &gn.kind {
        tensors = vec![softmax.clone()];
    } else if matches!(node.op, Op::Softmax) {
        tensors.push(node.id.clone());
    }
    if node.op == Op::CrossEntropyLoss {
        // The loss output is a scalar buffer, never read here.
        tensors.retain(|t| *t != node.id);
    }
    for t in &tensors {
        read(&mut args, t);
    }
    if matches!(node.op, Op::MaxPool2d(_)) {
        slots.route = Some(args.len());
        args.push(format!("route:{}", node.id));
    }
    if node.op == Op::CrossEntropyLoss {
        slots.labels = Some(args.len());
        args.push(LABELS.into());
    }
    for p in &node.params {
        slots.params.push(args.len());
        args.push(param_buf(p));
    }
    if let Some(dy) = &gn.dy {
        slots.dy = Some(args.len());
        args.push(dy.clone());
    }
    let mut outputs = Vec::new();
    for d in gn.input_grads.iter().flatten() {
        outputs.push(args.len());
        args.push(d.clone());
    }
    for d in param_grads {
        outputs.push(args.len());
        args.push(d);
    }

    let metas: HashMap<String, TensorMeta> = tensors
        .iter()
        .chain(&node.inputs)
        .chain(std::iter::once(&node.id))
        .filter_map(|t| b.metas.get(t).map(|m| (t.clone(), m.clone())))
        .collect();
    let (g, kind, wanted) = (g.clone(), gn.kind.clone(), gn.input_grads.clone());
    let outs = outputs.clone();
    b.push_fn(name, args, outputs, move |a| {
        let mut rec = ForwardRecord {
            values: HashMap::new(),
            metas: metas.clone(),
            pool_routes: HashMap::new(),
            batch_stats: HashMap::new(),
            loss: None,
            fingerprint: 0,
        };
        for (t, i) in &slots.values {
            rec.values.insert(t.clone(), a[*i].clone());
        }
        if let Some(i) = slots.route {
            rec.pool_routes.insert(node.id.clone(), decode_route(&a[i]));
        }
        let labels = slots.labels.map(|i| labels_of(&a[i])).unwrap_or_default();
        let params: Vec<Vec<f32>> = slots.params.iter().map(|&i| a[i].clone()).collect();
        let dy = slots.dy.map(|i| a[i].clone());
        let (dx, dp) =
            node_backward_with(&g, &node, &kind, &rec, &params, dy.as_deref(), &labels).expect("validated at build");
        let dx = dx.into_iter().zip(&wanted).filter(|(_, w)| w.is_some()).map(|(v, _)| v);
        for (&o, v) in outs.iter().zip(dx.chain(dp)) {
            a[o] = v;
        }
    });
    Ok(())
}

/// Builds the training program for a shape-inferred canonical-layout graph.
/// Heavy nodes in `choices` run through their providers in both passes.
pub(crate) fn build_train_program(
    g: &ModelGraph,
    bg: &BackwardGraph,
    choices: &BTreeMap<String, ImplChoice>,
    reg: &ProviderRegistry,
) -> Result<TrainProgram> {
    let batch = g.batch.unwrap_or(1);
    let mut metas = HashMap::new();
    let mut inputs = Vec::new();
    let mut buffers = BTreeMap::new();
    for gi in &g.inputs {
        let m = gi.meta(batch).canonical();
        buffers.insert(tensor_buf(&gi.name), m.numel());
        inputs.push((gi.name.clone(), tensor_buf(&gi.name)));
        metas.insert(gi.name.clone(), m);
    }
    for n in &g.nodes {
        metas.insert(n.id.clone(), n.meta().canonical());
    }
    buffers.insert(LABELS.into(), batch);
    let mut b = Builder {
        g,
        metas,
        buffers,
        launches: Vec::new(),
    };
    let live = g.ancestors_of(std::slice::from_ref(&bg.loss));
    for n in g.nodes.iter().filter(|n| live.contains(&n.id)) {
        forward_node(&mut b, n, choices, reg)?;
    }
    let shared = Arc::new(g.clone());
    for step in &bg.steps {
        match step {
            BackwardStep::Sum { out, parts } => {
                let len = b.buffers[&parts[0]];
                let out = b.buffer(out.clone(), len);
                let mut args = parts.clone();
                args.push(out);
                let last = args.len() - 1;
                b.push_fn(format!("sum:{last}"), args, vec![last], move |a| {
                    let mut acc = a[0].clone();
                    for p in &a[1..last] {
                        for (x, y) in acc.iter_mut().zip(p) {
                            *x += *y;
                        }
                    }
                    a[last] = acc;
                });
            }
            BackwardStep::Node(gn) => backward_node(&mut b, &shared, gn, choices, reg)?,
        }
    }
    let mut grads = bg.param_grads.clone();
    for p in &bg.zero_grads {
        let name = b.buffer(format!("d:{p}"), g.params[p].numel());
        grads.insert(p.clone(), name);
    }
    Ok(TrainProgram {
        buffers: b.buffers,
        inputs,
        labels: LABELS.into(),
        loss: LOSS.into(),
        launches: b.launches,
        grads,
    })
}

/// Device-side `theta -= lr * grad` for one parameter.
pub(crate) fn sgd_kernel(len: usize, lr: f32) -> Arc<dyn DeviceKernel> {
    Arc::new(FnKernel::new("sgd", vec![len, len], vec![0], move |a| {
        let (theta, grad) = a.split_at_mut(1);
        sgd_update(&mut theta[0], &grad[0], lr);
    }))
}
