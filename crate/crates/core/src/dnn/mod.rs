//! Library dispatch for heavy layers: kernel providers, auto-tuning and
//! whole-graph layout planning.

mod layout;
mod providers;
mod tune;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dfp::FlavorId;
use crate::error::{Error, Result};
use crate::model_ir::{relayout, LayerNode, LayoutKind, ModelGraph, Op, TensorMeta};
use crate::runtime::{DeviceKernel, DeviceKind};
use crate::tensor::Tensor;

pub use layout::{
    apply_layout_plan, brute_force_cost, layout_problem, plan_chain, plan_layouts, solve_plan,
    LayoutPlan, PlanProblem, Reorder,
};
pub use providers::{BlockedGemmProvider, DirectProvider, Im2colProvider};
pub use tune::{autotune, autotune_with, tune_key, Pass, TuneCache, TuneContext, TuneEntry, CACHE_VERSION};

/// Heavy op families providers implement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    Conv,
    Linear,
}

impl OpClass {
    pub fn of(op: &Op) -> Option<OpClass> {
        match op {
            Op::Conv2d(_) => Some(OpClass::Conv),
            Op::Linear(_) => Some(OpClass::Linear),
            _ => None,
        }
    }
}

/// Storage order of a fully connected weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightOrientation {
    /// `[out, in]`, as stored in weight files.
    OutIn,
    /// `[in, out]`.
    InOut,
}

/// Orientation a device handles best; listed first among candidates.
pub fn preferred_orientation(device: DeviceKind, flavor: FlavorId) -> WeightOrientation {
    match (device, flavor) {
        (DeviceKind::SimAccel, _) | (_, FlavorId::LongVector { .. }) => WeightOrientation::InOut,
        _ => WeightOrientation::OutIn,
    }
}

/// One executable configuration of one pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Impl {
    pub provider: String,
    pub algorithm: String,
    pub layout: LayoutKind,
    pub orientation: WeightOrientation,
}

impl fmt::Display for Impl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{:?}",
            self.provider, self.algorithm, self.layout, self.orientation
        )
    }
}

/// Implementations picked for the forward and backward pass of a node.
/// Both passes share the weight orientation of the stored weights.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImplChoice {
    pub forward: Impl,
    pub backward: Impl,
}

impl ImplChoice {
    pub fn same(imp: Impl) -> Self {
        ImplChoice {
            forward: imp.clone(),
            backward: imp,
        }
    }
}

/// Shapes of one heavy-layer invocation, each in its storage arrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyCall {
    pub op: Op,
    pub x: TensorMeta,
    pub y: TensorMeta,
    pub has_bias: bool,
}

impl HeavyCall {
    /// The call as laid out in `g`.
    pub fn of(g: &ModelGraph, node: &LayerNode) -> Result<HeavyCall> {
        if OpClass::of(&node.op).is_none() {
            return Err(Error::InvalidArgument(format!(
                "`{}` ({}) is not a heavy layer",
                node.id, node.op
            )));
        }
        let x = node
            .inputs
            .first()
            .and_then(|i| g.meta_of(i))
            .ok_or_else(|| Error::MalformedModel(format!("`{}` has no shaped input", node.id)))?;
        let y = node
            .meta
            .clone()
            .ok_or_else(|| Error::MalformedModel(format!("`{}` has no inferred shape", node.id)))?;
        Ok(HeavyCall {
            op: node.op.clone(),
            x,
            y,
            has_bias: node.params.len() > 1,
        })
    }

    pub fn with_layout(&self, kind: LayoutKind) -> HeavyCall {
        HeavyCall {
            op: self.op.clone(),
            x: self.x.with_layout(kind),
            y: self.y.with_layout(kind),
            has_bias: self.has_bias,
        }
    }

    pub fn weight_len(&self) -> usize {
        match &self.op {
            Op::Conv2d(a) => {
                a.out_channels * (self.x.channels() / a.groups) * a.kernel[0] * a.kernel[1]
            }
            Op::Linear(a) => a.in_features * a.out_features,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match &self.op {
            Op::Conv2d(a) => a.out_channels,
            Op::Linear(a) => a.out_features,
            _ => 0,
        }
    }
}

/// Gradients of one heavy layer; `dw` is in the orientation of the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HeavyGrads {
    pub dx: Vec<f32>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// A library of heavy-layer kernels.
///
/// Every advertised (op, algorithm, layout, orientation) combination must be
/// executable. Activations arrive in the arrangement given by the call's
/// metas; weights in the orientation of the [`Impl`] (convolution weights are
/// always `[out, in/groups, kh, kw]`).
pub trait KernelProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Algorithms for `op`; empty when unsupported.
    fn algorithms(&self, op: OpClass) -> Vec<String>;

    /// Activation layouts in preference order.
    fn layouts(&self) -> Vec<LayoutKind>;

    /// Whether the provider handles this particular node.
    fn supports(&self, call: &HeavyCall) -> bool {
        match &call.op {
            Op::Conv2d(a) => !a.is_depthwise(call.x.channels()),
            Op::Linear(_) => true,
            _ => false,
        }
    }

    /// Multiplier on measured time reflecting how well `device` runs `imp`.
    /// The simulated accelerator executes on the host, so measurements alone
    /// would not see its weight-access preference.
    fn cost_hint(&self, device: DeviceKind, flavor: FlavorId, imp: &Impl) -> f64 {
        if imp.orientation == preferred_orientation(device, flavor) {
            1.0
        } else {
            2.0
        }
    }

    fn forward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32>;

    fn backward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads;
}

/// Registered providers in registration order.
#[derive(Clone, Default)]
pub struct ProviderRegistry {
    providers: Vec<Arc<dyn KernelProvider>>,
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.providers.iter().map(|p| p.name())).finish()
    }
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// "direct", "im2col_gemm" and "blocked_gemm".
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(DirectProvider)).expect("fresh registry");
        r.register(Arc::new(Im2colProvider)).expect("fresh registry");
        r.register(Arc::new(BlockedGemmProvider::default())).expect("fresh registry");
        r
    }

    pub fn register(&mut self, p: Arc<dyn KernelProvider>) -> Result<()> {
        if self.get(p.name()).is_some() {
            return Err(Error::DuplicateProvider(p.name().to_string()));
        }
        self.providers.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn KernelProvider>> {
        self.providers.iter().find(|p| p.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.providers.iter().map(|p| p.name()).collect()
    }

    fn provider(&self, imp: &Impl) -> Result<&Arc<dyn KernelProvider>> {
        self.get(&imp.provider)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown provider `{}`", imp.provider)))
    }

    /// Every applicable provider × algorithm × layout × orientation, in
    /// registration order with the device-preferred orientation first. Each
    /// candidate uses the same implementation for both passes.
    pub fn candidates(
        &self,
        g: &ModelGraph,
        node: &LayerNode,
        device: DeviceKind,
        flavor: FlavorId,
    ) -> Result<Vec<ImplChoice>> {
        let call = HeavyCall::of(g, node)?;
        let class = OpClass::of(&node.op).expect("checked by HeavyCall::of");
        let pref = preferred_orientation(device, flavor);
        let orientations = match class {
            OpClass::Conv => vec![WeightOrientation::OutIn],
            OpClass::Linear if pref == WeightOrientation::OutIn => {
                vec![WeightOrientation::OutIn, WeightOrientation::InOut]
            }
            OpClass::Linear => vec![WeightOrientation::InOut, WeightOrientation::OutIn],
        };
        let mut out = Vec::new();
        for p in &self.providers {
            if !p.supports(&call) {
                continue;
            }
            let layouts = match class {
                // Fully connected activations have a single arrangement.
                OpClass::Linear => p.layouts().into_iter().take(1).collect(),
                OpClass::Conv => p.layouts(),
            };
            for algorithm in p.algorithms(class) {
                for &layout in &layouts {
                    for &orientation in &orientations {
                        out.push(ImplChoice::same(Impl {
                            provider: p.name().to_string(),
                            algorithm: algorithm.clone(),
                            layout,
                            orientation,
                        }));
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::NoProvider(node.id.clone()));
        }
        Ok(out)
    }

    /// Forward pass of `imp` on data laid out as `call` describes.
    pub fn forward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Result<Vec<f32>> {
        check_len("input", x.len(), call.x.numel())?;
        check_len("weight", w.len(), call.weight_len())?;
        if let Some(b) = b {
            check_len("bias", b.len(), call.bias_len())?;
        }
        Ok(self.provider(imp)?.forward(imp, call, x, w, b))
    }

    pub fn backward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> Result<HeavyGrads> {
        check_len("input", x.len(), call.x.numel())?;
        check_len("weight", w.len(), call.weight_len())?;
        check_len("output gradient", dy.len(), call.y.numel())?;
        Ok(self.provider(imp)?.backward(imp, call, x, w, dy))
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidArgument(format!("{what} has {got} elements, expected {want}")));
    }
    Ok(())
}

/// Rearranges a `[out, in]` weight into `o`.
pub fn orient_weight<T: Copy>(op: &Op, w: &[T], o: WeightOrientation) -> Vec<T> {
    match (op, o) {
        (Op::Linear(a), WeightOrientation::InOut) => transpose_any(w, a.out_features, a.in_features),
        _ => w.to_vec(),
    }
}

/// Inverse of [`orient_weight`].
pub fn unorient_weight<T: Copy>(op: &Op, w: &[T], o: WeightOrientation) -> Vec<T> {
    match (op, o) {
        (Op::Linear(a), WeightOrientation::InOut) => transpose_any(w, a.in_features, a.out_features),
        _ => w.to_vec(),
    }
}

fn transpose_any<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(a[r * cols + c]);
        }
    }
    out
}

/// Runs the forward implementation of `choice` for `node` on `x`; the
/// result is laid out in the choice's activation layout.
pub fn execute_choice(
    reg: &ProviderRegistry,
    choice: &ImplChoice,
    g: &ModelGraph,
    node: &LayerNode,
    x: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let call = HeavyCall::of(g, node)?.with_layout(choice.forward.layout);
    let xs = x.to_meta(&call.x);
    let w: Vec<f32> = g.params[&node.params[0]].to_vec();
    let w = orient_weight(&node.op, &w, choice.forward.orientation);
    let b: Option<Vec<f32>> = node.params.get(1).map(|p| g.params[p].to_vec());
    let y = reg.forward(&choice.forward, &call, &xs.data, &w, b.as_deref())?;
    Tensor::new(call.y, y)
}

/// Gradients of `node` at `x` for output gradient `dy` (both in any
/// arrangement of their tag sets); results come back in the arrangement of
/// `x` with `dw` as `[out, in]`.
pub fn execute_backward(
    reg: &ProviderRegistry,
    choice: &ImplChoice,
    g: &ModelGraph,
    node: &LayerNode,
    x: &Tensor<f32>,
    dy: &Tensor<f32>,
) -> Result<(Tensor<f32>, Vec<f32>, Vec<f32>)> {
    let imp = &choice.backward;
    let call = HeavyCall::of(g, node)?.with_layout(imp.layout);
    let xs = x.to_meta(&call.x);
    let dys = dy.to_meta(&call.y);
    let w: Vec<f32> = g.params[&node.params[0]].to_vec();
    let w = orient_weight(&node.op, &w, imp.orientation);
    let gr = reg.backward(imp, &call, &xs.data, &w, &dys.data)?;
    let dx = Tensor::new(call.x, gr.dx)?.to_meta(&x.meta);
    Ok((dx, unorient_weight(&node.op, &gr.dw, imp.orientation), gr.db))
}

/// A heavy layer launched on a device queue.
///
/// Forward arguments: `x, w, [b], y`. Backward arguments: `x, w, dy, dx, dw,
/// [db]`. `x`, `y`, `dx` and `dy` use the arrangements in `call`; the
/// implementation's own layout is applied around the provider call.
pub struct DnnKernel {
    name: String,
    provider: Arc<dyn KernelProvider>,
    imp: Impl,
    call: HeavyCall,
    pass: Pass,
}

impl DnnKernel {
    pub fn new(reg: &ProviderRegistry, name: impl Into<String>, imp: Impl, call: HeavyCall, pass: Pass) -> Result<Self> {
        let provider = reg.provider(&imp)?.clone();
        Ok(DnnKernel {
            name: name.into(),
            provider,
            imp,
            call,
            pass,
        })
    }

    fn lens(&self) -> Vec<usize> {
        let c = &self.call;
        let (x, w, y, b) = (c.x.numel(), c.weight_len(), c.y.numel(), c.bias_len());
        match (self.pass, c.has_bias) {
            (Pass::Forward, true) => vec![x, w, b, y],
            (Pass::Forward, false) => vec![x, w, y],
            (Pass::Backward, true) => vec![x, w, y, x, w, b],
            (Pass::Backward, false) => vec![x, w, y, x, w],
        }
    }
}

impl DeviceKernel for DnnKernel {
    fn name(&self) -> &str {
        &self.name
    }

    fn arity(&self) -> usize {
        self.lens().len()
    }

    fn arg_len(&self, i: usize) -> usize {
        self.lens()[i]
    }

    fn outputs(&self) -> Vec<usize> {
        match (self.pass, self.call.has_bias) {
            (Pass::Forward, true) => vec![3],
            (Pass::Forward, false) => vec![2],
            (Pass::Backward, true) => vec![3, 4, 5],
            (Pass::Backward, false) => vec![3, 4],
        }
    }

    fn work_elements(&self) -> u64 {
        self.outputs().iter().map(|&i| self.lens()[i] as u64).sum()
    }

    fn run(&self, args: &mut [Vec<f32>]) {
        let inner = self.call.with_layout(self.imp.layout);
        let x = relayout(&args[0], &self.call.x, &inner.x);
        match self.pass {
            Pass::Forward => {
                let b = self.call.has_bias.then(|| args[2].as_slice());
                let y = self.provider.forward(&self.imp, &inner, &x, &args[1], b);
                let last = args.len() - 1;
                args[last] = relayout(&y, &inner.y, &self.call.y);
            }
            Pass::Backward => {
                let dy = relayout(&args[2], &self.call.y, &inner.y);
                let g = self.provider.backward(&self.imp, &inner, &x, &args[1], &dy);
                args[3] = relayout(&g.dx, &inner.x, &self.call.x);
                args[4] = g.dw;
                if self.call.has_bias {
                    args[5] = g.db;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{infer_shapes, reference_forward};
    use crate::scalar::max_rel_error;
    use crate::zoo::{self, GraphBuilder};
    use std::collections::BTreeMap;

    fn single(op_conv: bool, seed: u64) -> (ModelGraph, String) {
        let mut b = GraphBuilder::new(seed);
        let id = if op_conv {
            let x = b.input_image("x", 3, 7, 6);
            let c = b.conv(&x, 3, 5, 3, 2, 1, 1);
            b.output(&c);
            c
        } else {
            let x = b.input_features("x", 12);
            let l = b.linear(&x, 12, 7);
            b.output(&l);
            l
        };
        (infer_shapes(&b.build().unwrap(), 2).unwrap(), id)
    }

    fn input(g: &ModelGraph, seed: u64) -> Tensor<f32> {
        zoo::random_inputs(g, 2, seed).into_values().next().unwrap()
    }

    fn oracle(g: &ModelGraph, x: &Tensor<f32>) -> Tensor<f32> {
        let mut m = BTreeMap::new();
        m.insert(g.inputs[0].name.clone(), x.clone());
        reference_forward::<f32>(g, &m).unwrap().remove(0)
    }

    #[test]
    fn every_candidate_matches_the_oracle() {
        let reg = ProviderRegistry::with_builtins();
        for conv in [true, false] {
            let (g, id) = single(conv, 3);
            let node = g.node(&id).unwrap();
            let x = input(&g, 9);
            let want = oracle(&g, &x);
            let cands = reg.candidates(&g, node, DeviceKind::Host, FlavorId::Scalar).unwrap();
            assert_eq!(cands.len(), 4);
            for c in cands {
                let y = execute_choice(&reg, &c, &g, node, &x).unwrap();
                let y = y.to_meta(&want.meta);
                assert!(max_rel_error(&y.data, &want.data) <= 1e-5, "{}", c.forward);
            }
        }
    }

    #[test]
    fn orientation_order_follows_device() {
        let reg = ProviderRegistry::with_builtins();
        let (g, id) = single(false, 1);
        let node = g.node(&id).unwrap();
        let host = reg.candidates(&g, node, DeviceKind::Host, FlavorId::Scalar).unwrap();
        let sim = reg.candidates(&g, node, DeviceKind::SimAccel, FlavorId::Scalar).unwrap();
        assert_eq!(host[0].forward.orientation, WeightOrientation::OutIn);
        assert_eq!(sim[0].forward.orientation, WeightOrientation::InOut);
        let vec_host = reg.candidates(&g, node, DeviceKind::Host, FlavorId::long_vector()).unwrap();
        assert_eq!(vec_host[0].forward.orientation, WeightOrientation::InOut);
    }

    #[test]
    fn registry_rules() {
        let mut reg = ProviderRegistry::new();
        reg.register(Arc::new(DirectProvider)).unwrap();
        reg.register(Arc::new(Im2colProvider)).unwrap();
        assert_eq!(reg.names(), ["direct", "im2col_gemm"]);
        assert!(matches!(
            reg.register(Arc::new(DirectProvider)),
            Err(Error::DuplicateProvider(_))
        ));
        // im2col has no fully connected kernel
        let (g, id) = single(false, 2);
        let c = reg.candidates(&g, g.node(&id).unwrap(), DeviceKind::Host, FlavorId::Scalar).unwrap();
        assert!(c.iter().all(|c| c.forward.provider == "direct"));
        let mut only_im2col = ProviderRegistry::new();
        only_im2col.register(Arc::new(Im2colProvider)).unwrap();
        assert!(matches!(
            only_im2col.candidates(&g, g.node(&id).unwrap(), DeviceKind::Host, FlavorId::Scalar),
            Err(Error::NoProvider(_))
        ));
    }

    #[test]
    fn depthwise_and_light_nodes_are_rejected() {
        let reg = ProviderRegistry::with_builtins();
        let g = infer_shapes(&zoo::depthwise_block(0), 1).unwrap();
        let dw = g
            .nodes
            .iter()
            .find(|n| matches!(&n.op, Op::Conv2d(a) if a.groups > 1))
            .unwrap();
        assert!(matches!(
            reg.candidates(&g, dw, DeviceKind::Host, FlavorId::Scalar),
            Err(Error::NoProvider(_))
        ));
        let relu = g.nodes.iter().find(|n| n.op == Op::ReLU).unwrap();
        assert!(matches!(
            reg.candidates(&g, relu, DeviceKind::Host, FlavorId::Scalar),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn identity_and_bias_only_cases() {
        let reg = ProviderRegistry::with_builtins();
        let mut b = GraphBuilder::new(0);
        let x = b.input_image("x", 3, 4, 4);
        let c = b.conv(&x, 3, 3, 1, 1, 0, 1);
        b.output(&c);
        let mut g = infer_shapes(&b.build().unwrap(), 2).unwrap();
        let eye: Vec<f32> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        g.params.get_mut(&format!("{c}.weight")).unwrap().set_values(&eye);
        g.params.get_mut(&format!("{c}.bias")).unwrap().set_values(&[0.0f32; 3]);
        let xin = input(&g, 4);
        let node = g.node(&c).unwrap().clone();
        for cand in reg.candidates(&g, &node, DeviceKind::Host, FlavorId::Scalar).unwrap() {
            let y = execute_choice(&reg, &cand, &g, &node, &xin).unwrap();
            assert_eq!(y.to_meta(&xin.meta).data, xin.data);
        }

        let (mut g, id) = single(false, 5);
        let node = g.node(&id).unwrap().clone();
        g.params.get_mut(&format!("{id}.weight")).unwrap().set_values(&[0.0f32; 84]);
        let bias: Vec<f32> = (0..7).map(|v| v as f32 - 3.0).collect();
        g.params.get_mut(&format!("{id}.bias")).unwrap().set_values(&bias);
        let xin = input(&g, 1);
        for cand in reg.candidates(&g, &node, DeviceKind::SimAccel, FlavorId::Scalar).unwrap() {
            let y = execute_choice(&reg, &cand, &g, &node, &xin).unwrap();
            assert_eq!(y.data[..7], bias[..]);
            assert_eq!(y.data[7..], bias[..]);
        }
    }

    #[test]
    fn backward_paths_agree() {
        let reg = ProviderRegistry::with_builtins();
        for conv in [true, false] {
            let (g, id) = single(conv, 8);
            let node = g.node(&id).unwrap();
            let x = input(&g, 2);
            let ymeta = node.meta().clone();
            let dy = Tensor::from_fn(ymeta, |i| ((i * 7919) % 13) as f32 / 13.0 - 0.5);
            let cands = reg.candidates(&g, node, DeviceKind::Host, FlavorId::Scalar).unwrap();
            let base = execute_backward(&reg, &cands[0], &g, node, &x, &dy).unwrap();
            for c in &cands[1..] {
                let other = execute_backward(&reg, c, &g, node, &x, &dy).unwrap();
                assert!(max_rel_error(&other.0.data, &base.0.data) <= 1e-5);
                assert!(max_rel_error(&other.1, &base.1) <= 1e-5);
                assert!(max_rel_error(&other.2, &base.2) <= 1e-5);
            }
        }
    }

    #[test]
    fn orientation_round_trip() {
        let op = Op::Linear(crate::model_ir::LinearAttrs {
            in_features: 3,
            out_features: 2,
        });
        let w = [1, 2, 3, 4, 5, 6];
        let t = orient_weight(&op, &w, WeightOrientation::InOut);
        assert_eq!(t, [1, 4, 2, 5, 3, 6]);
        assert_eq!(unorient_weight(&op, &t, WeightOrientation::InOut), w);
    }
}
