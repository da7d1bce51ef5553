//! User-facing workflow: compile a model, pick a device, run inference or
//! training with transparent or native offloading, export a bundle.
//!
//! Parameters live in one host master copy. Each device selection keeps a
//! [`ParamContext`] with device copies of every parameter, valid while its
//! `built_version` equals the model's `param_version`.

mod compile;
mod export;
mod train;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use compile::{CompiledModel, CompiledPlan, TrainPlan};
pub use export::{replay, DeployBundle, Manifest, Step, TensorEntry, MANIFEST_SCHEMA_VERSION};

use crate::autodiff::{sgd_step, OptimizerState};
use crate::dfp::{BufRole, FlavorId, UnitKind};
use crate::dnn::{orient_weight, unorient_weight, ImplChoice, WeightOrientation};
use crate::error::{Error, Result};
use crate::model_ir::{check_inputs, load_model, ModelGraph, Op};
use crate::runtime::{read_f32, CommandQueue, DeviceConfig, DeviceKind, TransferStats, VirtualPtr};
use crate::tensor::{ParamTensor, Tensor};

/// A device kind plus its index among the configured devices of that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceSelection {
    pub kind: DeviceKind,
    pub index: usize,
}

impl DeviceSelection {
    pub fn new(kind: DeviceKind, index: usize) -> Self {
        DeviceSelection { kind, index }
    }

    pub fn host() -> Self {
        Self::new(DeviceKind::Host, 0)
    }

    pub fn sim(index: usize) -> Self {
        Self::new(DeviceKind::SimAccel, index)
    }
}

impl fmt::Display for DeviceSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.index)
    }
}

/// Parses `host`, `sim`, `host:<idx>` or `sim:<idx>`.
impl FromStr for DeviceSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, index) = s.split_once(':').unwrap_or((s, "0"));
        let kind = match kind {
            "host" => DeviceKind::Host,
            "sim" => DeviceKind::SimAccel,
            _ => return Err(Error::UnknownDevice(s.to_string())),
        };
        let index = index.parse().map_err(|_| Error::UnknownDevice(s.to_string()))?;
        Ok(DeviceSelection { kind, index })
    }
}

static DEFAULT_DEVICE: Mutex<DeviceSelection> = Mutex::new(DeviceSelection {
    kind: DeviceKind::Host,
    index: 0,
});

/// Sets the process-wide device that newly optimized models start on.
pub fn set_default_device(sel: DeviceSelection, host: &DeviceConfig, sim: &DeviceConfig) -> Result<()> {
    check_selection(sel, host, sim)?;
    *DEFAULT_DEVICE.lock().expect("default device poisoned") = sel;
    Ok(())
}

pub fn default_device() -> DeviceSelection {
    *DEFAULT_DEVICE.lock().expect("default device poisoned")
}

fn check_selection(sel: DeviceSelection, host: &DeviceConfig, sim: &DeviceConfig) -> Result<()> {
    let count = match sel.kind {
        DeviceKind::Host => host.count,
        DeviceKind::SimAccel => sim.count,
    };
    if sel.index >= count {
        return Err(Error::UnknownDevice(format!("{sel} ({count} configured)")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffloadMode {
    /// Gradients come back to the host, which updates the master copy.
    Transparent,
    /// Parameters stay on the device and are updated there.
    Native,
}

impl FromStr for OffloadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transparent" => Ok(OffloadMode::Transparent),
            "native" => Ok(OffloadMode::Native),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (expected transparent or native)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompileOptions {
    pub flavor: FlavorId,
    /// Device kinds to compile plans for.
    pub devices: Vec<DeviceKind>,
    pub autotune: bool,
    /// Timed runs per candidate.
    pub tune_budget: usize,
    pub tune_warmup: usize,
    /// Persistent tuning results, read before and written after compiling.
    pub tune_cache: Option<PathBuf>,
    pub host: DeviceConfig,
    pub sim: DeviceConfig,
    pub seed: u64,
    /// Implementation overrides by node id.
    pub forced: BTreeMap<String, ImplChoice>,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            flavor: FlavorId::Scalar,
            devices: vec![DeviceKind::Host, DeviceKind::SimAccel],
            autotune: true,
            tune_budget: 3,
            tune_warmup: 1,
            tune_cache: None,
            host: DeviceConfig::host(),
            sim: DeviceConfig::sim(),
            seed: 0,
            forced: BTreeMap::new(),
        }
    }
}

impl CompileOptions {
    fn config(&self, kind: DeviceKind) -> &DeviceConfig {
        match kind {
            DeviceKind::Host => &self.host,
            DeviceKind::SimAccel => &self.sim,
        }
    }
}

/// Summary of one `optimize` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileReport {
    pub device: String,
    pub flavor: String,
    pub units: usize,
    pub dnn_units: usize,
    pub dfp_units: usize,
    /// Launches per inference: one per unit.
    pub kernels: usize,
    pub reorders: usize,
    pub compile_ms: f64,
    pub tuner_runs: u64,
    /// The plans came from the in-process cache.
    pub cached: bool,
}

/// Device copies of every parameter.
pub struct ParamContext {
    queue: CommandQueue,
    ptrs: HashMap<String, VirtualPtr>,
    built_version: Option<u64>,
    uploads: u64,
}

impl ParamContext {
    pub fn built_version(&self) -> Option<u64> {
        self.built_version
    }

    /// Times the full parameter set was copied to the device.
    pub fn uploads(&self) -> u64 {
        self.uploads
    }

    pub fn stats(&self) -> TransferStats {
        self.queue.stats()
    }
}

pub struct OptimizedModel {
    compiled: Arc<CompiledModel>,
    opts: CompileOptions,
    params: BTreeMap<String, ParamTensor>,
    param_version: u64,
    contexts: BTreeMap<DeviceSelection, ParamContext>,
    selected: DeviceSelection,
    /// A context whose parameters are newer than the host master copy.
    device_master: Option<DeviceSelection>,
    report: CompileReport,
}

impl fmt::Debug for OptimizedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OptimizedModel")
            .field("selected", &self.selected)
            .field("param_version", &self.param_version)
            .field("report", &self.report)
            .finish()
    }
}

/// Loads a model and its weights and compiles it for `input_dims`, the
/// canonical extents of the first graph input.
pub fn optimize(model_path: &Path, weights_path: &Path, input_dims: &[usize], opts: &CompileOptions) -> Result<OptimizedModel> {
    let g = load_model(model_path, weights_path)?;
    optimize_graph(&g, input_dims, opts)
}

/// [`optimize`] on an in-memory graph with bound parameters.
pub fn optimize_graph(g: &ModelGraph, input_dims: &[usize], opts: &CompileOptions) -> Result<OptimizedModel> {
    opts.flavor.validate()?;
    if opts.devices.is_empty() {
        return Err(Error::InvalidArgument("no devices to compile for".into()));
    }
    opts.host.validate()?;
    opts.sim.validate()?;
    let (compiled, cached) = compile::compile(g, input_dims, opts)?;
    let mut selected = default_device();
    if !opts.devices.contains(&selected.kind) || check_selection(selected, &opts.host, &opts.sim).is_err() {
        selected = DeviceSelection::new(opts.devices[0], 0);
    }
    let mut m = OptimizedModel {
        params: g.params.clone(),
        compiled,
        opts: opts.clone(),
        param_version: 0,
        contexts: BTreeMap::new(),
        selected,
        device_master: None,
        report: CompileReport {
            device: String::new(),
            flavor: opts.flavor.name().into(),
            units: 0,
            dnn_units: 0,
            dfp_units: 0,
            kernels: 0,
            reorders: 0,
            compile_ms: 0.0,
            tuner_runs: 0,
            cached,
        },
    };
    m.refresh_report(cached);
    Ok(m)
}

impl OptimizedModel {
    fn refresh_report(&mut self, cached: bool) {
        let p = self.plan();
        self.report = CompileReport {
            device: self.selected.to_string(),
            flavor: self.opts.flavor.name().into(),
            units: p.units.len(),
            dnn_units: p.dnn_units(),
            dfp_units: p.dfp_units(),
            kernels: p.launches.len(),
            reorders: p.layout.reorders.len(),
            compile_ms: if cached { 0.0 } else { self.compiled.compile_ms },
            tuner_runs: if cached { 0 } else { self.compiled.tuner_runs },
            cached,
        };
    }

    pub fn report(&self) -> &CompileReport {
        &self.report
    }

    pub fn compiled(&self) -> &CompiledModel {
        &self.compiled
    }

    /// Plan of the selected device kind.
    pub fn plan(&self) -> &CompiledPlan {
        &self.compiled.plans[&self.selected.kind]
    }

    pub fn plan_for(&self, kind: DeviceKind) -> Option<&CompiledPlan> {
        self.compiled.plans.get(&kind)
    }

    pub fn device(&self) -> DeviceSelection {
        self.selected
    }

    pub fn flavor(&self) -> FlavorId {
        self.opts.flavor
    }

    /// Canonical extents of the first input.
    pub fn input_dims(&self) -> Vec<usize> {
        let g = &self.compiled.source;
        g.inputs[0].meta(g.batch.unwrap_or(1)).canonical_shape()
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.compiled.source
    }

    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    /// Number of parameter elements, running statistics included.
    pub fn param_count(&self) -> usize {
        self.params.values().map(ParamTensor::numel).sum()
    }

    /// Routes subsequent calls to `sel`.
    pub fn set_device(&mut self, sel: DeviceSelection) -> Result<()> {
        check_selection(sel, &self.opts.host, &self.opts.sim)?;
        if !self.compiled.plans.contains_key(&sel.kind) {
            return Err(Error::UnknownDevice(format!("{sel} (not compiled for)")));
        }
        self.selected = sel;
        let cached = self.report.cached;
        self.refresh_report(cached);
        Ok(())
    }

    pub fn context(&self, sel: DeviceSelection) -> Option<&ParamContext> {
        self.contexts.get(&sel)
    }

    /// Transfer counters of the selected device's queue.
    pub fn stats(&self) -> TransferStats {
        self.contexts
            .get(&self.selected)
            .map(ParamContext::stats)
            .unwrap_or_default()
    }

    /// Host master copy, refreshed from the device after native training.
    pub fn state(&mut self) -> Result<&BTreeMap<String, ParamTensor>> {
        self.sync_host()?;
        Ok(&self.params)
    }

    /// Replaces the master copy and invalidates every parameter context.
    pub fn load_state(&mut self, weights: BTreeMap<String, ParamTensor>) -> Result<()> {
        for (name, old) in &self.params {
            let new = weights
                .get(name)
                .ok_or_else(|| Error::WeightsMismatch(format!("missing parameter `{name}`")))?;
            if new.shape != old.shape {
                return Err(Error::WeightsMismatch(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    new.shape, old.shape
                )));
            }
        }
        if let Some(extra) = weights.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::WeightsMismatch(format!("unknown parameter `{extra}`")));
        }
        self.params = weights;
        self.param_version += 1;
        self.device_master = None;
        Ok(())
    }

    /// Parameter → weight orientation on `kind`.
    fn orientations(&self, kind: DeviceKind) -> HashMap<String, (Op, WeightOrientation)> {
        let plan = &self.compiled.plans[&kind];
        plan.choices
            .iter()
            .filter_map(|(id, c)| {
                let n = plan.graph.node(id)?;
                matches!(n.op, Op::Linear(_)).then(|| (n.params[0].clone(), (n.op.clone(), c.forward.orientation)))
            })
            .collect()
    }

    /// Copies the device-resident parameters back into the master copy.
    pub fn sync_host(&mut self) -> Result<()> {
        let Some(sel) = self.device_master else {
            return Ok(());
        };
        let orient = self.orientations(sel.kind);
        let ctx = self.contexts.get_mut(&sel).expect("device master has a context");
        let bufs: Vec<_> = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), ctx.queue.download_f32(ctx.ptrs[name], p.numel())))
            .collect();
        ctx.queue.synchronize()?;
        for (name, buf) in bufs {
            let mut v = read_f32(&buf);
            if let Some((op, o)) = orient.get(&name) {
                v = unorient_weight(op, &v, *o);
            }
            self.params.get_mut(&name).expect("known parameter").set_values(&v);
        }
        self.param_version += 1;
        ctx.built_version = Some(self.param_version);
        self.device_master = None;
        Ok(())
    }

    /// Makes the selected context current, uploading every parameter when
    /// it is missing or stale.
    fn ensure_context(&mut self) -> Result<()> {
        let sel = self.selected;
        if self.device_master.is_some_and(|m| m != sel) {
            self.sync_host()?;
        }
        if !self.contexts.contains_key(&sel) {
            let cfg = self.opts.config(sel.kind).clone();
            self.contexts.insert(
                sel,
                ParamContext {
                    queue: CommandQueue::new(cfg),
                    ptrs: HashMap::new(),
                    built_version: None,
                    uploads: 0,
                },
            );
        }
        let version = self.param_version;
        let orient = self.orientations(sel.kind);
        let ctx = self.contexts.get_mut(&sel).expect("inserted above");
        if ctx.built_version == Some(version) {
            return Ok(());
        }
        for (name, p) in &self.params {
            let ptr = match ctx.ptrs.get(name) {
                Some(&ptr) => ptr,
                None => {
                    let ptr = ctx.queue.malloc_async(p.numel().max(1) as u64 * 4)?;
                    ctx.ptrs.insert(name.clone(), ptr);
                    ptr
                }
            };
            let mut v = p.to_vec::<f32>();
            if let Some((op, o)) = orient.get(name) {
                v = orient_weight(op, &v, *o);
            }
            ctx.queue.upload_f32(ptr, &v);
        }
        ctx.built_version = Some(version);
        ctx.uploads += 1;
        Ok(())
    }

    /// Runs inference on the selected device. Inputs may use any layout of
    /// the declared dimensions; outputs come back in each output's declared
    /// layout.
    pub fn predict(&mut self, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
        self.ensure_context()?;
        let plan = &self.compiled.plans[&self.selected.kind];
        check_inputs(&plan.graph, inputs)?;
        let batch = plan.graph.batch.unwrap_or(1);
        let ctx = self.contexts.get_mut(&self.selected).expect("context ensured");
        let mut tensors: HashMap<String, VirtualPtr> = HashMap::new();
        let mut transient = Vec::new();
        let mut alloc = |q: &mut CommandQueue, len: usize| -> Result<VirtualPtr> {
            let p = q.malloc_async(len.max(1) as u64 * 4)?;
            transient.push(p);
            Ok(p)
        };
        for gi in &plan.graph.inputs {
            let t = inputs[&gi.name].to_meta(&gi.meta(batch));
            let p = alloc(&mut ctx.queue, t.data.len())?;
            ctx.queue.upload_f32(p, &t.data);
            tensors.insert(gi.name.clone(), p);
        }
        for (i, unit) in plan.units.iter().enumerate() {
            let mut args = Vec::new();
            match (&unit.kind, &plan.kernels[i]) {
                (UnitKind::DfpGroup(_), Some(ir)) => {
                    for b in &ir.buffers {
                        let p = match b.role {
                            BufRole::Input => tensors[&b.source],
                            BufRole::Param => ctx.ptrs[&b.source],
                            BufRole::Output | BufRole::Temp => {
                                let p = alloc(&mut ctx.queue, b.len)?;
                                if b.role == BufRole::Output {
                                    tensors.insert(b.source.clone(), p);
                                }
                                p
                            }
                        };
                        args.push(p);
                    }
                }
                (UnitKind::DnnNode(id), None) => {
                    let n = plan.graph.node(id).expect("unit node");
                    args.push(tensors[&n.inputs[0]]);
                    args.extend(n.params.iter().map(|p| ctx.ptrs[p]));
                    let y = alloc(&mut ctx.queue, n.meta().numel())?;
                    args.push(y);
                    tensors.insert(id.clone(), y);
                }
                _ => unreachable!("kernel per fused unit"),
            }
            ctx.queue.launch_async(plan.launches[i].clone(), &args)?;
        }
        let downloads: Vec<_> = plan
            .graph
            .outputs
            .iter()
            .map(|id| {
                let m = plan.graph.meta_of(id).expect("output meta");
                let buf = ctx.queue.download_f32(tensors[id], m.numel());
                (m, buf)
            })
            .collect();
        for p in transient {
            ctx.queue.free_async(p)?;
        }
        ctx.queue.synchronize()?;
        let source = &self.compiled.source;
        Ok(downloads
            .into_iter()
            .zip(&source.outputs)
            .map(|((meta, buf), id)| {
                let t = Tensor {
                    meta,
                    data: read_f32(&buf),
                };
                t.to_meta(&source.meta_of(id).expect("output meta"))
            })
            .collect())
    }

    /// One SGD step on the selected device; returns the batch loss computed
    /// before the update.
    pub fn train_step(
        &mut self,
        inputs: &BTreeMap<String, Tensor<f32>>,
        labels: &[usize],
        lr: f32,
        mode: OffloadMode,
    ) -> Result<f32> {
        let opt = OptimizerState::new(lr, Vec::new())?;
        let kind = self.selected.kind;
        let Some(train) = &self.compiled.plans[&kind].train else {
            return Err(Error::NonDifferentiableGraph);
        };
        check_inputs(&train.graph, inputs)?;
        let batch = train.graph.batch.unwrap_or(1);
        if labels.len() != batch {
            return Err(Error::InvalidArgument(format!("need {batch} labels, got {}", labels.len())));
        }
        if mode == OffloadMode::Transparent {
            self.sync_host()?;
        }
        self.ensure_context()?;
        let compiled = self.compiled.clone();
        let prog = &compiled.plans[&kind].train.as_ref().expect("checked above").program;
        let ctx = self.contexts.get_mut(&self.selected).expect("context ensured");
        let q = &mut ctx.queue;
        let mut bufs: HashMap<&str, VirtualPtr> = HashMap::new();
        for (name, &len) in &prog.buffers {
            bufs.insert(name, q.malloc_async(len.max(1) as u64 * 4)?);
        }
        for (input, buf) in &prog.inputs {
            q.upload_f32(bufs[buf.as_str()], &inputs[input].canonical().data);
        }
        let label_values: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        q.upload_f32(bufs[prog.labels.as_str()], &label_values);
        let resolve = |name: &str| -> VirtualPtr {
            match name.strip_prefix("p:") {
                Some(p) => ctx.ptrs[p],
                None => bufs[name],
            }
        };
        let launches: Vec<_> = prog
            .launches
            .iter()
            .map(|l| (l.kernel.clone(), l.args.iter().map(|a| resolve(a)).collect::<Vec<_>>()))
            .collect();
        for (k, args) in launches {
            q.launch_async(k, &args)?;
        }
        let mut grads = Vec::new();
        let mut stats = Vec::new();
        match mode {
            OffloadMode::Transparent => {
                for (name, p) in &self.params {
                    match prog.grads.get(name) {
                        Some(d) => grads.push((name.clone(), q.download_f32(bufs[d.as_str()], p.numel()))),
                        None => stats.push((name.clone(), q.download_f32(ctx.ptrs[name], p.numel()))),
                    }
                }
            }
            OffloadMode::Native => {
                for (name, d) in &prog.grads {
                    let len = self.params[name].numel();
                    q.launch_async(train::sgd_kernel(len, lr), &[ctx.ptrs[name], bufs[d.as_str()]])?;
                }
            }
        }
        let loss_buf = q.download_f32(bufs[prog.loss.as_str()], 1);
        for p in bufs.into_values() {
            q.free_async(p)?;
        }
        q.synchronize()?;
        let loss = read_f32(&loss_buf)[0];
        match mode {
            OffloadMode::Transparent => {
                let orient = self.orientations(kind);
                let mut host_grads = BTreeMap::new();
                for (name, buf) in grads {
                    let mut v = read_f32(&buf);
                    if let Some((op, o)) = orient.get(&name) {
                        v = unorient_weight(op, &v, *o);
                    }
                    host_grads.insert(name, v);
                }
                let opt = OptimizerState {
                    params: host_grads.keys().cloned().collect(),
                    ..opt
                };
                let mut next = sgd_step(&opt, &self.params, &host_grads)?;
                for (name, buf) in stats {
                    next.get_mut(&name).expect("known parameter").set_values(&read_f32(&buf));
                }
                self.params = next;
                self.param_version += 1;
            }
            OffloadMode::Native => self.device_master = Some(self.selected),
        }
        Ok(loss)
    }

    /// Writes a deployment bundle for the selected device.
    pub fn export(&mut self, out_dir: &Path) -> Result<DeployBundle> {
        self.sync_host()?;
        export::export(self, out_dir)
    }
}
