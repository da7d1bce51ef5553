//! Per-device plan compilation and the process-wide plan cache.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use crate::autodiff::{build_backward, BackwardGraph};
use crate::dfp::{lower_group, partition, partition_graph, ExecUnit, FlavorId, IrKernel, KernelIR, UnitKind};
use crate::dnn::{
    apply_layout_plan, autotune, plan_layouts, DnnKernel, HeavyCall, ImplChoice, LayoutPlan, Pass,
    ProviderRegistry, TuneCache, TuneContext,
};
use crate::error::{Error, Result};
use crate::model_ir::{infer_shapes, model_to_json, ModelGraph};
use crate::passes::{clone_for_device, run_pipeline};
use crate::runtime::{DeviceKernel, DeviceKind};

use super::train::{build_train_program, TrainProgram};
use super::CompileOptions;

/// Everything needed to run one model on one device kind.
pub struct CompiledPlan {
    pub device: DeviceKind,
    pub flavor: FlavorId,
    /// Inference graph after rewrites and layout copies.
    pub graph: ModelGraph,
    pub units: Vec<ExecUnit>,
    /// Lowered kernel per fused unit, `None` for heavy units.
    pub kernels: Vec<Option<KernelIR>>,
    pub choices: BTreeMap<String, ImplChoice>,
    pub layout: LayoutPlan,
    pub(crate) launches: Vec<Arc<dyn DeviceKernel>>,
    /// Present when the model has a loss node.
    pub train: Option<TrainPlan>,
}

impl std::fmt::Debug for CompiledPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompiledPlan")
            .field("device", &self.device)
            .field("flavor", &self.flavor)
            .field("units", &self.units.len())
            .field("reorders", &self.layout.reorders.len())
            .finish()
    }
}

impl CompiledPlan {
    pub fn dnn_units(&self) -> usize {
        self.units.iter().filter(|u| !u.is_dfp()).count()
    }

    pub fn dfp_units(&self) -> usize {
        self.units.iter().filter(|u| u.is_dfp()).count()
    }
}

/// Training program: the rewritten graph with its loss, in canonical layout.
pub struct TrainPlan {
    pub graph: ModelGraph,
    pub backward: BackwardGraph,
    pub(crate) program: TrainProgram,
}

/// Compiled plans for every requested device kind.
#[derive(Debug)]
pub struct CompiledModel {
    pub plans: BTreeMap<DeviceKind, CompiledPlan>,
    /// Shape-inferred source graph; outputs are reported in its metas.
    pub source: ModelGraph,
    pub compile_ms: f64,
    pub tuner_runs: u64,
}

/// Canonical storage order for every graph input.
pub(crate) fn canonical_inputs(g: &ModelGraph) -> ModelGraph {
    let mut g = g.clone();
    for gi in &mut g.inputs {
        let order = gi.meta(1).canonical().tags();
        gi.dims.sort_by_key(|d| order.iter().position(|t| *t == d.tag).unwrap_or(usize::MAX));
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn choose(
    g: &ModelGraph,
    units: &[ExecUnit],
    device: DeviceKind,
    flavor: FlavorId,
    opts: &CompileOptions,
    registry: &ProviderRegistry,
    cache: &TuneCache,
    backward: bool,
) -> Result<BTreeMap<String, ImplChoice>> {
    let ctx = TuneContext {
        registry,
        cache,
        device,
        flavor,
        warmup: opts.tune_warmup,
        backward,
        seed: opts.seed,
    };
    let mut choices = BTreeMap::new();
    for u in units {
        let UnitKind::DnnNode(id) = &u.kind else { continue };
        let node = g.node(id).expect("unit node");
        let choice = match opts.forced.get(id) {
            Some(c) => c.clone(),
            None => {
                let cands = registry.candidates(g, node, device, flavor)?;
                if opts.autotune {
                    autotune(&ctx, g, node, &cands, opts.tune_budget)?
                } else {
                    cands[0].clone()
                }
            }
        };
        choices.insert(id.clone(), choice);
    }
    Ok(choices)
}

fn compile_plan(
    shaped: &ModelGraph,
    device: DeviceKind,
    opts: &CompileOptions,
    registry: &ProviderRegistry,
    cache: &TuneCache,
) -> Result<CompiledPlan> {
    let flavor = opts.flavor;
    let rewritten = run_pipeline(shaped);
    let mut dg = clone_for_device(&rewritten, device, flavor);
    let trainable = dg.base.loss_node().is_some();
    let inference = dg.base.inference_graph();
    dg.units = partition(&crate::passes::DeviceGraph {
        base: inference.clone(),
        ..dg.clone()
    });
    dg.choices = choose(&inference, &dg.units, device, flavor, opts, registry, cache, trainable)?;
    let layout = plan_layouts(&inference, &dg.units, &dg.choices)?;
    let graph = apply_layout_plan(&inference, &dg.units, &layout)?;
    let units = partition_graph(&graph);
    let mut kernels = Vec::with_capacity(units.len());
    let mut launches: Vec<Arc<dyn DeviceKernel>> = Vec::with_capacity(units.len());
    for (i, u) in units.iter().enumerate() {
        match &u.kind {
            UnitKind::DfpGroup(_) => {
                let k = lower_group(&graph, u, flavor, &format!("unit{i}"))?;
                launches.push(Arc::new(IrKernel { ir: k.clone() }));
                kernels.push(Some(k));
            }
            UnitKind::DnnNode(id) => {
                let node = graph.node(id).expect("unit node");
                let call = HeavyCall::of(&graph, node)?;
                let choice = &dg.choices[id];
                launches.push(Arc::new(DnnKernel::new(
                    registry,
                    format!("unit{i}"),
                    choice.forward.clone(),
                    call,
                    Pass::Forward,
                )?));
                kernels.push(None);
            }
        }
    }
    let train = if trainable {
        let tg = infer_shapes(&canonical_inputs(&dg.base), shaped.batch.unwrap_or(1))?;
        let backward = build_backward(&tg)?;
        let program = build_train_program(&tg, &backward, &dg.choices, registry)?;
        Some(TrainPlan {
            graph: tg,
            backward,
            program,
        })
    } else {
        None
    };
    Ok(CompiledPlan {
        device,
        flavor,
        graph,
        units,
        kernels,
        choices: dg.choices,
        layout,
        launches,
        train,
    })
}

/// Binds `dims` (canonical extents of the first input) to the graph and
/// infers shapes. Other inputs may differ from their declaration only in the
/// batch extent.
pub(crate) fn bind_dims(g: &ModelGraph, dims: &[usize]) -> Result<ModelGraph> {
    let first = g
        .inputs
        .first()
        .ok_or_else(|| Error::MalformedModel("model has no inputs".into()))?;
    let declared = first.meta(1).canonical();
    if dims.len() != declared.rank() {
        return Err(Error::InvalidArgument(format!(
            "input `{}` has rank {}, got dims {dims:?}",
            first.name,
            declared.rank()
        )));
    }
    let batch = dims[0];
    let expected = first.meta(batch).canonical_shape();
    if expected != dims {
        return Err(Error::InvalidArgument(format!(
            "input `{}` expects {expected:?}, got {dims:?}",
            first.name
        )));
    }
    infer_shapes(g, batch)
}

type PlanCache = Mutex<HashMap<String, Arc<CompiledModel>>>;

fn plan_cache() -> &'static PlanCache {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Structure, input size and every option that shapes the plan.
fn cache_key(g: &ModelGraph, dims: &[usize], opts: &CompileOptions) -> String {
    format!(
        "{}|{dims:?}|{}|{:?}|{}|{}|{}|{}|{}|{}|{}",
        model_to_json(g),
        opts.flavor.name(),
        opts.devices,
        opts.autotune,
        opts.tune_budget,
        opts.tune_warmup,
        opts.seed,
        serde_json::to_string(&opts.host).expect("config serializes"),
        serde_json::to_string(&opts.sim).expect("config serializes"),
        serde_json::to_string(&opts.forced).expect("choices serialize"),
    )
}

/// Compiles `g` for every device in `opts`, or returns the plans of an
/// earlier compilation with the same structure, input size and options.
/// Second element: whether the result came from the cache.
pub(crate) fn compile(g: &ModelGraph, dims: &[usize], opts: &CompileOptions) -> Result<(Arc<CompiledModel>, bool)> {
    let key = cache_key(g, dims, opts);
    if let Some(hit) = plan_cache().lock().expect("plan cache poisoned").get(&key) {
        return Ok((hit.clone(), true));
    }
    let start = Instant::now();
    let shaped = bind_dims(g, dims)?;
    let registry = ProviderRegistry::with_builtins();
    let cache = match &opts.tune_cache {
        Some(p) => TuneCache::load(p)?,
        None => TuneCache::new(),
    };
    let mut plans = BTreeMap::new();
    for &d in &opts.devices {
        plans.insert(d, compile_plan(&shaped, d, opts, &registry, &cache)?);
    }
    if let Some(p) = &opts.tune_cache {
        cache.save(p)?;
    }
    let model = Arc::new(CompiledModel {
        plans,
        source: shaped,
        compile_ms: start.elapsed().as_secs_f64() * 1e3,
        tuner_runs: cache.runs(),
    });
    plan_cache()
        .lock()
        .expect("plan cache poisoned")
        .insert(key, model.clone());
    Ok((model, false))
}
