//! Deployment bundles and the minimal runner that replays them.
//!
//! Layout: `manifest.json`, `weights.solw`, `kir.json` and
//! `kernels/<unit>.<flavor>.src`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dfp::{emit_source, BufRole, IrKernel, KernelIR, UnitKind};
use crate::dnn::{orient_weight, DnnKernel, HeavyCall, Impl, Pass, ProviderRegistry};
use crate::error::{Error, Result};
use crate::model_ir::{encode_weights, load_weights, Op, TensorMeta};
use crate::runtime::DeviceKernel;
use crate::tensor::Tensor;

use super::OptimizedModel;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    /// Buffer name inside the bundle.
    pub name: String,
    /// Name the caller knows the tensor by.
    pub user_name: String,
    /// Arrangement of the buffer inside the bundle.
    pub meta: TensorMeta,
    /// Arrangement the caller supplies or receives.
    pub user_meta: TensorMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallEntry {
    pub op: String,
    pub attrs: serde_json::Value,
    pub x: TensorMeta,
    pub y: TensorMeta,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    /// A fused loop nest; `source` is relative to the bundle root.
    Dfp {
        unit: String,
        entry: String,
        source: String,
        args: Vec<String>,
    },
    Gemm {
        unit: String,
        node: String,
        #[serde(rename = "impl")]
        imp: Impl,
        call: CallEntry,
        args: Vec<String>,
    },
    Conv {
        unit: String,
        node: String,
        #[serde(rename = "impl")]
        imp: Impl,
        call: CallEntry,
        args: Vec<String>,
    },
}

/// Execution order, buffer sizes and entry symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub device: String,
    pub flavor: String,
    pub batch: usize,
    pub inputs: Vec<TensorEntry>,
    pub outputs: Vec<TensorEntry>,
    /// Buffers written by steps, in f32 elements. Parameter buffers are
    /// named `p:<param>` and sized by the weights file.
    pub buffers: Vec<BufferEntry>,
    pub steps: Vec<Step>,
}

/// What [`export`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployBundle {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub kernel_files: Vec<PathBuf>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn tensor_name(t: &str) -> String {
    format!("t:{t}")
}

fn param_name(p: &str) -> String {
    format!("p:{p}")
}

pub(super) fn export(m: &OptimizedModel, out_dir: &Path) -> Result<DeployBundle> {
    let plan = m.plan();
    let source = &m.compiled.source;
    let batch = plan.graph.batch.unwrap_or(1);
    let kernels_dir = out_dir.join("kernels");
    fs::create_dir_all(&kernels_dir).map_err(|e| Error::io(&kernels_dir, e))?;

    let mut buffers = Vec::new();
    let mut steps = Vec::new();
    let mut kernel_files = Vec::new();
    let mut irs: BTreeMap<String, KernelIR> = BTreeMap::new();
    for (i, unit) in plan.units.iter().enumerate() {
        let name = format!("unit{i}");
        match (&unit.kind, &plan.kernels[i]) {
            (UnitKind::DfpGroup(_), Some(ir)) => {
                let src = emit_source(ir, plan.flavor);
                let rel = format!("kernels/{name}.{}.src", plan.flavor.name());
                let path = out_dir.join(&rel);
                write(&path, src.text.as_bytes())?;
                kernel_files.push(path);
                let mut args = Vec::new();
                for b in &ir.buffers {
                    let arg = match b.role {
                        BufRole::Input | BufRole::Output => tensor_name(&b.source),
                        BufRole::Param => param_name(&b.source),
                        BufRole::Temp => format!("tmp:{name}:{}", b.name),
                    };
                    if matches!(b.role, BufRole::Output | BufRole::Temp) {
                        buffers.push(BufferEntry {
                            name: arg.clone(),
                            len: b.len,
                        });
                    }
                    args.push(arg);
                }
                steps.push(Step::Dfp {
                    unit: name.clone(),
                    entry: src.entry,
                    source: rel,
                    args,
                });
                irs.insert(name, ir.clone());
            }
            (UnitKind::DnnNode(id), None) => {
                let n = plan.graph.node(id).expect("unit node");
                let call = HeavyCall::of(&plan.graph, n)?;
                let entry = CallEntry {
                    op: n.op.name().into(),
                    attrs: n.op.attrs_json(),
                    x: call.x.clone(),
                    y: call.y.clone(),
                    has_bias: call.has_bias,
                };
                let mut args = vec![tensor_name(&n.inputs[0])];
                args.extend(n.params.iter().map(|p| param_name(p)));
                args.push(tensor_name(id));
                buffers.push(BufferEntry {
                    name: tensor_name(id),
                    len: call.y.numel(),
                });
                let imp = plan.choices[id].forward.clone();
                let (unit, node) = (name, id.clone());
                steps.push(match n.op {
                    Op::Linear(_) => Step::Gemm {
                        unit,
                        node,
                        imp,
                        call: entry,
                        args,
                    },
                    _ => Step::Conv {
                        unit,
                        node,
                        imp,
                        call: entry,
                        args,
                    },
                });
            }
            _ => unreachable!("kernel per fused unit"),
        }
    }
    let entries = |ids: &[String], user: &[String], metas: &dyn Fn(usize, &str) -> (TensorMeta, TensorMeta)| {
        ids.iter()
            .zip(user)
            .enumerate()
            .map(|(k, (id, user_name))| {
                let (meta, user_meta) = metas(k, id);
                TensorEntry {
                    name: id.clone(),
                    user_name: user_name.clone(),
                    meta,
                    user_meta,
                }
            })
            .collect::<Vec<_>>()
    };
    let input_ids: Vec<String> = plan.graph.inputs.iter().map(|gi| gi.name.clone()).collect();
    let inputs = entries(&input_ids, &input_ids, &|k, _| {
        let meta = plan.graph.inputs[k].meta(batch);
        (meta.clone(), meta)
    });
    let outputs = entries(&plan.graph.outputs, &source.outputs, &|k, id| {
        (
            plan.graph.meta_of(id).expect("output meta"),
            source.meta_of(&source.outputs[k]).expect("output meta"),
        )
    });
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        device: m.selected.kind.as_str().into(),
        flavor: plan.flavor.name().into(),
        batch,
        inputs,
        outputs,
        buffers,
        steps,
    };
    write(&out_dir.join("weights.solw"), &encode_weights(&m.params))?;
    write(&out_dir.join("kir.json"), serde_json::to_string_pretty(&irs)?.as_bytes())?;
    write(
        &out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(DeployBundle {
        dir: out_dir.to_path_buf(),
        manifest,
        kernel_files,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Runs a bundle on host memory with the kernels it was compiled to.
/// Inputs may use any layout of the declared dimensions.
pub fn replay(dir: &Path, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
    let manifest: Manifest = serde_json::from_str(&read(&dir.join("manifest.json"))?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::InvalidArgument(format!(
            "bundle schema {} is not supported",
            manifest.schema_version
        )));
    }
    let mut irs: BTreeMap<String, KernelIR> = serde_json::from_str(&read(&dir.join("kir.json"))?)?;
    let weights = load_weights(&dir.join("weights.solw"))?;
    let registry = ProviderRegistry::with_builtins();

    let mut mem: HashMap<String, Vec<f32>> = HashMap::new();
    for (name, p) in &weights {
        mem.insert(param_name(name), p.to_vec::<f32>());
    }
    for b in &manifest.buffers {
        mem.insert(b.name.clone(), vec![0.0; b.len]);
    }
    for e in &manifest.inputs {
        let t = inputs
            .get(&e.name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing input `{}`", e.name)))?;
        if t.meta.canonical_dims() != e.meta.canonical_dims() || t.data.len() != t.meta.numel() {
            return Err(Error::InvalidArgument(format!(
                "input `{}` is {}, expected {}",
                e.name, t.meta, e.meta
            )));
        }
        mem.insert(tensor_name(&e.name), t.to_meta(&e.meta).data);
    }
    for step in &manifest.steps {
        let (kernel, args): (Box<dyn DeviceKernel>, &[String]) = match step {
            Step::Dfp { unit, args, .. } => {
                let ir = irs
                    .remove(unit)
                    .ok_or_else(|| Error::InvalidArgument(format!("bundle lacks kernel `{unit}`")))?;
                (Box::new(IrKernel { ir }), args)
            }
            Step::Gemm { unit, imp, call, args, .. } | Step::Conv { unit, imp, call, args, .. } => {
                let op = Op::from_parts(&call.op, call.attrs.clone())?;
                let w = &args[1];
                let oriented = orient_weight(&op, &mem[w], imp.orientation);
                mem.insert(w.clone(), oriented);
                let call = HeavyCall {
                    op,
                    x: call.x.clone(),
                    y: call.y.clone(),
                    has_bias: call.has_bias,
                };
                let k = DnnKernel::new(&registry, unit.clone(), imp.clone(), call, Pass::Forward)?;
                (Box::new(k), args)
            }
        };
        let mut bufs: Vec<Vec<f32>> = args
            .iter()
            .map(|a| {
                mem.get(a)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("bundle lacks buffer `{a}`")))
            })
            .collect::<Result<_>>()?;
        for (i, b) in bufs.iter().enumerate() {
            if b.len() != kernel.arg_len(i) {
                return Err(Error::InvalidArgument(format!(
                    "buffer `{}` has {} elements, `{}` expects {}",
                    args[i],
                    b.len(),
                    kernel.name(),
                    kernel.arg_len(i)
                )));
            }
        }
        kernel.run(&mut bufs);
        for i in kernel.outputs() {
            mem.insert(args[i].clone(), std::mem::take(&mut bufs[i]));
        }
    }
    manifest
        .outputs
        .iter()
        .map(|e| {
            let data = mem
                .remove(&tensor_name(&e.name))
                .ok_or_else(|| Error::InvalidArgument(format!("bundle never writes `{}`", e.name)))?;
            Ok(Tensor {
                meta: e.meta.clone(),
                data,
            }
            .to_meta(&e.user_meta))
        })
        .collect()
}
