//! `sol-mini` command line: compile, run, train, bench, export and replay.
//!
//! Results go to stdout or files; diagnostics are JSON lines on stderr.
//! Exit status is 0 on success and 1 on any error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dfp::FlavorId;
use crate::error::{Error, Result};
use crate::frontend::{
    optimize_graph, replay, CompileOptions, DeviceSelection, OffloadMode, OptimizedModel,
};
use crate::model_ir::{infer_shapes, load_model, save_weights, ModelGraph, TensorMeta};
use crate::runtime::{DeviceConfig, DeviceKind, TransferStats};
use crate::tensor::Tensor;
use crate::zoo;

#[derive(Debug, Parser)]
#[command(name = "sol-mini", version, about = "Compile and run neural networks on host or simulated accelerator devices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a model and print a plan summary as JSON.
    Compile(ModelArgs),
    /// Run inference and write the outputs to a tensor file.
    Run(RunArgs),
    /// Train with SGD on a synthetic prototype task; writes a loss CSV.
    Train(TrainArgs),
    /// Time inference per device and flavor; prints CSV.
    Bench(BenchArgs),
    /// Write a standalone deployment bundle.
    Export(ExportArgs),
    /// Run an exported bundle on the host.
    Replay(ReplayArgs),
}

/// Options shared by every command that compiles a model.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model document (JSON).
    pub model: PathBuf,
    /// Weights file (SOLW).
    pub weights: PathBuf,
    /// Canonical extents of the first input, e.g. `8x3x32x32`. Defaults to
    /// the declared shape with batch 1.
    #[arg(long, value_parser = parse_dims)]
    pub input_dims: Option<Dims>,
    /// `{host,sim}:<idx>`.
    #[arg(long, default_value = "host:0")]
    pub device: String,
    /// `scalar`, `shortvec`, `longvec` or `warp`.
    #[arg(long, default_value = "scalar")]
    pub flavor: String,
    /// Tuning cache file; defaults to `tune.json` in the cache directory.
    #[arg(long)]
    pub tune_cache: Option<PathBuf>,
    /// TOML or JSON cost model of the device kind it names.
    #[arg(long)]
    pub device_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Take the first candidate per layer instead of timing candidates.
    #[arg(long)]
    pub no_autotune: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Tensor file with the inputs.
    #[arg(long, conflicts_with = "random")]
    pub input: Option<PathBuf>,
    /// Random inputs in [-1, 1) drawn from `--seed`.
    #[arg(long)]
    pub random: bool,
    /// Where to write the outputs.
    #[arg(long, default_value = "output.json")]
    pub output: PathBuf,
    /// Print transfer counters as JSON.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f32,
    /// `transparent` or `native`.
    #[arg(long, default_value = "transparent")]
    pub mode: String,
    /// Loss curve destination (`step,loss`).
    #[arg(long, default_value = "loss.csv")]
    pub csv: PathBuf,
    /// Write the trained weights here.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    /// Print transfer counters as JSON.
    #[arg(long)]
    pub stats: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated device selections.
    #[arg(long, default_value = "host:0,sim:0")]
    pub devices: String,
    /// Comma-separated flavors; all four by default.
    #[arg(long)]
    pub flavors: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Bundle directory.
    pub bundle: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "output.json")]
    pub output: PathBuf,
}

/// Canonical extents parsed from `NxCxHxW`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<usize>);

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    s.split('x')
        .map(|d| d.trim().parse::<usize>().map_err(|e| format!("bad extent `{d}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .and_then(|v| {
            if v.is_empty() || v.contains(&0) {
                Err(format!("`{s}` is not a list of positive extents"))
            } else {
                Ok(Dims(v))
            }
        })
}

/// One JSON object per line on stderr.
fn log(event: &str, fields: serde_json::Value) {
    let mut line = json!({ "level": "info", "event": event });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    eprintln!("{line}");
}

/// One named tensor in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// File format of `run --input`, `run --output` and `replay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn from_tensors(names: &[String], ts: &[Tensor<f32>]) -> Self {
        TensorFile {
            tensors: names
                .iter()
                .zip(ts)
                .map(|(name, t)| {
                    let c = t.canonical();
                    NamedTensor {
                        name: name.clone(),
                        shape: c.meta.canonical_shape(),
                        data: c.data,
                    }
                })
                .collect(),
        }
    }

    /// Binds the file's tensors to the graph inputs at `batch`.
    fn inputs(&self, g: &ModelGraph, batch: usize) -> Result<BTreeMap<String, Tensor<f32>>> {
        g.inputs
            .iter()
            .map(|gi| {
                let t = self
                    .tensors
                    .iter()
                    .find(|t| t.name == gi.name)
                    .ok_or_else(|| Error::InvalidArgument(format!("input file lacks `{}`", gi.name)))?;
                let meta: TensorMeta = gi.meta(batch).canonical();
                if t.shape != meta.canonical_shape() {
                    return Err(Error::InvalidArgument(format!(
                        "input `{}` has shape {:?}, expected {:?}",
                        gi.name,
                        t.shape,
                        meta.canonical_shape()
                    )));
                }
                Ok((gi.name.clone(), Tensor::new(meta, t.data.clone())?))
            })
            .collect()
    }
}

fn cache_dir() -> PathBuf {
    if let Some(d) = std::env::var_os("SOL_MINI_CACHE_DIR") {
        return PathBuf::from(d);
    }
    let base = std::env::var_os("XDG_CACHE_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
        .unwrap_or_else(std::env::temp_dir);
    base.join("sol-mini")
}

struct Loaded {
    graph: ModelGraph,
    dims: Vec<usize>,
    opts: CompileOptions,
    device: DeviceSelection,
}

impl ModelArgs {
    fn load(&self) -> Result<Loaded> {
        let graph = load_model(&self.model, &self.weights)?;
        let first = graph
            .inputs
            .first()
            .ok_or_else(|| Error::MalformedModel("model has no inputs".into()))?;
        let dims = match &self.input_dims {
            Some(d) => d.0.clone(),
            None => first.meta(1).canonical_shape(),
        };
        let mut opts = CompileOptions {
            flavor: self.flavor.parse()?,
            autotune: !self.no_autotune,
            seed: self.seed,
            ..Default::default()
        };
        if opts.autotune {
            let path = match &self.tune_cache {
                Some(p) => p.clone(),
                None => {
                    let dir = cache_dir();
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    dir.join("tune.json")
                }
            };
            opts.tune_cache = Some(path);
        }
        if let Some(p) = &self.device_config {
            let cfg = DeviceConfig::load(p)?;
            match cfg.kind {
                DeviceKind::Host => opts.host = cfg,
                DeviceKind::SimAccel => opts.sim = cfg,
            }
        }
        let device: DeviceSelection = self.device.parse()?;
        Ok(Loaded {
            graph,
            dims,
            opts,
            device,
        })
    }
}

fn build(l: &Loaded, device: DeviceSelection) -> Result<OptimizedModel> {
    let mut m = optimize_graph(&l.graph, &l.dims, &l.opts)?;
    m.set_device(device)?;
    let r = m.report();
    log(
        "compiled",
        json!({ "device": r.device, "flavor": r.flavor, "units": r.units, "compile_ms": r.compile_ms, "cached": r.cached }),
    );
    Ok(m)
}

fn stats_json(s: &TransferStats) -> serde_json::Value {
    serde_json::to_value(s).expect("stats serialize")
}

fn cmd_compile(a: &ModelArgs) -> Result<()> {
    let l = a.load()?;
    let m = build(&l, l.device)?;
    let r = m.report();
    let summary = json!({
        "model": a.model,
        "device": r.device,
        "flavor": r.flavor,
        "input_dims": l.dims,
        "units": r.units,
        "dnn_units": r.dnn_units,
        "dfp_units": r.dfp_units,
        "kernels": r.kernels,
        "reorders": r.reorders,
        "compile_ms": r.compile_ms,
        "tuner_runs": r.tuner_runs,
    });
    println!("{summary}");
    Ok(())
}

fn run_inputs(a: &RunArgs, l: &Loaded) -> Result<BTreeMap<String, Tensor<f32>>> {
    let shaped = infer_shapes(&l.graph, l.dims[0])?;
    match (&a.input, a.random) {
        (Some(p), _) => TensorFile::read(p)?.inputs(&shaped, l.dims[0]),
        (None, true) => Ok(zoo::random_inputs(&shaped, l.dims[0], l.opts.seed)),
        (None, false) => Err(Error::InvalidArgument("give --input <file> or --random".into())),
    }
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let l = a.model.load()?;
    let inputs = run_inputs(a, &l)?;
    let mut m = build(&l, l.device)?;
    let out = m.predict(&inputs)?;
    TensorFile::from_tensors(&m.graph().outputs, &out).write(&a.output)?;
    log("wrote", json!({ "path": a.output }));
    if a.stats {
        let s = m.stats();
        println!("{}", json!({ "device": m.device().to_string(), "stats": stats_json(&s), "total_bytes": s.total_bytes() }));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let l = a.model.load()?;
    let mode: OffloadMode = a.mode.parse()?;
    let mut m = build(&l, l.device)?;
    let batch = l.dims[0];
    let g = m.graph().clone();
    let loss = g.loss_node().ok_or(Error::NonDifferentiableGraph)?;
    let classes = g
        .meta_of(&loss.inputs[0])
        .expect("shape-inferred graph")
        .channels();
    let mut csv = String::from("step,loss\n");
    let mut losses = Vec::with_capacity(a.steps);
    for step in 0..a.steps {
        let (x, labels) = zoo::prototype_batch(&g, batch, classes, l.opts.seed, l.opts.seed.wrapping_add(1 + step as u64));
        let loss = m.train_step(&x, &labels, a.lr, mode)?;
        csv.push_str(&format!("{step},{loss}\n"));
        losses.push(loss);
    }
    std::fs::write(&a.csv, csv).map_err(|e| Error::io(&a.csv, e))?;
    if let Some(p) = &a.save_weights {
        save_weights(m.state()?, p)?;
    }
    let s = m.stats();
    let mut out = json!({
        "device": m.device().to_string(),
        "mode": a.mode,
        "steps": a.steps,
        "initial_loss": losses.first(),
        "final_loss": losses.last(),
        "csv": a.csv,
    });
    if a.stats {
        out["stats"] = stats_json(&s);
        out["total_bytes"] = json!(s.total_bytes());
    }
    println!("{out}");
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    if a.repeat == 0 {
        return Err(Error::InvalidArgument("--repeat must be at least 1".into()));
    }
    let mut l = a.model.load()?;
    let devices: Vec<DeviceSelection> = a.devices.split(',').map(|d| d.trim().parse()).collect::<Result<_>>()?;
    let flavors: Vec<FlavorId> = match &a.flavors {
        Some(f) => f.split(',').map(|f| f.trim().parse()).collect::<Result<_>>()?,
        None => FlavorId::all().to_vec(),
    };
    let shaped = infer_shapes(&l.graph, l.dims[0])?;
    let inputs = zoo::random_inputs(&shaped, l.dims[0], l.opts.seed);
    let mut out = String::from("device,flavor,repeat,median_ms,sim_time_us,checksum\n");
    for &flavor in &flavors {
        l.opts.flavor = flavor;
        for &sel in &devices {
            let mut m = build(&l, sel)?;
            // The first call builds the parameter context.
            m.predict(&inputs)?;
            let mut times = Vec::with_capacity(a.repeat);
            let mut sim = 0.0;
            let mut checksum = 0.0f64;
            for _ in 0..a.repeat {
                let before = m.stats();
                let start = Instant::now();
                let y = m.predict(&inputs)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
                sim = m.stats().since(&before).sim_time_us;
                checksum = y.iter().flat_map(|t| &t.data).map(|&v| v as f64).sum();
            }
            out.push_str(&format!(
                "{sel},{},{},{:.6},{sim:.3},{checksum:.9e}\n",
                flavor.name(),
                a.repeat,
                median(times)
            ));
        }
    }
    print!("{out}");
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let nonempty = std::fs::read_dir(&a.out).is_ok_and(|mut d| d.next().is_some());
    if nonempty && !a.force {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not empty (use --force)",
            a.out.display()
        )));
    }
    let l = a.model.load()?;
    let mut m = build(&l, l.device)?;
    let b = m.export(&a.out)?;
    println!(
        "{}",
        json!({ "out": a.out, "steps": b.manifest.steps.len(), "kernels": b.kernel_files.len(), "device": b.manifest.device, "flavor": b.manifest.flavor })
    );
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<()> {
    let text = std::fs::read_to_string(a.bundle.join("manifest.json")).map_err(|e| Error::io(a.bundle.join("manifest.json"), e))?;
    let manifest: crate::frontend::Manifest = serde_json::from_str(&text)?;
    let file = TensorFile::read(&a.input)?;
    let mut inputs = BTreeMap::new();
    for e in &manifest.inputs {
        let t = file
            .tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| Error::InvalidArgument(format!("input file lacks `{}`", e.name)))?;
        inputs.insert(e.name.clone(), Tensor::new(e.user_meta.canonical(), t.data.clone())?);
    }
    let out = replay(&a.bundle, &inputs)?;
    let names: Vec<String> = manifest.outputs.iter().map(|e| e.user_name.clone()).collect();
    TensorFile::from_tensors(&names, &out).write(&a.output)?;
    log("wrote", json!({ "path": a.output }));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Run(a) => cmd_run(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Export(a) => cmd_export(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "level": "error", "error": e.to_string() }));
            1
        }
    }
}
