//! Short measurement-based selection among candidate implementations.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{orient_weight, HeavyCall, Impl, ImplChoice, ProviderRegistry};
use crate::dfp::FlavorId;
use crate::error::{Error, Result};
use crate::model_ir::{LayerNode, ModelGraph};
use crate::runtime::DeviceKind;

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub choice: ImplChoice,
    /// Median forward (plus backward, when tuned) time of the winner.
    pub micros: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    version: u32,
    entries: BTreeMap<String, TuneEntry>,
}

/// Tuning results keyed by layer hyperparameters.
#[derive(Debug, Default)]
pub struct TuneCache {
    entries: RwLock<BTreeMap<String, TuneEntry>>,
    measuring: Mutex<()>,
    runs: AtomicU64,
}

impl TuneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<TuneEntry> {
        self.entries.read().expect("tune cache poisoned").get(key).cloned()
    }

    pub fn insert(&self, key: String, entry: TuneEntry) {
        self.entries.write().expect("tune cache poisoned").insert(key, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("tune cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kernel executions performed for measurement so far.
    pub fn runs(&self) -> u64 {
        self.runs.load(Ordering::Relaxed)
    }

    /// Reads a cache file; a missing file gives an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let file: CacheFile = serde_json::from_str(&text)?;
        if file.version != CACHE_VERSION {
            return Err(Error::Config(format!(
                "tune cache {} has version {}, expected {CACHE_VERSION}",
                path.display(),
                file.version
            )));
        }
        Ok(TuneCache {
            entries: RwLock::new(file.entries),
            ..Self::default()
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CacheFile {
            version: CACHE_VERSION,
            entries: self.entries.read().expect("tune cache poisoned").clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Cache key from op, attributes, shapes, dtype, device and flavor.
pub fn tune_key(call: &HeavyCall, device: DeviceKind, flavor: FlavorId, backward: bool) -> String {
    format!(
        "{}{}|x={:?}|y={:?}|bias={}|{:?}|{}|{}|bwd={}",
        call.op.name(),
        call.op.attrs_json(),
        call.x.canonical_shape(),
        call.y.canonical_shape(),
        call.has_bias,
        call.x.dtype,
        device.as_str(),
        flavor.name(),
        backward
    )
}

/// Where and how to tune.
pub struct TuneContext<'a> {
    pub registry: &'a ProviderRegistry,
    pub cache: &'a TuneCache,
    pub device: DeviceKind,
    pub flavor: FlavorId,
    pub warmup: usize,
    /// Also pick a backward implementation.
    pub backward: bool,
    pub seed: u64,
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

fn argmin<'a>(items: impl Iterator<Item = (&'a Impl, f64)>) -> Option<(&'a Impl, f64)> {
    items.fold(None, |best, (imp, t)| match best {
        Some((_, bt)) if bt <= t => best,
        _ => Some((imp, t)),
    })
}

/// Picks the candidate with the smallest median of `budget_runs` timings
/// (after `warmup` discarded runs) per pass. `measure` times one run in
/// microseconds. A single candidate is returned unmeasured; a cache hit on
/// `key` skips measurement.
pub fn autotune_with(
    cache: &TuneCache,
    key: &str,
    cands: &[ImplChoice],
    budget_runs: usize,
    warmup: usize,
    backward: bool,
    measure: &mut dyn FnMut(Pass, &Impl) -> f64,
) -> ImplChoice {
    assert!(!cands.is_empty(), "autotune needs at least one candidate");
    if cands.len() == 1 {
        return cands[0].clone();
    }
    if let Some(hit) = cache.get(key).filter(|e| cands.contains(&ImplChoice::same(e.choice.forward.clone()))) {
        return hit.choice;
    }
    let _serial = cache.measuring.lock().expect("tune lock poisoned");
    let budget = budget_runs.max(1);
    let mut time = |pass: Pass, imp: &Impl| {
        for _ in 0..warmup {
            measure(pass, imp);
        }
        let t: Vec<f64> = (0..budget).map(|_| measure(pass, imp)).collect();
        cache.runs.fetch_add((warmup + budget) as u64, Ordering::Relaxed);
        median(t)
    };
    let fwd: Vec<(&Impl, f64)> = cands.iter().map(|c| (&c.forward, time(Pass::Forward, &c.forward))).collect();
    let (best_fwd, fwd_time) = argmin(fwd.into_iter()).expect("non-empty");
    let best_fwd = best_fwd.clone();
    let (best_bwd, bwd_time) = if backward {
        let mut seen: Vec<&Impl> = Vec::new();
        for c in cands {
            if c.backward.orientation == best_fwd.orientation && !seen.contains(&&c.backward) {
                seen.push(&c.backward);
            }
        }
        let timed: Vec<(&Impl, f64)> = seen.into_iter().map(|i| (i, time(Pass::Backward, i))).collect();
        let (b, t) = argmin(timed.into_iter()).expect("forward winner has a backward");
        (b.clone(), t)
    } else {
        (best_fwd.clone(), 0.0)
    };
    let choice = ImplChoice {
        forward: best_fwd,
        backward: best_bwd,
    };
    cache.insert(
        key.to_string(),
        TuneEntry {
            choice: choice.clone(),
            micros: fwd_time + bwd_time,
        },
    );
    choice
}

/// Tunes `node` by running each candidate on synthetic data of its shape and
/// scaling wall-clock medians by the provider's cost hint for the device.
pub fn autotune(
    ctx: &TuneContext<'_>,
    g: &ModelGraph,
    node: &LayerNode,
    cands: &[ImplChoice],
    budget_runs: usize,
) -> Result<ImplChoice> {
    if cands.is_empty() {
        return Err(Error::NoProvider(node.id.clone()));
    }
    let base = HeavyCall::of(g, node)?;
    let key = tune_key(&base, ctx.device, ctx.flavor, ctx.backward);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let x: Vec<f32> = (0..base.x.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy: Vec<f32> = (0..base.y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f32> = g.params[&node.params[0]].to_vec();
    let b: Option<Vec<f32>> = node.params.get(1).map(|p| g.params[p].to_vec());
    let reg = ctx.registry;
    let mut failure = None;
    let mut measure = |pass: Pass, imp: &Impl| -> f64 {
        let call = base.with_layout(imp.layout);
        let wo = orient_weight(&node.op, &w, imp.orientation);
        let start = Instant::now();
        let r = match pass {
            Pass::Forward => reg.forward(imp, &call, &x, &wo, b.as_deref()).map(drop),
            Pass::Backward => reg.backward(imp, &call, &x, &wo, &dy).map(drop),
        };
        let micros = start.elapsed().as_secs_f64() * 1e6;
        if let Err(e) = r {
            failure.get_or_insert(e);
            return f64::INFINITY;
        }
        let hint = reg.get(&imp.provider).map_or(1.0, |p| p.cost_hint(ctx.device, ctx.flavor, imp));
        micros * hint
    };
    let choice = autotune_with(ctx.cache, &key, cands, budget_runs, ctx.warmup, ctx.backward, &mut measure);
    match failure {
        Some(e) => Err(e),
        None => Ok(choice),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnn::{HeavyGrads, KernelProvider, OpClass};
    use crate::model_ir::{infer_shapes, LayoutKind};
    use crate::zoo::GraphBuilder;
    use std::sync::Arc;

    /// Direct kernels plus an algorithm that burns time before answering.
    struct Padded;

    impl KernelProvider for Padded {
        fn name(&self) -> &str {
            "padded"
        }
        fn algorithms(&self, op: OpClass) -> Vec<String> {
            match op {
                OpClass::Conv => vec!["slow".into(), "fast".into()],
                OpClass::Linear => vec![],
            }
        }
        fn layouts(&self) -> Vec<LayoutKind> {
            vec![LayoutKind::ChannelsFirst]
        }
        fn forward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], b: Option<&[f32]>) -> Vec<f32> {
            if imp.algorithm == "slow" {
                std::thread::sleep(std::time::Duration::from_millis(3));
            }
            crate::dnn::DirectProvider.forward(imp, call, x, w, b)
        }
        fn backward(&self, imp: &Impl, call: &HeavyCall, x: &[f32], w: &[f32], dy: &[f32]) -> HeavyGrads {
            crate::dnn::DirectProvider.backward(imp, call, x, w, dy)
        }
    }

    fn conv_graph(seed: u64, id: &str) -> (ModelGraph, LayerNode) {
        let mut b = GraphBuilder::new(seed);
        let x = b.input_image("x", 2, 5, 5);
        let c = b.conv(&x, 2, 3, 3, 1, 1, 1);
        b.output(&c);
        let mut g = infer_shapes(&b.build().unwrap(), 1).unwrap();
        let mut node = g.node(&c).unwrap().clone();
        node.id = id.to_string();
        g.nodes[0].id = id.to_string();
        (g, node)
    }

    fn ctx<'a>(reg: &'a ProviderRegistry, cache: &'a TuneCache) -> TuneContext<'a> {
        TuneContext {
            registry: reg,
            cache,
            device: DeviceKind::Host,
            flavor: FlavorId::Scalar,
            warmup: 1,
            backward: false,
            seed: 0,
        }
    }

    #[test]
    fn padded_slow_path_loses() {
        let mut reg = ProviderRegistry::new();
        reg.register(Arc::new(Padded)).unwrap();
        let cache = TuneCache::new();
        let (g, node) = conv_graph(0, "a");
        let cands = reg.candidates(&g, &node, DeviceKind::Host, FlavorId::Scalar).unwrap();
        assert_eq!(cands[0].forward.algorithm, "slow");
        let pick = autotune(&ctx(&reg, &cache), &g, &node, &cands, 3).unwrap();
        assert_eq!(pick.forward.algorithm, "fast");
        assert_eq!(cache.runs(), 2 * (1 + 3));
    }

    #[test]
    fn cache_is_keyed_by_hyperparameters_only() {
        let reg = ProviderRegistry::with_builtins();
        let cache = TuneCache::new();
        let (g1, n1) = conv_graph(1, "first");
        let (g2, n2) = conv_graph(2, "second");
        let c1 = reg.candidates(&g1, &n1, DeviceKind::Host, FlavorId::Scalar).unwrap();
        let a = autotune(&ctx(&reg, &cache), &g1, &n1, &c1, 2).unwrap();
        let runs = cache.runs();
        assert!(runs > 0);
        let c2 = reg.candidates(&g2, &n2, DeviceKind::Host, FlavorId::Scalar).unwrap();
        let b = autotune(&ctx(&reg, &cache), &g2, &n2, &c2, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.runs(), runs);
    }

    #[test]
    fn single_candidate_is_not_measured() {
        let cache = TuneCache::new();
        let imp = Impl {
            provider: "p".into(),
            algorithm: "a".into(),
            layout: LayoutKind::ChannelsFirst,
            orientation: crate::dnn::WeightOrientation::OutIn,
        };
        let one = [ImplChoice::same(imp)];
        let got = autotune_with(&cache, "k", &one, 5, 3, true, &mut |_, _| panic!("measured"));
        assert_eq!(got, one[0]);
        assert!(cache.is_empty());
    }

    #[test]
    fn cache_file_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/tune.json");
        let cache = TuneCache::new();
        let imp = Impl {
            provider: "direct".into(),
            algorithm: "direct".into(),
            layout: LayoutKind::ChannelsLast,
            orientation: crate::dnn::WeightOrientation::OutIn,
        };
        cache.insert(
            "k".into(),
            TuneEntry {
                choice: ImplChoice::same(imp),
                micros: 1.5,
            },
        );
        cache.save(&path).unwrap();
        let back = TuneCache::load(&path).unwrap();
        assert_eq!(back.get("k"), cache.get("k"));
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(TuneCache::load(&path).is_err());
        assert!(TuneCache::load(&dir.path().join("missing.json")).unwrap().is_empty());
    }
}
