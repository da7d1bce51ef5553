use std::collections::BTreeMap;

use sol_mini::autodiff::{loss_and_grads, sgd_step, OptimizerState};
use sol_mini::dfp::FlavorId;
use sol_mini::dnn::{ImplChoice, ProviderRegistry};
use sol_mini::frontend::{
    optimize_graph, replay, CompileOptions, DeviceSelection, OffloadMode, OptimizedModel,
};
use sol_mini::model_ir::{infer_shapes, reference_forward, Op};
use sol_mini::runtime::{DeviceKind, TransferStats};
use sol_mini::zoo;
use sol_mini::{max_rel_error, Error, LayoutKind, ModelGraph, ParamTensor, Tensor};

fn quick() -> CompileOptions {
    CompileOptions {
        autotune: false,
        ..Default::default()
    }
}

fn dims(g: &ModelGraph, batch: usize) -> Vec<usize> {
    g.inputs[0].meta(batch).canonical_shape()
}

fn compile(g: &ModelGraph, batch: usize, opts: &CompileOptions) -> OptimizedModel {
    optimize_graph(g, &dims(g, batch), opts).unwrap()
}

fn bytes(inputs: &BTreeMap<String, Tensor<f32>>) -> u64 {
    inputs.values().map(|t| 4 * t.data.len() as u64).sum()
}

#[test]
fn predict_matches_the_reference_everywhere() {
    for (name, g) in [
        ("mini_vgg", zoo::mini_vgg(1)),
        ("mini_residual", zoo::mini_residual(2)),
        ("depthwise", zoo::depthwise_block(3)),
        ("mlp", zoo::mlp(32, 4)),
    ] {
        for flavor in FlavorId::all() {
            let opts = CompileOptions { flavor, ..quick() };
            let mut m = compile(&g, 2, &opts);
            let shaped = infer_shapes(&g, 2).unwrap();
            for sel in [DeviceSelection::host(), DeviceSelection::sim(0)] {
                m.set_device(sel).unwrap();
                for seed in 0..3 {
                    let inputs = zoo::random_inputs(&shaped, 2, seed);
                    let want = reference_forward(&shaped, &inputs).unwrap();
                    let got = m.predict(&inputs).unwrap();
                    assert_eq!(got[0].meta, want[0].meta);
                    let err = max_rel_error(&got[0].data, &want[0].data);
                    assert!(err <= 1e-5, "{name} {} {sel}: {err}", flavor.name());
                }
            }
        }
    }
}

#[test]
fn inputs_in_another_layout_are_converted() {
    let g = zoo::mini_residual(7);
    let shaped = infer_shapes(&g, 2).unwrap();
    let mut m = compile(&g, 2, &quick());
    m.set_device(DeviceSelection::sim(0)).unwrap();
    let inputs = zoo::random_inputs(&shaped, 2, 1);
    let want = m.predict(&inputs).unwrap();
    let nhwc: BTreeMap<_, _> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.to_layout(LayoutKind::ChannelsLast)))
        .collect();
    assert_eq!(m.predict(&nhwc).unwrap(), want);
}

#[test]
fn mlp_splits_into_three_heavy_and_two_fused_units() {
    let m = compile(&zoo::mlp(64, 0), 4, &quick());
    let r = m.report();
    assert_eq!((r.units, r.dnn_units, r.dfp_units), (5, 3, 2));
}

#[test]
fn plans_are_cached_on_structure_and_input_size() {
    let g = zoo::toy_classifier(7, 9, 3, 42);
    let opts = CompileOptions {
        seed: 4242,
        ..Default::default()
    };
    let first = compile(&g, 3, &opts);
    assert!(!first.report().cached);
    assert!(first.report().tuner_runs > 0);
    let second = compile(&g, 3, &opts);
    assert!(second.report().cached);
    assert_eq!(second.report().tuner_runs, 0);
    // New weights, same structure: still cached.
    let reweighted = zoo::toy_classifier(7, 9, 3, 43);
    assert!(compile(&reweighted, 3, &opts).report().cached);
    let resized = compile(&g, 5, &opts);
    assert!(!resized.report().cached);
    assert!(resized.report().tuner_runs > 0);
}

#[test]
fn mismatched_input_dims_are_rejected() {
    let g = zoo::mini_vgg(0);
    let err = optimize_graph(&g, &[2, 3, 9, 8], &quick()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn device_selection_is_validated() {
    let mut m = compile(&zoo::mlp(8, 0), 1, &quick());
    assert!(matches!(m.set_device(DeviceSelection::sim(1)), Err(Error::UnknownDevice(_))));
    assert!(matches!("gpu:0".parse::<DeviceSelection>(), Err(Error::UnknownDevice(_))));
    assert_eq!("sim:0".parse::<DeviceSelection>().unwrap(), DeviceSelection::sim(0));
    let mut two = quick();
    two.sim.count = 2;
    let mut m2 = compile(&zoo::mlp(8, 0), 1, &two);
    m2.set_device(DeviceSelection::sim(1)).unwrap();
    let host_only = CompileOptions {
        devices: vec![DeviceKind::Host],
        ..quick()
    };
    let mut m3 = compile(&zoo::mlp(8, 0), 1, &host_only);
    assert!(matches!(m3.set_device(DeviceSelection::sim(0)), Err(Error::UnknownDevice(_))));
}

#[test]
fn parameter_context_is_built_once_and_invalidated_by_load_state() {
    let g = zoo::mini_residual(3);
    let shaped = infer_shapes(&g, 2).unwrap();
    let mut m = compile(&g, 2, &quick());
    let sel = DeviceSelection::sim(0);
    m.set_device(sel).unwrap();
    let p = m.param_count() as u64;
    let inputs = zoo::random_inputs(&shaped, 2, 0);
    let in_bytes = bytes(&inputs);
    let out = m.predict(&inputs).unwrap();
    let out_bytes: u64 = out.iter().map(|t| 4 * t.data.len() as u64).sum();
    let first = m.stats();
    assert_eq!(first.h2d_bytes, 4 * p + in_bytes);
    assert_eq!(first.d2h_bytes, out_bytes);
    for _ in 0..5 {
        let before = m.stats();
        m.predict(&inputs).unwrap();
        let d = m.stats().since(&before);
        assert_eq!((d.h2d_bytes, d.d2h_bytes), (in_bytes, out_bytes));
    }
    assert_eq!(m.context(sel).unwrap().uploads(), 1);

    // Identical weights still invalidate.
    let same = m.state().unwrap().clone();
    m.load_state(same).unwrap();
    let before = m.stats();
    m.predict(&inputs).unwrap();
    m.predict(&inputs).unwrap();
    assert_eq!(m.stats().since(&before).h2d_bytes, 4 * p + 2 * in_bytes);
    assert_eq!(m.context(sel).unwrap().uploads(), 2);

    let mut wrong = m.state().unwrap().clone();
    let (k, t) = wrong.iter_mut().next().unwrap();
    let k = k.clone();
    *t = ParamTensor::f32(vec![1], vec![0.0]);
    assert!(matches!(m.load_state(wrong.clone()), Err(Error::WeightsMismatch(_))));
    wrong.remove(&k);
    assert!(matches!(m.load_state(wrong), Err(Error::WeightsMismatch(_))));
}

#[test]
fn host_runs_transfer_nothing() {
    let g = zoo::mini_vgg(2);
    let shaped = infer_shapes(&g, 1).unwrap();
    let mut m = compile(&g, 1, &quick());
    let inputs = zoo::random_inputs(&shaped, 1, 5);
    m.set_device(DeviceSelection::host()).unwrap();
    let host = m.predict(&inputs).unwrap();
    assert_eq!(m.stats(), TransferStats::default());
    m.set_device(DeviceSelection::sim(0)).unwrap();
    let sim = m.predict(&inputs).unwrap();
    assert!(m.stats().h2d_bytes > 0);
    assert!(max_rel_error(&host[0].data, &sim[0].data) <= 1e-6);
}

/// Separable three-class data for the toy classifier.
fn batch_for(features: usize, batch: usize, seed: u64) -> (BTreeMap<String, Tensor<f32>>, Vec<usize>) {
    let labels = zoo::random_labels(batch, 3, seed);
    let g = infer_shapes(&zoo::mlp(features, 0), batch).unwrap();
    let mut x = zoo::random_inputs(&g, batch, seed).remove("x").unwrap();
    for (n, &l) in labels.iter().enumerate() {
        for f in 0..features {
            let centre = if f % 3 == l { 2.0 } else { -0.5 };
            x.data[n * features + f] = centre + 0.3 * x.data[n * features + f];
        }
    }
    (BTreeMap::from([("x".to_string(), x)]), labels)
}

/// Max-abs error against `1e-4 · max|want|` plus a floor for the f32
/// rounding of recovering a gradient from an update.
fn grad_close(got: &[f64], want: &[f64]) -> bool {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-4 * scale + 1e-6)
}

fn max_param_diff(a: &BTreeMap<String, ParamTensor>, b: &BTreeMap<String, ParamTensor>) -> f64 {
    a.iter()
        .map(|(k, v)| {
            v.values
                .iter()
                .zip(&b[k].values)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[test]
fn device_training_matches_the_host_oracle() {
    for g in [
        zoo::toy_classifier(6, 10, 3, 1),
        zoo::with_loss(zoo::mini_residual(2)),
        zoo::with_loss(zoo::depthwise_block(3)),
        zoo::with_loss(zoo::mini_vgg(4)),
    ] {
        let batch = 4;
        let mut m = compile(&g, batch, &quick());
        m.set_device(DeviceSelection::sim(0)).unwrap();
        let shaped = infer_shapes(&g, batch).unwrap();
        let inputs = zoo::random_inputs(&shaped, batch, 9);
        let classes = shaped.meta_of(&shaped.loss_node().unwrap().inputs[0]).unwrap().channels();
        let labels = zoo::random_labels(batch, classes, 9);
        let (grads, _) = loss_and_grads::<f64>(&shaped, &inputs.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), &labels).unwrap();
        let lr = 0.5;
        let loss = m.train_step(&inputs, &labels, lr, OffloadMode::Transparent).unwrap();
        assert!((loss as f64 - grads.loss).abs() <= 1e-5 * grads.loss.abs().max(1.0));
        // Recover the device gradient from the update.
        let after = m.state().unwrap().clone();
        for (p, want) in &grads.params {
            let got: Vec<f64> = shaped.params[p]
                .values
                .iter()
                .zip(&after[p].values)
                .map(|(b, a)| (b - a) / lr as f64)
                .collect();
            assert!(grad_close(&got, want), "{p}: {:?} vs {:?}", &got[..got.len().min(4)], &want[..want.len().min(4)]);
        }
    }
}

#[test]
fn transparent_and_native_training_agree_and_native_moves_less() {
    let (features, batch) = (8, 16);
    let g = zoo::toy_classifier(features, 12, 3, 3);
    let opts = quick();
    let mut t = compile(&g, batch, &opts);
    let mut n = compile(&g, batch, &opts);
    for m in [&mut t, &mut n] {
        m.set_device(DeviceSelection::sim(0)).unwrap();
    }
    let p = t.param_count() as u64;
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;
    for step in 0..20 {
        let (x, labels) = batch_for(features, batch, step);
        let batch_bytes = bytes(&x) + 4 * labels.len() as u64;
        let (bt, bn) = (t.stats(), n.stats());
        let lt = t.train_step(&x, &labels, 0.1, OffloadMode::Transparent).unwrap();
        let ln = n.train_step(&x, &labels, 0.1, OffloadMode::Native).unwrap();
        let (dt, dn) = (t.stats().since(&bt), n.stats().since(&bn));
        if step > 0 {
            assert_eq!((dt.h2d_bytes, dt.d2h_bytes), (4 * p + batch_bytes, 4 * p + 4));
            assert_eq!((dn.h2d_bytes, dn.d2h_bytes), (batch_bytes, 4));
            assert!(dn.total_bytes() < dt.total_bytes());
        }
        assert_eq!(lt, ln);
        let diff = max_param_diff(t.state().unwrap(), &n.state().unwrap().clone());
        assert!(diff <= 1e-6, "step {step}: {diff}");
        if step == 0 {
            first_loss = lt;
        }
        last_loss = lt;
    }
    assert!(last_loss < first_loss);
}

#[test]
fn native_parameters_reach_other_devices() {
    let g = zoo::toy_classifier(5, 6, 3, 8);
    let mut m = compile(&g, 4, &quick());
    m.set_device(DeviceSelection::sim(0)).unwrap();
    let (x, labels) = batch_for(5, 4, 1);
    for _ in 0..3 {
        m.train_step(&x, &labels, 0.2, OffloadMode::Native).unwrap();
    }
    let on_sim = m.predict(&x).unwrap();
    m.set_device(DeviceSelection::host()).unwrap();
    let on_host = m.predict(&x).unwrap();
    assert!(max_rel_error(&on_host[0].data, &on_sim[0].data) <= 1e-6);
    let mut trained = infer_shapes(&g, 4).unwrap();
    trained.params = m.state().unwrap().clone();
    let want = reference_forward(&trained, &x).unwrap();
    assert!(max_rel_error(&on_host[0].data, &want[0].data) <= 1e-5);
}

#[test]
fn host_sgd_matches_the_transparent_step() {
    let g = zoo::toy_classifier(4, 5, 3, 11);
    let mut m = compile(&g, 2, &quick());
    m.set_device(DeviceSelection::host()).unwrap();
    let shaped = infer_shapes(&g, 2).unwrap();
    let (x, labels) = batch_for(4, 2, 3);
    let (grads, _) = loss_and_grads::<f32>(&shaped, &x, &labels).unwrap();
    let want = sgd_step(&OptimizerState::for_graph(&shaped, 0.05).unwrap(), &shaped.params, &grads.params).unwrap();
    m.train_step(&x, &labels, 0.05, OffloadMode::Transparent).unwrap();
    assert!(max_param_diff(m.state().unwrap(), &want) <= 1e-6);
}

#[test]
fn training_needs_a_loss_node() {
    let g = zoo::mlp(8, 0);
    let mut m = compile(&g, 2, &quick());
    let (x, labels) = batch_for(8, 2, 0);
    assert!(matches!(
        m.train_step(&x, &labels, 0.1, OffloadMode::Native),
        Err(Error::NonDifferentiableGraph)
    ));
}

#[test]
fn forward_and_backward_may_use_different_providers() {
    let g = zoo::toy_classifier(6, 8, 3, 5);
    let shaped = infer_shapes(&g, 4).unwrap();
    let reg = ProviderRegistry::with_builtins();
    let mut forced = BTreeMap::new();
    for n in shaped.nodes.iter().filter(|n| matches!(n.op, Op::Linear(_))) {
        let cands = reg.candidates(&shaped, n, DeviceKind::SimAccel, FlavorId::Scalar).unwrap();
        let fwd = cands[0].forward.clone();
        let bwd = cands
            .iter()
            .map(|c| c.backward.clone())
            .find(|b| b.provider != fwd.provider && b.orientation == fwd.orientation)
            .expect("a second provider");
        forced.insert(n.id.clone(), ImplChoice { forward: fwd, backward: bwd });
    }
    let opts = CompileOptions { forced: forced.clone(), ..quick() };
    let mut m = compile(&g, 4, &opts);
    m.set_device(DeviceSelection::sim(0)).unwrap();
    assert_eq!(m.plan().choices, forced);
    let (x, labels) = batch_for(6, 4, 2);
    let (grads, _) = loss_and_grads::<f64>(&shaped, &x.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), &labels).unwrap();
    m.train_step(&x, &labels, 1.0, OffloadMode::Transparent).unwrap();
    let after = m.state().unwrap().clone();
    for (p, want) in &grads.params {
        let got: Vec<f64> = shaped.params[p].values.iter().zip(&after[p].values).map(|(b, a)| b - a).collect();
        assert!(grad_close(&got, want), "{p}");
    }
}

#[test]
fn exported_bundle_replays_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (name, g) in [("mlp", zoo::mlp(16, 1)), ("residual", zoo::mini_residual(1)), ("vgg", zoo::mini_vgg(1))] {
        for flavor in [FlavorId::Scalar, FlavorId::warp_group()] {
            let shaped = infer_shapes(&g, 2).unwrap();
            let mut m = compile(&g, 2, &CompileOptions { flavor, ..quick() });
            m.set_device(DeviceSelection::sim(0)).unwrap();
            let out = dir.path().join(format!("{name}-{}", flavor.name()));
            let bundle = m.export(&out).unwrap();
            assert!(out.join("manifest.json").is_file());
            assert!(out.join("weights.solw").is_file());
            assert_eq!(bundle.kernel_files.len(), m.report().dfp_units);
            for f in &bundle.kernel_files {
                assert!(f.file_name().unwrap().to_str().unwrap().ends_with(&format!(".{}.src", flavor.name())));
            }
            for seed in 0..3 {
                let inputs = zoo::random_inputs(&shaped, 2, seed);
                let want = m.predict(&inputs).unwrap();
                assert_eq!(replay(&out, &inputs).unwrap(), want, "{name}");
            }
        }
    }
}

#[test]
fn mlp_manifest_lists_three_gemm_calls_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = compile(&zoo::mlp(16, 2), 2, &quick());
    let bundle = m.export(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let kinds: Vec<&str> = v["steps"].as_array().unwrap().iter().map(|s| s["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["gemm", "dfp", "gemm", "dfp", "gemm"]);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(bundle.manifest.steps.len(), 5);
}

#[test]
fn export_into_an_unwritable_location_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, b"x").unwrap();
    let mut m = compile(&zoo::mlp(8, 0), 1, &quick());
    assert!(matches!(m.export(&file.join("bundle")), Err(Error::Io { .. })));

    // Permission bits do not bind a privileged user; only check when they do.
    use std::os::unix::fs::PermissionsExt;
    let ro = dir.path().join("ro");
    std::fs::create_dir(&ro).unwrap();
    std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o555)).unwrap();
    if std::fs::write(ro.join("probe"), b"").is_err() {
        assert!(matches!(m.export(&ro), Err(Error::Io { .. })));
    }
    std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o755)).unwrap();
}
