use std::collections::BTreeMap;

use sol_mini::dfp::{emit_source, lower_group, partition_graph, run_kernel, BufRole, ExecUnit, FlavorId, UnitKind};
use sol_mini::model_ir::{evaluate, infer_shapes, ForwardMode};
use sol_mini::passes::run_pipeline;
use sol_mini::zoo::{self, GraphBuilder};
use sol_mini::{max_rel_error, LayoutKind, ModelGraph, Tensor};

fn golden(name: &str) -> String {
    let path = format!("{}/testdata/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

#[test]
fn avg_pool_goldens_match_every_flavor() {
    let g = infer_shapes(&zoo::avg_pool_512(true), 1).unwrap();
    let units = partition_graph(&g);
    assert_eq!(units.len(), 1);
    for f in FlavorId::all() {
        let k = lower_group(&g, &units[0], f, "kernel").unwrap();
        let src = emit_source(&k, f);
        let want = golden(&format!("avg_pool.{}.{}", f.name(), src.extension()));
        assert_eq!(src.text, want, "flavor {}", f.name());
        assert!(src.text.contains("/ 9;"));
    }
    let scalar = golden("avg_pool.scalar.c");
    assert!(scalar.contains("OC0x * 16384 + (OP1 + K1) * 128 + (OP0 + K0)"));
}

#[test]
fn uncounted_padding_divides_by_the_in_bounds_count() {
    let g = infer_shapes(&zoo::avg_pool_512(false), 1).unwrap();
    let k = lower_group(&g, &partition_graph(&g)[0], FlavorId::Scalar, "kernel").unwrap();
    let text = emit_source(&k, FlavorId::Scalar).text;
    assert!(text.contains("L1_n += 1;"));
    assert!(!text.contains("/ 9;"));
}

/// Runs every fused group of `g` on reference activations and compares the
/// group outputs with the reference values in the group's own layouts.
fn check_groups(g: &ModelGraph, batch: usize, seed: u64) -> f64 {
    let inputs = zoo::random_inputs(g, batch, seed);
    let inputs64: BTreeMap<String, Tensor<f64>> = inputs.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let rec = evaluate::<f64>(g, &inputs64, None, ForwardMode::Inference).unwrap();
    let in_meta = |id: &str| g.meta_of(id).unwrap();
    let value = |id: &str| -> Vec<f32> {
        let t = Tensor {
            meta: rec.metas[id].clone(),
            data: rec.values[id].clone(),
        };
        t.to_meta(&in_meta(id)).cast::<f32>().data
    };
    let mut worst: f64 = 0.0;
    let units = partition_graph(g);
    for f in FlavorId::all() {
        for (i, u) in units.iter().filter(|u| u.is_dfp()).enumerate() {
            let k = lower_group(g, u, f, &format!("unit{i}")).unwrap();
            let ins: Vec<Vec<f32>> = k
                .buffers
                .iter()
                .filter(|b| b.role == BufRole::Input)
                .map(|b| value(&b.source))
                .collect();
            let ps: Vec<Vec<f32>> = k
                .buffers
                .iter()
                .filter(|b| b.role == BufRole::Param)
                .map(|b| g.params[&b.source].to_vec::<f32>())
                .collect();
            let in_refs: Vec<&[f32]> = ins.iter().map(Vec::as_slice).collect();
            let p_refs: Vec<&[f32]> = ps.iter().map(Vec::as_slice).collect();
            let outs = run_kernel(&k, &in_refs, &p_refs).unwrap();
            let out_decls: Vec<_> = k.buffers.iter().filter(|b| b.role == BufRole::Output).collect();
            assert_eq!(out_decls.len(), outs.len());
            for (d, o) in out_decls.iter().zip(&outs) {
                let want = value(&d.source);
                worst = worst.max(max_rel_error(o, &want));
            }
        }
    }
    worst
}

fn relayout_all(g: &ModelGraph, kind: LayoutKind) -> ModelGraph {
    let mut g = g.clone();
    for gi in &mut g.inputs {
        let order = gi.meta(1).with_layout(kind).tags();
        gi.dims.sort_by_key(|d| order.iter().position(|t| *t == d.tag).unwrap());
    }
    g
}

#[test]
fn fused_groups_match_the_reference_on_every_model() {
    for (name, g) in [
        ("mini_vgg", zoo::mini_vgg(1)),
        ("mini_residual", zoo::mini_residual(2)),
        ("depthwise", zoo::depthwise_block(3)),
        ("mlp", zoo::mlp(64, 4)),
    ] {
        for kind in [LayoutKind::ChannelsFirst, LayoutKind::ChannelsLast] {
            let g = infer_shapes(&run_pipeline(&relayout_all(&g, kind)), 2).unwrap();
            for seed in 0..3 {
                let err = check_groups(&g, 2, seed);
                assert!(err <= 1e-5, "{name} {kind:?} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn flavors_compute_identical_bits() {
    let g = infer_shapes(&run_pipeline(&zoo::mini_residual(5)), 2).unwrap();
    let inputs = zoo::random_inputs(&g, 2, 9);
    let x = &inputs["x"];
    // The first group reads the stem convolution; feed it the input shape.
    let units = partition_graph(&g);
    let u = units.iter().find(|u| u.is_dfp()).unwrap();
    let len = g.meta_of(&u.inputs[0]).unwrap().numel();
    let data: Vec<f32> = (0..len).map(|i| x.data[i % x.data.len()] - 0.25).collect();
    let mut first: Option<Vec<Vec<f32>>> = None;
    for f in FlavorId::all() {
        let k = lower_group(&g, u, f, "k").unwrap();
        let out = run_kernel::<f32>(&k, &[&data], &[]).unwrap();
        match &first {
            None => first = Some(out),
            Some(o) => assert_eq!(o, &out, "flavor {}", f.name()),
        }
    }
}

#[test]
fn fused_relu_max_pool_seeds_with_zero() {
    for relu_first in [true, false] {
        let mut b = GraphBuilder::new(0);
        let x = b.input_image("x", 1, 2, 2);
        let out = if relu_first {
            let r = b.relu(&x);
            b.max_pool(&r, 2, 2, 0)
        } else {
            let p = b.max_pool(&x, 2, 2, 0);
            b.relu(&p)
        };
        b.output(&out);
        let g = infer_shapes(&run_pipeline(&b.build().unwrap()), 1).unwrap();
        assert_eq!(g.nodes.len(), 1, "relu folded into the pool");
        let units = partition_graph(&g);
        let k = lower_group(&g, &units[0], FlavorId::Scalar, "k").unwrap();
        let out = run_kernel::<f32>(&k, &[&[-5.0, 3.0, 2.0, -1.0]], &[]).unwrap();
        assert_eq!(out, vec![vec![3.0]]);
        let out = run_kernel::<f32>(&k, &[&[-5.0, -3.0, -2.0, -1.0]], &[]).unwrap();
        assert_eq!(out, vec![vec![0.0]]);
    }
}

#[test]
fn one_nest_per_materialized_tensor_and_fewer_loops_than_unfused() {
    for g in [zoo::mini_vgg(0), zoo::mini_residual(0), zoo::depthwise_block(0), zoo::mlp(16, 0)] {
        let g = infer_shapes(&run_pipeline(&g), 2).unwrap();
        for u in partition_graph(&g).iter().filter(|u| u.is_dfp()) {
            let fused = lower_group(&g, u, FlavorId::Scalar, "k").unwrap();
            let materialized: Vec<String> = fused
                .buffers
                .iter()
                .filter(|b| matches!(b.role, BufRole::Output | BufRole::Temp))
                .map(|b| b.source.clone())
                .collect();
            assert_eq!(fused.nests().len(), materialized.len(), "group {:?}", u.nodes());
            if u.nodes().len() > materialized.len() {
                let every: usize = u
                    .nodes()
                    .iter()
                    .map(|id| {
                        let single = ExecUnit::new(&g, UnitKind::DfpGroup(vec![id.clone()]));
                        lower_group(&g, &single, FlavorId::Scalar, "k").unwrap().loop_count()
                    })
                    .sum();
                assert!(fused.loop_count() < every, "group {:?}", u.nodes());
            }
        }
    }
}
