use std::collections::BTreeMap;

use sol_mini::autodiff::{
    build_backward, grad_check, loss_and_grads, sgd_step, trainable_params, OptimizerState,
};
use sol_mini::model_ir::{infer_shapes, Op, PoolAttrs};
use sol_mini::zoo::{self, GraphBuilder};
use sol_mini::{ModelGraph, Tensor};

const EPS: f64 = 1e-3;

/// `x → 1×1 conv → op → flatten → CE`, so the op's backward rule is
/// exercised through the convolution's parameter gradients.
fn isolated(op: &str) -> ModelGraph {
    let mut b = GraphBuilder::new(11);
    let x = b.input_image("x", 2, 4, 4);
    let c = b.conv(&x, 2, 3, 1, 1, 0, 1);
    let y = match op {
        "conv" => b.conv(&c, 3, 2, 3, 2, 1, 1),
        "depthwise" => b.conv(&c, 3, 3, 3, 1, 1, 3),
        "relu" => b.relu(&c),
        "maxpool" => b.max_pool(&c, 2, 2, 0),
        "maxpool_padded" => b.max_pool(&c, 3, 1, 1),
        "avgpool" => b.avg_pool(&c, 3, 1, 1),
        "avgpool_exclusive" => {
            let mut a = PoolAttrs::new(3, 2, 1);
            a.count_padding = false;
            b.pool(&c, Op::AvgPool2d(a))
        }
        "batchnorm" => b.batch_norm(&c, 3),
        "add" => {
            let d = b.conv(&x, 2, 3, 3, 1, 1, 1);
            b.add(&c, &d)
        }
        "gap" => b.global_avg_pool(&c),
        other => panic!("unknown op {other}"),
    };
    let f = if op == "gap" { y } else { b.flatten(&y) };
    b.cross_entropy(&f);
    b.output(&f);
    b.build().unwrap()
}

#[test]
fn every_op_in_isolation() {
    for op in [
        "conv",
        "depthwise",
        "relu",
        "maxpool",
        "maxpool_padded",
        "avgpool",
        "avgpool_exclusive",
        "batchnorm",
        "add",
        "gap",
    ] {
        let err = grad_check(&isolated(op), EPS).unwrap();
        assert!(err < 1e-4, "{op}: {err}");
    }
}

#[test]
fn linear_softmax_and_cross_entropy() {
    // Softmax fused into the loss.
    let mut b = GraphBuilder::new(5);
    let x = b.input_features("x", 6);
    let l = b.linear(&x, 6, 4);
    let s = b.softmax(&l);
    b.cross_entropy(&s);
    b.output(&s);
    assert!(grad_check(&b.build().unwrap(), EPS).unwrap() < 1e-6);
    // A softmax in the middle uses its own rule.
    let mut b = GraphBuilder::new(6);
    let x = b.input_features("x", 5);
    let l = b.linear(&x, 5, 4);
    let s = b.softmax(&l);
    let o = b.linear(&s, 4, 3);
    b.cross_entropy(&o);
    b.output(&o);
    let g = b.build().unwrap();
    assert!(build_backward(&g).unwrap().grad_nodes().any(|n| n.forward == s));
    assert!(grad_check(&g, EPS).unwrap() < 1e-4);
}

#[test]
fn conv_pool_linear_net() {
    let mut b = GraphBuilder::new(21);
    let x = b.input_image("x", 3, 6, 6);
    let c = b.conv(&x, 3, 4, 3, 1, 1, 1);
    let r = b.relu(&c);
    let p = b.max_pool(&r, 2, 2, 0);
    let f = b.flatten(&p);
    let l = b.linear(&f, 36, 5);
    b.cross_entropy(&l);
    b.output(&l);
    let g = b.build().unwrap();
    assert!(grad_check(&g, EPS).unwrap() < 1e-4);
}

#[test]
fn random_composite_graphs() {
    for seed in 0..10 {
        let g = zoo::random_graph(seed, true);
        assert!(g.param_count() <= 10_000);
        let err = grad_check(&g, EPS).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn bundled_models_with_loss() {
    for g in [zoo::mini_residual(1), zoo::depthwise_block(2)] {
        let g = zoo::with_loss(g);
        let err = grad_check(&g, EPS).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

/// Two Gaussian blobs per class on a line through feature space.
fn separable(batch: usize, features: usize, classes: usize, seed: u64) -> (Tensor<f32>, Vec<usize>) {
    let labels = zoo::random_labels(batch, classes, seed);
    let noise = zoo::random_inputs(&infer_shapes(&zoo::mlp(features, 0), batch).unwrap(), batch, seed);
    let mut x = noise["x"].clone();
    for (n, &l) in labels.iter().enumerate() {
        for f in 0..features {
            let centre = if f % classes == l { 2.0 } else { -0.5 };
            x.data[n * features + f] = centre + 0.3 * x.data[n * features + f];
        }
    }
    (x, labels)
}

#[test]
fn fifty_sgd_steps_halve_the_loss() {
    let (features, classes, batch) = (8, 3, 16);
    let mut g = infer_shapes(&zoo::toy_classifier(features, 12, classes, 3), batch).unwrap();
    let opt = OptimizerState::for_graph(&g, 0.1).unwrap();
    let mut losses = Vec::new();
    for step in 0..50 {
        let (x, labels) = separable(batch, features, classes, step);
        let inputs = BTreeMap::from([("x".to_string(), x)]);
        let (grads, _) = loss_and_grads::<f32>(&g, &inputs, &labels).unwrap();
        losses.push(grads.loss);
        g.params = sgd_step(&opt, &g.params, &grads.params).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn gradients_cover_exactly_the_trainable_parameters() {
    for seed in 0..20 {
        let g = infer_shapes(&zoo::random_graph(seed, true), 2).unwrap();
        let inputs = zoo::random_inputs(&g, 2, seed);
        let classes = g.meta_of(&g.loss_node().unwrap().inputs[0]).unwrap().channels();
        let labels = zoo::random_labels(2, classes, seed);
        let (grads, _) = loss_and_grads::<f32>(&g, &inputs, &labels).unwrap();
        let mut want = trainable_params(&g);
        want.sort();
        assert_eq!(grads.params.keys().cloned().collect::<Vec<_>>(), want);
        for (p, v) in &grads.params {
            assert_eq!(v.len(), g.params[p].numel());
            assert!(v.iter().all(|e| e.is_finite()));
        }
    }
}
