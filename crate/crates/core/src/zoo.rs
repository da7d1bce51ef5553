//! Small models used by tests, benchmarks and the acceptance suite, plus a
//! builder for assembling graphs in code.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model_ir::{
    validate, BatchNormAttrs, ConvAttrs, Dim, DimTag, Extent, GraphInput, InputDim, LayerNode,
    LinearAttrs, ModelGraph, Op, PoolAttrs, TensorMeta,
};
use crate::tensor::{ParamTensor, Tensor};

pub struct GraphBuilder {
    g: ModelGraph,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            g: ModelGraph::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn fresh(&self, op: &str) -> String {
        format!("{}{}", op, self.g.nodes.len() + 1)
    }

    fn push(&mut self, id: String, op: Op, inputs: &[&str], params: &[&str]) -> String {
        self.g.nodes.push(LayerNode::new(id.clone(), op, inputs, params));
        id
    }

    fn random_param(&mut self, name: &str, shape: Vec<usize>, scale: f64, offset: f64) {
        let n: usize = shape.iter().product();
        let values: Vec<f32> = (0..n)
            .map(|_| (offset + scale * self.rng.gen_range(-1.0..1.0)) as f32)
            .collect();
        self.g
            .params
            .insert(name.to_string(), ParamTensor::f32(shape, values));
    }

    /// `[B, C, H, W]` image input.
    pub fn input_image(&mut self, name: &str, c: usize, h: usize, w: usize) -> String {
        let dims = vec![
            InputDim { tag: DimTag::N0, extent: Extent::Batch },
            InputDim { tag: DimTag::C0, extent: Extent::Fixed(c) },
            InputDim { tag: DimTag::P1, extent: Extent::Fixed(h) },
            InputDim { tag: DimTag::P0, extent: Extent::Fixed(w) },
        ];
        self.g.inputs.push(GraphInput { name: name.into(), dims });
        name.to_string()
    }

    /// `[B, F]` feature input.
    pub fn input_features(&mut self, name: &str, features: usize) -> String {
        let dims = vec![
            InputDim { tag: DimTag::N0, extent: Extent::Batch },
            InputDim { tag: DimTag::C0, extent: Extent::Fixed(features) },
        ];
        self.g.inputs.push(GraphInput { name: name.into(), dims });
        name.to_string()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        x: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> String {
        let id = self.fresh("conv");
        let (w, b) = (format!("{id}.weight"), format!("{id}.bias"));
        let fan_in = (in_channels / groups) * kernel * kernel;
        let scale = (3.0 / fan_in as f64).sqrt();
        self.random_param(&w, vec![out_channels, in_channels / groups, kernel, kernel], scale, 0.0);
        self.random_param(&b, vec![out_channels], 0.1, 0.0);
        let attrs = ConvAttrs {
            out_channels,
            kernel: [kernel, kernel],
            stride: [stride, stride],
            padding: [padding, padding],
            groups,
        };
        self.push(id, Op::Conv2d(attrs), &[x], &[&w, &b])
    }

    pub fn linear(&mut self, x: &str, inf: usize, outf: usize) -> String {
        let id = self.fresh("fc");
        let (w, b) = (format!("{id}.weight"), format!("{id}.bias"));
        let scale = (3.0 / inf as f64).sqrt();
        self.random_param(&w, vec![outf, inf], scale, 0.0);
        self.random_param(&b, vec![outf], 0.1, 0.0);
        let attrs = LinearAttrs { in_features: inf, out_features: outf };
        self.push(id, Op::Linear(attrs), &[x], &[&w, &b])
    }

    pub fn batch_norm(&mut self, x: &str, channels: usize) -> String {
        let id = self.fresh("bn");
        let names: Vec<String> = ["gamma", "beta", "running_mean", "running_var"]
            .iter()
            .map(|s| format!("{id}.{s}"))
            .collect();
        self.random_param(&names[0], vec![channels], 0.3, 1.0);
        self.random_param(&names[1], vec![channels], 0.1, 0.0);
        self.random_param(&names[2], vec![channels], 0.1, 0.0);
        self.random_param(&names[3], vec![channels], 0.3, 1.0);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.push(id, Op::BatchNorm2d(BatchNormAttrs::default()), &[x], &refs)
    }

    pub fn relu(&mut self, x: &str) -> String {
        let id = self.fresh("relu");
        self.push(id, Op::ReLU, &[x], &[])
    }

    pub fn max_pool(&mut self, x: &str, k: usize, s: usize, p: usize) -> String {
        let id = self.fresh("maxpool");
        self.push(id, Op::MaxPool2d(PoolAttrs::new(k, s, p)), &[x], &[])
    }

    pub fn avg_pool(&mut self, x: &str, k: usize, s: usize, p: usize) -> String {
        let id = self.fresh("avgpool");
        self.push(id, Op::AvgPool2d(PoolAttrs::new(k, s, p)), &[x], &[])
    }

    pub fn pool(&mut self, x: &str, op: Op) -> String {
        let id = self.fresh(&op.name().to_lowercase());
        self.push(id, op, &[x], &[])
    }

    pub fn add(&mut self, a: &str, b: &str) -> String {
        let id = self.fresh("add");
        self.push(id, Op::Add, &[a, b], &[])
    }

    pub fn flatten(&mut self, x: &str) -> String {
        let id = self.fresh("flatten");
        self.push(id, Op::Flatten, &[x], &[])
    }

    pub fn global_avg_pool(&mut self, x: &str) -> String {
        let id = self.fresh("gap");
        self.push(id, Op::GlobalAvgPool, &[x], &[])
    }

    pub fn softmax(&mut self, x: &str) -> String {
        let id = self.fresh("softmax");
        self.push(id, Op::Softmax, &[x], &[])
    }

    pub fn cross_entropy(&mut self, x: &str) -> String {
        self.push("loss".to_string(), Op::CrossEntropyLoss, &[x], &[])
    }

    pub fn output(&mut self, id: &str) {
        self.g.outputs.push(id.to_string());
    }

    pub fn build(self) -> Result<ModelGraph> {
        validate(self.g)
    }

    /// Graph without validation, for tests of the validator itself.
    pub fn build_unchecked(self) -> ModelGraph {
        self.g
    }
}

/// 4 convolutions, 2 max pools, 2 linear layers on `[B, 3, 8, 8]`.
pub fn mini_vgg(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input_image("x", 3, 8, 8);
    let c = b.conv(&x, 3, 8, 3, 1, 1, 1);
    let r = b.relu(&c);
    let c = b.conv(&r, 8, 8, 3, 1, 1, 1);
    let r = b.relu(&c);
    let p = b.max_pool(&r, 2, 2, 0);
    let c = b.conv(&p, 8, 16, 3, 1, 1, 1);
    let r = b.relu(&c);
    let c = b.conv(&r, 16, 16, 3, 1, 1, 1);
    let r = b.relu(&c);
    let p = b.max_pool(&r, 2, 2, 0);
    let f = b.flatten(&p);
    let l = b.linear(&f, 64, 32);
    let r = b.relu(&l);
    let out = b.linear(&r, 32, 10);
    b.output(&out);
    b.build().expect("mini_vgg is well formed")
}

/// Stem convolution followed by one residual block with batch norm and Add.
pub fn mini_residual(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input_image("x", 4, 8, 8);
    let stem = b.conv(&x, 4, 8, 3, 1, 1, 1);
    let s = b.relu(&stem);
    let c1 = b.conv(&s, 8, 8, 3, 1, 1, 1);
    let n1 = b.batch_norm(&c1, 8);
    let r1 = b.relu(&n1);
    let c2 = b.conv(&r1, 8, 8, 3, 1, 1, 1);
    let n2 = b.batch_norm(&c2, 8);
    let sum = b.add(&s, &n2);
    let r = b.relu(&sum);
    let g = b.global_avg_pool(&r);
    let out = b.linear(&g, 8, 10);
    b.output(&out);
    b.build().expect("mini_residual is well formed")
}

/// Pointwise expansion, depthwise 3×3, batch norm, average pool, classifier.
pub fn depthwise_block(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input_image("x", 8, 8, 8);
    let e = b.conv(&x, 8, 16, 1, 1, 0, 1);
    let r = b.relu(&e);
    let d = b.conv(&r, 16, 16, 3, 1, 1, 16);
    let n = b.batch_norm(&d, 16);
    let r = b.relu(&n);
    let p = b.avg_pool(&r, 2, 2, 0);
    let f = b.flatten(&p);
    let out = b.linear(&f, 256, 10);
    b.output(&out);
    b.build().expect("depthwise_block is well formed")
}

/// Three `features × features` linear layers with ReLU in between.
pub fn mlp(features: usize, seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input_features("x", features);
    let l = b.linear(&x, features, features);
    let r = b.relu(&l);
    let l = b.linear(&r, features, features);
    let r = b.relu(&l);
    let out = b.linear(&r, features, features);
    b.output(&out);
    b.build().expect("mlp is well formed")
}

/// Two-layer classifier with a cross-entropy loss node.
pub fn toy_classifier(features: usize, hidden: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new(seed);
    let x = b.input_features("x", features);
    let l = b.linear(&x, features, hidden);
    let r = b.relu(&l);
    let out = b.linear(&r, hidden, classes);
    b.cross_entropy(&out);
    b.output(&out);
    b.build().expect("toy classifier is well formed")
}

/// A single average pool over `[1, 512, 128, 128]`, 3×3, stride 1, padding 1,
/// counting padded elements.
pub fn avg_pool_512(count_padding: bool) -> ModelGraph {
    let mut b = GraphBuilder::new(0);
    let x = b.input_image("x", 512, 128, 128);
    let mut a = PoolAttrs::new(3, 1, 1);
    a.count_padding = count_padding;
    let p = b.pool(&x, Op::AvgPool2d(a));
    b.output(&p);
    b.build().expect("pool graph is well formed")
}

/// The models checked in under `testdata/models`, by file stem.
pub fn bundled_models() -> Vec<(&'static str, ModelGraph)> {
    vec![
        ("mini_vgg", mini_vgg(1)),
        ("mini_residual", mini_residual(2)),
        ("depthwise", depthwise_block(3)),
        ("mlp256", mlp(256, 4)),
        ("toy_classifier", toy_classifier(16, 32, 4, 5)),
    ]
}

/// Appends a cross-entropy loss to the first output.
pub fn with_loss(mut g: ModelGraph) -> ModelGraph {
    let out = g.outputs[0].clone();
    g.nodes.push(LayerNode::new("loss", Op::CrossEntropyLoss, &[&out], &[]));
    g
}

/// Uniform random inputs in `[-1, 1)` for every graph input, in the layout
/// the graph declares.
pub fn random_inputs(g: &ModelGraph, batch: usize, seed: u64) -> BTreeMap<String, Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.inputs
        .iter()
        .map(|gi| {
            let meta = gi.meta(batch);
            let t = Tensor::from_fn(meta, |_| rng.gen_range(-1.0f32..1.0));
            (gi.name.clone(), t)
        })
        .collect()
}

/// Random labels in `0..classes`.
pub fn random_labels(batch: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch).map(|_| rng.gen_range(0..classes)).collect()
}

/// A learnable classification batch for the first graph input: each class
/// has a fixed random prototype (from `task_seed`), and every sample is its
/// class prototype plus 0.3-scaled uniform noise drawn from `batch_seed`.
pub fn prototype_batch(
    g: &ModelGraph,
    batch: usize,
    classes: usize,
    task_seed: u64,
    batch_seed: u64,
) -> (BTreeMap<String, Tensor<f32>>, Vec<usize>) {
    let gi = &g.inputs[0];
    let canon = gi.meta(batch).canonical();
    let per = canon.numel() / batch;
    let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..per).map(|_| rng.gen_range(-1.5f32..1.5)).collect())
        .collect();
    let labels = random_labels(batch, classes, batch_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed ^ 0xba7c);
    let mut data = Vec::with_capacity(canon.numel());
    for &l in &labels {
        data.extend(protos[l].iter().map(|p| p + 0.3 * rng.gen_range(-1.0f32..1.0)));
    }
    let t = Tensor { meta: canon, data }.to_meta(&gi.meta(batch));
    (BTreeMap::from([(gi.name.clone(), t)]), labels)
}

/// `[N0, C0]` meta helper.
pub fn features_meta(n: usize, c: usize) -> TensorMeta {
    TensorMeta::new(vec![Dim::new(DimTag::N0, n), Dim::new(DimTag::C0, c)])
}

/// A small random convolutional graph on `[B, C, H, W]` with at most a few
/// thousand parameters: a body of convolutions, ReLUs, pools, batch norms and
/// residual adds, then a flatten or global pool and one or two linear layers.
/// With `loss`, a cross-entropy node (sometimes behind a softmax) is appended.
pub fn random_graph(seed: u64, loss: bool) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut b = GraphBuilder::new(seed);
    let mut c = rng.gen_range(1..=3);
    let mut hw = rng.gen_range(4..=6);
    let mut cur = b.input_image("x", c, hw, hw);
    // Tensors with the current shape, for residual adds.
    let mut same_shape = vec![cur.clone()];
    for _ in 0..rng.gen_range(2..=6) {
        let before = cur.clone();
        match rng.gen_range(0..9) {
            0 | 1 => {
                let out = rng.gen_range(2..=4);
                let k = if rng.gen_bool(0.7) { 3 } else { 1 };
                cur = b.conv(&cur, c, out, k, 1, k / 2, 1);
                c = out;
                same_shape.clear();
            }
            2 => cur = b.conv(&cur, c, c, 3, 1, 1, c),
            3 | 4 => cur = b.relu(&cur),
            5 if hw >= 2 => {
                let k = rng.gen_range(2..=hw.min(3));
                cur = b.max_pool(&cur, k, 2, 0);
                hw = (hw - k) / 2 + 1;
                same_shape.clear();
            }
            6 => {
                cur = if rng.gen_bool(0.5) {
                    b.avg_pool(&cur, 3, 1, 1)
                } else {
                    let mut a = PoolAttrs::new(3, 1, 1);
                    a.count_padding = false;
                    b.pool(&cur, Op::AvgPool2d(a))
                };
            }
            7 => cur = b.batch_norm(&cur, c),
            _ => {
                let other = same_shape[rng.gen_range(0..same_shape.len())].clone();
                cur = b.add(&cur, &other);
            }
        }
        if cur != before {
            same_shape.push(cur.clone());
        }
        // Occasionally a ReLU right after a max pool.
        if rng.gen_bool(0.2) {
            cur = b.relu(&cur);
            same_shape.push(cur.clone());
        }
    }
    let features = if rng.gen_bool(0.5) {
        cur = b.flatten(&cur);
        c * hw * hw
    } else {
        cur = b.global_avg_pool(&cur);
        c
    };
    let classes = rng.gen_range(2..=5);
    if rng.gen_bool(0.5) {
        let hidden = rng.gen_range(3..=8);
        cur = b.linear(&cur, features, hidden);
        cur = b.relu(&cur);
        cur = b.linear(&cur, hidden, classes);
    } else {
        cur = b.linear(&cur, features, classes);
    }
    if loss && rng.gen_bool(0.3) {
        cur = b.softmax(&cur);
    }
    if loss {
        b.cross_entropy(&cur);
    }
    b.output(&cur);
    b.build().expect("random graphs are well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_are_small_and_valid() {
        for seed in 0..200 {
            let g = random_graph(seed, seed % 2 == 0);
            assert!(g.param_count() <= 10_000, "seed {seed}: {}", g.param_count());
            crate::model_ir::infer_shapes(&g, 2).unwrap();
        }
    }
}
