use crate::error::{Error, Result};
use crate::model_ir::graph::{LayerNode, ModelGraph, Op, PoolAttrs};
use crate::model_ir::meta::{Dim, DimTag, TensorMeta};

/// Output extent of a sliding window.
pub fn window_out(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Annotates every node with its output shape, substituting `batch` for `B`.
pub fn infer_shapes(g: &ModelGraph, batch: usize) -> Result<ModelGraph> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut out = g.clone();
    out.batch = Some(batch);
    for i in 0..out.nodes.len() {
        let node = &out.nodes[i];
        let ins = node
            .inputs
            .iter()
            .map(|id| {
                out.meta_of(id).ok_or_else(|| {
                    Error::MalformedModel(format!("`{}` reads `{id}` before it is defined", node.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = node_output(&out, node, &ins)?;
        out.nodes[i].meta = Some(meta);
    }
    Ok(out)
}

fn expect_inputs(node: &LayerNode, ins: &[TensorMeta], n: usize) -> Result<()> {
    if ins.len() != n {
        return Err(Error::MalformedModel(format!(
            "`{}` ({}) takes {n} input(s), got {}",
            node.id,
            node.op,
            ins.len()
        )));
    }
    Ok(())
}

fn check_param(g: &ModelGraph, node: &LayerNode, idx: usize, shape: &[usize]) -> Result<()> {
    let name = &node.params[idx];
    let p = g.params.get(name).ok_or_else(|| {
        Error::WeightsMismatch(format!("`{}` needs missing parameter `{name}`", node.id))
    })?;
    if p.shape != shape {
        return Err(Error::WeightsMismatch(format!(
            "`{name}` of `{}` has shape {:?}, expected {shape:?}",
            node.id, p.shape
        )));
    }
    Ok(())
}

fn expect_params(node: &LayerNode, allowed: &[usize]) -> Result<()> {
    if !allowed.contains(&node.params.len()) {
        return Err(Error::WeightsMismatch(format!(
            "`{}` ({}) takes {allowed:?} parameters, got {}",
            node.id,
            node.op,
            node.params.len()
        )));
    }
    Ok(())
}

fn spatial(node: &LayerNode, m: &TensorMeta) -> Result<(usize, usize, usize)> {
    let c = m.extent(DimTag::C0);
    let h = m.extent(DimTag::P1);
    let w = m.extent(DimTag::P0);
    match (c, h, w) {
        (Some(c), Some(h), Some(w)) if m.rank() == 4 => Ok((c, h, w)),
        _ => Err(Error::shape(&node.id, format!("expected [N0, C0, P1, P0], got {m}"))),
    }
}

fn with_extents(m: &TensorMeta, changes: &[(DimTag, usize)]) -> TensorMeta {
    let mut out = m.clone();
    for d in &mut out.dims {
        if let Some((_, e)) = changes.iter().find(|(t, _)| *t == d.tag) {
            d.extent = *e;
        }
    }
    out
}

fn pool_out(node: &LayerNode, m: &TensorMeta, a: &PoolAttrs) -> Result<TensorMeta> {
    let (_, h, w) = spatial(node, m)?;
    let s = a.stride();
    if a.padding[0] * 2 > a.kernel[0] || a.padding[1] * 2 > a.kernel[1] {
        return Err(Error::shape(&node.id, "padding exceeds half the kernel"));
    }
    let oh = window_out(h, a.kernel[0], s[0], a.padding[0]);
    let ow = window_out(w, a.kernel[1], s[1], a.padding[1]);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(with_extents(m, &[(DimTag::P1, oh), (DimTag::P0, ow)])),
        _ => Err(Error::shape(&node.id, format!("window does not fit {m}"))),
    }
}

fn node_output(g: &ModelGraph, node: &LayerNode, ins: &[TensorMeta]) -> Result<TensorMeta> {
    match &node.op {
        Op::Conv2d(a) => {
            expect_inputs(node, ins, 1)?;
            expect_params(node, &[1, 2])?;
            let (c, h, w) = spatial(node, &ins[0])?;
            if a.groups == 0 || c % a.groups != 0 || a.out_channels % a.groups != 0 {
                return Err(Error::shape(
                    &node.id,
                    format!("groups {} must divide {c} and {}", a.groups, a.out_channels),
                ));
            }
            check_param(g, node, 0, &[a.out_channels, c / a.groups, a.kernel[0], a.kernel[1]])?;
            if node.params.len() == 2 {
                check_param(g, node, 1, &[a.out_channels])?;
            }
            let oh = window_out(h, a.kernel[0], a.stride[0], a.padding[0]);
            let ow = window_out(w, a.kernel[1], a.stride[1], a.padding[1]);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(with_extents(
                    &ins[0],
                    &[(DimTag::C0, a.out_channels), (DimTag::P1, oh), (DimTag::P0, ow)],
                )),
                _ => Err(Error::shape(&node.id, "kernel larger than padded input")),
            }
        }
        Op::Linear(a) => {
            expect_inputs(node, ins, 1)?;
            expect_params(node, &[1, 2])?;
            let m = &ins[0];
            if m.has_pixels() || m.extent(DimTag::C0) != Some(a.in_features) || m.channels() != a.in_features {
                return Err(Error::shape(
                    &node.id,
                    format!("expects {} input features, got {m}", a.in_features),
                ));
            }
            check_param(g, node, 0, &[a.out_features, a.in_features])?;
            if node.params.len() == 2 {
                check_param(g, node, 1, &[a.out_features])?;
            }
            Ok(with_extents(m, &[(DimTag::C0, a.out_features)]))
        }
        Op::ReLU => {
            expect_inputs(node, ins, 1)?;
            Ok(ins[0].clone())
        }
        Op::Softmax => {
            expect_inputs(node, ins, 1)?;
            if ins[0].extent(DimTag::C0).is_none() {
                return Err(Error::shape(&node.id, "softmax needs a channel dim"));
            }
            Ok(ins[0].clone())
        }
        Op::MaxPool2d(a) | Op::AvgPool2d(a) => {
            expect_inputs(node, ins, 1)?;
            pool_out(node, &ins[0], a)
        }
        Op::BatchNorm2d(_) => {
            expect_inputs(node, ins, 1)?;
            expect_params(node, &[4])?;
            let c = ins[0]
                .extent(DimTag::C0)
                .ok_or_else(|| Error::shape(&node.id, "batch norm needs a channel dim"))?;
            for i in 0..4 {
                check_param(g, node, i, &[c])?;
            }
            Ok(ins[0].clone())
        }
        Op::Add => {
            expect_inputs(node, ins, 2)?;
            if ins[0].canonical_dims() != ins[1].canonical_dims() {
                return Err(Error::shape(
                    &node.id,
                    format!("operands differ: {} vs {}", ins[0], ins[1]),
                ));
            }
            Ok(ins[0].clone())
        }
        Op::Flatten => {
            expect_inputs(node, ins, 1)?;
            let m = &ins[0];
            let mut dims: Vec<Dim> = m
                .canonical_dims()
                .into_iter()
                .filter(|d| d.tag.purpose == crate::model_ir::DimPurpose::None)
                .collect();
            let features: usize = m
                .dims
                .iter()
                .filter(|d| d.tag.purpose != crate::model_ir::DimPurpose::None)
                .map(|d| d.extent)
                .product();
            dims.push(Dim::new(DimTag::C0, features));
            Ok(TensorMeta::new(dims))
        }
        Op::GlobalAvgPool => {
            expect_inputs(node, ins, 1)?;
            let m = &ins[0];
            if !m.has_pixels() {
                return Err(Error::shape(&node.id, "global pooling needs pixel dims"));
            }
            let mut out = m.canonical();
            out.dims.retain(|d| !d.tag.is_pixel());
            Ok(out)
        }
        Op::CrossEntropyLoss => {
            expect_inputs(node, ins, 1)?;
            let m = &ins[0];
            if m.has_pixels() || m.extent(DimTag::C0).is_none() {
                return Err(Error::shape(&node.id, format!("loss expects [N0, C0], got {m}")));
            }
            Ok(TensorMeta::new(vec![Dim::new(DimTag::N0, 1)]))
        }
        Op::Copy(a) => {
            expect_inputs(node, ins, 1)?;
            let out = ins[0].with_layout(a.layout);
            out.validate()
                .map_err(|e| Error::shape(&node.id, e.to_string()))?;
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_out(224, 7, 2, 3), Some(112));
        assert_eq!(window_out(128, 3, 1, 1), Some(128));
        assert_eq!(window_out(2, 3, 1, 0), None);
    }
}
