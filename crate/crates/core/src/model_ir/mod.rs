//! Graph intermediate representation, model/weights formats, shape inference
//! and the reference interpreter.

mod graph;
mod json;
mod meta;
mod reference;
mod shapes;
mod weights;

use std::path::Path;

pub use graph::{
    BatchNormAttrs, ConvAttrs, CopyAttrs, Extent, GraphInput, InputDim, LayerNode, LinearAttrs,
    ModelGraph, Op, PoolAttrs, Source,
};
pub use json::{model_to_json, parse_model, save_model};
pub use meta::{
    for_each_coord, relayout, DType, Dim, DimPurpose, DimTag, LayoutId, LayoutKind, TensorMeta,
};
pub use reference::{evaluate, reference_forward, reference_loss, ForwardMode, ForwardRecord};
pub(crate) use reference::check_inputs;
pub use shapes::{infer_shapes, window_out};
pub use weights::{decode_weights, encode_weights, load_weights, save_weights, MAGIC, VERSION};

use crate::error::{Error, Result};

/// Reads a model document and its weights, binds parameters, sorts the nodes
/// topologically and checks every parameter against the shapes it feeds.
pub fn load_model(model_path: &Path, weights_path: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(model_path).map_err(|e| Error::io(model_path, e))?;
    let mut g = parse_model(&text)?;
    g.params = load_weights(weights_path)?;
    g.validate_and_sort()?;
    // Parameter shapes do not depend on the batch size.
    infer_shapes(&g, 1)?;
    Ok(g)
}

/// Validates an in-memory graph the same way [`load_model`] does.
pub fn validate(mut g: ModelGraph) -> Result<ModelGraph> {
    g.validate_and_sort()?;
    infer_shapes(&g, 1)?;
    Ok(g)
}
