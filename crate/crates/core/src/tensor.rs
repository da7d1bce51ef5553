//! Host-side tensors: tagged activations and untagged parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{relayout, DType, LayoutKind, TensorMeta};
use crate::scalar::{cast_slice, Scalar};

/// An activation tensor: data stored in the arrangement described by `meta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub meta: TensorMeta,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(meta: TensorMeta, data: Vec<T>) -> Result<Self> {
        if meta.numel() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor {meta} needs {} elements, got {}",
                meta.numel(),
                data.len()
            )));
        }
        Ok(Tensor { meta, data })
    }

    pub fn zeros(meta: TensorMeta) -> Self {
        let n = meta.numel();
        Tensor {
            meta,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(meta: TensorMeta, f: impl FnMut(usize) -> T) -> Self {
        let data = (0..meta.numel()).map(f).collect();
        Tensor { meta, data }
    }

    /// Rearranges the data into `meta` (same tag set).
    pub fn to_meta(&self, meta: &TensorMeta) -> Tensor<T> {
        let mut meta = meta.clone();
        meta.dtype = self.meta.dtype;
        Tensor {
            data: relayout(&self.data, &self.meta, &meta),
            meta,
        }
    }

    pub fn to_layout(&self, kind: LayoutKind) -> Tensor<T> {
        self.to_meta(&self.meta.with_layout(kind))
    }

    pub fn canonical(&self) -> Tensor<T> {
        self.to_meta(&self.meta.canonical())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let mut meta = self.meta.clone();
        meta.dtype = U::DTYPE;
        Tensor {
            meta,
            data: cast_slice(&self.data),
        }
    }
}

/// A parameter payload as stored in the weights file.
///
/// Values are held as f64; f32 payloads convert without loss in both
/// directions so a load/save cycle reproduces the original bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(dtype: DType, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::WeightsMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        let values = match dtype {
            DType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
            DType::F64 => values,
        };
        Ok(ParamTensor {
            dtype,
            shape,
            values,
        })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        ParamTensor {
            dtype: DType::F32,
            shape,
            values: values.into_iter().map(f64::from).collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn to_vec<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::from_f64_lossy(v)).collect()
    }

    /// Replaces the values, rounding to the stored dtype.
    pub fn set_values<T: Scalar>(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.values.len());
        for (dst, v) in self.values.iter_mut().zip(values) {
            let v = v.to_f64_lossy();
            *dst = match self.dtype {
                DType::F32 => v as f32 as f64,
                DType::F64 => v,
            };
        }
    }
}
