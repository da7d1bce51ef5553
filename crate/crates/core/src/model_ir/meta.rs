//! Tagged tensor shapes and memory layouts.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DimPurpose {
    None,
    Channel,
    Pixel,
}

impl DimPurpose {
    pub fn letter(self) -> char {
        match self {
            DimPurpose::None => 'N',
            DimPurpose::Channel => 'C',
            DimPurpose::Pixel => 'P',
        }
    }

    pub fn from_letter(s: &str) -> Option<Self> {
        match s {
            "N" => Some(DimPurpose::None),
            "C" => Some(DimPurpose::Channel),
            "P" => Some(DimPurpose::Pixel),
            _ => None,
        }
    }
}

/// Purpose plus index, e.g. `P1` is the second pixel dimension (image height).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DimTag {
    pub purpose: DimPurpose,
    pub index: u8,
}

impl DimTag {
    pub const N0: DimTag = DimTag::new(DimPurpose::None, 0);
    pub const C0: DimTag = DimTag::new(DimPurpose::Channel, 0);
    pub const P0: DimTag = DimTag::new(DimPurpose::Pixel, 0);
    pub const P1: DimTag = DimTag::new(DimPurpose::Pixel, 1);

    pub const fn new(purpose: DimPurpose, index: u8) -> Self {
        DimTag { purpose, index }
    }

    pub fn is_pixel(self) -> bool {
        self.purpose == DimPurpose::Pixel
    }

    pub fn is_channel(self) -> bool {
        self.purpose == DimPurpose::Channel
    }

    fn canonical_key(self) -> (DimPurpose, std::cmp::Reverse<u8>) {
        (self.purpose, std::cmp::Reverse(self.index))
    }
}

impl fmt::Display for DimTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.purpose.letter(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dim {
    pub tag: DimTag,
    pub extent: usize,
}

impl Dim {
    pub fn new(tag: DimTag, extent: usize) -> Self {
        Dim { tag, extent }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Physical arrangement of the dims listed in a [`TensorMeta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum LayoutId {
    /// Row-major in the order the dims are listed.
    #[default]
    RowMajorTagged,
    /// `C0` split into `C0 / block` (at C0's position) and `block` (innermost).
    BlockedChannel(usize),
}

/// The layout families the planner chooses between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayoutKind {
    /// N.., C.., P.. (NCHW).
    ChannelsFirst,
    /// N.., P.., C.. (NHWC).
    ChannelsLast,
    /// NCHW with channels blocked into the innermost position (NCHW8c style).
    Blocked(usize),
}

impl fmt::Display for LayoutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutKind::ChannelsFirst => f.write_str("nchw"),
            LayoutKind::ChannelsLast => f.write_str("nhwc"),
            LayoutKind::Blocked(b) => write!(f, "nchw{b}c"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorMeta {
    pub dims: Vec<Dim>,
    pub dtype: DType,
    pub layout: LayoutId,
}

impl TensorMeta {
    pub fn new(dims: Vec<Dim>) -> Self {
        TensorMeta {
            dims,
            dtype: DType::F32,
            layout: LayoutId::RowMajorTagged,
        }
    }

    /// `[N0, C0, P1.., P0]` in canonical order.
    pub fn nchw(n: usize, c: usize, pixels: &[usize]) -> Self {
        let mut dims = vec![Dim::new(DimTag::N0, n), Dim::new(DimTag::C0, c)];
        let np = pixels.len();
        for (i, &e) in pixels.iter().enumerate() {
            dims.push(Dim::new(
                DimTag::new(DimPurpose::Pixel, (np - 1 - i) as u8),
                e,
            ));
        }
        TensorMeta::new(dims)
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|d| d.extent).product()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * self.dtype.size()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn extent(&self, tag: DimTag) -> Option<usize> {
        self.dims.iter().find(|d| d.tag == tag).map(|d| d.extent)
    }

    pub fn position(&self, tag: DimTag) -> Option<usize> {
        self.dims.iter().position(|d| d.tag == tag)
    }

    pub fn tags(&self) -> Vec<DimTag> {
        self.dims.iter().map(|d| d.tag).collect()
    }

    pub fn pixel_dims(&self) -> Vec<Dim> {
        let mut out: Vec<Dim> = self.dims.iter().copied().filter(|d| d.tag.is_pixel()).collect();
        out.sort_by_key(|d| d.tag.canonical_key());
        out
    }

    pub fn channels(&self) -> usize {
        self.dims
            .iter()
            .filter(|d| d.tag.is_channel())
            .map(|d| d.extent)
            .product()
    }

    pub fn has_pixels(&self) -> bool {
        self.dims.iter().any(|d| d.tag.is_pixel())
    }

    /// Dims sorted into canonical order (N.., C.., P.. with higher indices outer).
    pub fn canonical_dims(&self) -> Vec<Dim> {
        let mut dims = self.dims.clone();
        dims.sort_by_key(|d| d.tag.canonical_key());
        dims
    }

    pub fn canonical(&self) -> TensorMeta {
        TensorMeta {
            dims: self.canonical_dims(),
            dtype: self.dtype,
            layout: LayoutId::RowMajorTagged,
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.layout == LayoutId::RowMajorTagged && self.dims == self.canonical_dims()
    }

    /// Canonical extents, e.g. `[N, C, H, W]`.
    pub fn canonical_shape(&self) -> Vec<usize> {
        self.canonical_dims().iter().map(|d| d.extent).collect()
    }

    /// The same tag set rearranged into `kind`. Tensors without pixel or
    /// channel dims have a single arrangement.
    pub fn with_layout(&self, kind: LayoutKind) -> TensorMeta {
        let canon = self.canonical_dims();
        let trivial = !self.has_pixels() || !canon.iter().any(|d| d.tag.is_channel());
        let (dims, layout) = if trivial {
            (canon, LayoutId::RowMajorTagged)
        } else {
            match kind {
                LayoutKind::ChannelsFirst => (canon, LayoutId::RowMajorTagged),
                LayoutKind::Blocked(b) => (canon, LayoutId::BlockedChannel(b)),
                LayoutKind::ChannelsLast => {
                    let mut dims: Vec<Dim> = canon
                        .iter()
                        .copied()
                        .filter(|d| !d.tag.is_channel())
                        .collect();
                    dims.extend(canon.iter().copied().filter(|d| d.tag.is_channel()));
                    (dims, LayoutId::RowMajorTagged)
                }
            }
        };
        TensorMeta {
            dims,
            dtype: self.dtype,
            layout,
        }
    }

    /// Which planner family this meta belongs to, if any.
    pub fn layout_kind(&self) -> Option<LayoutKind> {
        let candidates = [
            LayoutKind::ChannelsFirst,
            LayoutKind::ChannelsLast,
            match self.layout {
                LayoutId::BlockedChannel(b) => LayoutKind::Blocked(b),
                LayoutId::RowMajorTagged => LayoutKind::ChannelsFirst,
            },
        ];
        candidates.into_iter().find(|k| &self.with_layout(*k) == self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.dims {
            if d.extent == 0 {
                return Err(Error::MalformedModel(format!("dim {} has zero extent", d.tag)));
            }
            if !seen.insert(d.tag) {
                return Err(Error::MalformedModel(format!("duplicate dim tag {}", d.tag)));
            }
        }
        for purpose in [DimPurpose::None, DimPurpose::Channel, DimPurpose::Pixel] {
            let count = seen.iter().filter(|t| t.purpose == purpose).count();
            for i in 0..count {
                if !seen.contains(&DimTag::new(purpose, i as u8)) {
                    return Err(Error::MalformedModel(format!(
                        "{} dims are not numbered contiguously from 0",
                        purpose.letter()
                    )));
                }
            }
        }
        let total = self
            .dims
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(d.extent as u64))
            .filter(|n| *n < (1u64 << 63));
        if total.is_none() {
            return Err(Error::MalformedModel("element count overflows".into()));
        }
        if let LayoutId::BlockedChannel(b) = self.layout {
            let c = self.extent(DimTag::C0).unwrap_or(0);
            if b == 0 || !c.is_multiple_of(b) {
                return Err(Error::MalformedModel(format!(
                    "channel extent {c} not divisible by block {b}"
                )));
            }
        }
        Ok(())
    }

    /// Row-major strides in storage order (only meaningful for `RowMajorTagged`).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1].extent;
        }
        strides
    }

    pub fn stride(&self, tag: DimTag) -> Option<usize> {
        self.position(tag).map(|p| self.strides()[p])
    }

    /// Physical element offset of a coordinate given in canonical dim order.
    pub fn offset_of(&self, canon_coord: &[usize]) -> usize {
        self.offset_fn()(canon_coord)
    }

    /// Precomputes an offset function for coordinates in canonical order.
    pub fn offset_fn(&self) -> impl Fn(&[usize]) -> usize {
        let canon = self.canonical_dims();
        // For each canonical position, its stride in storage.
        let storage_strides = self.strides();
        let mut per_canon = Vec::with_capacity(canon.len());
        for d in &canon {
            per_canon.push(storage_strides[self.position(d.tag).expect("tag present")]);
        }
        let blocked = match self.layout {
            LayoutId::BlockedChannel(b) => {
                let cpos = canon.iter().position(|d| d.tag == DimTag::C0);
                cpos.map(|cp| (cp, b, canon.clone()))
            }
            LayoutId::RowMajorTagged => None,
        };
        move |coord: &[usize]| match &blocked {
            None => coord.iter().zip(&per_canon).map(|(c, s)| c * s).sum(),
            Some((cp, b, canon)) => {
                // Storage: dims in canonical order with C0 replaced by C0/b,
                // then an innermost b.
                let mut off = 0usize;
                for (i, d) in canon.iter().enumerate() {
                    let (c, e) = if i == *cp {
                        (coord[i] / b, d.extent / b)
                    } else {
                        (coord[i], d.extent)
                    };
                    off = off * e + c;
                }
                off * b + coord[*cp] % b
            }
        }
    }
}

impl fmt::Display for TensorMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}:{}", d.tag, d.extent)?;
        }
        f.write_str("]")?;
        if let LayoutId::BlockedChannel(b) = self.layout {
            write!(f, "/b{b}")?;
        }
        Ok(())
    }
}

/// Iterates all coordinates of `shape` in row-major order.
pub fn for_each_coord(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut coord = vec![0usize; shape.len()];
    loop {
        f(&coord);
        let mut i = shape.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            coord[i] += 1;
            if coord[i] < shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
}

/// Copies `src` laid out as `from` into a new buffer laid out as `to`.
/// Both metas must carry the same tag set and extents.
pub fn relayout<T: Copy + Default>(src: &[T], from: &TensorMeta, to: &TensorMeta) -> Vec<T> {
    debug_assert_eq!(from.canonical_dims(), to.canonical_dims());
    if from == to {
        return src.to_vec();
    }
    let shape = from.canonical_shape();
    let off_from = from.offset_fn();
    let off_to = to.offset_fn();
    let mut out = vec![T::default(); src.len()];
    for_each_coord(&shape, |c| out[off_to(c)] = src[off_from(c)]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_nhwc_share_tag_set() {
        let m = TensorMeta::nchw(2, 3, &[4, 5]);
        let nhwc = m.with_layout(LayoutKind::ChannelsLast);
        assert_eq!(nhwc.tags(), vec![DimTag::N0, DimTag::P1, DimTag::P0, DimTag::C0]);
        assert_eq!(nhwc.canonical(), m);
        assert_eq!(nhwc.layout_kind(), Some(LayoutKind::ChannelsLast));
    }

    #[test]
    fn blocked_offsets_are_a_permutation() {
        let m = TensorMeta::nchw(2, 16, &[3, 3]).with_layout(LayoutKind::Blocked(8));
        m.validate().unwrap();
        let off = m.offset_fn();
        let mut seen = vec![false; m.numel()];
        for_each_coord(&m.canonical_shape(), |c| {
            let o = off(c);
            assert!(!seen[o]);
            seen[o] = true;
        });
        // channel 9 of pixel (0,0) lives in the second block, lane 1
        assert_eq!(off(&[0, 9, 0, 0]), 9 * 8 + 1);
    }

    #[test]
    fn blocked_requires_divisible_channels() {
        let m = TensorMeta::nchw(1, 12, &[2, 2]).with_layout(LayoutKind::Blocked(8));
        assert!(m.validate().is_err());
    }

    #[test]
    fn relayout_round_trip() {
        let m = TensorMeta::nchw(1, 2, &[2, 3]);
        let data: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let nhwc = m.with_layout(LayoutKind::ChannelsLast);
        let moved = relayout(&data, &m, &nhwc);
        assert_eq!(moved[..4], [0.0, 6.0, 1.0, 7.0]);
        assert_eq!(relayout(&moved, &nhwc, &m), data);
    }

    #[test]
    fn rejects_gapped_indices() {
        let m = TensorMeta::new(vec![
            Dim::new(DimTag::N0, 1),
            Dim::new(DimTag::P1, 4),
        ]);
        assert!(m.validate().is_err());
    }
}
