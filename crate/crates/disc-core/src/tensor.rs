//! Dense row-major f32 tensors and the numeric primitives built on them.
//!
//! Everything downstream (voxel lifting, the query decoder, fusion, losses)
//! is expressed in terms of the handful of operations in this file: softmax,
//! layer normalization, bilinear sampling, axis max-pooling, and scaled
//! dot-product attention. All functions are pure: inputs are borrowed
//! immutably and results are freshly allocated, so values can be shared
//! across threads freely.
//!
//! Design notes:
//! - Storage is a flat `Vec<f32>` in row-major order (last axis fastest).
//!   The shape/data length invariant is checked at construction.
//! - Softmax subtracts the slice maximum before exponentiating so large
//!   logits cannot overflow.
//! - Bilinear sampling treats any point outside `[0, W-1] x [0, H-1]` as
//!   empty space and returns the zero vector rather than clamping; padding
//!   behaviour leaks into attention outputs otherwise.
//! - Attention masks remove keys *before* normalization, so a masked key has
//!   exactly zero weight, not an epsilon of one.

use std::io::{Read, Write};

use crate::error::{DiscError, Result};

/// Magic bytes prefixing the binary tensor format.
pub const TENSOR_MAGIC: &[u8; 5] = b"TENS1";

/// Epsilon used inside layer normalization.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Dense row-major tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Panics if the data length does not match the shape product; this is
    /// a programming error, not a runtime condition.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape: shape.to_vec(), data }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Tensor whose entries are produced by `f(flat_index)`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    #[inline]
    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> f32 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + l]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, value: f32) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[i * cols + j] = value;
    }

    #[inline]
    pub fn set3(&mut self, i: usize, j: usize, k: usize, value: f32) {
        debug_assert_eq!(self.rank(), 3);
        let idx = (i * self.shape[1] + j) * self.shape[2] + k;
        self.data[idx] = value;
    }

    #[inline]
    pub fn set4(&mut self, i: usize, j: usize, k: usize, l: usize, value: f32) {
        debug_assert_eq!(self.rank(), 4);
        let idx = ((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + l;
        self.data[idx] = value;
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn relu(&self) -> Self {
        self.map(|x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|x| x * s)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(DiscError::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Serializes in the binary tensor format: magic, rank byte, little-endian
    /// u32 extents, then the row-major f32 payload.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(DiscError::Format(format!(
                "rank {} does not fit the format's rank byte",
                self.rank()
            )));
        }
        out.write_all(TENSOR_MAGIC)?;
        out.write_all(&[self.rank() as u8])?;
        for &extent in &self.shape {
            if extent > u32::MAX as usize {
                return Err(DiscError::Format(format!("extent {extent} exceeds u32")));
            }
            out.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &value in &self.data {
            out.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a tensor written by [`Tensor::write_binary`].
    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(DiscError::Format(format!(
                "bad tensor magic {:?}, expected {:?}",
                magic, TENSOR_MAGIC
            )));
        }
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let rank = rank[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut extent = [0u8; 4];
            input.read_exact(&mut extent)?;
            shape.push(u32::from_le_bytes(extent) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut value = [0u8; 4];
            input.read_exact(&mut value)?;
            data.push(f32::from_le_bytes(value));
        }
        Ok(Self { shape, data })
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax along one axis.
///
/// Each 1-D slice along `axis` is shifted by its maximum before
/// exponentiation and then normalized, so slices sum to 1 even for logits
/// in the hundreds.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(DiscError::AxisOutOfRange { axis, rank: x.rank() });
    }
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.numel()];
    let data = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(data[base + a * inner]);
            }
            let mut sum = 0.0f32;
            for a in 0..axis_len {
                let e = (data[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Ok(Tensor::new(shape, out))
}

/// Samples a `[C, H, W]` map at a fractional point `(u, v)` where `u` runs
/// along the width axis and `v` along the height axis.
///
/// Points outside `[0, W-1] x [0, H-1]` return the zero vector: off-image
/// samples must contribute nothing, which clamping would silently break.
pub fn bilinear_sample(map: &Tensor, u: f32, v: f32) -> Vec<f32> {
    assert_eq!(map.rank(), 3, "bilinear_sample expects a [C, H, W] map");
    let (channels, height, width) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    if !u.is_finite()
        || !v.is_finite()
        || u < 0.0
        || v < 0.0
        || u > (width - 1) as f32
        || v > (height - 1) as f32
    {
        return vec![0.0; channels];
    }
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let fu = u - u0 as f32;
    let fv = v - v0 as f32;
    let w00 = (1.0 - fu) * (1.0 - fv);
    let w01 = fu * (1.0 - fv);
    let w10 = (1.0 - fu) * fv;
    let w11 = fu * fv;
    let mut out = vec![0.0f32; channels];
    for (c, slot) in out.iter_mut().enumerate() {
        *slot = w00 * map.at3(c, v0, u0)
            + w01 * map.at3(c, v0, u1)
            + w10 * map.at3(c, v1, u0)
            + w11 * map.at3(c, v1, u1);
    }
    out
}

/// Scaled dot-product attention.
///
/// `queries` is `[Nq, C]`, `keys` and `values` are `[Nk, C]`. When `mask`
/// is given, `mask[i] == true` removes key `i` entirely: it is excluded
/// from the softmax normalization, so its weight is exactly zero. Masking
/// every key is an error because there is nothing to normalize over.
pub fn attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    if queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2 {
        return Err(DiscError::Shape("attention expects rank-2 inputs".into()));
    }
    let channels = queries.shape()[1];
    let n_keys = keys.shape()[0];
    if keys.shape()[1] != channels {
        return Err(DiscError::Shape(format!(
            "attention: query width {} vs key width {}",
            channels,
            keys.shape()[1]
        )));
    }
    if values.shape()[0] != n_keys {
        return Err(DiscError::Shape(format!(
            "attention: {} keys vs {} values",
            n_keys,
            values.shape()[0]
        )));
    }
    if let Some(m) = mask {
        if m.len() != n_keys {
            return Err(DiscError::Shape(format!(
                "attention: mask length {} vs {} keys",
                m.len(),
                n_keys
            )));
        }
        if m.iter().all(|&dropped| dropped) {
            return Err(DiscError::AllKeysMasked);
        }
    }
    let n_queries = queries.shape()[0];
    let value_width = values.shape()[1];
    let scale = 1.0 / (channels as f32).sqrt();
    let mut out = Tensor::zeros(&[n_queries, value_width]);
    let mut scores = vec![0.0f32; n_keys];
    for q in 0..n_queries {
        let mut max = f32::NEG_INFINITY;
        for k in 0..n_keys {
            if mask.map_or(false, |m| m[k]) {
                continue;
            }
            let mut dot = 0.0f32;
            for c in 0..channels {
                dot += queries.at2(q, c) * keys.at2(k, c);
            }
            scores[k] = dot * scale;
            max = max.max(scores[k]);
        }
        let mut sum = 0.0f32;
        for k in 0..n_keys {
            if mask.map_or(false, |m| m[k]) {
                continue;
            }
            sum += (scores[k] - max).exp();
        }
        for k in 0..n_keys {
            if mask.map_or(false, |m| m[k]) {
                continue;
            }
            let weight = (scores[k] - max).exp() / sum;
            for c in 0..value_width {
                let acc = out.at2(q, c) + weight * values.at2(k, c);
                out.set2(q, c, acc);
            }
        }
    }
    Ok(out)
}

/// Maximum over one axis; the axis disappears from the output shape.
pub fn max_pool_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(DiscError::AxisOutOfRange { axis, rank: x.rank() });
    }
    let shape = x.shape();
    let axis_len = shape[axis];
    assert!(axis_len > 0, "cannot pool over an empty axis");
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out_shape: Vec<usize> = shape[..axis].to_vec();
    out_shape.extend_from_slice(&shape[axis + 1..]);
    let mut out = vec![f32::NEG_INFINITY; outer * inner];
    let data = x.data();
    for o in 0..outer {
        for a in 0..axis_len {
            for i in 0..inner {
                let v = data[(o * axis_len + a) * inner + i];
                let slot = &mut out[o * inner + i];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    Ok(Tensor::new(&out_shape, out))
}

/// Layer normalization over the channel axis of a `[N, C]` tensor.
///
/// Each row is shifted to zero mean and unit variance (population variance,
/// epsilon 1e-5) and then rescaled by the learned `gain` and `shift`.
pub fn layer_norm(x: &Tensor, gain: &[f32], shift: &[f32]) -> Tensor {
    assert_eq!(x.rank(), 2, "layer_norm expects [N, C]");
    let (rows, channels) = (x.shape()[0], x.shape()[1]);
    assert_eq!(gain.len(), channels, "gain length must equal channel count");
    assert_eq!(shift.len(), channels, "shift length must equal channel count");
    let mut out = Tensor::zeros(&[rows, channels]);
    for r in 0..rows {
        let mut mean = 0.0f64;
        for c in 0..channels {
            mean += x.at2(r, c) as f64;
        }
        mean /= channels as f64;
        let mut var = 0.0f64;
        for c in 0..channels {
            let d = x.at2(r, c) as f64 - mean;
            var += d * d;
        }
        var /= channels as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
        for c in 0..channels {
            let norm = ((x.at2(r, c) as f64 - mean) * inv) as f32;
            out.set2(r, c, norm * gain[c] + shift[c]);
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
pub fn upsample_nn_2d(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 3, "upsample_nn_2d expects [C, H, W]");
    let (channels, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[channels, height * 2, width * 2]);
    for c in 0..channels {
        for i in 0..height {
            for j in 0..width {
                let v = x.at3(c, i, j);
                out.set3(c, 2 * i, 2 * j, v);
                out.set3(c, 2 * i, 2 * j + 1, v);
                out.set3(c, 2 * i + 1, 2 * j, v);
                out.set3(c, 2 * i + 1, 2 * j + 1, v);
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `[C, X, Y, Z]` volume along all
/// three spatial axes.
pub fn upsample_nn_3d(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 4, "upsample_nn_3d expects [C, X, Y, Z]");
    let (channels, sx, sy, sz) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[channels, sx * 2, sy * 2, sz * 2]);
    for c in 0..channels {
        for i in 0..sx {
            for j in 0..sy {
                for k in 0..sz {
                    let v = x.at4(c, i, j, k);
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                out.set4(c, 2 * i + di, 2 * j + dj, 2 * k + dk, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
