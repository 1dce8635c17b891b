//! From image features to bird's-eye-view features.
//!
//! The chain is: predict a depth distribution per sampled pixel, lift each
//! pixel's feature along its view ray weighted by that distribution
//! (scatter-add into the voxel grid), pick out voxels that the sensor depth
//! says are occupied, refine those voxels by deformable attention back into
//! the image features, then max-pool over height and split the resulting
//! BEV plane into one feature map per stream.
//!
//! Invariants worth stating:
//! - Lifting conserves feature mass: softmax weights along a ray sum to 1,
//!   so when every ray sample lands inside the volume the per-channel sum
//!   over the grid equals the per-channel sum over the pixels.
//! - Refinement touches proposal voxels only; everything else is copied
//!   bit for bit.
//! - Deformable attention weights are a softmax over all samples, so the
//!   output is a convex combination of (projected) sampled features.

use crate::error::{DiscError, Result};
use crate::geometry::{
    generate_frustum, pixel_to_level_coord, project_world_to_image, CameraRig, DepthBinning,
    SceneVolumeSpec,
};
use crate::nn::{Conv2d, LinearLayer, SeedRng};
use crate::tensor::{bilinear_sample, max_pool_axis, softmax, Tensor};

/// Multi-scale image feature maps, coarsest (largest stride) first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `[C, H_l, W_l]` per level.
    pub levels: Vec<Tensor>,
    /// Image-pixel stride of each level, strictly descending.
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, strides: Vec<usize>) -> Result<Self> {
        if levels.is_empty() || levels.len() != strides.len() {
            return Err(DiscError::Shape(format!(
                "pyramid needs matching non-empty levels/strides, got {}/{}",
                levels.len(),
                strides.len()
            )));
        }
        let channels = levels[0].shape()[0];
        for (i, level) in levels.iter().enumerate() {
            if level.rank() != 3 || level.shape()[0] != channels {
                return Err(DiscError::Shape(format!(
                    "pyramid level {i} must be [C={channels}, H, W], got {:?}",
                    level.shape()
                )));
            }
        }
        if !strides.windows(2).all(|w| w[0] > w[1]) {
            return Err(DiscError::Shape(format!(
                "pyramid strides must be strictly descending, got {strides:?}"
            )));
        }
        Ok(Self { levels, strides })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// The coarsest level (largest stride, smallest map).
    pub fn coarsest(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn level_refs(&self) -> Vec<&Tensor> {
        self.levels.iter().collect()
    }

    /// Index of the level with the given image-pixel stride.
    pub fn level_with_stride(&self, stride: usize) -> Option<usize> {
        self.strides.iter().position(|&s| s == stride)
    }
}

/// Per-voxel feature volume tied to the grid geometry it lives on.
#[derive(Debug, Clone)]
pub struct VoxelFeatureGrid {
    /// `[C, X, Y, Z]`
    pub features: Tensor,
    pub spec: SceneVolumeSpec,
}

impl VoxelFeatureGrid {
    pub fn new(features: Tensor, spec: SceneVolumeSpec) -> Result<Self> {
        if features.rank() != 4
            || features.shape()[1] != spec.dims[0]
            || features.shape()[2] != spec.dims[1]
            || features.shape()[3] != spec.dims[2]
        {
            return Err(DiscError::Shape(format!(
                "voxel features {:?} do not match grid dims {:?}",
                features.shape(),
                spec.dims
            )));
        }
        Ok(Self { features, spec })
    }

    pub fn zeros(channels: usize, spec: SceneVolumeSpec) -> Self {
        let features = Tensor::zeros(&[channels, spec.dims[0], spec.dims[1], spec.dims[2]]);
        Self { features, spec }
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Voxels nominated for refinement, each remembering the sampled pixel that
/// produced it. Voxel indices are unique; first nomination wins.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub voxels: Vec<[usize; 3]>,
    pub pixels: Vec<(f32, f32)>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Lifts pixel features into the voxel grid along view rays.
///
/// `features` and `depth_logits` live on the sampled-pixel grid: cell
/// `(r, c)` corresponds to image pixel `((c+0.5)*stride, (r+0.5)*stride)`.
/// The depth logits are softmaxed per pixel, and each depth bin scatters
/// `prob * feature` into the voxel containing the bin centre's world point.
/// Bin centres falling outside the volume contribute nothing.
pub fn lift_splat(
    features: &Tensor,
    depth_logits: &Tensor,
    rig: &CameraRig,
    binning: &DepthBinning,
    spec: &SceneVolumeSpec,
    stride: usize,
) -> Result<VoxelFeatureGrid> {
    if features.rank() != 3 || depth_logits.rank() != 3 {
        return Err(DiscError::Shape("lift_splat expects [C,h,w] and [D,h,w]".into()));
    }
    let (rows, cols) = (features.shape()[1], features.shape()[2]);
    if depth_logits.shape()[1] != rows || depth_logits.shape()[2] != cols {
        return Err(DiscError::Shape(format!(
            "feature grid {:?} vs depth grid {:?}",
            features.shape(),
            depth_logits.shape()
        )));
    }
    if depth_logits.shape()[0] != binning.bins {
        return Err(DiscError::Shape(format!(
            "depth logits have {} bins, binning has {}",
            depth_logits.shape()[0],
            binning.bins
        )));
    }
    if rows != rig.height / stride || cols != rig.width / stride {
        return Err(DiscError::Shape(format!(
            "feature grid {rows}x{cols} does not cover a {}x{} image at stride {stride}",
            rig.height, rig.width
        )));
    }
    let channels = features.shape()[0];
    let probs = softmax(depth_logits, 0)?;
    let mut grid = VoxelFeatureGrid::zeros(channels, spec.clone());
    let frustum = generate_frustum(rig, binning, stride)?;
    // Frustum entries are row-major pixels with bins innermost, matching the
    // (r, c, bin) loop order used here.
    let mut entry = frustum.iter();
    for r in 0..rows {
        for c in 0..cols {
            for bin in 0..binning.bins {
                let point = entry.next().expect("frustum covers the sampled grid");
                debug_assert_eq!(point.bin, bin);
                let Some([i, j, k]) = spec.world_to_voxel(point.world) else {
                    continue;
                };
                let p = probs.at3(bin, r, c);
                for ch in 0..channels {
                    let acc = grid.features.at4(ch, i, j, k) + p * features.at3(ch, r, c);
                    grid.features.set4(ch, i, j, k, acc);
                }
            }
        }
    }
    Ok(grid)
}

/// Nominates occupied voxels from a metric depth map.
///
/// Pixels are sampled on the same strided grid as lifting. A sample with
/// depth `<= 0` (no sensor return) is skipped. Each remaining sample is
/// unprojected at its measured depth; samples landing inside the volume
/// nominate that voxel. Duplicate nominations keep the first sample in
/// row-major pixel order.
pub fn depth_guided_proposals(
    depth_map: &Tensor,
    rig: &CameraRig,
    spec: &SceneVolumeSpec,
    stride: usize,
) -> Result<ProposalSet> {
    if depth_map.rank() != 2
        || depth_map.shape()[0] != rig.height
        || depth_map.shape()[1] != rig.width
    {
        return Err(DiscError::Shape(format!(
            "depth map {:?} does not match {}x{} image",
            depth_map.shape(),
            rig.height,
            rig.width
        )));
    }
    if stride == 0 {
        return Err(DiscError::Geometry("proposal stride must be nonzero".into()));
    }
    let rows = rig.height / stride;
    let cols = rig.width / stride;
    let mut voxels = Vec::new();
    let mut pixels = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for r in 0..rows {
        let v = (r as f32 + 0.5) * stride as f32;
        for c in 0..cols {
            let u = (c as f32 + 0.5) * stride as f32;
            let depth = depth_map.at2(
                (v as usize).min(rig.height - 1),
                (u as usize).min(rig.width - 1),
            );
            if depth <= 0.0 {
                continue;
            }
            let world = unchecked_unproject(rig, u, v, depth);
            let Some(idx) = spec.world_to_voxel(world) else {
                continue;
            };
            if seen.insert(idx) {
                voxels.push(idx);
                pixels.push((u, v));
            }
        }
    }
    Ok(ProposalSet { voxels, pixels })
}

fn unchecked_unproject(rig: &CameraRig, u: f32, v: f32, depth: f32) -> [f32; 3] {
    crate::geometry::unproject_image_to_world(rig, u, v, depth)
        .expect("depth checked positive before unprojection")
}

/// Deformable attention kernel: a query predicts sampling offsets around a
/// reference point on each feature level plus a weight per sample; the
/// output is the value-projected, softmax-weighted sum of the bilinearly
/// sampled features.
#[derive(Debug, Clone)]
pub struct DeformableAttention {
    /// Query -> `levels * samples_per_level * 2` offsets, in level cells.
    pub offset_net: LinearLayer,
    /// Query -> `levels * samples_per_level` weight logits.
    pub weight_net: LinearLayer,
    /// Shared value projection applied to the aggregated sample.
    pub value_net: LinearLayer,
    pub levels: usize,
    pub samples_per_level: usize,
}

impl DeformableAttention {
    pub fn init(
        rng: &mut SeedRng,
        channels: usize,
        levels: usize,
        samples_per_level: usize,
    ) -> Self {
        assert!(levels > 0 && samples_per_level > 0);
        Self {
            offset_net: LinearLayer::init(rng, channels, levels * samples_per_level * 2),
            weight_net: LinearLayer::init(rng, channels, levels * samples_per_level),
            value_net: LinearLayer::init(rng, channels, channels),
            levels,
            samples_per_level,
        }
    }

    /// Runs the kernel for one query. `maps[l]` is sampled around `refs[l]`
    /// (level-cell coordinates, u along width). Off-map samples contribute
    /// zero. Weights are normalized over *all* `levels * samples_per_level`
    /// samples jointly.
    pub fn forward(&self, query: &[f32], maps: &[&Tensor], refs: &[(f32, f32)]) -> Vec<f32> {
        assert_eq!(maps.len(), self.levels, "level count mismatch");
        assert_eq!(refs.len(), self.levels, "reference point count mismatch");
        let offsets = self.offset_net.apply(query);
        let logits = self.weight_net.apply(query);
        // Softmax over every sample across all levels.
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exp: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f32 = exp.iter().sum();
        let channels = query.len();
        let mut agg = vec![0.0f32; maps[0].shape()[0]];
        for level in 0..self.levels {
            let (ru, rv) = refs[level];
            for s in 0..self.samples_per_level {
                let flat = level * self.samples_per_level + s;
                let du = offsets[flat * 2];
                let dv = offsets[flat * 2 + 1];
                let sample = bilinear_sample(maps[level], ru + du, rv + dv);
                let w = exp[flat] / total;
                for (acc, &x) in agg.iter_mut().zip(sample.iter()) {
                    *acc += w * x;
                }
            }
        }
        debug_assert_eq!(agg.len(), channels);
        self.value_net.apply(&agg)
    }
}

/// Replaces each proposal voxel's feature with deformable attention into the
/// image pyramid, anchored at the voxel centre's projection. Voxels whose
/// centre falls behind the camera keep their coarse feature. Non-proposal
/// voxels are returned untouched.
pub fn refine_proposals(
    coarse: &VoxelFeatureGrid,
    proposals: &ProposalSet,
    pyramid: &FeaturePyramid,
    rig: &CameraRig,
    attention: &DeformableAttention,
) -> Result<VoxelFeatureGrid> {
    if pyramid.channels() != coarse.channels() {
        return Err(DiscError::Shape(format!(
            "pyramid channels {} vs grid channels {}",
            pyramid.channels(),
            coarse.channels()
        )));
    }
    if attention.levels != pyramid.levels.len() {
        return Err(DiscError::Shape(format!(
            "attention expects {} levels, pyramid has {}",
            attention.levels,
            pyramid.levels.len()
        )));
    }
    let mut refined = coarse.clone();
    let channels = coarse.channels();
    let maps = pyramid.level_refs();
    let mut query = vec![0.0f32; channels];
    for &[i, j, k] in &proposals.voxels {
        let center = coarse.spec.voxel_center([i, j, k]);
        let Some(img) = project_world_to_image(rig, center) else {
            continue; // behind the camera: keep the coarse feature
        };
        let refs: Vec<(f32, f32)> = pyramid
            .strides
            .iter()
            .map(|&s| (pixel_to_level_coord(img.u, s), pixel_to_level_coord(img.v, s)))
            .collect();
        for (ch, q) in query.iter_mut().enumerate() {
            *q = coarse.features.at4(ch, i, j, k);
        }
        let out = attention.forward(&query, &maps, &refs);
        for (ch, &val) in out.iter().enumerate() {
            refined.features.set4(ch, i, j, k, val);
        }
    }
    Ok(refined)
}

/// Collapses the height axis by max-pooling: `[C, X, Y, Z] -> [C, X, Y]`.
pub fn pool_to_bev(grid: &VoxelFeatureGrid) -> Tensor {
    max_pool_axis(&grid.features, 3).expect("axis 3 exists on [C, X, Y, Z]")
}

/// Applies a convolution stack with ReLU between layers (none after the
/// last layer).
pub fn apply_conv_stack(x: &Tensor, stack: &[Conv2d]) -> Tensor {
    let mut out = x.clone();
    for (i, conv) in stack.iter().enumerate() {
        if i > 0 {
            out = out.relu();
        }
        out = conv.apply(&out);
    }
    out
}

/// Splits a shared BEV map into per-stream feature maps via two independent
/// convolution stacks.
pub fn split_bev(
    bev: &Tensor,
    instance_stack: &[Conv2d],
    scene_stack: &[Conv2d],
) -> (Tensor, Tensor) {
    (apply_conv_stack(bev, instance_stack), apply_conv_stack(bev, scene_stack))
}
