//! The dual-stream decoder: stacked layers, each running a global scene
//! pass followed by an adaptive instance pass.
//!
//! Scene pass: scene queries cross-attend to patch-reduced image queries
//! (with random key masking during training), self-attend, run a feed
//! forward block, and are scattered + upsampled into the scene BEV map.
//!
//! Instance pass: each instance query picks a few candidate heights with a
//! learned selector, attends into the image pyramid at the projections of
//! the resulting 3D points (deformable, jittered during training), attends
//! into the freshly built scene BEV at its own reference cell, then the
//! query set self-attends, runs a feed forward block, and is propagated
//! across the BEV plane by a small encoder-decoder network.
//!
//! Every layer also emits auxiliary per-plane segmentation logits and
//! height profiles used by the training losses.

use crate::bev::{DeformableAttention, FeaturePyramid};
use crate::error::{DiscError, Result};
use crate::fusion::HeightHead;
use crate::geometry::{pixel_to_level_coord, project_world_to_image, CameraRig, SceneVolumeSpec};
use crate::nn::{AttentionBlock, Conv2d, FeedForward, LayerNormParams, SeedRng};
use crate::nn::LinearLayer;
use crate::query::{init_scene_queries, PositionEmbed, QueryRole, QuerySet};
use crate::tensor::{upsample_nn_2d, Tensor};
use rand::Rng;

/// Candidate heights over the volume's vertical extent plus the learned
/// selector that picks a few of them per query.
#[derive(Debug, Clone)]
pub struct HeightCandidateBank {
    /// Strictly increasing candidate heights in metres above the volume floor.
    pub heights: Vec<f32>,
    /// Query features -> one logit per candidate.
    pub selector: LinearLayer,
    /// How many candidates each query keeps.
    pub selected: usize,
}

impl HeightCandidateBank {
    /// Candidates are the centres of `candidates` uniform slabs spanning
    /// `[0, extent_z]`.
    pub fn init(
        rng: &mut SeedRng,
        channels: usize,
        extent_z: f32,
        candidates: usize,
        selected: usize,
    ) -> Result<Self> {
        if candidates == 0 || selected == 0 || selected > candidates {
            return Err(DiscError::Query(format!(
                "cannot keep {selected} of {candidates} height candidates"
            )));
        }
        let slab = extent_z / candidates as f32;
        Ok(Self {
            heights: (0..candidates).map(|i| (i as f32 + 0.5) * slab).collect(),
            selector: LinearLayer::init(rng, channels, candidates),
            selected,
        })
    }

    /// Scores all candidates, keeps the top `selected` (ties prefer the
    /// lower index), and softmaxes over the kept logits only, so the
    /// returned weights always sum to 1. Results are in ascending height
    /// order.
    pub fn sample(&self, query: &[f32]) -> Vec<(f32, f32)> {
        let logits = self.selector.apply(query);
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = order[..self.selected].to_vec();
        kept.sort_unstable();
        let max = kept.iter().map(|&i| logits[i]).fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = kept.iter().map(|&i| (logits[i] - max).exp()).collect();
        let total: f32 = exps.iter().sum();
        kept.iter()
            .zip(&exps)
            .map(|(&i, &e)| (self.heights[i], e / total))
            .collect()
    }
}

/// Deformable attention from one instance query into the image pyramid.
///
/// Each (height, weight) pair lifts the query's BEV reference cell to a 3D
/// point (optionally jittered by up to half a voxel per axis when an rng is
/// supplied), projects it into the image, and runs the deformable kernel
/// around the projection on every pyramid level. Contributions are combined
/// as a weighted sum; points behind the camera contribute zero and their
/// weight is *not* redistributed. Returns the raw attention output.
pub fn instance_image_cross_attention(
    query: &[f32],
    bev_ref: (f32, f32),
    heights: &[(f32, f32)],
    pyramid: &FeaturePyramid,
    rig: &CameraRig,
    spec: &SceneVolumeSpec,
    attn: &DeformableAttention,
    mut jitter: Option<&mut SeedRng>,
) -> Result<Vec<f32>> {
    if heights.is_empty() {
        return Err(DiscError::Query("height sampling returned no candidates".into()));
    }
    let maps = pyramid.level_refs();
    let mut acc = vec![0.0f32; query.len()];
    for &(height, weight) in heights {
        let mut world = [
            spec.origin[0] + bev_ref.0 * spec.voxel_size,
            spec.origin[1] + bev_ref.1 * spec.voxel_size,
            spec.origin[2] + height,
        ];
        if let Some(rng) = jitter.as_deref_mut() {
            for axis in &mut world {
                *axis += (rng.gen::<f32>() - 0.5) * spec.voxel_size;
            }
        }
        let Some(point) = project_world_to_image(rig, world) else {
            continue;
        };
        let refs: Vec<(f32, f32)> = pyramid
            .strides
            .iter()
            .map(|&s| (pixel_to_level_coord(point.u, s), pixel_to_level_coord(point.v, s)))
            .collect();
        let sampled = attn.forward(query, &maps, &refs);
        for (a, s) in acc.iter_mut().zip(&sampled) {
            *a += weight * s;
        }
    }
    Ok(acc)
}

/// Deformable attention from one instance query into the scene BEV map,
/// anchored at the query's own reference cell. Returns the raw output.
pub fn instance_scene_attention(
    query: &[f32],
    bev_ref: (f32, f32),
    scene_bev: &Tensor,
    attn: &DeformableAttention,
) -> Vec<f32> {
    // BEV maps are [C, X, Y]: the second axis (x) runs along map height,
    // so the sampling reference is (u, v) = (y, x).
    attn.forward(query, &[scene_bev], &[(bev_ref.1, bev_ref.0)])
}

/// Residual + layer-norm self-attention over a query set; reference points
/// are untouched.
pub fn self_attend_queries(queries: &QuerySet, block: &AttentionBlock) -> Result<QuerySet> {
    QuerySet::new(
        block.self_attend(&queries.features),
        queries.refs.clone(),
        queries.role,
    )
}

/// Encoder-decoder used to spread sparse instance queries across the BEV
/// plane: 3x3 conv, stride-2 downsample, 3x3 conv, nearest-neighbour
/// upsample + 3x3 conv, additive skip from the encoder, final 3x3 conv.
#[derive(Debug, Clone)]
pub struct PropagationNet {
    pub encode: Conv2d,
    pub down: Conv2d,
    pub mid: Conv2d,
    pub up: Conv2d,
    pub finish: Conv2d,
}

impl PropagationNet {
    pub fn init(rng: &mut SeedRng, channels: usize) -> Self {
        Self {
            encode: Conv2d::init(rng, channels, channels, 3, 1, 1),
            down: Conv2d::init(rng, channels, channels, 3, 2, 1),
            mid: Conv2d::init(rng, channels, channels, 3, 1, 1),
            up: Conv2d::init(rng, channels, channels, 3, 1, 1),
            finish: Conv2d::init(rng, channels, channels, 3, 1, 1),
        }
    }
}

/// Writes each query's features into the BEV cell containing its reference
/// point; on collisions the later query wins. Cells without a query stay
/// zero.
pub fn scatter_queries(queries: &QuerySet, rows: usize, cols: usize) -> Result<Tensor> {
    let channels = queries.channels();
    let mut plane = Tensor::zeros(&[channels, rows, cols]);
    for (i, &(x, y)) in queries.refs.iter().enumerate() {
        if !(0.0..rows as f32).contains(&x) || !(0.0..cols as f32).contains(&y) {
            return Err(DiscError::Query(format!(
                "reference point ({x}, {y}) outside the {rows}x{cols} grid"
            )));
        }
        let (r, c) = (x.floor() as usize, y.floor() as usize);
        let row = queries.feature_row(i);
        for ch in 0..channels {
            plane.set3(ch, r, c, row[ch]);
        }
    }
    Ok(plane)
}

/// Scatters instance queries onto the BEV plane and spreads them with the
/// propagation network, producing the instance BEV map.
pub fn propagate_instance_to_bev(
    queries: &QuerySet,
    rows: usize,
    cols: usize,
    net: &PropagationNet,
) -> Result<Tensor> {
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(DiscError::Shape(format!(
            "propagation needs even BEV dimensions, got {rows}x{cols}"
        )));
    }
    let scattered = scatter_queries(queries, rows, cols)?;
    let enc = net.encode.apply(&scattered).relu();
    let low = net.mid.apply(&net.down.apply(&enc).relu()).relu();
    let up = net.up.apply(&upsample_nn_2d(&low)).relu();
    let skip = up.add(&enc)?;
    Ok(net.finish.apply(&skip))
}

/// Draws the training-time key mask: exactly `floor(ratio * n)` distinct
/// keys are dropped, chosen uniformly.
pub fn draw_key_mask(n: usize, ratio: f32, rng: &mut SeedRng) -> Vec<bool> {
    let drop = (ratio * n as f32).floor() as usize;
    let mut mask = vec![false; n];
    for idx in rand::seq::index::sample(rng, n, drop) {
        mask[idx] = true;
    }
    mask
}

/// Scene queries cross-attend to the image queries. When an rng is supplied
/// (training), a `floor(mask_ratio * N)` subset of image keys is dropped
/// uniformly; dropped keys receive exactly zero attention weight.
pub fn scene_image_cross_attention(
    scene: &QuerySet,
    image: &QuerySet,
    mask_ratio: f32,
    rng: Option<&mut SeedRng>,
    block: &AttentionBlock,
) -> Result<QuerySet> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(DiscError::Query(format!(
            "mask ratio must lie in [0, 1), got {mask_ratio}"
        )));
    }
    let mask = rng.map(|r| draw_key_mask(image.len(), mask_ratio, r));
    let features = block.cross_attend(&scene.features, &image.features, mask.as_deref())?;
    QuerySet::new(features, scene.refs.clone(), scene.role)
}

/// Lays scene queries back onto their patch lattice and upsamples the
/// coarse map to full BEV resolution: one nearest-neighbour x2 stage plus a
/// 3x3 conv per factor of two in the patch size.
pub fn scene_queries_to_bev(
    queries: &QuerySet,
    rows: usize,
    cols: usize,
    patch_size: usize,
    upsample: &[Conv2d],
) -> Result<Tensor> {
    if patch_size == 0
        || !patch_size.is_power_of_two()
        || rows % patch_size != 0
        || cols % patch_size != 0
    {
        return Err(DiscError::Query(format!(
            "patch size {patch_size} does not tile a {rows}x{cols} grid"
        )));
    }
    let stages = patch_size.trailing_zeros() as usize;
    if upsample.len() != stages {
        return Err(DiscError::Query(format!(
            "patch size {patch_size} needs {stages} upsample stages, got {}",
            upsample.len()
        )));
    }
    let (coarse_rows, coarse_cols) = (rows / patch_size, cols / patch_size);
    if queries.len() != coarse_rows * coarse_cols {
        return Err(DiscError::Query(format!(
            "{} scene queries cannot fill a {coarse_rows}x{coarse_cols} patch lattice",
            queries.len()
        )));
    }
    let channels = queries.channels();
    let mut coarse = Tensor::zeros(&[channels, coarse_rows, coarse_cols]);
    let mut filled = vec![false; coarse_rows * coarse_cols];
    let p = patch_size as f32;
    for (i, &(x, y)) in queries.refs.iter().enumerate() {
        let bi = (x / p - 0.5).round();
        let bj = (y / p - 0.5).round();
        let on_lattice = (x - (bi + 0.5) * p).abs() < 1e-4
            && (y - (bj + 0.5) * p).abs() < 1e-4
            && (0.0..coarse_rows as f32).contains(&bi)
            && (0.0..coarse_cols as f32).contains(&bj);
        if !on_lattice {
            return Err(DiscError::Query(format!(
                "reference point ({x}, {y}) is not on the patch lattice"
            )));
        }
        let (bi, bj) = (bi as usize, bj as usize);
        if filled[bi * coarse_cols + bj] {
            return Err(DiscError::Query(format!(
                "patch cell ({bi}, {bj}) claimed by two scene queries"
            )));
        }
        filled[bi * coarse_cols + bj] = true;
        let row = queries.feature_row(i);
        for c in 0..channels {
            coarse.set3(c, bi, bj, row[c]);
        }
    }
    let mut map = coarse;
    for conv in upsample {
        map = conv.apply(&upsample_nn_2d(&map));
    }
    Ok(map)
}

/// Weights of one instance pass.
#[derive(Debug, Clone)]
pub struct InstanceLayer {
    pub height_bank: HeightCandidateBank,
    pub image_attn: DeformableAttention,
    pub image_norm: LayerNormParams,
    pub scene_attn: DeformableAttention,
    pub scene_norm: LayerNormParams,
    pub self_attn: AttentionBlock,
    pub ffn: FeedForward,
    pub propagate: PropagationNet,
}

/// Weights of one scene pass.
#[derive(Debug, Clone)]
pub struct SceneLayer {
    pub cross_attn: AttentionBlock,
    pub self_attn: AttentionBlock,
    pub ffn: FeedForward,
    pub upsample: Vec<Conv2d>,
}

/// Auxiliary heads attached to every layer for deep supervision.
#[derive(Debug, Clone)]
pub struct AuxHeads {
    pub instance_seg: Conv2d,
    pub scene_seg: Conv2d,
    pub instance_height: HeightHead,
    pub scene_height: HeightHead,
}

/// One layer's auxiliary outputs.
#[derive(Debug, Clone)]
pub struct LayerAux {
    /// `[X, Y]` foreground logits from the instance BEV map.
    pub instance_seg: Tensor,
    /// `[X, Y]` foreground logits from the scene BEV map.
    pub scene_seg: Tensor,
    /// `[Z, X, Y]` occupancy-by-height profile from the instance stream.
    pub instance_height: Tensor,
    /// `[Z, X, Y]` occupancy-by-height profile from the scene stream.
    pub scene_height: Tensor,
}

impl AuxHeads {
    pub fn init(rng: &mut SeedRng, channels: usize, height_bins: usize) -> Self {
        Self {
            instance_seg: Conv2d::init(rng, channels, 1, 1, 1, 0),
            scene_seg: Conv2d::init(rng, channels, 1, 1, 1, 0),
            instance_height: HeightHead::init(rng, channels, height_bins),
            scene_height: HeightHead::init(rng, channels, height_bins),
        }
    }

    pub fn apply(&self, instance_bev: &Tensor, scene_bev: &Tensor) -> LayerAux {
        let plane = |t: Tensor| -> Tensor {
            let (rows, cols) = (t.shape()[1], t.shape()[2]);
            Tensor::new(&[rows, cols], t.into_data())
        };
        LayerAux {
            instance_seg: plane(self.instance_seg.apply(instance_bev)),
            scene_seg: plane(self.scene_seg.apply(scene_bev)),
            instance_height: self.instance_height.apply(instance_bev),
            scene_height: self.scene_height.apply(scene_bev),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub instance: InstanceLayer,
    pub scene: SceneLayer,
    pub aux: AuxHeads,
}

/// Size parameters needed to allocate a decoder stack.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub channels: usize,
    pub layers: usize,
    /// BEV patch size of the scene queries.
    pub patch_size: usize,
    /// Patch size used to reduce the coarsest image level into image queries.
    pub image_patch: usize,
    pub height_candidates: usize,
    pub heights_selected: usize,
    /// Vertical extent of the volume in metres.
    pub extent_z: f32,
    /// Fraction of image keys dropped during training.
    pub mask_ratio: f32,
    pub pyramid_levels: usize,
    pub samples_per_level: usize,
    /// Vertical bin count of the auxiliary height heads.
    pub height_bins: usize,
}

/// All decoder weights plus the shared query plumbing.
#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    /// Stride-2 stack reducing the coarsest image level into image queries.
    pub image_reducer: Vec<Conv2d>,
    pub image_patch: usize,
    pub instance_pos: PositionEmbed,
    pub scene_pos: PositionEmbed,
    pub patch_size: usize,
    pub mask_ratio: f32,
}

impl DecoderStack {
    pub fn init(rng: &mut SeedRng, params: &DecoderParams) -> Result<Self> {
        if params.layers == 0 {
            return Err(DiscError::Query("decoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&params.mask_ratio) {
            return Err(DiscError::Query(format!(
                "mask ratio must lie in [0, 1), got {}",
                params.mask_ratio
            )));
        }
        if !params.patch_size.is_power_of_two() || !params.image_patch.is_power_of_two() {
            return Err(DiscError::Query("patch sizes must be powers of two".into()));
        }
        let c = params.channels;
        let stage_stack = |rng: &mut SeedRng, stages: usize, stride: usize| -> Vec<Conv2d> {
            (0..stages).map(|_| Conv2d::init(rng, c, c, 3, stride, 1)).collect()
        };
        let mut layers = Vec::with_capacity(params.layers);
        for _ in 0..params.layers {
            let instance = InstanceLayer {
                height_bank: HeightCandidateBank::init(
                    rng,
                    c,
                    params.extent_z,
                    params.height_candidates,
                    params.heights_selected,
                )?,
                image_attn: DeformableAttention::init(
                    rng,
                    c,
                    params.pyramid_levels,
                    params.samples_per_level,
                ),
                image_norm: LayerNormParams::identity(c),
                scene_attn: DeformableAttention::init(rng, c, 1, params.samples_per_level),
                scene_norm: LayerNormParams::identity(c),
                self_attn: AttentionBlock::init(rng, c),
                ffn: FeedForward::init(rng, c),
                propagate: PropagationNet::init(rng, c),
            };
            let scene = SceneLayer {
                cross_attn: AttentionBlock::init(rng, c),
                self_attn: AttentionBlock::init(rng, c),
                ffn: FeedForward::init(rng, c),
                upsample: stage_stack(rng, params.patch_size.trailing_zeros() as usize, 1),
            };
            let aux = AuxHeads::init(rng, c, params.height_bins);
            layers.push(DecoderLayer { instance, scene, aux });
        }
        Ok(Self {
            layers,
            image_reducer: stage_stack(rng, params.image_patch.trailing_zeros() as usize, 2),
            image_patch: params.image_patch,
            instance_pos: PositionEmbed::init(rng, c),
            scene_pos: PositionEmbed::init(rng, c),
            patch_size: params.patch_size,
            mask_ratio: params.mask_ratio,
        })
    }
}

/// Final decoder state: the two BEV maps, the refined query sets, and each
/// layer's auxiliary outputs (last entry = final layer).
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub instance_bev: Tensor,
    pub scene_bev: Tensor,
    pub instance_queries: QuerySet,
    pub scene_queries: QuerySet,
    pub aux: Vec<LayerAux>,
}

/// Adds each stream's learned positional embedding to its query features.
fn add_position_embeddings(queries: &mut QuerySet, pe: &PositionEmbed, rows: f32, cols: f32) -> Result<()> {
    let channels = queries.channels();
    for i in 0..queries.len() {
        let (x, y) = queries.refs[i];
        let emb = pe.embed(x, y, rows, cols)?;
        for c in 0..channels {
            let v = queries.features.at2(i, c) + emb[c];
            queries.features.set2(i, c, v);
        }
    }
    Ok(())
}

/// Runs the full decoder. `scene_bev` seeds the scene map state, though the
/// first scene pass replaces it before any instance pass reads it. Passing
/// an rng enables the training-time stochastic paths (key masking and
/// height jitter); `None` is the deterministic inference path.
pub fn run_decoder(
    stack: &DecoderStack,
    instance_queries: QuerySet,
    scene_queries: QuerySet,
    pyramid: &FeaturePyramid,
    rig: &CameraRig,
    spec: &SceneVolumeSpec,
    scene_bev: Tensor,
    mut rng: Option<&mut SeedRng>,
) -> Result<DecoderOutput> {
    if instance_queries.role != QueryRole::Instance || scene_queries.role != QueryRole::Scene {
        return Err(DiscError::Query("query sets passed to the wrong streams".into()));
    }
    let (rows, cols) = (spec.dims[0], spec.dims[1]);
    let channels = scene_bev.shape()[0];
    if scene_bev.shape() != [channels, rows, cols] {
        return Err(DiscError::Shape(format!(
            "scene BEV {:?} does not cover the {rows}x{cols} grid",
            scene_bev.shape()
        )));
    }

    let image_queries =
        init_scene_queries(pyramid.coarsest(), stack.image_patch, &stack.image_reducer)?;

    let mut instance = instance_queries;
    let mut scene = scene_queries;
    add_position_embeddings(&mut instance, &stack.instance_pos, rows as f32, cols as f32)?;
    add_position_embeddings(&mut scene, &stack.scene_pos, rows as f32, cols as f32)?;

    let mut instance_bev = Tensor::zeros(&[channels, rows, cols]);
    let mut scene_map = scene_bev;
    let mut aux = Vec::with_capacity(stack.layers.len());

    for layer in &stack.layers {
        // Scene pass first, so the instance pass reads this layer's map.
        scene = scene_image_cross_attention(
            &scene,
            &image_queries,
            stack.mask_ratio,
            rng.as_deref_mut(),
            &layer.scene.cross_attn,
        )?;
        scene = self_attend_queries(&scene, &layer.scene.self_attn)?;
        scene.features = layer.scene.ffn.apply_rows(&scene.features);
        scene_map =
            scene_queries_to_bev(&scene, rows, cols, stack.patch_size, &layer.scene.upsample)?;

        for i in 0..instance.len() {
            let bev_ref = instance.refs[i];
            let q: Vec<f32> = instance.feature_row(i).to_vec();
            let heights = layer.instance.height_bank.sample(&q);
            let image_out = instance_image_cross_attention(
                &q,
                bev_ref,
                &heights,
                pyramid,
                rig,
                spec,
                &layer.instance.image_attn,
                rng.as_deref_mut(),
            )?;
            let q: Vec<f32> = layer
                .instance
                .image_norm
                .apply_row(&q.iter().zip(&image_out).map(|(a, b)| a + b).collect::<Vec<_>>());
            let scene_out =
                instance_scene_attention(&q, bev_ref, &scene_map, &layer.instance.scene_attn);
            let q = layer
                .instance
                .scene_norm
                .apply_row(&q.iter().zip(&scene_out).map(|(a, b)| a + b).collect::<Vec<_>>());
            for (c, &v) in q.iter().enumerate() {
                instance.features.set2(i, c, v);
            }
        }
        instance = self_attend_queries(&instance, &layer.instance.self_attn)?;
        instance.features = layer.instance.ffn.apply_rows(&instance.features);
        instance_bev = propagate_instance_to_bev(&instance, rows, cols, &layer.instance.propagate)?;

        aux.push(layer.aux.apply(&instance_bev, &scene_map));
    }

    Ok(DecoderOutput {
        instance_bev,
        scene_bev: scene_map,
        instance_queries: instance,
        scene_queries: scene,
        aux,
    })
}
