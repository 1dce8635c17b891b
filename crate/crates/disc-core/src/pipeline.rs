//! End-to-end orchestration: model weights, the forward pass from image to
//! voxel labels, training losses, and multi-scene evaluation.
//!
//! The forward pass is deterministic given `(config, weights, scene)`; in
//! train-step mode the stochastic pieces (height jitter, key masking) draw
//! from a generator seeded by mixing the config seed with the scene seed,
//! so repeated runs stay byte-identical there too. Every intermediate is
//! swept for non-finite values and reported by stage name.

use crate::bev::{self, DeformableAttention, FeaturePyramid};
use crate::config::{Mode, PipelineConfig, BACKBONE_STRIDES};
use crate::decoder::{run_decoder, DecoderParams, DecoderStack, LayerAux};
use crate::error::{DiscError, Result};
use crate::fusion::{fuse, predict, Aggregator};
use crate::labels::{LabelGrid, IGNORE_LABEL};
use crate::losses::{
    class_weights_from_labels, depth_loss, height_focal_loss, scal_loss, seg_loss, total_loss,
    weighted_ce_loss, AffinityMode, AuxLossTerms, LossReport,
};
use crate::metrics::{CategoryPartition, ConfusionAccumulator, MetricsReport};
use crate::nn::{seeded_rng, Conv2d, LinearLayer, SeedRng};
use crate::query::{
    init_instance_queries, init_scene_queries, select_instance_refs, InstanceProbabilityMap,
};
use crate::scene::{generate_scene, SyntheticScene};
use crate::tensor::Tensor;

/// Every learned parameter in the pipeline, initialized from one generator
/// so a `(config, seed)` pair pins the whole model.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    /// Two stride-2 stages turning `[3, H, W]` into feature levels at 1/2
    /// and 1/4 resolution.
    pub backbone: [Conv2d; 2],
    /// Per-pixel depth distribution head on the lifting level.
    pub depth_head: Conv2d,
    /// Refines proposal voxels against the image pyramid.
    pub refine_attention: DeformableAttention,
    /// Splits the shared BEV map into the two stream inputs.
    pub instance_split: Vec<Conv2d>,
    pub scene_split: Vec<Conv2d>,
    /// 1x1 head scoring instance presence per BEV cell.
    pub instance_prob_head: Conv2d,
    /// Stride-2 stack pooling each scene patch down to one query.
    pub scene_reducer: Vec<Conv2d>,
    pub decoder: DecoderStack,
    pub aggregator: Aggregator,
    /// Per-voxel classifier applied after upsampling.
    pub predict_head: LinearLayer,
}

impl ModelWeights {
    pub fn init(config: &PipelineConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let split_stack =
            |rng: &mut SeedRng| vec![Conv2d::init(rng, c, c, 3, 1, 1), Conv2d::init(rng, c, c, 3, 1, 1)];
        let reducer_stages = config.patch_size.trailing_zeros() as usize;
        let decoder_params = DecoderParams {
            channels: c,
            layers: config.layers,
            patch_size: config.patch_size,
            image_patch: config.image_patch,
            height_candidates: config.height_candidates,
            heights_selected: config.heights_selected,
            extent_z: config.volume.extents()[2],
            mask_ratio: config.mask_ratio,
            pyramid_levels: BACKBONE_STRIDES.len(),
            samples_per_level: config.samples_per_level,
            height_bins: config.volume.dims[2],
        };
        Ok(Self {
            backbone: [Conv2d::init(rng, 3, c, 3, 2, 1), Conv2d::init(rng, c, c, 3, 2, 1)],
            depth_head: Conv2d::init(rng, c, config.depth.bins, 1, 1, 0),
            refine_attention: DeformableAttention::init(
                rng,
                c,
                BACKBONE_STRIDES.len(),
                config.samples_per_level,
            ),
            instance_split: split_stack(rng),
            scene_split: split_stack(rng),
            instance_prob_head: Conv2d::init(rng, c, 1, 1, 1, 0),
            scene_reducer: (0..reducer_stages).map(|_| Conv2d::init(rng, c, c, 3, 2, 1)).collect(),
            decoder: DecoderStack::init(rng, &decoder_params)?,
            aggregator: Aggregator::init(rng, c),
            predict_head: LinearLayer::init(rng, c, config.num_classes as usize),
        })
    }
}

/// Everything the forward pass produces, including the stage-by-stage
/// tensors for dumping and debugging.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Argmax labels on the refined grid (ties pick the lowest class id).
    pub pred: LabelGrid,
    /// `[K, 2X, 2Y, 2Z]` class logits.
    pub logits: Tensor,
    /// `[D, H/s, W/s]` depth-bin logits from the lifting level.
    pub depth_logits: Tensor,
    /// Per-layer auxiliary predictions (segmentation + height).
    pub aux: Vec<LayerAux>,
    /// Named stage outputs in execution order; all verified finite.
    pub intermediates: Vec<(&'static str, Tensor)>,
}

/// Mixes two seeds into the train-time stochastic stream's seed.
fn mix_seeds(config_seed: u64, scene_seed: u64) -> u64 {
    let mut z = config_seed ^ scene_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn ensure_finite(stage: &'static str, t: &Tensor) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiscError::NonFinite(stage.to_string()))
    }
}

/// Runs image -> pyramid -> lifted voxels -> BEV -> dual-stream decoder ->
/// fused volume -> per-voxel class labels.
pub fn run_forward(
    config: &PipelineConfig,
    scene: &SyntheticScene,
    weights: &ModelWeights,
) -> Result<ForwardOutput> {
    config.validate()?;
    let rig = &scene.rig;
    if rig.width != config.camera.width || rig.height != config.camera.height {
        return Err(DiscError::Config(format!(
            "scene camera {}x{} does not match the configured {}x{}",
            rig.width, rig.height, config.camera.width, config.camera.height
        )));
    }
    if scene.gt.num_classes() != config.num_classes {
        return Err(DiscError::Config(format!(
            "scene has {} classes, configuration expects {}",
            scene.gt.num_classes(),
            config.num_classes
        )));
    }
    let fine_dims = config.volume.refined().dims;
    if scene.gt.dims() != fine_dims {
        return Err(DiscError::Config(format!(
            "scene grid {:?} does not match the refined volume {:?}",
            scene.gt.dims(),
            fine_dims
        )));
    }

    let mut intermediates: Vec<(&'static str, Tensor)> = Vec::new();
    let mut record = |stage: &'static str, t: Tensor| -> Result<Tensor> {
        ensure_finite(stage, &t)?;
        intermediates.push((stage, t.clone()));
        Ok(t)
    };

    // Backbone pyramid: 1/2 and 1/4 resolution, coarsest first.
    ensure_finite("image", &scene.image)?;
    let feat_half = record("feature_half", weights.backbone[0].apply(&scene.image).relu())?;
    let feat_quarter = record("feature_quarter", weights.backbone[1].apply(&feat_half).relu())?;
    let pyramid = FeaturePyramid::new(
        vec![feat_quarter.clone(), feat_half.clone()],
        BACKBONE_STRIDES.to_vec(),
    )?;

    // Depth distribution and lift into the voxel volume.
    let level = pyramid
        .level_with_stride(config.depth_stride)
        .expect("config validation pins the stride to a backbone level");
    let depth_logits =
        record("depth_logits", weights.depth_head.apply(&pyramid.levels[level]))?;
    let lifted = bev::lift_splat(
        &pyramid.levels[level],
        &depth_logits,
        rig,
        &config.depth,
        &config.volume,
        config.depth_stride,
    )?;
    record("voxels_lifted", lifted.features.clone())?;

    // Depth-guided proposal refinement against the pyramid.
    let proposals =
        bev::depth_guided_proposals(&scene.depth_map, rig, &config.volume, config.depth_stride)?;
    let refined = bev::refine_proposals(&lifted, &proposals, &pyramid, rig, &weights.refine_attention)?;
    record("voxels_refined", refined.features.clone())?;

    // Collapse to BEV and split into the two streams.
    let bev_map = record("bev", bev::pool_to_bev(&refined))?;
    let (instance_bev, scene_bev) =
        bev::split_bev(&bev_map, &weights.instance_split, &weights.scene_split);
    let instance_bev = record("bev_instance", instance_bev)?;
    let scene_bev = record("bev_scene", scene_bev)?;

    // Query construction.
    let prob_map = InstanceProbabilityMap::from_bev(&instance_bev, &weights.instance_prob_head)?;
    record("instance_probability", prob_map.probs.clone())?;
    let refs = select_instance_refs(&prob_map, config.vote_block, config.instance_queries)?;
    let instance_queries = init_instance_queries(&instance_bev, &refs)?;
    let scene_queries = init_scene_queries(&scene_bev, config.patch_size, &weights.scene_reducer)?;

    // Dual-stream decoding; train mode plugs in the stochastic stream.
    let mut train_rng = seeded_rng(mix_seeds(config.seed, scene.seed));
    let rng_opt = match config.mode {
        Mode::TrainStep => Some(&mut train_rng),
        Mode::Inference => None,
    };
    let decoded = run_decoder(
        &weights.decoder,
        instance_queries,
        scene_queries,
        &pyramid,
        rig,
        &config.volume,
        scene_bev,
        rng_opt,
    )?;
    record("decoder_instance_bev", decoded.instance_bev.clone())?;
    record("decoder_scene_bev", decoded.scene_bev.clone())?;
    for aux in &decoded.aux {
        ensure_finite("decoder_aux", &aux.instance_seg)?;
        ensure_finite("decoder_aux", &aux.scene_seg)?;
        ensure_finite("decoder_aux", &aux.instance_height)?;
        ensure_finite("decoder_aux", &aux.scene_height)?;
    }

    // Category-decoupled fusion with the final layer's height profiles.
    let last = decoded.aux.last().expect("decoder always has at least one layer");
    let fused = record(
        "fused",
        fuse(&decoded.instance_bev, &decoded.scene_bev, &last.instance_height, &last.scene_height)?,
    )?;
    let aggregated = record("aggregated", weights.aggregator.apply(&fused)?)?;
    let logits = record("logits", predict(&aggregated, &weights.predict_head)?)?;

    let pred = argmax_labels(&logits)?;
    Ok(ForwardOutput { pred, logits, depth_logits, aux: decoded.aux, intermediates })
}

/// Per-voxel argmax over `[K, X, Y, Z]` logits; ties pick the lowest class.
fn argmax_labels(logits: &Tensor) -> Result<LabelGrid> {
    if logits.rank() != 4 {
        return Err(DiscError::Shape(format!(
            "class logits must be [K, X, Y, Z], got {:?}",
            logits.shape()
        )));
    }
    let [k, x, y, z] =
        [logits.shape()[0], logits.shape()[1], logits.shape()[2], logits.shape()[3]];
    if k == 0 || k > IGNORE_LABEL as usize {
        return Err(DiscError::Shape(format!("unsupported class count {k}")));
    }
    let voxels = x * y * z;
    let data = logits.data();
    let mut labels = vec![0u8; voxels];
    for v in 0..voxels {
        let mut best = 0usize;
        let mut best_value = data[v];
        for c in 1..k {
            let value = data[c * voxels + v];
            if value > best_value {
                best_value = value;
                best = c;
            }
        }
        labels[v] = best as u8;
    }
    LabelGrid::new([x, y, z], k as u8, labels)
}

/// Downsamples the fine ground truth onto the working grid as binary masks.
///
/// A working cell is positive for a stream when any fine voxel in its
/// 2x2 column (segmentation) or 2x2x2 block (height) carries one of that
/// stream's classes. Returns `([2, X, Y] seg masks, instance [Z, X, Y],
/// scene [Z, X, Y])`.
fn ground_truth_masks(
    gt: &LabelGrid,
    partition: &CategoryPartition,
    dims: [usize; 3],
) -> (Tensor, Tensor, Tensor) {
    let [x, y, z] = dims;
    let mut seg = Tensor::zeros(&[2, x, y]);
    let mut instance_height = Tensor::zeros(&[z, x, y]);
    let mut scene_height = Tensor::zeros(&[z, x, y]);
    let is_instance = |label: u8| partition.instance_ids.contains(&label);
    let is_scene = |label: u8| partition.scene_ids.contains(&label);
    for i in 0..x {
        for j in 0..y {
            let mut column_instance = false;
            let mut column_scene = false;
            for k in 0..z {
                let mut block_instance = false;
                let mut block_scene = false;
                for fi in 2 * i..2 * i + 2 {
                    for fj in 2 * j..2 * j + 2 {
                        for fk in 2 * k..2 * k + 2 {
                            let label = gt.at(fi, fj, fk);
                            if label == IGNORE_LABEL {
                                continue;
                            }
                            block_instance |= is_instance(label);
                            block_scene |= is_scene(label);
                        }
                    }
                }
                if block_instance {
                    instance_height.set3(k, i, j, 1.0);
                }
                if block_scene {
                    scene_height.set3(k, i, j, 1.0);
                }
                column_instance |= block_instance;
                column_scene |= block_scene;
            }
            if column_instance {
                seg.set3(0, i, j, 1.0);
            }
            if column_scene {
                seg.set3(1, i, j, 1.0);
            }
        }
    }
    (seg, instance_height, scene_height)
}

/// Ground-truth depth on the strided lifting grid, sampled exactly like the
/// proposal stage samples the depth map.
fn sample_depth_gt(depth_map: &Tensor, height: usize, width: usize, stride: usize) -> Tensor {
    let rows = height / stride;
    let cols = width / stride;
    Tensor::from_fn(&[rows, cols], |flat| {
        let v = ((flat / cols) as f32 + 0.5) * stride as f32;
        let u = ((flat % cols) as f32 + 0.5) * stride as f32;
        depth_map.at2((v as usize).min(height - 1), (u as usize).min(width - 1))
    })
}

/// Evaluates the full training objective for one forward pass.
pub fn compute_losses(
    config: &PipelineConfig,
    scene: &SyntheticScene,
    output: &ForwardOutput,
) -> Result<(f64, LossReport)> {
    let gt = &scene.gt;
    let scal_geo = scal_loss(&output.logits, gt, AffinityMode::Geometric)?;
    let scal_sem = scal_loss(&output.logits, gt, AffinityMode::Semantic)?;
    let ce = weighted_ce_loss(&output.logits, gt, &class_weights_from_labels(gt))?;

    let partition = CategoryPartition::desk(config.num_classes)?;
    let (seg_masks, instance_height_gt, scene_height_gt) =
        ground_truth_masks(gt, &partition, config.volume.dims);
    let mut per_layer = Vec::with_capacity(output.aux.len());
    for aux in &output.aux {
        let (x, y) = (aux.instance_seg.shape()[0], aux.instance_seg.shape()[1]);
        let mut seg_logits = Tensor::zeros(&[2, x, y]);
        seg_logits.data_mut()[..x * y].copy_from_slice(aux.instance_seg.data());
        seg_logits.data_mut()[x * y..].copy_from_slice(aux.scene_seg.data());
        let seg = seg_loss(&seg_logits, &seg_masks)?;
        let height = height_focal_loss(&aux.instance_height, &instance_height_gt)?
            + height_focal_loss(&aux.scene_height, &scene_height_gt)?;
        per_layer.push(AuxLossTerms { seg, height });
    }

    let depth_gt = sample_depth_gt(
        &scene.depth_map,
        config.camera.height,
        config.camera.width,
        config.depth_stride,
    );
    let depth = depth_loss(&output.depth_logits, &depth_gt, &config.depth)?;
    Ok(total_loss(scal_geo, scal_sem, ce, &per_layer, depth, &config.loss))
}

/// Evaluation switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Test hook: score each ground truth against itself instead of running
    /// the model, verifying the scoring plumbing end to end.
    pub force_perfect: bool,
}

/// Aggregate result of scoring a run of scenes.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accumulator: ConfusionAccumulator,
    pub metrics: MetricsReport,
    /// One report per scene; populated in train-step mode.
    pub losses: Vec<LossReport>,
}

/// Generates scenes `seed_start .. seed_start + count`, forwards each, and
/// accumulates metrics (plus losses in train-step mode).
pub fn evaluate_scenes(
    config: &PipelineConfig,
    weights: &ModelWeights,
    seed_start: u64,
    count: usize,
    options: EvalOptions,
) -> Result<EvalOutcome> {
    if count == 0 {
        return Err(DiscError::Config("evaluation needs at least one scene".into()));
    }
    let partition = CategoryPartition::desk(config.num_classes)?;
    let mut accumulator = ConfusionAccumulator::new(config.num_classes, partition.free_id)?;
    let mut losses = Vec::new();
    for offset in 0..count {
        let seed = seed_start.wrapping_add(offset as u64);
        let scene = generate_scene(
            seed,
            &config.volume,
            config.num_classes,
            config.camera.build_rig()?,
            &config.scene,
        )?;
        if options.force_perfect {
            accumulator.accumulate(&scene.gt, &scene.gt)?;
            continue;
        }
        let output = run_forward(config, &scene, weights)?;
        accumulator.accumulate(&output.pred, &scene.gt)?;
        if config.mode == Mode::TrainStep {
            let (_, report) = compute_losses(config, &scene, &output)?;
            losses.push(report);
        }
    }
    let metrics = accumulator.finalize(&partition)?;
    Ok(EvalOutcome { accumulator, metrics, losses })
}
