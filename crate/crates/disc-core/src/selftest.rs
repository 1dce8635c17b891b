//! Built-in sanity suite: compact re-statements of the library's core
//! oracles and invariants, runnable from the CLI on any machine.
//!
//! Each check is independent, seeded, and returns a human-readable failure
//! message. They deliberately re-derive expectations from first principles
//! (scalar loops, closed forms, brute force) instead of calling the code
//! paths they validate.

use rand::Rng;

use crate::bev::{lift_splat, DeformableAttention};
use crate::config::{Mode, PipelineConfig};
use crate::decoder::HeightCandidateBank;
use crate::fusion::fuse;
use crate::geometry::{
    generate_frustum, project_world_to_image, unproject_image_to_world, CameraRig, DepthBinning,
    SceneVolumeSpec,
};
use crate::labels::LabelGrid;
use crate::losses::{depth_loss, scal_loss, weighted_ce_loss, AffinityMode};
use crate::metrics::{CategoryPartition, ConfusionAccumulator};
use crate::nn::seeded_rng;
use crate::pipeline::{evaluate_scenes, run_forward, EvalOptions, ModelWeights};
use crate::query::{select_instance_refs, InstanceProbabilityMap};
use crate::scene::generate_scene;
use crate::tensor::Tensor;

type Check = fn() -> Result<(), String>;

/// Names and bodies of every check, in execution order.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("projection round trip", projection_round_trip),
        ("lift mass conservation", lift_mass_conservation),
        ("attention convexity on constant maps", attention_convexity),
        ("block voting matches brute force", block_voting_brute_force),
        ("height weights normalize", height_weights_normalize),
        ("loss closed-form anchors", loss_anchors),
        ("fusion matches scalar oracle", fusion_scalar_oracle),
        ("metric identity", metric_identity),
        ("forward reproducibility", forward_reproducibility),
        ("perfect predictions score one", perfect_scoring),
    ]
}

/// Runs every check, returning `(name, outcome)` pairs.
pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    checks().into_iter().map(|(name, check)| (name, check())).collect()
}

fn ensure(condition: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if condition {
        Ok(())
    } else {
        Err(message())
    }
}

fn fail<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn test_rig() -> CameraRig {
    CameraRig::look_at(
        [0.4, 3.2, 0.8],
        [1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [[96.0, 0.0, 16.0], [0.0, 96.0, 16.0], [0.0, 0.0, 1.0]],
        32,
        32,
    )
    .expect("valid rig")
}

fn projection_round_trip() -> Result<(), String> {
    let rig = test_rig();
    let mut rng = seeded_rng(101);
    for _ in 0..200 {
        let p = [rng.gen::<f32>() * 4.0 + 0.6, rng.gen::<f32>() * 4.0 + 1.0, rng.gen::<f32>() * 1.4];
        let Some(img) = project_world_to_image(&rig, p) else {
            return Err(format!("point {p:?} unexpectedly behind the camera"));
        };
        let back = unproject_image_to_world(&rig, img.u, img.v, img.depth).map_err(fail)?;
        let err = (0..3).map(|a| (back[a] - p[a]).abs()).fold(0.0f32, f32::max);
        ensure(err < 1e-4, || format!("round trip drifted {err} m at {p:?}"))?;
    }
    Ok(())
}

fn lift_mass_conservation() -> Result<(), String> {
    let spec = SceneVolumeSpec::desk();
    let rig = test_rig();
    let binning = DepthBinning::new(0.5, 4.5, 8).map_err(fail)?;
    let stride = 8;
    for p in generate_frustum(&rig, &binning, stride).map_err(fail)? {
        ensure(spec.world_to_voxel(p.world).is_some(), || {
            format!("frustum escapes the volume at {:?}", p.world)
        })?;
    }
    let mut rng = seeded_rng(102);
    let features = Tensor::from_fn(&[4, 4, 4], |_| rng.gen::<f32>());
    let depth_logits = Tensor::from_fn(&[8, 4, 4], |_| rng.gen::<f32>() * 4.0 - 2.0);
    let grid = lift_splat(&features, &depth_logits, &rig, &binning, &spec, stride).map_err(fail)?;
    for ch in 0..4 {
        let mut splashed = 0.0f64;
        for x in 0..spec.dims[0] {
            for y in 0..spec.dims[1] {
                for z in 0..spec.dims[2] {
                    splashed += grid.features.at4(ch, x, y, z) as f64;
                }
            }
        }
        let mut supplied = 0.0f64;
        for r in 0..4 {
            for c in 0..4 {
                supplied += features.at3(ch, r, c) as f64;
            }
        }
        ensure((splashed - supplied).abs() < 1e-4, || {
            format!("channel {ch}: splashed {splashed} vs supplied {supplied}")
        })?;
    }
    Ok(())
}

fn attention_convexity() -> Result<(), String> {
    let mut rng = seeded_rng(103);
    let channels = 6;
    let mut attn = DeformableAttention::init(&mut rng, channels, 2, 3);
    attn.offset_net.weight = Tensor::zeros(attn.offset_net.weight.shape());
    attn.offset_net.bias = Tensor::zeros(attn.offset_net.bias.shape());
    for trial in 0..20 {
        let constant: Vec<f32> = (0..channels).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let maps = [
            Tensor::from_fn(&[channels, 9, 9], |i| constant[i / 81]),
            Tensor::from_fn(&[channels, 5, 5], |i| constant[i / 25]),
        ];
        let query: Vec<f32> = (0..channels).map(|_| rng.gen::<f32>()).collect();
        let out = attn.forward(&query, &[&maps[0], &maps[1]], &[(4.0, 4.0), (2.0, 2.0)]);
        let expected = attn.value_net.apply(&constant);
        for (o, e) in out.iter().zip(&expected) {
            ensure((o - e).abs() < 1e-5, || {
                format!("trial {trial}: constant-map output {o} vs value projection {e}")
            })?;
        }
    }
    Ok(())
}

fn block_voting_brute_force() -> Result<(), String> {
    let mut rng = seeded_rng(104);
    for trial in 0..20 {
        let probs = Tensor::from_fn(&[8, 8], |_| rng.gen::<f32>());
        let map = InstanceProbabilityMap::new(probs.clone()).map_err(fail)?;
        let got = select_instance_refs(&map, 4, 3).map_err(fail)?;
        // Brute force: per 4x4 block, the best cell (ties to the lowest
        // row-major index); rank winners by probability then index.
        let mut winners = Vec::new();
        for bi in 0..2 {
            for bj in 0..2 {
                let mut best = (f32::NEG_INFINITY, usize::MAX);
                for i in 4 * bi..4 * bi + 4 {
                    for j in 4 * bj..4 * bj + 4 {
                        let p = probs.at2(i, j);
                        let flat = i * 8 + j;
                        if p > best.0 || (p == best.0 && flat < best.1) {
                            best = (p, flat);
                        }
                    }
                }
                winners.push(best);
            }
        }
        winners.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<(f32, f32)> = winners
            .iter()
            .take(3)
            .map(|&(_, flat)| ((flat / 8) as f32 + 0.5, (flat % 8) as f32 + 0.5))
            .collect();
        ensure(got == expected, || format!("trial {trial}: {got:?} vs brute force {expected:?}"))?;
    }
    Ok(())
}

fn height_weights_normalize() -> Result<(), String> {
    let mut rng = seeded_rng(105);
    let bank = HeightCandidateBank::init(&mut rng, 8, 1.6, 8, 3).map_err(fail)?;
    for trial in 0..100 {
        let query: Vec<f32> = (0..8).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let picks = bank.sample(&query);
        ensure(picks.len() == 3, || format!("trial {trial}: kept {} heights", picks.len()))?;
        let total: f32 = picks.iter().map(|&(_, w)| w).sum();
        ensure((total - 1.0).abs() < 1e-6, || format!("trial {trial}: weights sum to {total}"))?;
        ensure(picks.windows(2).all(|w| w[0].0 < w[1].0), || {
            format!("trial {trial}: heights not ascending: {picks:?}")
        })?;
    }
    Ok(())
}

fn loss_anchors() -> Result<(), String> {
    // Uniform class logits against any labels cost exactly ln K.
    let k = 5usize;
    let gt = LabelGrid::new([2, 2, 1], k as u8, vec![0, 1, 2, 3]).map_err(fail)?;
    let logits = Tensor::zeros(&[k, 2, 2, 1]);
    let ce = weighted_ce_loss(&logits, &gt, &vec![1.0; k]).map_err(fail)?;
    ensure((ce - (k as f64).ln()).abs() < 1e-12, || {
        format!("uniform cross entropy {ce} vs ln {k} = {}", (k as f64).ln())
    })?;

    // A balanced two-class grid under uniform logits: precision, recall and
    // specificity are all 1/2 for both classes, so the affinity loss is
    // 3 ln 2 in both modes.
    let gt = LabelGrid::new([2, 2, 1], 2, vec![0, 0, 1, 1]).map_err(fail)?;
    let logits = Tensor::zeros(&[2, 2, 2, 1]);
    let anchor = 3.0 * std::f64::consts::LN_2;
    for mode in [AffinityMode::Geometric, AffinityMode::Semantic] {
        let loss = scal_loss(&logits, &gt, mode).map_err(fail)?;
        ensure((loss - anchor).abs() < 1e-9, || {
            format!("{mode:?} affinity {loss} vs 3 ln 2 = {anchor}")
        })?;
    }

    // Uniform depth logits cost ln D per supervised pixel.
    let d = 6usize;
    let binning = DepthBinning::new(1.0, 4.0, d).map_err(fail)?;
    let depth_logits = Tensor::zeros(&[d, 1, 2]);
    let depth_gt = Tensor::new(&[1, 2], vec![2.0, 0.0]);
    let depth = depth_loss(&depth_logits, &depth_gt, &binning).map_err(fail)?;
    ensure((depth - (d as f64).ln()).abs() < 1e-12, || {
        format!("uniform depth loss {depth} vs ln {d}")
    })
}

fn fusion_scalar_oracle() -> Result<(), String> {
    let mut rng = seeded_rng(106);
    let (c, x, y, z) = (3, 4, 3, 2);
    let ins = Tensor::from_fn(&[c, x, y], |_| rng.gen::<f32>());
    let scn = Tensor::from_fn(&[c, x, y], |_| rng.gen::<f32>());
    let h_ins = Tensor::from_fn(&[z, x, y], |_| rng.gen::<f32>());
    let h_scn = Tensor::from_fn(&[z, x, y], |_| rng.gen::<f32>());
    let fused = fuse(&ins, &scn, &h_ins, &h_scn).map_err(fail)?;
    for ci in 0..c {
        for xi in 0..x {
            for yi in 0..y {
                for zi in 0..z {
                    let expected = ins.at3(ci, xi, yi) * h_ins.at3(zi, xi, yi)
                        + scn.at3(ci, xi, yi) * h_scn.at3(zi, xi, yi);
                    let got = fused.at4(ci, xi, yi, zi);
                    ensure((got - expected).abs() < 1e-6, || {
                        format!("fused[{ci},{xi},{yi},{zi}] = {got}, oracle {expected}")
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn metric_identity() -> Result<(), String> {
    let partition = CategoryPartition::semantic_kitti();
    let k = partition.class_names.len() as u8;
    let mut rng = seeded_rng(107);
    for trial in 0..20 {
        let mut acc = ConfusionAccumulator::new(k, partition.free_id).map_err(fail)?;
        let labels = |rng: &mut crate::nn::SeedRng| -> Vec<u8> {
            (0..512).map(|_| (rng.gen::<u32>() % k as u32) as u8).collect()
        };
        let gt = LabelGrid::new([8, 8, 8], k, labels(&mut rng)).map_err(fail)?;
        let pred = LabelGrid::new([8, 8, 8], k, labels(&mut rng)).map_err(fail)?;
        acc.accumulate(&pred, &gt).map_err(fail)?;
        let report = acc.finalize(&partition).map_err(fail)?;
        let lhs = 19.0 * report.miou;
        let rhs = 10.0 * report.insm + 9.0 * report.scnm;
        ensure((lhs - rhs).abs() <= 1e-9, || {
            format!("trial {trial}: 19*miou = {lhs} vs 10*insm + 9*scnm = {rhs}")
        })?;
    }
    Ok(())
}

fn quick_config() -> Result<PipelineConfig, String> {
    PipelineConfig::parse(
        "
[camera]
width = 32
height = 32
focal = 24

[model]
channels = 8
classes = 4

[queries]
instance_count = 8

[decoder]
layers = 1
height_candidates = 4

[depth]
bins = 8
",
    )
    .map_err(fail)
}

fn forward_reproducibility() -> Result<(), String> {
    let config = quick_config()?;
    let scene = generate_scene(
        21,
        &config.volume,
        config.num_classes,
        config.camera.build_rig().map_err(fail)?,
        &config.scene,
    )
    .map_err(fail)?;
    let mut rng = seeded_rng(config.seed);
    let weights = ModelWeights::init(&config, &mut rng).map_err(fail)?;
    let first = run_forward(&config, &scene, &weights).map_err(fail)?;
    let second = run_forward(&config, &scene, &weights).map_err(fail)?;
    ensure(first.logits.data() == second.logits.data(), || {
        "two forward passes disagreed".to_string()
    })?;
    ensure(first.pred.dims() == config.volume.refined().dims, || {
        format!("prediction grid {:?} is not the refined volume", first.pred.dims())
    })?;
    let mut train = config;
    train.mode = Mode::TrainStep;
    let a = run_forward(&train, &scene, &weights).map_err(fail)?;
    let b = run_forward(&train, &scene, &weights).map_err(fail)?;
    ensure(a.logits.data() == b.logits.data(), || {
        "train-step forwards must reuse the same seeded stochastic stream".to_string()
    })
}

fn perfect_scoring() -> Result<(), String> {
    let config = quick_config()?;
    let mut rng = seeded_rng(config.seed);
    let weights = ModelWeights::init(&config, &mut rng).map_err(fail)?;
    let outcome = evaluate_scenes(&config, &weights, 60, 1, EvalOptions { force_perfect: true })
        .map_err(fail)?;
    for (name, value) in [
        ("iou", outcome.metrics.iou),
        ("miou", outcome.metrics.miou),
        ("insm", outcome.metrics.insm),
        ("scnm", outcome.metrics.scnm),
    ] {
        ensure(value == 1.0, || format!("{name} = {value} under forced-perfect predictions"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_check_passes() {
        for (name, outcome) in run_all() {
            if let Err(msg) = outcome {
                panic!("self-check `{name}` failed: {msg}");
            }
        }
    }
}
