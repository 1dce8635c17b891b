//! Whole-library integration on the default desk-scale preset: scene
//! synthesis, the full forward pass, training losses, and on-disk artifacts.

use std::time::Instant;

use disc_core::config::{Mode, PipelineConfig};
use disc_core::labels::LabelGrid;
use disc_core::nn::seeded_rng;
use disc_core::pipeline::{compute_losses, run_forward, ModelWeights};
use disc_core::scene::{generate_scene, SyntheticScene};
use disc_core::tensor::Tensor;

fn desk_scene(config: &PipelineConfig, seed: u64) -> SyntheticScene {
    generate_scene(
        seed,
        &config.volume,
        config.num_classes,
        config.camera.build_rig().unwrap(),
        &config.scene,
    )
    .unwrap()
}

#[test]
fn desk_preset_forward_meets_shape_and_time_budget() {
    let config = PipelineConfig::default();
    let scene = desk_scene(&config, 1);
    let mut rng = seeded_rng(config.seed);
    let weights = ModelWeights::init(&config, &mut rng).unwrap();

    let start = Instant::now();
    let out = run_forward(&config, &scene, &weights).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "forward took {elapsed:?}");

    assert_eq!(out.logits.shape(), &[8, 64, 64, 16]);
    assert_eq!(out.pred.dims(), [64, 64, 16]);
    assert_eq!(out.aux.len(), 3);
    for (stage, tensor) in &out.intermediates {
        assert!(
            tensor.data().iter().all(|v| v.is_finite()),
            "stage {stage} leaked a non-finite value"
        );
        assert!(tensor.numel() > 0, "stage {stage} is empty");
    }
}

#[test]
fn desk_train_step_report_recombines_and_names_every_layer() {
    let mut config = PipelineConfig::default();
    config.mode = Mode::TrainStep;
    let scene = desk_scene(&config, 2);
    let mut rng = seeded_rng(config.seed);
    let weights = ModelWeights::init(&config, &mut rng).unwrap();
    let out = run_forward(&config, &scene, &weights).unwrap();
    let (total, report) = compute_losses(&config, &scene, &out).unwrap();
    assert!(total.is_finite() && total > 0.0);

    for key in ["scal_geo", "scal_sem", "ce", "ssc", "aug", "depth", "total"] {
        assert!(report.get(key).is_some(), "missing loss entry {key}");
    }
    for layer in 0..3 {
        assert!(report.get(&format!("seg.layer{layer}")).is_some());
        assert!(report.get(&format!("height.layer{layer}")).is_some());
    }
    let recombined = config.loss.lambda_ssc * report.get("ssc").unwrap()
        + config.loss.lambda_aug * report.get("aug").unwrap()
        + config.loss.lambda_depth * report.get("depth").unwrap();
    assert!(
        (recombined - total).abs() <= 1e-6,
        "components recombine to {recombined}, total is {total}"
    );
}

#[test]
fn artifacts_round_trip_through_files() {
    let config = PipelineConfig::default();
    let scene = desk_scene(&config, 3);
    let dir = tempfile::tempdir().unwrap();

    let grid_path = dir.path().join("scene.sscv1");
    let mut file = std::fs::File::create(&grid_path).unwrap();
    scene.gt.write_binary(&mut file).unwrap();
    drop(file);
    let mut reader = std::fs::File::open(&grid_path).unwrap();
    let grid = LabelGrid::read_binary(&mut reader).unwrap();
    assert_eq!(grid.dims(), scene.gt.dims());
    assert_eq!(grid.labels(), scene.gt.labels());

    let tensor_path = dir.path().join("depth.tens1");
    let mut file = std::fs::File::create(&tensor_path).unwrap();
    scene.depth_map.write_binary(&mut file).unwrap();
    drop(file);
    let mut reader = std::fs::File::open(&tensor_path).unwrap();
    let depth = Tensor::read_binary(&mut reader).unwrap();
    assert_eq!(depth.shape(), scene.depth_map.shape());
    assert_eq!(depth.data(), scene.depth_map.data());
}

#[test]
fn independent_runs_from_one_seed_serialize_identically() {
    let run = || -> Vec<u8> {
        let config = PipelineConfig::default();
        let scene = desk_scene(&config, 4);
        let mut rng = seeded_rng(config.seed);
        let weights = ModelWeights::init(&config, &mut rng).unwrap();
        let out = run_forward(&config, &scene, &weights).unwrap();
        let mut bytes = Vec::new();
        out.pred.write_binary(&mut bytes).unwrap();
        out.logits.write_binary(&mut bytes).unwrap();
        bytes
    };
    assert_eq!(run(), run(), "the pipeline must be byte-reproducible end to end");
}
