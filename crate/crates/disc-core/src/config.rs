//! Pipeline configuration: a flat `key = value` file with `[section]`
//! headers, parsed by hand and validated eagerly.
//!
//! Every key has a default, so an empty file (or [`PipelineConfig::default`])
//! yields the desk-scale setup. Unknown sections and keys are rejected —
//! a typo should fail loudly, not silently fall back to a default. All
//! divisibility and range constraints are checked at load time so the
//! pipeline itself can assume a coherent configuration.

use crate::error::{DiscError, Result};
use crate::geometry::{CameraRig, DepthBinning, SceneVolumeSpec};
use crate::losses::LossWeights;
use crate::scene::SceneParams;

/// What a pipeline invocation should do with a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Forward pass only; fully deterministic.
    Inference,
    /// Forward pass plus loss evaluation with training-time stochasticity
    /// (sampling jitter, key masking) drawn from the seeded generator.
    TrainStep,
}

impl Mode {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "inference" => Ok(Mode::Inference),
            "train-step" => Ok(Mode::TrainStep),
            other => Err(DiscError::Config(format!(
                "mode must be `inference` or `train-step`, got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Inference => "inference",
            Mode::TrainStep => "train-step",
        }
    }
}

/// Pinhole camera placement and intrinsics, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (same for both axes; principal point centred).
    pub focal: f32,
    pub position: [f32; 3],
    /// Heading in the ground plane, degrees counter-clockwise from +x.
    pub yaw_deg: f32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, focal: 48.0, position: [0.4, 3.2, 0.8], yaw_deg: 0.0 }
    }
}

impl CameraConfig {
    /// Builds the rig: +z is world-up, heading rotates about it.
    pub fn build_rig(&self) -> Result<CameraRig> {
        let yaw = self.yaw_deg.to_radians();
        CameraRig::look_at(
            self.position,
            [yaw.cos(), yaw.sin(), 0.0],
            [0.0, 0.0, 1.0],
            [
                [self.focal, 0.0, self.width as f32 / 2.0],
                [0.0, self.focal, self.height as f32 / 2.0],
                [0.0, 0.0, 1.0],
            ],
            self.width,
            self.height,
        )
    }
}

/// Everything a pipeline run needs, validated as a whole.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub volume: SceneVolumeSpec,
    pub camera: CameraConfig,
    /// Feature width used everywhere downstream of the backbone.
    pub channels: usize,
    pub num_classes: u8,
    /// Instance queries kept after block voting.
    pub instance_queries: usize,
    /// Block edge for the per-block vote on the instance probability map.
    pub vote_block: usize,
    /// Patch edge for scene queries on the working grid.
    pub patch_size: usize,
    pub layers: usize,
    pub height_candidates: usize,
    pub heights_selected: usize,
    pub mask_ratio: f32,
    /// Patch edge for scene-image queries on the coarsest feature level.
    pub image_patch: usize,
    pub samples_per_level: usize,
    pub depth: DepthBinning,
    /// Pixel stride of the depth/lifting grid; must match a backbone level.
    pub depth_stride: usize,
    pub loss: LossWeights,
    pub scene: SceneParams,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            volume: SceneVolumeSpec::desk(),
            camera: CameraConfig::default(),
            channels: 16,
            num_classes: 8,
            instance_queries: 32,
            vote_block: 4,
            patch_size: 4,
            layers: 3,
            height_candidates: 8,
            heights_selected: 2,
            mask_ratio: 0.3,
            image_patch: 4,
            samples_per_level: 2,
            depth: DepthBinning { d_min: 0.2, d_max: 6.0, bins: 16 },
            depth_stride: 4,
            loss: LossWeights::default(),
            scene: SceneParams::default(),
            seed: 0,
            mode: Mode::Inference,
        }
    }
}

/// Pixel strides of the backbone feature levels, coarsest first.
pub const BACKBONE_STRIDES: [usize; 2] = [4, 2];

impl PipelineConfig {
    /// Parses the sectioned `key = value` format and validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(DiscError::Config(format!(
                        "line {line_no}: unterminated section header `{line}`"
                    )));
                };
                let name = name.trim();
                if !KNOWN_SECTIONS.contains(&name) {
                    return Err(DiscError::Config(format!(
                        "line {line_no}: unknown section [{name}]"
                    )));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(DiscError::Config(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || value.is_empty() {
                return Err(DiscError::Config(format!(
                    "line {line_no}: empty key or value in `{line}`"
                )));
            }
            let Some(section) = section.as_deref() else {
                return Err(DiscError::Config(format!(
                    "line {line_no}: key `{key}` appears before any [section]"
                )));
            };
            cfg.apply(section, key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line_no: usize) -> Result<()> {
        let unknown = || {
            DiscError::Config(format!("line {line_no}: unknown key `{key}` in [{section}]"))
        };
        match section {
            "volume" => match key {
                "preset" => {
                    self.volume = match value {
                        "desk" => SceneVolumeSpec::desk(),
                        "full" => SceneVolumeSpec::full_scale(),
                        other => {
                            return Err(DiscError::Config(format!(
                                "line {line_no}: volume preset must be `desk` or `full`, got `{other}`"
                            )))
                        }
                    }
                }
                _ => return Err(unknown()),
            },
            "camera" => match key {
                "width" => self.camera.width = parse_num(key, value, line_no)?,
                "height" => self.camera.height = parse_num(key, value, line_no)?,
                "focal" => self.camera.focal = parse_num(key, value, line_no)?,
                "pos_x" => self.camera.position[0] = parse_num(key, value, line_no)?,
                "pos_y" => self.camera.position[1] = parse_num(key, value, line_no)?,
                "pos_z" => self.camera.position[2] = parse_num(key, value, line_no)?,
                "yaw_deg" => self.camera.yaw_deg = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "model" => match key {
                "channels" => self.channels = parse_num(key, value, line_no)?,
                "classes" => self.num_classes = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "queries" => match key {
                "instance_count" => self.instance_queries = parse_num(key, value, line_no)?,
                "block" => self.vote_block = parse_num(key, value, line_no)?,
                "patch" => self.patch_size = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "decoder" => match key {
                "layers" => self.layers = parse_num(key, value, line_no)?,
                "height_candidates" => self.height_candidates = parse_num(key, value, line_no)?,
                "heights_selected" => self.heights_selected = parse_num(key, value, line_no)?,
                "mask_ratio" => self.mask_ratio = parse_num(key, value, line_no)?,
                "image_patch" => self.image_patch = parse_num(key, value, line_no)?,
                "samples_per_level" => self.samples_per_level = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "depth" => match key {
                "d_min" => self.depth.d_min = parse_num(key, value, line_no)?,
                "d_max" => self.depth.d_max = parse_num(key, value, line_no)?,
                "bins" => self.depth.bins = parse_num(key, value, line_no)?,
                "stride" => self.depth_stride = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "loss" => match key {
                "lambda_ssc" => self.loss.lambda_ssc = parse_num(key, value, line_no)?,
                "lambda_aug" => self.loss.lambda_aug = parse_num(key, value, line_no)?,
                "lambda_height" => self.loss.lambda_height = parse_num(key, value, line_no)?,
                "lambda_depth" => self.loss.lambda_depth = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "scene" => match key {
                "boxes_min" => self.scene.boxes_min = parse_num(key, value, line_no)?,
                "boxes_max" => self.scene.boxes_max = parse_num(key, value, line_no)?,
                "ground_base" => self.scene.ground_base = parse_num(key, value, line_no)?,
                "ground_amplitude" => self.scene.ground_amplitude = parse_num(key, value, line_no)?,
                _ => return Err(unknown()),
            },
            "run" => match key {
                "seed" => self.seed = parse_num(key, value, line_no)?,
                "mode" => self.mode = Mode::parse(value).map_err(|e| {
                    DiscError::Config(format!("line {line_no}: {e}"))
                })?,
                _ => return Err(unknown()),
            },
            _ => unreachable!("section names are checked at the header"),
        }
        Ok(())
    }

    /// Checks every cross-field constraint; errors name the violated rule.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DiscError::Config(msg));
        let [x, y, _z] = self.volume.dims;
        if self.channels == 0 || self.channels % 4 != 0 {
            return fail(format!(
                "channels must be a positive multiple of 4 (position encoding \
                 splits them into sin/cos quarters per axis), got {}",
                self.channels
            ));
        }
        if self.num_classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.num_classes));
        }
        if self.vote_block == 0 || x % self.vote_block != 0 || y % self.vote_block != 0 {
            return fail(format!(
                "vote block {} must tile the {}x{} working grid",
                self.vote_block, x, y
            ));
        }
        let blocks = (x / self.vote_block) * (y / self.vote_block);
        if self.instance_queries == 0 || self.instance_queries > blocks {
            return fail(format!(
                "instance_count must be in 1..={blocks} (one winner per {0}x{0} block), got {1}",
                self.vote_block, self.instance_queries
            ));
        }
        if !self.patch_size.is_power_of_two() || x % self.patch_size != 0 || y % self.patch_size != 0
        {
            return fail(format!(
                "patch {} must be a power of two tiling the {}x{} working grid",
                self.patch_size, x, y
            ));
        }
        if self.layers == 0 {
            return fail("decoder needs at least one layer".into());
        }
        if self.height_candidates == 0 || self.heights_selected == 0
            || self.heights_selected > self.height_candidates
        {
            return fail(format!(
                "heights_selected must be in 1..={}, got {}",
                self.height_candidates, self.heights_selected
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio must be in [0, 1), got {}", self.mask_ratio));
        }
        if self.samples_per_level == 0 {
            return fail("samples_per_level must be positive".into());
        }
        if !BACKBONE_STRIDES.contains(&self.depth_stride) {
            return fail(format!(
                "depth stride {} does not match a backbone level (available: {:?})",
                self.depth_stride, BACKBONE_STRIDES
            ));
        }
        let coarsest = BACKBONE_STRIDES[0];
        for (name, pixels) in [("width", self.camera.width), ("height", self.camera.height)] {
            if pixels == 0 || pixels % coarsest != 0 {
                return fail(format!(
                    "camera {name} must be a positive multiple of {coarsest} \
                     (two stride-2 backbone stages), got {pixels}"
                ));
            }
        }
        if !(self.camera.focal > 0.0) {
            return fail(format!("camera focal must be positive, got {}", self.camera.focal));
        }
        let coarse_w = self.camera.width / coarsest;
        let coarse_h = self.camera.height / coarsest;
        if !self.image_patch.is_power_of_two()
            || coarse_w % self.image_patch != 0
            || coarse_h % self.image_patch != 0
        {
            return fail(format!(
                "image_patch {} must be a power of two tiling the {}x{} coarsest feature level",
                self.image_patch, coarse_w, coarse_h
            ));
        }
        if self.depth.bins < 2 {
            return fail(format!("depth bins must be at least 2, got {}", self.depth.bins));
        }
        if !(self.depth.d_min > 0.0) || !(self.depth.d_max > self.depth.d_min) {
            return fail(format!(
                "depth range must satisfy 0 < d_min < d_max, got [{}, {}]",
                self.depth.d_min, self.depth.d_max
            ));
        }
        if self.scene.boxes_min > self.scene.boxes_max {
            return fail(format!(
                "scene object range {}..{} is empty",
                self.scene.boxes_min, self.scene.boxes_max
            ));
        }
        Ok(())
    }
}

const KNOWN_SECTIONS: [&str; 9] =
    ["volume", "camera", "model", "queries", "decoder", "depth", "loss", "scene", "run"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line_no: usize) -> Result<T> {
    value.parse().map_err(|_| {
        DiscError::Config(format!(
            "line {line_no}: cannot parse `{value}` for key `{key}` as {}",
            std::any::type_name::<T>()
        ))
    })
}
