//! Procedural test scenes.
//!
//! A scene is generated entirely from a seed: an undulating ground surface
//! (with an optional road strip) plus a handful of boxes and cylinders
//! resting on it, labelled into a fine-resolution voxel grid. The camera
//! view is rendered by ray-marching that grid — the depth map stores the
//! camera-frame z of each ray's first occupied voxel (0 where the ray
//! escapes) and the image colours each hit with a fixed per-class palette
//! shaded by distance. The same grid doubles as the ground truth the
//! pipeline is scored against.

use rand::Rng;

use crate::error::{DiscError, Result};
use crate::geometry::{sub3, unproject_image_to_world, CameraRig, Point3, SceneVolumeSpec};
use crate::labels::LabelGrid;
use crate::nn::{seeded_rng, SeedRng};
use crate::tensor::Tensor;

/// Ray-march step in metres; bounds the depth discretization error.
pub const RAY_STEP: f32 = 0.05;

/// Knobs for the procedural generator.
#[derive(Debug, Clone)]
pub struct SceneParams {
    /// Inclusive range for the number of objects placed on the ground.
    pub boxes_min: usize,
    pub boxes_max: usize,
    /// Mean ground height above the volume floor, in metres.
    pub ground_base: f32,
    /// Peak-to-mean ground undulation, in metres.
    pub ground_amplitude: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { boxes_min: 2, boxes_max: 6, ground_base: 0.4, ground_amplitude: 0.15 }
    }
}

/// A fully rendered synthetic scene.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Fine-resolution labels (twice the working grid per axis).
    pub gt: LabelGrid,
    pub rig: CameraRig,
    /// `[H, W]` camera-frame z of the first hit; 0 where nothing is hit.
    pub depth_map: Tensor,
    /// `[3, H, W]` rendered colours in `[0, 1]`.
    pub image: Tensor,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum ObjectShape {
    Box { half_x: f32, half_y: f32 },
    Cylinder { radius: f32 },
}

#[derive(Debug, Clone, Copy)]
struct PlacedObject {
    shape: ObjectShape,
    class: u8,
    centre_x: f32,
    centre_y: f32,
    base_z: f32,
    height: f32,
}

impl PlacedObject {
    fn contains(&self, p: Point3) -> bool {
        if p[2] < self.base_z || p[2] > self.base_z + self.height {
            return false;
        }
        let (dx, dy) = (p[0] - self.centre_x, p[1] - self.centre_y);
        match self.shape {
            ObjectShape::Box { half_x, half_y } => dx.abs() <= half_x && dy.abs() <= half_y,
            ObjectShape::Cylinder { radius } => dx * dx + dy * dy <= radius * radius,
        }
    }
}

/// Fixed, never-black colour for a class id.
fn class_colour(class: u8) -> [f32; 3] {
    let hash = (class as u32).wrapping_mul(2654435761);
    let channel = |byte: u32| 0.3 + 0.7 * (byte & 0xFF) as f32 / 255.0;
    [channel(hash >> 16), channel(hash >> 8), channel(hash)]
}

/// Builds the deterministic scene for a seed.
///
/// Labels: 0 free, 1 ground, 2 road strip (when the label set has room),
/// 3 and above objects. The ground truth lives on the refined grid (half
/// the voxel size of `spec`).
pub fn generate_scene(
    seed: u64,
    spec: &SceneVolumeSpec,
    num_classes: u8,
    rig: CameraRig,
    params: &SceneParams,
) -> Result<SyntheticScene> {
    if num_classes < 2 {
        return Err(DiscError::Geometry(format!(
            "scene generation needs at least 2 classes, got {num_classes}"
        )));
    }
    if params.boxes_min > params.boxes_max {
        return Err(DiscError::Geometry(format!(
            "object count range {}..{} is empty",
            params.boxes_min, params.boxes_max
        )));
    }
    let extents = spec.extents();
    if params.ground_base - params.ground_amplitude <= 0.0
        || params.ground_base + params.ground_amplitude >= extents[2]
    {
        return Err(DiscError::Geometry(format!(
            "ground band {} +- {} must stay inside the {}m vertical extent",
            params.ground_base, params.ground_amplitude, extents[2]
        )));
    }

    let mut rng: SeedRng = seeded_rng(seed);
    let fine = spec.refined();
    let dims = fine.dims;

    // Ground surface parameters.
    let phase_x: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
    let phase_y: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
    let ground_height = |x: f32, y: f32| -> f32 {
        let lx = (x - spec.origin[0]) / extents[0];
        let ly = (y - spec.origin[1]) / extents[1];
        spec.origin[2]
            + params.ground_base
            + params.ground_amplitude
                * (std::f32::consts::TAU * lx + phase_x).sin()
                * (std::f32::consts::TAU * ly + phase_y).cos()
    };

    // Road strip along x at a seeded y position; only exists when the
    // label set has a class for it.
    let has_road = num_classes >= 3;
    let road_y = spec.origin[1] + extents[1] * (0.25 + 0.5 * rng.gen::<f32>());
    let road_half = 0.08 * extents[1];

    // Objects need instance classes (3 and up).
    let object_classes = num_classes.saturating_sub(3);
    let count = if object_classes == 0 || params.boxes_max == 0 {
        0
    } else {
        rng.gen_range(params.boxes_min..=params.boxes_max)
    };
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = 3 + (rng.gen::<u32>() % object_classes as u32) as u8;
        let centre_x = spec.origin[0] + extents[0] * (0.2 + 0.6 * rng.gen::<f32>());
        let centre_y = spec.origin[1] + extents[1] * (0.2 + 0.6 * rng.gen::<f32>());
        let shape = if rng.gen::<bool>() {
            ObjectShape::Box {
                half_x: 0.15 + 0.3 * rng.gen::<f32>(),
                half_y: 0.15 + 0.3 * rng.gen::<f32>(),
            }
        } else {
            ObjectShape::Cylinder { radius: 0.15 + 0.3 * rng.gen::<f32>() }
        };
        let base_z = ground_height(centre_x, centre_y);
        let max_height = (spec.origin[2] + extents[2] - base_z - 0.05).max(0.1);
        let height = (0.3 + 0.6 * rng.gen::<f32>()).min(max_height);
        objects.push(PlacedObject { shape, class, centre_x, centre_y, base_z, height });
    }

    // Label the fine grid: ground fill first, then objects overwrite.
    let mut gt = LabelGrid::free(dims, num_classes);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            let centre_xy = fine.voxel_center([x, y, 0]);
            let surface = ground_height(centre_xy[0], centre_xy[1]);
            let on_road = has_road && (centre_xy[1] - road_y).abs() <= road_half;
            for z in 0..dims[2] {
                let centre = fine.voxel_center([x, y, z]);
                if centre[2] < surface {
                    gt.set(x, y, z, if on_road { 2 } else { 1 });
                }
            }
        }
    }
    for object in &objects {
        // Restrict the fill to the object's bounding box.
        let (min_x, max_x, min_y, max_y) = match object.shape {
            ObjectShape::Box { half_x, half_y } => (
                object.centre_x - half_x,
                object.centre_x + half_x,
                object.centre_y - half_y,
                object.centre_y + half_y,
            ),
            ObjectShape::Cylinder { radius } => (
                object.centre_x - radius,
                object.centre_x + radius,
                object.centre_y - radius,
                object.centre_y + radius,
            ),
        };
        let clamp_idx = |w: f32, axis: usize| -> usize {
            (((w - spec.origin[axis]) / fine.voxel_size).floor() as isize)
                .clamp(0, dims[axis] as isize - 1) as usize
        };
        for x in clamp_idx(min_x, 0)..=clamp_idx(max_x, 0) {
            for y in clamp_idx(min_y, 1)..=clamp_idx(max_y, 1) {
                for z in 0..dims[2] {
                    if object.contains(fine.voxel_center([x, y, z])) {
                        gt.set(x, y, z, object.class);
                    }
                }
            }
        }
    }

    // Render by marching rays through the fine grid.
    let (height, width) = (rig.height, rig.width);
    let mut depth_map = Tensor::zeros(&[height, width]);
    let mut image = Tensor::zeros(&[3, height, width]);
    let camera = rig.camera_center();
    let centre = [
        spec.origin[0] + extents[0] / 2.0,
        spec.origin[1] + extents[1] / 2.0,
        spec.origin[2] + extents[2] / 2.0,
    ];
    let diag = (extents[0] * extents[0] + extents[1] * extents[1] + extents[2] * extents[2]).sqrt();
    let to_centre = sub3(centre, camera);
    let reach = (to_centre[0] * to_centre[0]
        + to_centre[1] * to_centre[1]
        + to_centre[2] * to_centre[2])
        .sqrt()
        + diag;
    let steps = (reach / RAY_STEP).ceil() as usize;

    for row in 0..height {
        for col in 0..width {
            let anchor =
                unproject_image_to_world(&rig, col as f32 + 0.5, row as f32 + 0.5, 1.0)?;
            let dir = sub3(anchor, camera);
            let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
            let dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
            for step in 1..=steps {
                let t = step as f32 * RAY_STEP;
                let p = [camera[0] + t * dir[0], camera[1] + t * dir[1], camera[2] + t * dir[2]];
                let Some(voxel) = fine.world_to_voxel(p) else { continue };
                let label = gt.at(voxel[0], voxel[1], voxel[2]);
                if label == 0 {
                    continue;
                }
                let cam_point = rig.to_camera(p);
                depth_map.set2(row, col, cam_point[2]);
                let colour = class_colour(label);
                let shade = 1.0 / (1.0 + 0.2 * cam_point[2]);
                for (c, &value) in colour.iter().enumerate() {
                    image.set3(c, row, col, value * shade);
                }
                break;
            }
        }
    }

    Ok(SyntheticScene { gt, rig, depth_map, image, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::IGNORE_LABEL;

    fn desk_rig() -> CameraRig {
        CameraRig::look_at(
            [0.4, 3.2, 0.8],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [[48.0, 0.0, 24.0], [0.0, 48.0, 24.0], [0.0, 0.0, 1.0]],
            48,
            48,
        )
        .unwrap()
    }

    #[test]
    fn scenes_are_bit_identical_per_seed() {
        let spec = SceneVolumeSpec::desk();
        let params = SceneParams::default();
        let a = generate_scene(7, &spec, 8, desk_rig(), &params).unwrap();
        let b = generate_scene(7, &spec, 8, desk_rig(), &params).unwrap();
        assert_eq!(a.gt.labels(), b.gt.labels());
        assert_eq!(a.depth_map.data(), b.depth_map.data());
        assert_eq!(a.image.data(), b.image.data());

        let c = generate_scene(8, &spec, 8, desk_rig(), &params).unwrap();
        assert_ne!(a.gt.labels(), c.gt.labels());
    }

    #[test]
    fn ground_truth_lives_on_the_refined_grid_with_expected_classes() {
        let spec = SceneVolumeSpec::desk();
        let scene = generate_scene(3, &spec, 8, desk_rig(), &SceneParams::default()).unwrap();
        assert_eq!(scene.gt.dims(), [64, 64, 16]);
        let hist = scene.gt.class_histogram();
        assert!(hist[0] > 0, "some free space");
        assert!(hist[1] > 0, "some ground");
        assert!(hist[2] > 0, "a road strip");
        assert!(hist[3..].iter().sum::<u64>() > 0, "at least one object");
        assert!(!scene.gt.labels().contains(&IGNORE_LABEL));
    }

    #[test]
    fn object_free_configuration_keeps_only_ground_classes() {
        let spec = SceneVolumeSpec::desk();
        let params = SceneParams { boxes_min: 0, boxes_max: 0, ..SceneParams::default() };
        let scene = generate_scene(11, &spec, 8, desk_rig(), &params).unwrap();
        let hist = scene.gt.class_histogram();
        assert_eq!(hist[3..].iter().sum::<u64>(), 0);
        // Two-class label sets cannot host roads or objects at all.
        let scene = generate_scene(11, &spec, 2, desk_rig(), &SceneParams::default()).unwrap();
        let hist = scene.gt.class_histogram();
        assert_eq!(hist[1], hist.iter().skip(1).sum::<u64>());
    }

    #[test]
    fn flat_ground_depth_matches_plane_intersection() {
        let spec = SceneVolumeSpec::desk();
        // Amplitude 0 and a base on a fine-voxel boundary: the occupied
        // region is exactly z < 0.4.
        let params = SceneParams {
            boxes_min: 0,
            boxes_max: 0,
            ground_base: 0.4,
            ground_amplitude: 0.0,
        };
        let rig = desk_rig();
        let scene = generate_scene(19, &spec, 3, rig.clone(), &params).unwrap();
        let camera = rig.camera_center();
        let mut checked = 0;
        for row in 0..48 {
            for col in 0..48 {
                let measured = scene.depth_map.at2(row, col);
                if measured <= 0.0 {
                    continue;
                }
                let anchor =
                    unproject_image_to_world(&rig, col as f32 + 0.5, row as f32 + 0.5, 1.0)
                        .unwrap();
                let dir = sub3(anchor, camera);
                let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                let dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
                if dir[2] >= -1e-6 {
                    continue; // ray never reaches the ground plane
                }
                let t = (0.4 - camera[2]) / dir[2];
                let hit = [
                    camera[0] + t * dir[0],
                    camera[1] + t * dir[1],
                    camera[2] + t * dir[2],
                ];
                // Ignore rays that leave the volume before reaching the plane.
                if hit[0] < spec.origin[0]
                    || hit[0] > spec.origin[0] + spec.extents()[0]
                    || hit[1] < spec.origin[1]
                    || hit[1] > spec.origin[1] + spec.extents()[1]
                {
                    continue;
                }
                let expected = rig.to_camera(hit)[2];
                assert!(
                    (measured - expected).abs() <= RAY_STEP + 1e-3,
                    "pixel ({row},{col}): measured {measured} vs plane {expected}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} rays hit the plane");
    }

    #[test]
    fn depth_samples_unproject_into_occupied_voxels() {
        let spec = SceneVolumeSpec::desk();
        let fine = spec.refined();
        let scene = generate_scene(23, &spec, 8, desk_rig(), &SceneParams::default()).unwrap();
        let dims = fine.dims;
        let mut hits = 0;
        for row in 0..48 {
            for col in 0..48 {
                let depth = scene.depth_map.at2(row, col);
                if depth <= 0.0 {
                    continue;
                }
                hits += 1;
                let world = unproject_image_to_world(
                    &scene.rig,
                    col as f32 + 0.5,
                    row as f32 + 0.5,
                    depth,
                )
                .unwrap();
                let voxel = fine
                    .world_to_voxel(world)
                    .expect("depth samples stay inside the volume");
                let mut occupied_nearby = false;
                for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            let x = voxel[0] as i64 + dx;
                            let y = voxel[1] as i64 + dy;
                            let z = voxel[2] as i64 + dz;
                            if x < 0 || y < 0 || z < 0 {
                                continue;
                            }
                            let (x, y, z) = (x as usize, y as usize, z as usize);
                            if x >= dims[0] || y >= dims[1] || z >= dims[2] {
                                continue;
                            }
                            occupied_nearby |= scene.gt.at(x, y, z) != 0;
                        }
                    }
                }
                assert!(occupied_nearby, "pixel ({row},{col}) unprojected into free space");
            }
        }
        assert!(hits > 200, "scene should fill a good part of the view, got {hits}");
    }

    #[test]
    fn image_colours_follow_hits_and_depth_shading() {
        let spec = SceneVolumeSpec::desk();
        let scene = generate_scene(29, &spec, 8, desk_rig(), &SceneParams::default()).unwrap();
        for row in 0..48 {
            for col in 0..48 {
                let depth = scene.depth_map.at2(row, col);
                let pixel: Vec<f32> = (0..3).map(|c| scene.image.at3(c, row, col)).collect();
                if depth <= 0.0 {
                    assert_eq!(pixel, vec![0.0; 3], "misses render black");
                } else {
                    assert!(pixel.iter().any(|&v| v > 0.0), "hits never render black");
                    assert!(pixel.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let spec = SceneVolumeSpec::desk();
        let params = SceneParams { boxes_min: 4, boxes_max: 2, ..SceneParams::default() };
        assert!(generate_scene(1, &spec, 8, desk_rig(), &params).is_err());
        assert!(generate_scene(1, &spec, 1, desk_rig(), &SceneParams::default()).is_err());
        let params = SceneParams { ground_base: 1.7, ..SceneParams::default() };
        assert!(generate_scene(1, &spec, 8, desk_rig(), &params).is_err());
    }
}
