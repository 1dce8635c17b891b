//! Pinhole camera geometry, scene volumes, and depth binning.
//!
//! Conventions, fixed once here and relied on everywhere else:
//! - World coordinates are metric, z up. A scene volume is an axis-aligned
//!   box described by its minimum corner (`origin`), a cubic voxel edge
//!   length, and integer grid dimensions.
//! - Camera coordinates follow the usual computer-vision frame: x right,
//!   y down, z forward. "Depth" always means the camera-frame z coordinate,
//!   which is what projection divides by and unprojection multiplies by.
//! - Image coordinates `(u, v)` are in pixels, `u` along the width.
//! - Points with camera-frame depth `<= 1e-6` are *behind* the camera; this
//!   is a flag (`None`), not an error, because samplers simply skip such
//!   points.

use crate::error::{DiscError, Result};

pub type Point3 = [f32; 3];

pub fn add3(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Point3, s: f32) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Point3, b: Point3) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: Point3) -> f32 {
    dot3(a, a).sqrt()
}

pub fn normalize3(a: Point3) -> Point3 {
    let n = norm3(a);
    assert!(n > 0.0, "cannot normalize the zero vector");
    scale3(a, 1.0 / n)
}

/// Depth below which a point counts as behind the camera.
pub const BEHIND_CAMERA_DEPTH: f32 = 1e-6;

/// Tolerance for the rotation orthonormality check at rig construction.
const ROTATION_TOLERANCE: f32 = 1e-5;

/// Axis-aligned metric volume discretized into cubic voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneVolumeSpec {
    /// Minimum corner of the box in world coordinates.
    pub origin: Point3,
    /// Cubic voxel edge length in meters.
    pub voxel_size: f32,
    /// Grid dimensions along x, y, z.
    pub dims: [usize; 3],
}

impl SceneVolumeSpec {
    pub fn new(origin: Point3, voxel_size: f32, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(DiscError::Geometry(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(DiscError::Geometry(format!("grid dims must be nonzero, got {dims:?}")));
        }
        Ok(Self { origin, voxel_size, dims })
    }

    /// Desk-scale preset: a 6.4 m x 6.4 m x 1.6 m volume at 0.2 m voxels
    /// (32 x 32 x 8 cells), small enough for exhaustive tests.
    pub fn desk() -> Self {
        Self { origin: [0.0, 0.0, 0.0], voxel_size: 0.2, dims: [32, 32, 8] }
    }

    /// Full-scale preset: 51.2 m x 51.2 m x 6.4 m at 0.2 m voxels
    /// (256 x 256 x 32 cells).
    pub fn full_scale() -> Self {
        Self { origin: [0.0, 0.0, 0.0], voxel_size: 0.2, dims: [256, 256, 32] }
    }

    /// Metric extent along each axis; always `dims * voxel_size`.
    pub fn extents(&self) -> Point3 {
        [
            self.dims[0] as f32 * self.voxel_size,
            self.dims[1] as f32 * self.voxel_size,
            self.dims[2] as f32 * self.voxel_size,
        ]
    }

    /// Maximum corner of the box.
    pub fn max_corner(&self) -> Point3 {
        add3(self.origin, self.extents())
    }

    /// Voxel index containing a world point, or `None` outside the box.
    pub fn world_to_voxel(&self, p: Point3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let rel = (p[axis] - self.origin[axis]) / self.voxel_size;
            if rel < 0.0 {
                return None;
            }
            let cell = rel.floor();
            if cell >= self.dims[axis] as f32 {
                return None;
            }
            idx[axis] = cell as usize;
        }
        Some(idx)
    }

    /// World coordinates of a voxel's centre.
    pub fn voxel_center(&self, idx: [usize; 3]) -> Point3 {
        [
            self.origin[0] + (idx[0] as f32 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f32 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f32 + 0.5) * self.voxel_size,
        ]
    }

    /// A spec covering the same box at half the voxel size (double the
    /// grid resolution per axis). Predictions and ground truth live there.
    pub fn refined(&self) -> Self {
        Self {
            origin: self.origin,
            voxel_size: self.voxel_size * 0.5,
            dims: [self.dims[0] * 2, self.dims[1] * 2, self.dims[2] * 2],
        }
    }
}

/// Uniform partition of `[d_min, d_max]` into depth bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBinning {
    pub d_min: f32,
    pub d_max: f32,
    pub bins: usize,
}

impl DepthBinning {
    pub fn new(d_min: f32, d_max: f32, bins: usize) -> Result<Self> {
        if !(d_min > 0.0) {
            return Err(DiscError::Geometry(format!("d_min must be positive, got {d_min}")));
        }
        if !(d_max > d_min) {
            return Err(DiscError::Geometry(format!(
                "d_max ({d_max}) must exceed d_min ({d_min})"
            )));
        }
        if bins < 2 {
            return Err(DiscError::Geometry(format!("need at least 2 depth bins, got {bins}")));
        }
        Ok(Self { d_min, d_max, bins })
    }

    pub fn bin_width(&self) -> f32 {
        (self.d_max - self.d_min) / self.bins as f32
    }

    /// Centre depth of bin `i`.
    pub fn center(&self, i: usize) -> f32 {
        debug_assert!(i < self.bins);
        self.d_min + (i as f32 + 0.5) * self.bin_width()
    }

    /// Bin containing `depth`; out-of-range depths clamp to the end bins.
    pub fn bin_of(&self, depth: f32) -> usize {
        let raw = ((depth - self.d_min) / self.bin_width()).floor();
        if raw < 0.0 {
            0
        } else {
            (raw as usize).min(self.bins - 1)
        }
    }
}

/// Calibrated pinhole camera: intrinsics plus a rigid world-to-camera
/// transform, validated at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    /// Upper-triangular 3x3 intrinsic matrix (row major).
    intrinsics: [[f32; 3]; 3],
    /// Rigid 4x4 world-to-camera transform (row major, last row 0 0 0 1).
    world_to_camera: [[f32; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(
        intrinsics: [[f32; 3]; 3],
        world_to_camera: [[f32; 4]; 4],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if intrinsics[1][0] != 0.0 || intrinsics[2][0] != 0.0 || intrinsics[2][1] != 0.0 {
            return Err(DiscError::Geometry(
                "intrinsic matrix must be upper-triangular".into(),
            ));
        }
        if !(intrinsics[0][0] > 0.0) || !(intrinsics[1][1] > 0.0) {
            return Err(DiscError::Geometry("focal lengths must be positive".into()));
        }
        if (intrinsics[2][2] - 1.0).abs() > 1e-6 {
            return Err(DiscError::Geometry("intrinsics[2][2] must be 1".into()));
        }
        let last = world_to_camera[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(DiscError::Geometry(
                "world-to-camera last row must be [0, 0, 0, 1]".into(),
            ));
        }
        // Rotation block must satisfy R^T R = I.
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0f32;
                for k in 0..3 {
                    acc += world_to_camera[k][i] * world_to_camera[k][j];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                if (acc - want).abs() > ROTATION_TOLERANCE {
                    return Err(DiscError::Geometry(format!(
                        "rotation block is not orthonormal: (R^T R)[{i}][{j}] = {acc}"
                    )));
                }
            }
        }
        if width == 0 || height == 0 {
            return Err(DiscError::Geometry("image dimensions must be nonzero".into()));
        }
        Ok(Self { intrinsics, world_to_camera, width, height })
    }

    /// Builds a rig from a camera position, viewing direction, and world-up
    /// hint, using the x-right / y-down / z-forward camera frame.
    pub fn look_at(
        position: Point3,
        forward: Point3,
        up: Point3,
        intrinsics: [[f32; 3]; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z_axis = normalize3(forward);
        let x_axis = normalize3(cross3(scale3(up, -1.0), z_axis));
        let y_axis = cross3(z_axis, x_axis);
        let rotation = [x_axis, y_axis, z_axis];
        let mut world_to_camera = [[0.0f32; 4]; 4];
        for (row, axis) in rotation.iter().enumerate() {
            world_to_camera[row][..3].copy_from_slice(axis);
            world_to_camera[row][3] = -dot3(*axis, position);
        }
        world_to_camera[3] = [0.0, 0.0, 0.0, 1.0];
        Self::new(intrinsics, world_to_camera, width, height)
    }

    pub fn intrinsics(&self) -> &[[f32; 3]; 3] {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &[[f32; 4]; 4] {
        &self.world_to_camera
    }

    /// Camera centre in world coordinates (`-R^T t`).
    pub fn camera_center(&self) -> Point3 {
        let m = &self.world_to_camera;
        let t = [m[0][3], m[1][3], m[2][3]];
        [
            -(m[0][0] * t[0] + m[1][0] * t[1] + m[2][0] * t[2]),
            -(m[0][1] * t[0] + m[1][1] * t[1] + m[2][1] * t[2]),
            -(m[0][2] * t[0] + m[1][2] * t[1] + m[2][2] * t[2]),
        ]
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: Point3) -> Point3 {
        let m = &self.world_to_camera;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Camera-frame point back to world coordinates.
    pub fn to_world(&self, p: Point3) -> Point3 {
        let m = &self.world_to_camera;
        let q = [p[0] - m[0][3], p[1] - m[1][3], p[2] - m[2][3]];
        [
            m[0][0] * q[0] + m[1][0] * q[1] + m[2][0] * q[2],
            m[0][1] * q[0] + m[1][1] * q[1] + m[2][1] * q[2],
            m[0][2] * q[0] + m[1][2] * q[1] + m[2][2] * q[2],
        ]
    }
}

/// Result of projecting a world point into the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f32,
    pub v: f32,
    /// Camera-frame z of the projected point.
    pub depth: f32,
}

/// Projects a world point through the pinhole. Returns `None` for points at
/// or behind the camera plane (depth `<= 1e-6`); callers skip those samples.
pub fn project_world_to_image(rig: &CameraRig, p: Point3) -> Option<ImagePoint> {
    let cam = rig.to_camera(p);
    let depth = cam[2];
    if depth <= BEHIND_CAMERA_DEPTH {
        return None;
    }
    let k = rig.intrinsics();
    let u = (k[0][0] * cam[0] + k[0][1] * cam[1] + k[0][2] * cam[2]) / depth;
    let v = (k[1][1] * cam[1] + k[1][2] * cam[2]) / depth;
    Some(ImagePoint { u, v, depth })
}

/// Inverts the pinhole at a known positive depth. Exact inverse of
/// [`project_world_to_image`] up to floating-point rounding.
pub fn unproject_image_to_world(rig: &CameraRig, u: f32, v: f32, depth: f32) -> Result<Point3> {
    if !(depth > 0.0) {
        return Err(DiscError::Geometry(format!(
            "unprojection needs a positive depth, got {depth}"
        )));
    }
    let k = rig.intrinsics();
    let y = (v - k[1][2]) * depth / k[1][1];
    let x = ((u - k[0][2]) * depth - k[0][1] * y) / k[0][0];
    Ok(rig.to_world([x, y, depth]))
}

/// One sampled view ray point: a pixel, a depth bin, and the world-space
/// location of the bin centre along that pixel's ray.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPoint {
    pub pixel: (f32, f32),
    pub bin: usize,
    pub world: Point3,
}

/// Samples the camera frustum on a regular pixel grid.
///
/// Pixels are taken at the centres of `stride x stride` cells
/// (`u = (i + 0.5) * stride`), row-major, and each pixel contributes one
/// point per depth bin at the bin-centre depth. The result has
/// `floor(W/stride) * floor(H/stride) * bins` entries, bins innermost.
pub fn generate_frustum(
    rig: &CameraRig,
    binning: &DepthBinning,
    stride: usize,
) -> Result<Vec<FrustumPoint>> {
    if stride == 0 {
        return Err(DiscError::Geometry("frustum stride must be nonzero".into()));
    }
    let cols = rig.width / stride;
    let rows = rig.height / stride;
    let mut points = Vec::with_capacity(cols * rows * binning.bins);
    for r in 0..rows {
        let v = (r as f32 + 0.5) * stride as f32;
        for c in 0..cols {
            let u = (c as f32 + 0.5) * stride as f32;
            for bin in 0..binning.bins {
                let depth = binning.center(bin);
                let world = unproject_image_to_world(rig, u, v, depth)?;
                points.push(FrustumPoint { pixel: (u, v), bin, world });
            }
        }
    }
    Ok(points)
}

/// Converts an image pixel coordinate to the cell coordinate of a feature
/// map whose cells cover `stride x stride` pixel blocks (cell centres sit
/// at pixel `(c + 0.5) * stride`).
pub fn pixel_to_level_coord(pixel: f32, stride: usize) -> f32 {
    pixel / stride as f32 - 0.5
}
