//! Voxel label grids and their binary serialization.
//!
//! Ground truth and predictions share one type: a dense `[X, Y, Z]` grid of
//! u8 class ids (row-major, z fastest) where 255 marks voxels excluded from
//! every loss and metric. Class 0 is free space by convention.
//!
//! On disk the grid is `SSCV1`: the magic, little-endian u32 extents X, Y,
//! Z, a u8 class count, then the raw label bytes.

use std::io::{Read, Write};

use crate::error::{DiscError, Result};

/// Label value marking voxels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Magic bytes prefixing the binary label-volume format.
pub const VOLUME_MAGIC: &[u8; 5] = b"SSCV1";

/// Dense voxel class-id grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    dims: [usize; 3],
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelGrid {
    /// Builds a grid, checking that every non-ignore label is `< num_classes`.
    pub fn new(dims: [usize; 3], num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        let numel = dims[0] * dims[1] * dims[2];
        if labels.len() != numel {
            return Err(DiscError::Shape(format!(
                "label grid {:?} needs {} entries, got {}",
                dims,
                numel,
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(DiscError::Format("label grid needs at least one class".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l >= num_classes) {
            return Err(DiscError::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { dims, num_classes, labels })
    }

    /// All-free grid.
    pub fn free(dims: [usize; 3], num_classes: u8) -> Self {
        Self { dims, num_classes, labels: vec![0; dims[0] * dims[1] * dims[2]] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn flat_index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.flat_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        debug_assert!(label == IGNORE_LABEL || label < self.num_classes);
        let idx = self.flat_index(x, y, z);
        self.labels[idx] = label;
    }

    /// Per-class voxel counts over non-ignore voxels, indexed by class id.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes as usize];
        for &l in &self.labels {
            if l != IGNORE_LABEL {
                hist[l as usize] += 1;
            }
        }
        hist
    }

    /// Serializes as a binary label volume.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(VOLUME_MAGIC)?;
        for &d in &self.dims {
            if d > u32::MAX as usize {
                return Err(DiscError::Format(format!("extent {d} exceeds u32")));
            }
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&[self.num_classes])?;
        out.write_all(&self.labels)?;
        Ok(())
    }

    /// Reads a grid written by [`LabelGrid::write_binary`], re-validating
    /// the label range.
    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic)?;
        if &magic != VOLUME_MAGIC {
            return Err(DiscError::Format(format!(
                "bad volume magic {:?}, expected {:?}",
                magic, VOLUME_MAGIC
            )));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut extent = [0u8; 4];
            input.read_exact(&mut extent)?;
            *d = u32::from_le_bytes(extent) as usize;
        }
        let mut k = [0u8; 1];
        input.read_exact(&mut k)?;
        let numel = dims[0] * dims[1] * dims[2];
        let mut labels = vec![0u8; numel];
        input.read_exact(&mut labels)?;
        Self::new(dims, k[0], labels)
    }
}
