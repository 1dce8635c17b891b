//! Occupancy and per-class IoU metrics with category-group means.
//!
//! Predictions and ground truth are compared voxel-by-voxel into a
//! confusion accumulator (ignored voxels contribute nowhere). Finalizing
//! against a category partition yields binary-occupancy IoU, mean IoU over
//! all non-free classes, and the two group means over the instance-like and
//! scene-like class subsets. Accumulators merge by addition, so scenes can
//! be scored independently and reduced.

use std::collections::BTreeSet;

use crate::error::{DiscError, Result};
use crate::labels::{LabelGrid, IGNORE_LABEL};

/// Splits the label space into free space plus two disjoint semantic
/// groups covering every other class.
#[derive(Debug, Clone)]
pub struct CategoryPartition {
    pub class_names: Vec<String>,
    pub free_id: u8,
    pub instance_ids: Vec<u8>,
    pub scene_ids: Vec<u8>,
}

impl CategoryPartition {
    pub fn new(
        class_names: Vec<String>,
        free_id: u8,
        mut instance_ids: Vec<u8>,
        mut scene_ids: Vec<u8>,
    ) -> Result<Self> {
        let k = class_names.len();
        if k < 1 || k > IGNORE_LABEL as usize {
            return Err(DiscError::Metrics(format!("unsupported class count {k}")));
        }
        instance_ids.sort_unstable();
        scene_ids.sort_unstable();
        let mut seen = BTreeSet::new();
        seen.insert(free_id);
        for &id in instance_ids.iter().chain(&scene_ids) {
            if !seen.insert(id) {
                return Err(DiscError::Metrics(format!(
                    "class {id} assigned to more than one category group"
                )));
            }
        }
        if (free_id as usize) >= k || seen.iter().any(|&id| id as usize >= k) {
            return Err(DiscError::Metrics("category id outside the class range".into()));
        }
        if seen.len() != k {
            return Err(DiscError::Metrics(format!(
                "category groups cover {} of {k} classes",
                seen.len()
            )));
        }
        Ok(Self { class_names, free_id, instance_ids, scene_ids })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The 19-class outdoor driving label set: empty space plus ten
    /// instance-like and nine scene-like categories.
    pub fn semantic_kitti() -> Self {
        let names = [
            "empty",
            "car",
            "bicycle",
            "motorcycle",
            "truck",
            "other-vehicle",
            "person",
            "bicyclist",
            "motorcyclist",
            "road",
            "parking",
            "sidewalk",
            "other-ground",
            "building",
            "fence",
            "vegetation",
            "trunk",
            "terrain",
            "pole",
            "traffic-sign",
        ];
        Self::new(
            names.iter().map(|s| s.to_string()).collect(),
            0,
            vec![1, 2, 3, 4, 5, 6, 7, 8, 18, 19],
            vec![9, 10, 11, 12, 13, 14, 15, 16, 17],
        )
        .expect("built-in partition is consistent")
    }

    /// Partition for the synthetic desk-scale label set: class 0 free,
    /// classes 1-2 scene-like surfaces (terrain, road strip), everything
    /// above instance-like objects.
    pub fn desk(num_classes: u8) -> Result<Self> {
        if num_classes < 2 {
            return Err(DiscError::Metrics(format!(
                "desk partition needs at least 2 classes, got {num_classes}"
            )));
        }
        let mut names = vec!["free".to_string()];
        let mut scene_ids = Vec::new();
        let mut instance_ids = Vec::new();
        for id in 1..num_classes {
            if id <= 2 {
                names.push(if id == 1 { "terrain".into() } else { "road".into() });
                scene_ids.push(id);
            } else {
                names.push(format!("object{id}"));
                instance_ids.push(id);
            }
        }
        Self::new(names, 0, instance_ids, scene_ids)
    }
}

/// Voxel-level confusion counts, mergeable across scenes.
#[derive(Debug, Clone)]
pub struct ConfusionAccumulator {
    num_classes: usize,
    free_id: u8,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    occ_tp: u64,
    occ_fp: u64,
    occ_fn: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: u8, free_id: u8) -> Result<Self> {
        if free_id >= num_classes {
            return Err(DiscError::Metrics(format!(
                "free class {free_id} outside {num_classes} classes"
            )));
        }
        let k = num_classes as usize;
        Ok(Self {
            num_classes: k,
            free_id,
            tp: vec![0; k],
            fp: vec![0; k],
            fn_: vec![0; k],
            occ_tp: 0,
            occ_fp: 0,
            occ_fn: 0,
        })
    }

    /// Adds one scene's voxel-wise comparison. Ground-truth voxels marked
    /// ignore contribute to no count.
    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(DiscError::Metrics(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        if pred.num_classes() as usize != self.num_classes
            || gt.num_classes() as usize != self.num_classes
        {
            return Err(DiscError::Metrics("label grids use a different class count".into()));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if p == IGNORE_LABEL {
                return Err(DiscError::Metrics("prediction contains ignore labels".into()));
            }
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
            let p_occ = p != self.free_id;
            let g_occ = g != self.free_id;
            match (p_occ, g_occ) {
                (true, true) => self.occ_tp += 1,
                (true, false) => self.occ_fp += 1,
                (false, true) => self.occ_fn += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    /// Adds another accumulator's counts; commutative and associative.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.num_classes != other.num_classes || self.free_id != other.free_id {
            return Err(DiscError::Metrics("accumulators disagree on the label space".into()));
        }
        for k in 0..self.num_classes {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        self.occ_tp += other.occ_tp;
        self.occ_fp += other.occ_fp;
        self.occ_fn += other.occ_fn;
        Ok(())
    }

    fn class_iou(&self, c: usize) -> f64 {
        let denom = self.tp[c] + self.fp[c] + self.fn_[c];
        if denom == 0 {
            0.0
        } else {
            self.tp[c] as f64 / denom as f64
        }
    }

    /// Computes the final metric set against a category partition covering
    /// the same label space.
    pub fn finalize(&self, partition: &CategoryPartition) -> Result<MetricsReport> {
        if partition.num_classes() != self.num_classes || partition.free_id != self.free_id {
            return Err(DiscError::Metrics("partition does not match the accumulator".into()));
        }
        let occ_denom = self.occ_tp + self.occ_fp + self.occ_fn;
        let iou = if occ_denom == 0 { 0.0 } else { self.occ_tp as f64 / occ_denom as f64 };

        let mean_over = |ids: &[u8]| -> f64 {
            if ids.is_empty() {
                0.0
            } else {
                ids.iter().map(|&c| self.class_iou(c as usize)).sum::<f64>() / ids.len() as f64
            }
        };
        let non_free: Vec<u8> = (0..self.num_classes as u8).filter(|&c| c != self.free_id).collect();
        let per_class = non_free
            .iter()
            .map(|&c| (partition.class_names[c as usize].clone(), self.class_iou(c as usize)))
            .collect();
        Ok(MetricsReport {
            iou,
            miou: mean_over(&non_free),
            insm: mean_over(&partition.instance_ids),
            scnm: mean_over(&partition.scene_ids),
            per_class,
        })
    }
}

/// Finalized metric values, all in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Binary occupancy IoU.
    pub iou: f64,
    /// Mean IoU over all non-free classes.
    pub miou: f64,
    /// Mean IoU over the instance-like group.
    pub insm: f64,
    /// Mean IoU over the scene-like group.
    pub scnm: f64,
    /// `(name, IoU)` for every non-free class.
    pub per_class: Vec<(String, f64)>,
}

impl MetricsReport {
    /// Plain-text table followed by a machine-readable key=value block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>8}\n", "metric", "value"));
        out.push_str(&format!("{:<16} {:>8.4}\n", "occupancy IoU", self.iou));
        out.push_str(&format!("{:<16} {:>8.4}\n", "mean IoU", self.miou));
        out.push_str(&format!("{:<16} {:>8.4}\n", "instance mean", self.insm));
        out.push_str(&format!("{:<16} {:>8.4}\n", "scene mean", self.scnm));
        for (name, iou) in &self.per_class {
            out.push_str(&format!("{:<16} {:>8.4}\n", name, iou));
        }
        out.push('\n');
        out.push_str(&format!("iou={}\n", self.iou));
        out.push_str(&format!("miou={}\n", self.miou));
        out.push_str(&format!("insm={}\n", self.insm));
        out.push_str(&format!("scnm={}\n", self.scnm));
        for (name, iou) in &self.per_class {
            out.push_str(&format!("class.{name}={iou}\n"));
        }
        out
    }
}
