//! Query construction for the two decoder streams.
//!
//! Instance queries are sparse: a probability map over the BEV plane is
//! divided into blocks, each block votes for its strongest cell, and the
//! top-voted cells (by probability) become query reference points whose
//! features are gathered from the BEV map. Scene queries are dense and
//! regular: every PxP patch of the BEV plane is reduced to one query by a
//! small stride-2 convolution stack.
//!
//! Both kinds of queries carry BEV reference points and receive a learned
//! positional embedding computed from a fixed sinusoidal encoding of the
//! normalized position pushed through a two-layer MLP with layer norm.

use crate::bev::apply_conv_stack;
use crate::error::{DiscError, Result};
use crate::nn::{Conv2d, LayerNormParams, LinearLayer, SeedRng};
use crate::tensor::Tensor;

/// Which stream a query set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRole {
    Instance,
    Scene,
}

/// A set of queries: per-query feature rows plus matching BEV reference
/// points (in cell units).
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `[N, C]`
    pub features: Tensor,
    /// One `(x, y)` BEV position per query.
    pub refs: Vec<(f32, f32)>,
    pub role: QueryRole,
}

impl QuerySet {
    pub fn new(features: Tensor, refs: Vec<(f32, f32)>, role: QueryRole) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != refs.len() {
            return Err(DiscError::Shape(format!(
                "query features {:?} need one row per reference point ({})",
                features.shape(),
                refs.len()
            )));
        }
        Ok(Self { features, refs, role })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.features.data()[i * c..(i + 1) * c]
    }
}

/// Per-cell foreground probability over the BEV plane, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct InstanceProbabilityMap {
    /// `[X, Y]`
    pub probs: Tensor,
}

impl InstanceProbabilityMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(DiscError::Shape(format!(
                "probability map must be [X, Y], got {:?}",
                probs.shape()
            )));
        }
        if probs.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DiscError::Query("probability map values must lie in [0, 1]".into()));
        }
        Ok(Self { probs })
    }

    /// Produces the map from BEV features with a 1x1 conv + sigmoid head.
    pub fn from_bev(bev: &Tensor, head: &Conv2d) -> Result<Self> {
        if head.out_channels() != 1 {
            return Err(DiscError::Shape("probability head must output one channel".into()));
        }
        let logits = head.apply(bev);
        let probs = logits.sigmoid();
        let (x, y) = (probs.shape()[1], probs.shape()[2]);
        Self::new(Tensor::new(&[x, y], probs.into_data()))
    }
}

/// Block-voting selection of instance reference points.
///
/// The `[X, Y]` map is tiled by `block_size x block_size` blocks. Each block
/// nominates its highest-probability cell (ties go to the lowest row-major
/// flat index), nominations are ranked by probability (ties again to the
/// lowest flat index), and the top `count` cell centres
/// `(i + 0.5, j + 0.5)` are returned in rank order.
pub fn select_instance_refs(
    map: &InstanceProbabilityMap,
    block_size: usize,
    count: usize,
) -> Result<Vec<(f32, f32)>> {
    let (rows, cols) = (map.probs.shape()[0], map.probs.shape()[1]);
    if block_size == 0 || rows % block_size != 0 || cols % block_size != 0 {
        return Err(DiscError::Query(format!(
            "block size {block_size} does not tile a {rows}x{cols} grid"
        )));
    }
    let blocks = (rows / block_size) * (cols / block_size);
    if count > blocks {
        return Err(DiscError::Query(format!(
            "cannot select {count} references from {blocks} blocks"
        )));
    }
    // (probability, flat index) per block winner.
    let mut winners: Vec<(f32, usize)> = Vec::with_capacity(blocks);
    for bi in 0..rows / block_size {
        for bj in 0..cols / block_size {
            let mut best_p = f32::NEG_INFINITY;
            let mut best_flat = usize::MAX;
            for i in bi * block_size..(bi + 1) * block_size {
                for j in bj * block_size..(bj + 1) * block_size {
                    let p = map.probs.at2(i, j);
                    let flat = i * cols + j;
                    if p > best_p || (p == best_p && flat < best_flat) {
                        best_p = p;
                        best_flat = flat;
                    }
                }
            }
            winners.push((best_p, best_flat));
        }
    }
    winners.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(winners
        .iter()
        .take(count)
        .map(|&(_, flat)| ((flat / cols) as f32 + 0.5, (flat % cols) as f32 + 0.5))
        .collect())
}

/// Gathers instance query features from the BEV map at the cell containing
/// each reference point.
pub fn init_instance_queries(bev: &Tensor, refs: &[(f32, f32)]) -> Result<QuerySet> {
    if bev.rank() != 3 {
        return Err(DiscError::Shape(format!("BEV map must be [C, X, Y], got {:?}", bev.shape())));
    }
    let (channels, rows, cols) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
    let mut features = Tensor::zeros(&[refs.len(), channels]);
    for (q, &(x, y)) in refs.iter().enumerate() {
        if !(0.0..rows as f32).contains(&x) || !(0.0..cols as f32).contains(&y) {
            return Err(DiscError::Query(format!(
                "reference point ({x}, {y}) outside the {rows}x{cols} grid"
            )));
        }
        let (i, j) = (x.floor() as usize, y.floor() as usize);
        for c in 0..channels {
            features.set2(q, c, bev.at3(c, i, j));
        }
    }
    QuerySet::new(features, refs.to_vec(), QueryRole::Instance)
}

/// Builds one scene query per `patch_size x patch_size` BEV patch by running
/// `log2(patch_size)` stride-2 convolutions (ReLU between) and reading the
/// reduced map in row-major patch order. Reference points are patch centres.
pub fn init_scene_queries(
    bev: &Tensor,
    patch_size: usize,
    reducer: &[Conv2d],
) -> Result<QuerySet> {
    if bev.rank() != 3 {
        return Err(DiscError::Shape(format!("BEV map must be [C, X, Y], got {:?}", bev.shape())));
    }
    let (channels, rows, cols) = (bev.shape()[0], bev.shape()[1], bev.shape()[2]);
    if patch_size == 0 || !patch_size.is_power_of_two() {
        return Err(DiscError::Query(format!("patch size {patch_size} must be a power of two")));
    }
    if rows % patch_size != 0 || cols % patch_size != 0 {
        return Err(DiscError::Query(format!(
            "patch size {patch_size} does not tile a {rows}x{cols} grid"
        )));
    }
    let stages = patch_size.trailing_zeros() as usize;
    if reducer.len() != stages {
        return Err(DiscError::Query(format!(
            "patch size {patch_size} needs {stages} stride-2 stages, reducer has {}",
            reducer.len()
        )));
    }
    let reduced = apply_conv_stack(bev, reducer);
    let (out_rows, out_cols) = (rows / patch_size, cols / patch_size);
    if reduced.shape() != [channels, out_rows, out_cols] {
        return Err(DiscError::Shape(format!(
            "reducer output {:?}, expected [{channels}, {out_rows}, {out_cols}]",
            reduced.shape()
        )));
    }
    let mut features = Tensor::zeros(&[out_rows * out_cols, channels]);
    let mut refs = Vec::with_capacity(out_rows * out_cols);
    for bi in 0..out_rows {
        for bj in 0..out_cols {
            let q = bi * out_cols + bj;
            for c in 0..channels {
                features.set2(q, c, reduced.at3(c, bi, bj));
            }
            refs.push((
                (bi as f32 + 0.5) * patch_size as f32,
                (bj as f32 + 0.5) * patch_size as f32,
            ));
        }
    }
    QuerySet::new(features, refs, QueryRole::Scene)
}

/// Fixed sinusoidal encoding of a normalized BEV position.
///
/// The position is normalized to `[0, 1]` per axis; each axis contributes
/// `channels/4` geometric frequencies `base^(i / (channels/4))` with
/// `base = 10000`, laid out as interleaved (sin, cos) pairs, x axis first.
/// Every (sin, cos) pair has unit norm, so the encoding's squared norm is
/// exactly `channels/2`.
pub fn encode_position(x: f32, y: f32, x_extent: f32, y_extent: f32, channels: usize) -> Result<Vec<f32>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(DiscError::Query(format!(
            "positional encoding needs channels divisible by 4, got {channels}"
        )));
    }
    let freqs = channels / 4;
    let base: f32 = 10000.0;
    let mut out = Vec::with_capacity(channels);
    for norm_pos in [x / x_extent, y / y_extent] {
        for i in 0..freqs {
            let omega = base.powf(i as f32 / freqs as f32);
            let angle = norm_pos * omega;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// Learned positional embedding: sinusoidal encoding -> linear -> ReLU ->
/// linear -> layer norm. Each stream owns one of these.
#[derive(Debug, Clone)]
pub struct PositionEmbed {
    pub hidden: LinearLayer,
    pub output: LinearLayer,
    pub norm: LayerNormParams,
}

impl PositionEmbed {
    pub fn init(rng: &mut SeedRng, channels: usize) -> Self {
        Self {
            hidden: LinearLayer::init(rng, channels, channels),
            output: LinearLayer::init(rng, channels, channels),
            norm: LayerNormParams::identity(channels),
        }
    }

    /// Embeds a BEV reference point given the grid extents (in cells).
    pub fn embed(&self, x: f32, y: f32, x_extent: f32, y_extent: f32) -> Result<Vec<f32>> {
        let enc = encode_position(x, y, x_extent, y_extent, self.hidden.in_features())?;
        let mut h = self.hidden.apply(&enc);
        for v in &mut h {
            *v = v.max(0.0);
        }
        let out = self.output.apply(&h);
        Ok(self.norm.apply_row(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn map_from(rows: usize, cols: usize, entries: &[(usize, usize, f32)]) -> InstanceProbabilityMap {
        let mut probs = Tensor::zeros(&[rows, cols]);
        for &(i, j, p) in entries {
            probs.set2(i, j, p);
        }
        InstanceProbabilityMap::new(probs).unwrap()
    }

    #[test]
    fn select_ranks_block_winners_by_probability() {
        // 4x4 map, 2x2 blocks: peaks at (0,1)=0.9 and (3,2)=0.8.
        let map = map_from(4, 4, &[(0, 1, 0.9), (3, 2, 0.8), (1, 3, 0.3)]);
        let refs = select_instance_refs(&map, 2, 2).unwrap();
        assert_eq!(refs, vec![(0.5, 1.5), (3.5, 2.5)]);
    }

    #[test]
    fn select_breaks_ties_by_lowest_flat_index() {
        // All-equal probabilities: every block nominates its top-left cell,
        // and ranking keeps row-major block order.
        let map = InstanceProbabilityMap::new(Tensor::full(&[4, 4], 0.5)).unwrap();
        let refs = select_instance_refs(&map, 2, 4).unwrap();
        assert_eq!(refs, vec![(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5)]);
    }

    #[test]
    fn select_rejects_bad_tiling_and_oversized_count() {
        let map = InstanceProbabilityMap::new(Tensor::zeros(&[4, 4])).unwrap();
        assert!(select_instance_refs(&map, 3, 1).is_err());
        assert!(select_instance_refs(&map, 0, 1).is_err());
        assert!(select_instance_refs(&map, 2, 5).is_err());
        assert!(select_instance_refs(&map, 2, 4).is_ok());
    }

    #[test]
    fn select_matches_brute_force_oracle_and_scale_invariance() {
        let mut rng = seeded_rng(404);
        for _ in 0..100 {
            let rows = 8;
            let cols = 8;
            let probs = Tensor::from_fn(&[rows, cols], |_| rng.gen::<f32>());
            let map = InstanceProbabilityMap::new(probs.clone()).unwrap();
            for &(k, n) in &[(2usize, 1usize), (2, 4), (2, 16), (4, 1), (4, 4)] {
                let got = select_instance_refs(&map, k, n).unwrap();

                // Brute force: enumerate every block, pick argmax by
                // (prob desc, flat asc), sort nominations the same way.
                let mut winners: Vec<(f32, usize)> = Vec::new();
                for bi in 0..rows / k {
                    for bj in 0..cols / k {
                        let mut best: Option<(f32, usize)> = None;
                        for i in bi * k..(bi + 1) * k {
                            for j in bj * k..(bj + 1) * k {
                                let cand = (probs.at2(i, j), i * cols + j);
                                best = Some(match best {
                                    None => cand,
                                    Some(b) => {
                                        if cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1) {
                                            cand
                                        } else {
                                            b
                                        }
                                    }
                                });
                            }
                        }
                        winners.push(best.unwrap());
                    }
                }
                winners.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let want: Vec<(f32, f32)> = winners
                    .iter()
                    .take(n)
                    .map(|&(_, f)| ((f / cols) as f32 + 0.5, (f % cols) as f32 + 0.5))
                    .collect();
                assert_eq!(got, want, "oracle mismatch at k={k} n={n}");

                // Selection depends only on the argmax structure, so a
                // positive rescale must not move any reference point.
                let half = InstanceProbabilityMap::new(probs.scale(0.5)).unwrap();
                assert_eq!(select_instance_refs(&half, k, n).unwrap(), got);
            }
        }
    }

    #[test]
    fn instance_queries_gather_floor_cell_features() {
        let bev = Tensor::from_fn(&[2, 4, 4], |i| i as f32);
        let qs = init_instance_queries(&bev, &[(0.5, 1.5), (3.5, 2.5)]).unwrap();
        assert_eq!(qs.role, QueryRole::Instance);
        assert_eq!(qs.len(), 2);
        assert_eq!(qs.feature_row(0), &[bev.at3(0, 0, 1), bev.at3(1, 0, 1)]);
        assert_eq!(qs.feature_row(1), &[bev.at3(0, 3, 2), bev.at3(1, 3, 2)]);
    }

    #[test]
    fn instance_queries_reject_out_of_grid_refs() {
        let bev = Tensor::zeros(&[2, 4, 4]);
        assert!(init_instance_queries(&bev, &[(4.0, 0.5)]).is_err());
        assert!(init_instance_queries(&bev, &[(-0.1, 0.5)]).is_err());
        assert!(init_instance_queries(&bev, &[(3.99, 3.99)]).is_ok());
    }

    #[test]
    fn instance_queries_empty_refs_give_empty_set() {
        let bev = Tensor::zeros(&[2, 4, 4]);
        let qs = init_instance_queries(&bev, &[]).unwrap();
        assert!(qs.is_empty());
    }

    #[test]
    fn scene_queries_patch_one_reads_columns_verbatim() {
        let bev = Tensor::from_fn(&[3, 2, 2], |i| i as f32 * 0.1);
        let qs = init_scene_queries(&bev, 1, &[]).unwrap();
        assert_eq!(qs.role, QueryRole::Scene);
        assert_eq!(qs.len(), 4);
        // Row-major patches; query (bi, bj) carries the BEV column.
        for bi in 0..2 {
            for bj in 0..2 {
                let q = bi * 2 + bj;
                for c in 0..3 {
                    assert_eq!(qs.feature_row(q)[c], bev.at3(c, bi, bj));
                }
                assert_eq!(qs.refs[q], (bi as f32 + 0.5, bj as f32 + 0.5));
            }
        }
    }

    #[test]
    fn scene_queries_match_reducer_oracle() {
        let mut rng = seeded_rng(88);
        let bev = Tensor::from_fn(&[2, 8, 8], |_| rng.gen::<f32>() - 0.5);
        let reducer = vec![
            Conv2d::init(&mut rng, 2, 2, 3, 2, 1),
            Conv2d::init(&mut rng, 2, 2, 3, 2, 1),
        ];
        let qs = init_scene_queries(&bev, 4, &reducer).unwrap();
        assert_eq!(qs.len(), 4);
        let reduced = apply_conv_stack(&bev, &reducer);
        for bi in 0..2 {
            for bj in 0..2 {
                let q = bi * 2 + bj;
                for c in 0..2 {
                    assert_eq!(qs.feature_row(q)[c], reduced.at3(c, bi, bj));
                }
                assert_eq!(qs.refs[q], ((bi as f32 + 0.5) * 4.0, (bj as f32 + 0.5) * 4.0));
            }
        }
    }

    #[test]
    fn scene_queries_validate_patch_and_reducer() {
        let bev = Tensor::zeros(&[2, 8, 8]);
        let mut rng = seeded_rng(1);
        let one_stage = vec![Conv2d::init(&mut rng, 2, 2, 3, 2, 1)];
        assert!(init_scene_queries(&bev, 3, &one_stage).is_err(), "non power of two");
        assert!(init_scene_queries(&bev, 16, &one_stage).is_err(), "does not tile");
        assert!(init_scene_queries(&bev, 4, &one_stage).is_err(), "wrong stage count");
        assert!(init_scene_queries(&bev, 2, &one_stage).is_ok());
    }

    #[test]
    fn encoding_at_origin_is_alternating_zero_one() {
        let enc = encode_position(0.0, 0.0, 32.0, 32.0, 16).unwrap();
        for pair in enc.chunks(2) {
            assert_eq!(pair[0], 0.0, "sin(0)");
            assert_eq!(pair[1], 1.0, "cos(0)");
        }
    }

    #[test]
    fn encoding_squared_norm_is_half_the_channels() {
        let mut rng = seeded_rng(55);
        for _ in 0..50 {
            let x = rng.gen::<f32>() * 32.0;
            let y = rng.gen::<f32>() * 32.0;
            let enc = encode_position(x, y, 32.0, 32.0, 16).unwrap();
            let norm_sq: f32 = enc.iter().map(|v| v * v).sum();
            assert_relative_eq!(norm_sq, 8.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn encoding_rejects_channels_not_divisible_by_four() {
        assert!(encode_position(0.0, 0.0, 8.0, 8.0, 6).is_err());
        assert!(encode_position(0.0, 0.0, 8.0, 8.0, 0).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_position_sensitive() {
        let pe = PositionEmbed::init(&mut seeded_rng(9), 16);
        let a = pe.embed(3.0, 4.0, 32.0, 32.0).unwrap();
        let b = pe.embed(3.0, 4.0, 32.0, 32.0).unwrap();
        assert_eq!(a, b);
        let c = pe.embed(17.0, 4.0, 32.0, 32.0).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
        // Output went through layer norm: zero mean, ~unit variance.
        let mean: f32 = a.iter().sum::<f32>() / 16.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-5);
    }

    #[test]
    fn probability_map_head_applies_sigmoid_to_one_by_one_conv() {
        let bev = Tensor::from_fn(&[2, 3, 3], |i| (i as f32 - 8.0) * 0.2);
        let head = Conv2d {
            weight: Tensor::new(&[1, 2, 1, 1], vec![0.5, -0.25]),
            bias: Tensor::new(&[1], vec![0.1]),
            stride: 1,
            padding: 0,
        };
        let map = InstanceProbabilityMap::from_bev(&bev, &head).unwrap();
        assert_eq!(map.probs.shape(), &[3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                let logit = 0.1 + 0.5 * bev.at3(0, i, j) - 0.25 * bev.at3(1, i, j);
                assert_relative_eq!(
                    map.probs.at2(i, j),
                    crate::tensor::sigmoid(logit),
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn probability_map_rejects_values_outside_unit_interval() {
        assert!(InstanceProbabilityMap::new(Tensor::full(&[2, 2], 1.5)).is_err());
        assert!(InstanceProbabilityMap::new(Tensor::full(&[2, 2], -0.1)).is_err());
        assert!(InstanceProbabilityMap::new(Tensor::full(&[2, 2], 1.0)).is_ok());
    }
}
