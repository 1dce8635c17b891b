//! Category-decoupled fusion of the two BEV streams into a voxel volume.
//!
//! Each stream contributes a BEV feature map and a per-cell height
//! distribution in `[0, 1]`; the volume is the sum of the two outer
//! products. A light aggregator then mixes local 3D context with a global
//! path that attends to axis-pooled side views, blended by a learned
//! per-voxel gate, and a linear head upsamples and classifies every voxel.

use crate::error::{DiscError, Result};
use crate::nn::{Conv2d, Conv3d, LinearLayer, SeedRng};
use crate::tensor::{upsample_nn_3d, Tensor};

/// Predicts a per-cell height occupancy profile from a BEV map:
/// 3x3 conv -> ReLU -> 1x1 conv to the height-bin count -> sigmoid.
#[derive(Debug, Clone)]
pub struct HeightHead {
    pub mix: Conv2d,
    pub out: Conv2d,
}

impl HeightHead {
    pub fn init(rng: &mut SeedRng, channels: usize, height_bins: usize) -> Self {
        Self {
            mix: Conv2d::init(rng, channels, channels, 3, 1, 1),
            out: Conv2d::init(rng, channels, height_bins, 1, 1, 0),
        }
    }

    /// `[C, X, Y] -> [Z, X, Y]`, every value in `[0, 1]`.
    pub fn apply(&self, bev: &Tensor) -> Tensor {
        self.out.apply(&self.mix.apply(bev).relu()).sigmoid()
    }
}

/// Lifts the two BEV streams into a shared volume:
/// `V[c,x,y,z] = ins[c,x,y]*h_ins[z,x,y] + scn[c,x,y]*h_scn[z,x,y]`.
pub fn fuse(
    instance_bev: &Tensor,
    scene_bev: &Tensor,
    instance_height: &Tensor,
    scene_height: &Tensor,
) -> Result<Tensor> {
    if instance_bev.rank() != 3 || instance_bev.shape() != scene_bev.shape() {
        return Err(DiscError::Shape(format!(
            "stream BEV maps must share a [C, X, Y] shape, got {:?} and {:?}",
            instance_bev.shape(),
            scene_bev.shape()
        )));
    }
    if instance_height.rank() != 3 || instance_height.shape() != scene_height.shape() {
        return Err(DiscError::Shape(format!(
            "height maps must share a [Z, X, Y] shape, got {:?} and {:?}",
            instance_height.shape(),
            scene_height.shape()
        )));
    }
    let (channels, rows, cols) = (
        instance_bev.shape()[0],
        instance_bev.shape()[1],
        instance_bev.shape()[2],
    );
    let depth = instance_height.shape()[0];
    if instance_height.shape()[1] != rows || instance_height.shape()[2] != cols {
        return Err(DiscError::Shape(format!(
            "height maps {:?} do not cover the {rows}x{cols} BEV plane",
            instance_height.shape()
        )));
    }
    let mut v = Tensor::zeros(&[channels, rows, cols, depth]);
    for c in 0..channels {
        for x in 0..rows {
            for y in 0..cols {
                let ins = instance_bev.at3(c, x, y);
                let scn = scene_bev.at3(c, x, y);
                for z in 0..depth {
                    v.set4(
                        c,
                        x,
                        y,
                        z,
                        ins * instance_height.at3(z, x, y) + scn * scene_height.at3(z, x, y),
                    );
                }
            }
        }
    }
    Ok(v)
}

/// Mixes local and global context over the fused volume.
///
/// Local path: two residual blocks, each `x + conv(relu(conv(x)))` with
/// 3x3x3 kernels. Global path: each voxel's query attends over two pooled
/// side views — the volume averaged over x (left view) and over y (front
/// view) — reading the entries at its own remaining coordinates. A per-voxel
/// sigmoid gate `g` blends them as `g*local + (1-g)*global`.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub local: [Conv3d; 4],
    pub query_proj: LinearLayer,
    pub key_proj: LinearLayer,
    pub value_proj: LinearLayer,
    pub gate: Conv3d,
}

impl Aggregator {
    pub fn init(rng: &mut SeedRng, channels: usize) -> Self {
        Self {
            local: [
                Conv3d::init(rng, channels, channels, 3, 1),
                Conv3d::init(rng, channels, channels, 3, 1),
                Conv3d::init(rng, channels, channels, 3, 1),
                Conv3d::init(rng, channels, channels, 3, 1),
            ],
            query_proj: LinearLayer::init(rng, channels, channels),
            key_proj: LinearLayer::init(rng, channels, channels),
            value_proj: LinearLayer::init(rng, channels, channels),
            gate: Conv3d::init(rng, channels, 1, 1, 0),
        }
    }

    fn local_path(&self, v: &Tensor) -> Tensor {
        let mut x = v.clone();
        for pair in self.local.chunks(2) {
            let inner = pair[1].apply(&pair[0].apply(&x).relu());
            x = x.add(&inner).expect("residual block preserves shape");
        }
        x
    }

    fn global_path(&self, v: &Tensor) -> Tensor {
        let (channels, rows, cols, depth) =
            (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        // Pooled side views: mean over x -> [C, Y, Z], mean over y -> [C, X, Z].
        let mut left = Tensor::zeros(&[channels, cols, depth]);
        let mut front = Tensor::zeros(&[channels, rows, depth]);
        for c in 0..channels {
            for x in 0..rows {
                for y in 0..cols {
                    for z in 0..depth {
                        let val = v.at4(c, x, y, z);
                        *left.data_mut().get_mut(
                            (c * cols + y) * depth + z
                        ).unwrap() += val / rows as f32;
                        *front.data_mut().get_mut(
                            (c * rows + x) * depth + z
                        ).unwrap() += val / cols as f32;
                    }
                }
            }
        }
        let column = |t: &Tensor, a: usize, b: usize| -> Vec<f32> {
            (0..channels).map(|c| t.at3(c, a, b)).collect()
        };
        // Project every plane entry once; voxels reuse them as keys/values.
        let mut left_kv = Vec::with_capacity(cols * depth);
        for y in 0..cols {
            for z in 0..depth {
                let col = column(&left, y, z);
                left_kv.push((self.key_proj.apply(&col), self.value_proj.apply(&col)));
            }
        }
        let mut front_kv = Vec::with_capacity(rows * depth);
        for x in 0..rows {
            for z in 0..depth {
                let col = column(&front, x, z);
                front_kv.push((self.key_proj.apply(&col), self.value_proj.apply(&col)));
            }
        }
        let scale = 1.0 / (channels as f32).sqrt();
        let mut out = Tensor::zeros(v.shape());
        for x in 0..rows {
            for y in 0..cols {
                for z in 0..depth {
                    let voxel: Vec<f32> = (0..channels).map(|c| v.at4(c, x, y, z)).collect();
                    let q = self.query_proj.apply(&voxel);
                    let (lk, lv) = &left_kv[y * depth + z];
                    let (fk, fv) = &front_kv[x * depth + z];
                    let dot = |k: &[f32]| -> f32 {
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale
                    };
                    let (s_l, s_f) = (dot(lk), dot(fk));
                    let m = s_l.max(s_f);
                    let (e_l, e_f) = ((s_l - m).exp(), (s_f - m).exp());
                    let w_l = e_l / (e_l + e_f);
                    let w_f = 1.0 - w_l;
                    for c in 0..channels {
                        out.set4(c, x, y, z, w_l * lv[c] + w_f * fv[c]);
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, v: &Tensor) -> Result<Tensor> {
        if v.rank() != 4 {
            return Err(DiscError::Shape(format!(
                "aggregator expects a [C, X, Y, Z] volume, got {:?}",
                v.shape()
            )));
        }
        let local = self.local_path(v);
        let global = self.global_path(v);
        let gate = self.gate.apply(v).sigmoid();
        let (channels, rows, cols, depth) =
            (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let mut out = Tensor::zeros(v.shape());
        for c in 0..channels {
            for x in 0..rows {
                for y in 0..cols {
                    for z in 0..depth {
                        let g = gate.at4(0, x, y, z);
                        out.set4(
                            c,
                            x,
                            y,
                            z,
                            g * local.at4(c, x, y, z) + (1.0 - g) * global.at4(c, x, y, z),
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Doubles the volume resolution (nearest neighbour per axis) and maps each
/// voxel's features to class logits: `[C, X, Y, Z] -> [K, 2X, 2Y, 2Z]`.
pub fn predict(v: &Tensor, head: &LinearLayer) -> Result<Tensor> {
    if v.rank() != 4 {
        return Err(DiscError::Shape(format!(
            "prediction expects a [C, X, Y, Z] volume, got {:?}",
            v.shape()
        )));
    }
    let channels = v.shape()[0];
    if head.in_features() != channels {
        return Err(DiscError::Shape(format!(
            "prediction head expects {} input features, volume has {channels}",
            head.in_features()
        )));
    }
    let up = upsample_nn_3d(v);
    let (rows, cols, depth) = (up.shape()[1], up.shape()[2], up.shape()[3]);
    let classes = head.out_features();
    let mut logits = Tensor::zeros(&[classes, rows, cols, depth]);
    for x in 0..rows {
        for y in 0..cols {
            for z in 0..depth {
                let voxel: Vec<f32> = (0..channels).map(|c| up.at4(c, x, y, z)).collect();
                let mapped = head.apply(&voxel);
                for (k, &val) in mapped.iter().enumerate() {
                    logits.set4(k, x, y, z, val);
                }
            }
        }
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn height_head_outputs_unit_interval_with_right_shape() {
        let mut rng = seeded_rng(3);
        let head = HeightHead::init(&mut rng, 4, 6);
        let bev = Tensor::from_fn(&[4, 5, 5], |_| rng.gen::<f32>() * 4.0 - 2.0);
        let h = head.apply(&bev);
        assert_eq!(h.shape(), &[6, 5, 5]);
        assert!(h.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fuse_zero_heights_give_zero_volume() {
        let ins = Tensor::full(&[2, 3, 3], 1.5);
        let scn = Tensor::full(&[2, 3, 3], -0.5);
        let zero_h = Tensor::zeros(&[4, 3, 3]);
        let v = fuse(&ins, &scn, &zero_h, &zero_h).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_one_hot_height_places_instance_features_at_that_slice() {
        let ins = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        let scn = Tensor::zeros(&[2, 3, 3]);
        let mut h_ins = Tensor::zeros(&[4, 3, 3]);
        for x in 0..3 {
            for y in 0..3 {
                h_ins.set3(2, x, y, 1.0);
            }
        }
        let h_scn = Tensor::zeros(&[4, 3, 3]);
        let v = fuse(&ins, &scn, &h_ins, &h_scn).unwrap();
        for c in 0..2 {
            for x in 0..3 {
                for y in 0..3 {
                    for z in 0..4 {
                        let want = if z == 2 { ins.at3(c, x, y) } else { 0.0 };
                        assert_eq!(v.at4(c, x, y, z), want);
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_matches_scalar_oracle_and_is_linear_in_features() {
        let mut rng = seeded_rng(17);
        let ins = Tensor::from_fn(&[3, 4, 2], |_| rng.gen::<f32>() - 0.5);
        let scn = Tensor::from_fn(&[3, 4, 2], |_| rng.gen::<f32>() - 0.5);
        let h_ins = Tensor::from_fn(&[5, 4, 2], |_| rng.gen::<f32>());
        let h_scn = Tensor::from_fn(&[5, 4, 2], |_| rng.gen::<f32>());
        let v = fuse(&ins, &scn, &h_ins, &h_scn).unwrap();
        assert_eq!(v.shape(), &[3, 4, 2, 5]);
        for c in 0..3 {
            for x in 0..4 {
                for y in 0..2 {
                    for z in 0..5 {
                        let want = ins.at3(c, x, y) * h_ins.at3(z, x, y)
                            + scn.at3(c, x, y) * h_scn.at3(z, x, y);
                        assert_eq!(v.at4(c, x, y, z), want);
                    }
                }
            }
        }
        // Linearity in the BEV features with heights fixed.
        let doubled = fuse(&ins.scale(2.0), &scn.scale(2.0), &h_ins, &h_scn).unwrap();
        for (a, b) in doubled.data().iter().zip(v.data()) {
            assert_relative_eq!(*a, 2.0 * b, epsilon = 1e-6);
        }
    }

    #[test]
    fn fuse_rejects_mismatched_shapes() {
        let bev = Tensor::zeros(&[2, 3, 3]);
        let h = Tensor::zeros(&[4, 3, 3]);
        assert!(fuse(&bev, &Tensor::zeros(&[2, 3, 4]), &h, &h).is_err());
        assert!(fuse(&bev, &bev, &h, &Tensor::zeros(&[5, 3, 3])).is_err());
        assert!(fuse(&bev, &bev, &Tensor::zeros(&[4, 2, 3]), &Tensor::zeros(&[4, 2, 3])).is_err());
    }

    fn zeroed_aggregator(channels: usize) -> Aggregator {
        let mut agg = Aggregator::init(&mut seeded_rng(0), channels);
        for conv in agg.local.iter_mut() {
            conv.weight = Tensor::zeros(conv.weight.shape());
            conv.bias = Tensor::zeros(conv.bias.shape());
        }
        agg.query_proj = LinearLayer::identity(channels);
        agg.key_proj = LinearLayer::identity(channels);
        agg.value_proj = LinearLayer::identity(channels);
        agg.gate.weight = Tensor::zeros(agg.gate.weight.shape());
        agg.gate.bias = Tensor::zeros(agg.gate.bias.shape());
        agg
    }

    #[test]
    fn aggregator_zero_input_zero_nets_stays_zero() {
        let agg = zeroed_aggregator(2);
        let v = Tensor::zeros(&[2, 3, 3, 2]);
        let out = agg.apply(&v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aggregator_gate_forced_open_returns_local_path() {
        let mut rng = seeded_rng(23);
        let mut agg = Aggregator::init(&mut rng, 3);
        // A huge gate bias saturates the sigmoid at 1, leaving only local.
        agg.gate.weight = Tensor::zeros(agg.gate.weight.shape());
        agg.gate.bias = Tensor::full(&[1], 1e6);
        let v = Tensor::from_fn(&[3, 4, 4, 3], |_| rng.gen::<f32>() - 0.5);
        let out = agg.apply(&v).unwrap();
        let local = agg.local_path(&v);
        for (a, b) in out.data().iter().zip(local.data()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn aggregator_gate_forced_closed_matches_side_view_oracle() {
        let mut rng = seeded_rng(29);
        let mut agg = zeroed_aggregator(2);
        agg.gate.bias = Tensor::full(&[1], -1e6);
        let (rows, cols, depth) = (3usize, 4usize, 2usize);
        let v = Tensor::from_fn(&[2, rows, cols, depth], |_| rng.gen::<f32>() - 0.5);
        let out = agg.apply(&v).unwrap();
        // Identity projections: keys = values = pooled plane entries.
        for x in 0..rows {
            for y in 0..cols {
                for z in 0..depth {
                    let q: Vec<f32> = (0..2).map(|c| v.at4(c, x, y, z)).collect();
                    let left: Vec<f32> = (0..2)
                        .map(|c| (0..rows).map(|i| v.at4(c, i, y, z)).sum::<f32>() / rows as f32)
                        .collect();
                    let front: Vec<f32> = (0..2)
                        .map(|c| (0..cols).map(|j| v.at4(c, x, j, z)).sum::<f32>() / cols as f32)
                        .collect();
                    let scale = 1.0 / (2.0f32).sqrt();
                    let s_l = (q[0] * left[0] + q[1] * left[1]) * scale;
                    let s_f = (q[0] * front[0] + q[1] * front[1]) * scale;
                    let w_l = s_l.exp() / (s_l.exp() + s_f.exp());
                    for c in 0..2 {
                        let want = w_l * left[c] + (1.0 - w_l) * front[c];
                        assert_relative_eq!(out.at4(c, x, y, z), want, epsilon = 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn aggregator_preserves_shape() {
        let mut rng = seeded_rng(31);
        let agg = Aggregator::init(&mut rng, 2);
        let v = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.gen::<f32>());
        assert_eq!(agg.apply(&v).unwrap().shape(), v.shape());
    }

    #[test]
    fn predict_constant_volume_gives_constant_logits() {
        let v = Tensor::full(&[3, 2, 2, 2], 0.7);
        let head = LinearLayer::init(&mut seeded_rng(5), 3, 4);
        let logits = predict(&v, &head).unwrap();
        assert_eq!(logits.shape(), &[4, 4, 4, 4]);
        let want = head.apply(&[0.7, 0.7, 0.7]);
        for k in 0..4 {
            for &val in &logits.data()[k * 64..(k + 1) * 64] {
                assert_relative_eq!(val, want[k], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn predict_matches_per_voxel_matrix_oracle() {
        let mut rng = seeded_rng(7);
        let v = Tensor::from_fn(&[2, 2, 3, 2], |_| rng.gen::<f32>() - 0.5);
        let head = LinearLayer::init(&mut rng, 2, 5);
        let logits = predict(&v, &head).unwrap();
        assert_eq!(logits.shape(), &[5, 4, 6, 4]);
        for x in 0..4 {
            for y in 0..6 {
                for z in 0..4 {
                    let src: Vec<f32> = (0..2).map(|c| v.at4(c, x / 2, y / 2, z / 2)).collect();
                    let want = head.apply(&src);
                    for k in 0..5 {
                        assert_relative_eq!(logits.at4(k, x, y, z), want[k], epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn predict_rejects_channel_mismatch() {
        let v = Tensor::zeros(&[3, 2, 2, 2]);
        let head = LinearLayer::init(&mut seeded_rng(1), 4, 2);
        assert!(predict(&v, &head).is_err());
    }
}
