//! The training loss stack.
//!
//! Every loss accumulates in `f64` and returns its value together with an
//! analytic gradient with respect to its direct input (logits for the
//! classification losses, probabilities for the height loss), laid out
//! exactly like that input. The gradients exist so the losses can be
//! verified against central finite differences; nothing else in the crate
//! consumes them.

use crate::error::{DiscError, Result};
use crate::geometry::DepthBinning;
use crate::labels::{LabelGrid, IGNORE_LABEL};
use crate::tensor::Tensor;

/// Lower clip for every probability that enters a logarithm.
pub const PROB_CLIP: f64 = 1e-6;

/// Scale factors combining the loss components.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    /// Voxel-classification group (affinity + cross entropy).
    pub lambda_ssc: f64,
    /// Per-layer auxiliary group.
    pub lambda_aug: f64,
    /// Height term inside each auxiliary group.
    pub lambda_height: f64,
    /// Depth-distribution supervision.
    pub lambda_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssc: 1.0, lambda_aug: 1.0, lambda_height: 5.0, lambda_depth: 0.01 }
    }
}

/// Which affinity variant to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// Two pseudo-classes: free space vs occupied (`1 - p_free`).
    Geometric,
    /// All semantic classes.
    Semantic,
}

fn ln_clipped(p: f64) -> f64 {
    p.max(PROB_CLIP).ln()
}

/// Per-voxel softmax of `[K, ...]` logits in f64. Returns probabilities in
/// class-major layout matching the input.
fn softmax_probs(logits: &Tensor, classes: usize, voxels: usize) -> Vec<f64> {
    let data = logits.data();
    let mut probs = vec![0.0f64; classes * voxels];
    for v in 0..voxels {
        let mut max = f64::NEG_INFINITY;
        for k in 0..classes {
            max = max.max(data[k * voxels + v] as f64);
        }
        let mut total = 0.0;
        for k in 0..classes {
            let e = ((data[k * voxels + v] as f64) - max).exp();
            probs[k * voxels + v] = e;
            total += e;
        }
        for k in 0..classes {
            probs[k * voxels + v] /= total;
        }
    }
    probs
}

fn check_logits_cover_grid(logits: &Tensor, gt: &LabelGrid) -> Result<(usize, usize)> {
    let dims = gt.dims();
    if logits.rank() != 4
        || logits.shape()[1] != dims[0]
        || logits.shape()[2] != dims[1]
        || logits.shape()[3] != dims[2]
    {
        return Err(DiscError::Shape(format!(
            "logits {:?} do not cover a {:?} label grid",
            logits.shape(),
            dims
        )));
    }
    let classes = logits.shape()[0];
    if classes != gt.num_classes() as usize {
        return Err(DiscError::Shape(format!(
            "{classes} logit classes vs {} label classes",
            gt.num_classes()
        )));
    }
    Ok((classes, dims[0] * dims[1] * dims[2]))
}

/// Scene-class affinity loss.
///
/// With soft class masses `x_c` (semantic: the softmax probabilities;
/// geometric: `{p_free, 1 - p_free}` against the binary occupancy target),
/// each class scores precision `P = Σx·t / Σx`, recall `R = Σx·t / Σt`, and
/// specificity `S = Σ(1-x)(1-t) / Σ(1-t)` over the non-ignored voxels, and
/// the loss is the mean over classes of `-(ln P + ln R + ln S)`, skipping
/// any term whose denominator is zero. Returns the loss and its gradient
/// with respect to the logits.
pub fn scal_loss_with_grad(
    logits: &Tensor,
    gt: &LabelGrid,
    mode: AffinityMode,
) -> Result<(f64, Vec<f64>)> {
    let (classes, voxels) = check_logits_cover_grid(logits, gt)?;
    let probs = softmax_probs(logits, classes, voxels);
    let valid: Vec<usize> = (0..voxels).filter(|&v| gt.labels()[v] != IGNORE_LABEL).collect();
    if valid.is_empty() {
        return Err(DiscError::Loss("no voxels carry a supervised label".into()));
    }

    // Soft class masses and binary targets for the chosen mode.
    let groups = match mode {
        AffinityMode::Geometric => 2,
        AffinityMode::Semantic => classes,
    };
    let mass = |c: usize, v: usize| -> f64 {
        match mode {
            AffinityMode::Semantic => probs[c * voxels + v],
            AffinityMode::Geometric if c == 0 => probs[v],
            AffinityMode::Geometric => 1.0 - probs[v],
        }
    };
    let target = |c: usize, v: usize| -> f64 {
        let label = gt.labels()[v] as usize;
        let hit = match mode {
            AffinityMode::Semantic => label == c,
            AffinityMode::Geometric => (label != 0) == (c == 1),
        };
        if hit {
            1.0
        } else {
            0.0
        }
    };

    // dL/d(mass) accumulated per (class, voxel), converted to logit space
    // at the end.
    let mut d_mass = vec![0.0f64; groups * valid.len()];
    let mut loss = 0.0;
    for c in 0..groups {
        let mut overlap = 0.0; // Σ x·t
        let mut pred_mass = 0.0; // Σ x
        let mut gt_mass = 0.0; // Σ t
        let mut neither = 0.0; // Σ (1-x)(1-t)
        let mut not_gt = 0.0; // Σ (1-t)
        for &v in &valid {
            let x = mass(c, v);
            let t = target(c, v);
            overlap += x * t;
            pred_mass += x;
            gt_mass += t;
            neither += (1.0 - x) * (1.0 - t);
            not_gt += 1.0 - t;
        }
        let mut class_loss = 0.0;
        for (i, &v) in valid.iter().enumerate() {
            let t = target(c, v);
            let mut d = 0.0;
            if pred_mass > 0.0 {
                let precision = overlap / pred_mass;
                if precision > PROB_CLIP {
                    // d ln P / dx = t/Σxt − 1/Σx
                    d += t / overlap - 1.0 / pred_mass;
                }
                if i == 0 {
                    class_loss -= ln_clipped(precision);
                }
            }
            if gt_mass > 0.0 {
                let recall = overlap / gt_mass;
                if recall > PROB_CLIP {
                    d += t / overlap;
                }
                if i == 0 {
                    class_loss -= ln_clipped(recall);
                }
            }
            if not_gt > 0.0 {
                let specificity = neither / not_gt;
                if specificity > PROB_CLIP {
                    d -= (1.0 - t) / neither;
                }
                if i == 0 {
                    class_loss -= ln_clipped(specificity);
                }
            }
            d_mass[c * valid.len() + i] = -d;
        }
        loss += class_loss;
    }
    loss /= groups as f64;

    // Chain through the per-voxel softmax.
    let mut grad = vec![0.0f64; classes * voxels];
    for (i, &v) in valid.iter().enumerate() {
        for k in 0..classes {
            let p_k = probs[k * voxels + v];
            let mut acc = 0.0;
            for c in 0..groups {
                let dm = d_mass[c * valid.len() + i] / groups as f64;
                if dm == 0.0 {
                    continue;
                }
                // d mass_c / d logit_k for this voxel.
                let dx = match mode {
                    AffinityMode::Semantic => {
                        let p_c = probs[c * voxels + v];
                        p_c * (if c == k { 1.0 } else { 0.0 } - p_k)
                    }
                    AffinityMode::Geometric => {
                        let p_free = probs[v];
                        let d_free = p_free * (if k == 0 { 1.0 } else { 0.0 } - p_k);
                        if c == 0 {
                            d_free
                        } else {
                            -d_free
                        }
                    }
                };
                acc += dm * dx;
            }
            grad[k * voxels + v] = acc;
        }
    }
    Ok((loss, grad))
}

pub fn scal_loss(logits: &Tensor, gt: &LabelGrid, mode: AffinityMode) -> Result<f64> {
    scal_loss_with_grad(logits, gt, mode).map(|(l, _)| l)
}

/// `1 / ln(1.02 + class frequency)` from the grid's own label histogram;
/// ignored voxels do not count.
pub fn class_weights_from_labels(gt: &LabelGrid) -> Vec<f64> {
    let hist = gt.class_histogram();
    let total: u64 = hist.iter().sum();
    hist.iter()
        .map(|&n| {
            let freq = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            1.0 / (1.02 + freq).ln()
        })
        .collect()
}

/// Class-weighted cross entropy, averaged over non-ignored voxels.
pub fn weighted_ce_loss_with_grad(
    logits: &Tensor,
    gt: &LabelGrid,
    class_weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (classes, voxels) = check_logits_cover_grid(logits, gt)?;
    if class_weights.len() != classes {
        return Err(DiscError::Loss(format!(
            "{} class weights for {classes} classes",
            class_weights.len()
        )));
    }
    if class_weights.iter().any(|&w| w <= 0.0) {
        return Err(DiscError::Loss("class weights must be positive".into()));
    }
    let probs = softmax_probs(logits, classes, voxels);
    let mut loss = 0.0;
    let mut count = 0usize;
    for v in 0..voxels {
        let label = gt.labels()[v];
        if label == IGNORE_LABEL {
            continue;
        }
        count += 1;
        loss -= class_weights[label as usize] * ln_clipped(probs[label as usize * voxels + v]);
    }
    if count == 0 {
        return Err(DiscError::Loss("no voxels carry a supervised label".into()));
    }
    loss /= count as f64;

    let mut grad = vec![0.0f64; classes * voxels];
    for v in 0..voxels {
        let label = gt.labels()[v];
        if label == IGNORE_LABEL {
            continue;
        }
        let w = class_weights[label as usize] / count as f64;
        for k in 0..classes {
            let delta = if k == label as usize { 1.0 } else { 0.0 };
            grad[k * voxels + v] = w * (probs[k * voxels + v] - delta);
        }
    }
    Ok((loss, grad))
}

pub fn weighted_ce_loss(logits: &Tensor, gt: &LabelGrid, class_weights: &[f64]) -> Result<f64> {
    weighted_ce_loss_with_grad(logits, gt, class_weights).map(|(l, _)| l)
}

/// Soft dice loss `1 - 2Σpq / (Σp + Σq + ε)` over probabilities `p` and a
/// binary mask `q`.
pub fn dice_loss(probs: &[f64], mask: &[f64]) -> f64 {
    const EPS: f64 = 1e-6;
    let overlap: f64 = probs.iter().zip(mask).map(|(p, q)| p * q).sum();
    let total: f64 = probs.iter().sum::<f64>() + mask.iter().sum::<f64>();
    1.0 - 2.0 * overlap / (total + EPS)
}

/// Gradient of [`dice_loss`] with respect to the probabilities.
pub fn dice_grad_wrt_probs(probs: &[f64], mask: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let overlap: f64 = probs.iter().zip(mask).map(|(p, q)| p * q).sum();
    let denom: f64 = probs.iter().sum::<f64>() + mask.iter().sum::<f64>() + EPS;
    mask.iter()
        .map(|&q| -2.0 * (q * denom - overlap) / (denom * denom))
        .collect()
}

/// Per-plane segmentation loss: binary cross entropy plus dice, summed over
/// the two stream channels of `[2, X, Y]` logits against binary masks.
pub fn seg_loss_with_grad(logits: &Tensor, masks: &Tensor) -> Result<(f64, Vec<f64>)> {
    if logits.rank() != 3 || logits.shape()[0] != 2 {
        return Err(DiscError::Shape(format!(
            "segmentation logits must be [2, X, Y], got {:?}",
            logits.shape()
        )));
    }
    if masks.shape() != logits.shape() {
        return Err(DiscError::Shape(format!(
            "segmentation masks {:?} do not match logits {:?}",
            masks.shape(),
            logits.shape()
        )));
    }
    if masks.data().iter().any(|&q| q != 0.0 && q != 1.0) {
        return Err(DiscError::Loss("segmentation masks must be binary".into()));
    }
    let cells = logits.shape()[1] * logits.shape()[2];
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; 2 * cells];
    for stream in 0..2 {
        let z = &logits.data()[stream * cells..(stream + 1) * cells];
        let q: Vec<f64> = masks.data()[stream * cells..(stream + 1) * cells]
            .iter()
            .map(|&m| m as f64)
            .collect();
        let p: Vec<f64> = z.iter().map(|&l| 1.0 / (1.0 + (-(l as f64)).exp())).collect();

        let mut bce = 0.0;
        for (pi, qi) in p.iter().zip(&q) {
            bce -= qi * ln_clipped(*pi) + (1.0 - qi) * ln_clipped(1.0 - pi);
        }
        bce /= cells as f64;
        loss += bce + dice_loss(&p, &q);

        let d_dice = dice_grad_wrt_probs(&p, &q);
        for i in 0..cells {
            // BCE through the sigmoid contributes (p - q)/N; dice chains
            // through p(1-p).
            grad[stream * cells + i] =
                (p[i] - q[i]) / cells as f64 + d_dice[i] * p[i] * (1.0 - p[i]);
        }
    }
    Ok((loss, grad))
}

pub fn seg_loss(logits: &Tensor, masks: &Tensor) -> Result<f64> {
    seg_loss_with_grad(logits, masks).map(|(l, _)| l)
}

/// Binary focal loss over probabilities: mean of
/// `-α_t (1 - p_t)^γ ln p_t` with `p_t = p` on positive cells and `1 - p`
/// on negative ones. Gradient is with respect to the probabilities.
pub fn focal_loss_with_grad(
    pred: &Tensor,
    gt: &Tensor,
    alpha_pos: f64,
    alpha_neg: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != gt.shape() {
        return Err(DiscError::Shape(format!(
            "focal prediction {:?} vs target {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(DiscError::Loss("focal predictions must lie in [0, 1]".into()));
    }
    if gt.data().iter().any(|&q| q != 0.0 && q != 1.0) {
        return Err(DiscError::Loss("focal targets must be binary".into()));
    }
    let n = pred.numel();
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let positive = gt.data()[i] == 1.0;
        let p = (pred.data()[i] as f64).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let (p_t, alpha, sign) = if positive { (p, alpha_pos, 1.0) } else { (1.0 - p, alpha_neg, -1.0) };
        loss -= alpha * (1.0 - p_t).powf(gamma) * p_t.ln();
        // d/dp_t of -α(1-p_t)^γ ln p_t, then dp_t/dp = ±1.
        let d_pt = alpha
            * (gamma * (1.0 - p_t).powf(gamma - 1.0) * p_t.ln() - (1.0 - p_t).powf(gamma) / p_t);
        grad[i] = sign * d_pt / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Focal loss with the stack's defaults: positives weighted 0.25,
/// negatives 0.75, focusing exponent 2.
pub fn height_focal_loss_with_grad(pred: &Tensor, gt: &Tensor) -> Result<(f64, Vec<f64>)> {
    focal_loss_with_grad(pred, gt, 0.25, 0.75, 2.0)
}

pub fn height_focal_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    height_focal_loss_with_grad(pred, gt).map(|(l, _)| l)
}

/// Cross entropy between the per-pixel softmax of `[D, H, W]` depth logits
/// and the bin containing each ground-truth depth. Pixels with depth `<= 0`
/// carry no supervision; out-of-range depths clamp to the end bins.
pub fn depth_loss_with_grad(
    depth_logits: &Tensor,
    depth_gt: &Tensor,
    binning: &DepthBinning,
) -> Result<(f64, Vec<f64>)> {
    if depth_logits.rank() != 3 || depth_gt.rank() != 2 {
        return Err(DiscError::Shape(format!(
            "depth logits must be [D, H, W] with [H, W] ground truth, got {:?} and {:?}",
            depth_logits.shape(),
            depth_gt.shape()
        )));
    }
    let (bins, rows, cols) =
        (depth_logits.shape()[0], depth_logits.shape()[1], depth_logits.shape()[2]);
    if bins != binning.bins || depth_gt.shape() != [rows, cols] {
        return Err(DiscError::Shape(format!(
            "depth logits {:?} vs ground truth {:?} with {} bins",
            depth_logits.shape(),
            depth_gt.shape(),
            binning.bins
        )));
    }
    let pixels = rows * cols;
    let probs = softmax_probs(depth_logits, bins, pixels);
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut grad = vec![0.0f64; bins * pixels];
    for v in 0..pixels {
        let depth = depth_gt.data()[v];
        if depth <= 0.0 {
            continue;
        }
        count += 1;
        let bin = binning.bin_of(depth);
        loss -= ln_clipped(probs[bin * pixels + v]);
        for k in 0..bins {
            let delta = if k == bin { 1.0 } else { 0.0 };
            grad[k * pixels + v] = probs[k * pixels + v] - delta;
        }
    }
    if count == 0 {
        return Err(DiscError::Loss("no pixels carry a depth return".into()));
    }
    for g in &mut grad {
        *g /= count as f64;
    }
    Ok((loss / count as f64, grad))
}

pub fn depth_loss(depth_logits: &Tensor, depth_gt: &Tensor, binning: &DepthBinning) -> Result<f64> {
    depth_loss_with_grad(depth_logits, depth_gt, binning).map(|(l, _)| l)
}

/// One decoder layer's auxiliary loss values.
#[derive(Debug, Clone, Copy)]
pub struct AuxLossTerms {
    pub seg: f64,
    pub height: f64,
}

/// Named loss components in presentation order, rendering as one flat
/// `key=value` block.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    entries: Vec<(String, f64)>,
}

impl LossReport {
    fn push(&mut self, key: &str, value: f64) {
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

/// Combines every component into the training objective:
/// `λ_ssc·(affinity_geo + affinity_sem + ce) + λ_aug·Σ_l c_l·(seg_l + λ_h·height_l) + λ_d·depth`,
/// where `c_l` is 0.5 for every layer except the last (1.0). Returns the
/// scalar plus an itemized report whose entries recombine to it.
pub fn total_loss(
    scal_geo: f64,
    scal_sem: f64,
    ce: f64,
    per_layer: &[AuxLossTerms],
    depth: f64,
    w: &LossWeights,
) -> (f64, LossReport) {
    let mut report = LossReport::default();
    report.push("scal_geo", scal_geo);
    report.push("scal_sem", scal_sem);
    report.push("ce", ce);
    let ssc = scal_geo + scal_sem + ce;
    report.push("ssc", ssc);
    let mut aug = 0.0;
    for (l, terms) in per_layer.iter().enumerate() {
        let coef = if l + 1 == per_layer.len() { 1.0 } else { 0.5 };
        report.push(&format!("seg.layer{l}"), terms.seg);
        report.push(&format!("height.layer{l}"), terms.height);
        aug += coef * (terms.seg + w.lambda_height * terms.height);
    }
    report.push("aug", aug);
    report.push("depth", depth);
    let total = w.lambda_ssc * ssc + w.lambda_aug * aug + w.lambda_depth * depth;
    report.push("total", total);
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Central finite differences on an f32 tensor with an f64-valued loss.
    fn fd_check<F: Fn(&Tensor) -> f64>(loss: F, x: &Tensor, analytic: &[f64]) {
        const STEP: f32 = 1e-3;
        assert_eq!(x.numel(), analytic.len());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += STEP;
            let mut minus = x.clone();
            minus.data_mut()[i] -= STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * STEP as f64);
            let an = analytic[i];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-6 {
                continue;
            }
            let rel = (fd - an).abs() / scale;
            assert!(
                rel <= 1e-3,
                "coordinate {i}: finite difference {fd} vs analytic {an} (rel {rel})"
            );
        }
    }

    fn grid_from(labels: Vec<u8>, classes: u8) -> LabelGrid {
        let n = labels.len();
        LabelGrid::new([n, 1, 1], classes, labels).unwrap()
    }

    fn random_logits(rng: &mut crate::nn::SeedRng, classes: usize, voxels: usize) -> Tensor {
        Tensor::from_fn(&[classes, voxels, 1, 1], |_| rng.gen::<f32>() * 4.0 - 2.0)
    }

    fn one_hot_logits(gt: &LabelGrid, classes: usize, margin: f32) -> Tensor {
        let voxels = gt.labels().len();
        Tensor::from_fn(&[classes, voxels, 1, 1], |i| {
            let (k, v) = (i / voxels, i % voxels);
            if gt.labels()[v] as usize == k {
                margin
            } else {
                0.0
            }
        })
    }

    #[test]
    fn affinity_is_zero_for_confident_correct_predictions() {
        let gt = grid_from(vec![0, 1, 2, 1, 0], 3);
        let logits = one_hot_logits(&gt, 3, 40.0);
        assert!(scal_loss(&logits, &gt, AffinityMode::Semantic).unwrap() < 1e-6);
        assert!(scal_loss(&logits, &gt, AffinityMode::Geometric).unwrap() < 1e-6);
    }

    #[test]
    fn affinity_of_uniform_two_class_balanced_grid_is_three_ln_two() {
        let gt = grid_from(vec![0, 1, 0, 1], 2);
        let logits = Tensor::zeros(&[2, 4, 1, 1]);
        let loss = scal_loss(&logits, &gt, AffinityMode::Semantic).unwrap();
        assert_relative_eq!(loss, 3.0 * (2.0f64).ln(), epsilon = 1e-9);
        // The geometric view of a 2-class problem is the same computation.
        let geo = scal_loss(&logits, &gt, AffinityMode::Geometric).unwrap();
        assert_relative_eq!(geo, 3.0 * (2.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn affinity_is_nonnegative_and_finite_on_random_inputs() {
        let mut rng = seeded_rng(41);
        for trial in 0..30 {
            let classes = 2 + trial % 3;
            let labels: Vec<u8> = (0..6)
                .map(|_| {
                    if rng.gen::<f32>() < 0.15 {
                        IGNORE_LABEL
                    } else {
                        (rng.gen::<u32>() % classes as u32) as u8
                    }
                })
                .collect();
            if labels.iter().all(|&l| l == IGNORE_LABEL) {
                continue;
            }
            let gt = grid_from(labels, classes as u8);
            let logits = random_logits(&mut rng, classes, 6);
            for mode in [AffinityMode::Semantic, AffinityMode::Geometric] {
                let loss = scal_loss(&logits, &gt, mode).unwrap();
                assert!(loss.is_finite() && loss >= 0.0, "loss {loss}");
            }
        }
    }

    #[test]
    fn affinity_decreases_as_predictions_sharpen_toward_ground_truth() {
        let gt = grid_from(vec![0, 1, 2, 2, 1], 3);
        let mut last = f64::INFINITY;
        for step in 0..5 {
            // Margin grows => softmax sharpens from uniform toward one-hot.
            let logits = one_hot_logits(&gt, 3, 0.8 * step as f32);
            let loss = scal_loss(&logits, &gt, AffinityMode::Semantic).unwrap();
            if step > 0 {
                assert!(loss < last, "step {step}: {loss} !< {last}");
            }
            last = loss;
        }
    }

    #[test]
    fn affinity_gradients_match_finite_differences() {
        let mut rng = seeded_rng(42);
        let gt = grid_from(vec![0, 2, 1, 2, IGNORE_LABEL], 3);
        let logits = random_logits(&mut rng, 3, 5);
        for mode in [AffinityMode::Semantic, AffinityMode::Geometric] {
            let (_, grad) = scal_loss_with_grad(&logits, &gt, mode).unwrap();
            fd_check(|x| scal_loss(x, &gt, mode).unwrap(), &logits, &grad);
        }
    }

    #[test]
    fn affinity_requires_a_supervised_voxel_and_matching_shapes() {
        let gt = grid_from(vec![IGNORE_LABEL; 4], 2);
        let logits = Tensor::zeros(&[2, 4, 1, 1]);
        assert!(scal_loss(&logits, &gt, AffinityMode::Semantic).is_err());
        let gt = grid_from(vec![0, 1, 1, 0], 2);
        assert!(scal_loss(&Tensor::zeros(&[3, 4, 1, 1]), &gt, AffinityMode::Semantic).is_err());
        assert!(scal_loss(&Tensor::zeros(&[2, 5, 1, 1]), &gt, AffinityMode::Semantic).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        for classes in [2usize, 5, 9] {
            let gt = grid_from((0..classes as u8).collect(), classes as u8);
            let logits = Tensor::zeros(&[classes, classes, 1, 1]);
            let loss = weighted_ce_loss(&logits, &gt, &vec![1.0; classes]).unwrap();
            assert_relative_eq!(loss, (classes as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_linear_in_class_weights_and_ignores_masked_voxels() {
        let mut rng = seeded_rng(43);
        let gt = grid_from(vec![0, 1, IGNORE_LABEL, 1], 2);
        let logits = random_logits(&mut rng, 2, 4);
        let w1 = vec![0.7, 1.3];
        let w2 = vec![1.4, 2.6];
        let a = weighted_ce_loss(&logits, &gt, &w1).unwrap();
        let b = weighted_ce_loss(&logits, &gt, &w2).unwrap();
        assert_relative_eq!(b, 2.0 * a, epsilon = 1e-9);

        // The ignored voxel's logits must not matter.
        let mut other = logits.clone();
        other.data_mut()[2] += 10.0; // class 0, voxel 2
        assert_eq!(weighted_ce_loss(&other, &gt, &w1).unwrap(), a);
    }

    #[test]
    fn cross_entropy_near_zero_when_confidently_correct() {
        let gt = grid_from(vec![1, 0, 1], 2);
        let logits = one_hot_logits(&gt, 2, 20.0);
        assert!(weighted_ce_loss(&logits, &gt, &[1.0, 1.0]).unwrap() < 1e-3);
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = seeded_rng(44);
        let gt = grid_from(vec![2, 0, IGNORE_LABEL, 1, 1], 3);
        let logits = random_logits(&mut rng, 3, 5);
        let weights = class_weights_from_labels(&gt);
        let (_, grad) = weighted_ce_loss_with_grad(&logits, &gt, &weights).unwrap();
        fd_check(|x| weighted_ce_loss(x, &gt, &weights).unwrap(), &logits, &grad);
    }

    #[test]
    fn cross_entropy_validates_weights_and_supervision() {
        let gt = grid_from(vec![0, 1], 2);
        let logits = Tensor::zeros(&[2, 2, 1, 1]);
        assert!(weighted_ce_loss(&logits, &gt, &[1.0]).is_err());
        assert!(weighted_ce_loss(&logits, &gt, &[1.0, 0.0]).is_err());
        let masked = grid_from(vec![IGNORE_LABEL, IGNORE_LABEL], 2);
        assert!(weighted_ce_loss(&Tensor::zeros(&[2, 2, 1, 1]), &masked, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn class_weights_follow_the_log_frequency_recipe() {
        let gt = grid_from(vec![0, 0, 0, 1, IGNORE_LABEL], 2);
        let w = class_weights_from_labels(&gt);
        assert_relative_eq!(w[0], 1.0 / (1.02f64 + 0.75).ln(), epsilon = 1e-12);
        assert_relative_eq!(w[1], 1.0 / (1.02f64 + 0.25).ln(), epsilon = 1e-12);
        // Unseen classes get the largest finite weight.
        let gt = grid_from(vec![0, 0], 3);
        let w = class_weights_from_labels(&gt);
        assert_relative_eq!(w[1], 1.0 / (1.02f64).ln(), epsilon = 1e-12);
        assert!(w[1] > w[0]);
    }

    #[test]
    fn dice_hits_its_closed_form_anchors() {
        // Perfect match.
        assert_relative_eq!(dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]), 0.0, epsilon = 1e-6);
        // Fully disjoint.
        assert_relative_eq!(dice_loss(&[1.0, 1.0], &[0.0, 0.0]), 1.0, epsilon = 1e-6);
        // Half overlap: 1 - 2*1/(2+2).
        assert_relative_eq!(
            dice_loss(&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0]),
            0.5,
            epsilon = 1e-6
        );
    }

    #[test]
    fn seg_loss_saturated_perfect_prediction_is_tiny() {
        let masks = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let logits = masks.map(|q| if q == 1.0 { 30.0 } else { -30.0 });
        let loss = seg_loss(&logits, &masks).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn seg_loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(45);
        let masks = Tensor::from_fn(&[2, 3, 2], |_| if rng.gen::<f32>() < 0.5 { 0.0 } else { 1.0 });
        let logits = Tensor::from_fn(&[2, 3, 2], |_| rng.gen::<f32>() * 3.0 - 1.5);
        let (_, grad) = seg_loss_with_grad(&logits, &masks).unwrap();
        fd_check(|x| seg_loss(x, &masks).unwrap(), &logits, &grad);
    }

    #[test]
    fn seg_loss_rejects_nonbinary_masks() {
        let logits = Tensor::zeros(&[2, 2, 2]);
        let masks = Tensor::full(&[2, 2, 2], 0.5);
        assert!(seg_loss(&logits, &masks).is_err());
        assert!(seg_loss(&logits, &Tensor::zeros(&[2, 2, 3])).is_err());
    }

    #[test]
    fn focal_loss_is_zero_when_fully_confident_and_correct() {
        let pred = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]);
        let gt = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]);
        let loss = height_focal_loss(&pred, &gt).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn focal_loss_single_cell_plug_in_value() {
        let pred = Tensor::new(&[1, 1, 1], vec![0.5]);
        let gt = Tensor::new(&[1, 1, 1], vec![1.0]);
        let loss = height_focal_loss(&pred, &gt).unwrap();
        assert_relative_eq!(loss, 0.25 * 0.25 * (2.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn focal_loss_with_unit_alpha_and_zero_gamma_is_bce() {
        let mut rng = seeded_rng(46);
        let pred = Tensor::from_fn(&[3, 2, 1], |_| 0.1 + 0.8 * rng.gen::<f32>());
        let gt = Tensor::from_fn(&[3, 2, 1], |_| if rng.gen::<f32>() < 0.5 { 0.0 } else { 1.0 });
        let (loss, _) = focal_loss_with_grad(&pred, &gt, 1.0, 1.0, 0.0).unwrap();
        let mut bce = 0.0;
        for (p, q) in pred.data().iter().zip(gt.data()) {
            let p = *p as f64;
            bce -= if *q == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        assert_relative_eq!(loss, bce / 6.0, epsilon = 1e-9);
    }

    #[test]
    fn focal_loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(47);
        let pred = Tensor::from_fn(&[5, 1, 1], |_| 0.15 + 0.7 * rng.gen::<f32>());
        let gt = Tensor::from_fn(&[5, 1, 1], |_| if rng.gen::<f32>() < 0.5 { 0.0 } else { 1.0 });
        let (_, grad) = height_focal_loss_with_grad(&pred, &gt).unwrap();
        fd_check(|x| height_focal_loss(x, &gt).unwrap(), &pred, &grad);
    }

    #[test]
    fn focal_loss_validates_inputs() {
        let ok = Tensor::zeros(&[2, 1, 1]);
        assert!(height_focal_loss(&Tensor::full(&[2, 1, 1], 1.5), &ok).is_err());
        assert!(height_focal_loss(&ok, &Tensor::full(&[2, 1, 1], 0.5)).is_err());
        assert!(height_focal_loss(&ok, &Tensor::zeros(&[1, 1, 1])).is_err());
    }

    #[test]
    fn depth_loss_of_uniform_logits_is_ln_bins() {
        let binning = DepthBinning::new(0.5, 8.5, 8).unwrap();
        let logits = Tensor::zeros(&[8, 2, 2]);
        let gt = Tensor::full(&[2, 2], 3.0);
        let loss = depth_loss(&logits, &gt, &binning).unwrap();
        assert_relative_eq!(loss, (8.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn depth_loss_confident_correct_bins_score_near_zero() {
        let binning = DepthBinning::new(0.5, 4.5, 4).unwrap();
        let gt = Tensor::new(&[1, 3], vec![1.2, 2.7, 0.0]);
        let mut logits = Tensor::zeros(&[4, 1, 3]);
        // Pixel 0 -> bin 0, pixel 1 -> bin 2; pixel 2 is invalid.
        logits.set3(binning.bin_of(1.2), 0, 0, 30.0);
        logits.set3(binning.bin_of(2.7), 0, 1, 30.0);
        let loss = depth_loss(&logits, &gt, &binning).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
    }

    #[test]
    fn depth_loss_clamps_out_of_range_depths_to_end_bins() {
        let binning = DepthBinning::new(1.0, 5.0, 4).unwrap();
        let gt = Tensor::new(&[1, 2], vec![0.2, 9.0]);
        let mut logits = Tensor::zeros(&[4, 1, 2]);
        logits.set3(0, 0, 0, 25.0); // below range -> first bin
        logits.set3(3, 0, 1, 25.0); // beyond range -> last bin
        assert!(depth_loss(&logits, &gt, &binning).unwrap() < 1e-9);
    }

    #[test]
    fn depth_loss_needs_at_least_one_valid_pixel() {
        let binning = DepthBinning::new(0.5, 4.5, 4).unwrap();
        assert!(depth_loss(&Tensor::zeros(&[4, 1, 2]), &Tensor::zeros(&[1, 2]), &binning).is_err());
    }

    #[test]
    fn depth_loss_gradients_match_finite_differences() {
        let mut rng = seeded_rng(48);
        let binning = DepthBinning::new(0.5, 4.5, 4).unwrap();
        let logits = Tensor::from_fn(&[4, 1, 5], |_| rng.gen::<f32>() * 4.0 - 2.0);
        let gt = Tensor::new(&[1, 5], vec![0.7, 2.2, 0.0, 4.0, 1.4]);
        let (_, grad) = depth_loss_with_grad(&logits, &gt, &binning).unwrap();
        fd_check(|x| depth_loss(x, &gt, &binning).unwrap(), &logits, &grad);
    }

    #[test]
    fn total_loss_anchors_and_layer_discounting() {
        let w = LossWeights::default();
        let (zero, _) = total_loss(0.0, 0.0, 0.0, &[], 0.0, &w);
        assert_eq!(zero, 0.0);

        // Two layers with identical aux terms: 0.5a + a = 1.5a.
        let layers = vec![
            AuxLossTerms { seg: 0.4, height: 0.2 },
            AuxLossTerms { seg: 0.4, height: 0.2 },
        ];
        let a = 0.4 + 5.0 * 0.2;
        let (total, report) = total_loss(0.0, 0.0, 0.0, &layers, 0.0, &w);
        assert_relative_eq!(total, 1.5 * a, epsilon = 1e-12);
        assert_relative_eq!(report.get("aug").unwrap(), 1.5 * a, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_report_recombines_to_the_scalar() {
        let w = LossWeights::default();
        let layers = vec![
            AuxLossTerms { seg: 0.31, height: 0.12 },
            AuxLossTerms { seg: 0.27, height: 0.08 },
            AuxLossTerms { seg: 0.22, height: 0.05 },
        ];
        let (total, report) = total_loss(1.9, 2.7, 0.85, &layers, 4.1, &w);
        let ssc = report.get("scal_geo").unwrap()
            + report.get("scal_sem").unwrap()
            + report.get("ce").unwrap();
        assert_relative_eq!(ssc, report.get("ssc").unwrap(), epsilon = 1e-9);
        let recombined = w.lambda_ssc * report.get("ssc").unwrap()
            + w.lambda_aug * report.get("aug").unwrap()
            + w.lambda_depth * report.get("depth").unwrap();
        assert_relative_eq!(recombined, total, epsilon = 1e-6);
        assert_relative_eq!(report.get("total").unwrap(), total, epsilon = 1e-12);

        // Rendering is one flat key=value block that parses back exactly.
        for line in report.render().lines() {
            let (k, v) = line.split_once('=').unwrap();
            let parsed: f64 = v.parse().unwrap();
            assert_eq!(parsed, report.get(k).unwrap(), "key {k}");
        }
    }
}
