//! Loss terms: reverse Huber for depth, pixel-weighted cross entropy for
//! semantics, and their weighted assembly into the full training objective.

use ndarray::{Array3, Array4, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::datasets::IGNORE_LABEL;
use crate::error::{CordaError, Result};
use crate::model::ModelOutput;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the source depth terms.
    pub alpha_source: f64,
    /// Weight of the target depth terms.
    pub alpha_target: f64,
    /// berHu threshold as a fraction of the per-call maximum |error|.
    pub berhu_c_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_source: 0.01,
            alpha_target: 0.001,
            berhu_c_fraction: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_source < 0.0 || self.alpha_target < 0.0 {
            return Err(CordaError::config("depth loss weights must be >= 0"));
        }
        if !(self.berhu_c_fraction > 0.0 && self.berhu_c_fraction <= 1.0) {
            return Err(CordaError::config("berhu_c_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Reverse Huber penalty for a single residual, given the threshold `c`:
/// `|e|` when `|e| <= c`, else `(e^2 + c^2) / (2c)`. Continuous at `|e| = c`.
pub fn berhu_pointwise(e: f64, c: f64) -> f64 {
    let a = e.abs();
    if a <= c {
        a
    } else {
        (e * e + c * c) / (2.0 * c)
    }
}

/// Derivative of [`berhu_pointwise`] w.r.t. `e` with `c` held constant.
pub fn berhu_pointwise_grad(e: f64, c: f64) -> f64 {
    let a = e.abs();
    if a <= c {
        e.signum() * f64::from(u8::from(e != 0.0))
    } else {
        e / c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BerhuResult {
    pub loss: f64,
    /// Threshold actually used: `c_fraction * max |error|` over valid pixels.
    pub threshold: f64,
    pub valid_count: usize,
    /// Set when no valid pixel existed; the loss is 0 in that case.
    pub all_invalid: bool,
}

fn berhu_impl(
    pred: &ArrayView3<'_, f32>,
    target: &ArrayView3<'_, f32>,
    valid: &ArrayView3<'_, bool>,
    c_fraction: f64,
    mut grad: Option<&mut Array3<f32>>,
) -> Result<BerhuResult> {
    if pred.dim() != target.dim() || pred.dim() != valid.dim() {
        return Err(CordaError::contract(format!(
            "berhu shapes differ: pred {:?}, target {:?}, valid {:?}",
            pred.dim(),
            target.dim(),
            valid.dim()
        )));
    }
    if !(c_fraction > 0.0 && c_fraction <= 1.0) {
        return Err(CordaError::contract("berhu c fraction must be in (0, 1]"));
    }

    let mut max_abs = 0.0f64;
    let mut count = 0usize;
    for ((&p, &t), &v) in pred.iter().zip(target.iter()).zip(valid.iter()) {
        if !p.is_finite() || !t.is_finite() {
            return Err(CordaError::contract("berhu input contains non-finite values"));
        }
        if v {
            count += 1;
            max_abs = max_abs.max((p as f64 - t as f64).abs());
        }
    }
    if count == 0 {
        if let Some(g) = grad.as_mut() {
            g.fill(0.0);
        }
        return Ok(BerhuResult {
            loss: 0.0,
            threshold: 0.0,
            valid_count: 0,
            all_invalid: true,
        });
    }

    let c = c_fraction * max_abs;
    let inv_n = 1.0 / count as f64;
    let mut loss = 0.0f64;
    match grad {
        Some(g) => {
            ndarray::azip!((g in g, &p in pred, &t in target, &v in valid) {
                if v {
                    let e = p as f64 - t as f64;
                    loss += berhu_pointwise(e, c);
                    *g = (berhu_pointwise_grad(e, c) * inv_n) as f32;
                } else {
                    *g = 0.0;
                }
            });
        }
        None => {
            ndarray::azip!((&p in pred, &t in target, &v in valid) {
                if v {
                    loss += berhu_pointwise(p as f64 - t as f64, c);
                }
            });
        }
    }

    Ok(BerhuResult {
        loss: loss * inv_n,
        threshold: c,
        valid_count: count,
        all_invalid: false,
    })
}

/// Mean reverse-Huber loss over valid pixels. The threshold is recomputed per
/// call as `c_fraction * max |pred - target|` and treated as a constant for
/// gradients.
pub fn berhu(
    pred: &ArrayView3<'_, f32>,
    target: &ArrayView3<'_, f32>,
    valid: &ArrayView3<'_, bool>,
    c_fraction: f64,
) -> Result<BerhuResult> {
    berhu_impl(pred, target, valid, c_fraction, None)
}

/// [`berhu`] plus the gradient w.r.t. `pred`.
pub fn berhu_with_grad(
    pred: &ArrayView3<'_, f32>,
    target: &ArrayView3<'_, f32>,
    valid: &ArrayView3<'_, bool>,
    c_fraction: f64,
) -> Result<(BerhuResult, Array3<f32>)> {
    let mut grad = Array3::<f32>::zeros(pred.dim());
    let res = berhu_impl(pred, target, valid, c_fraction, Some(&mut grad))?;
    Ok((res, grad))
}

fn check_ce_inputs(
    logits_dim: (usize, usize, usize, usize),
    labels: &ArrayView3<'_, u8>,
    weights: &ArrayView3<'_, f32>,
    ignore_index: u8,
) -> Result<()> {
    let (b, c, h, w) = logits_dim;
    if labels.dim() != (b, h, w) || weights.dim() != (b, h, w) {
        return Err(CordaError::contract(format!(
            "cross entropy shapes differ: logits {logits_dim:?}, labels {:?}, weights {:?}",
            labels.dim(),
            weights.dim()
        )));
    }
    for &l in labels.iter() {
        if l != ignore_index && l as usize >= c {
            return Err(CordaError::contract(format!(
                "label {l} out of range for {c} classes"
            )));
        }
    }
    for &w in weights.iter() {
        if !(0.0..=1.0).contains(&w) {
            return Err(CordaError::contract(format!("pixel weight {w} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Pixel-weighted softmax cross entropy, normalized by the number of
/// non-ignored pixels (weights do not change the normalizer, so the loss is
/// exactly linear in the weight map).
pub fn weighted_cross_entropy_batch(
    logits: &Array4<f32>,
    labels: &ArrayView3<'_, u8>,
    weights: &ArrayView3<'_, f32>,
    ignore_index: u8,
) -> Result<f64> {
    ce_impl(logits, labels, weights, ignore_index, None)
}

/// [`weighted_cross_entropy_batch`] plus the gradient w.r.t. the logits.
pub fn weighted_cross_entropy_with_grad(
    logits: &Array4<f32>,
    labels: &ArrayView3<'_, u8>,
    weights: &ArrayView3<'_, f32>,
    ignore_index: u8,
) -> Result<(f64, Array4<f32>)> {
    let mut grad = Array4::<f32>::zeros(logits.dim());
    let loss = ce_impl(logits, labels, weights, ignore_index, Some(&mut grad))?;
    Ok((loss, grad))
}

fn ce_impl(
    logits: &Array4<f32>,
    labels: &ArrayView3<'_, u8>,
    weights: &ArrayView3<'_, f32>,
    ignore_index: u8,
    mut grad: Option<&mut Array4<f32>>,
) -> Result<f64> {
    check_ce_inputs(logits.dim(), labels, weights, ignore_index)?;
    let (b, c, h, w) = logits.dim();
    let hw = h * w;
    let logit_slice = logits.as_slice().expect("logits standard layout");
    let label_slice = labels.to_slice();
    let weight_slice = weights.to_slice();

    let mut n_counted = 0usize;
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f32; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let (label, weight) = match (&label_slice, &weight_slice) {
                (Some(ls), Some(ws)) => (ls[bi * hw + px], ws[bi * hw + px]),
                _ => {
                    let (y, x) = (px / w, px % w);
                    (labels[[bi, y, x]], weights[[bi, y, x]])
                }
            };
            if label == ignore_index {
                continue;
            }
            n_counted += 1;

            let mut max = f32::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logit_slice[base + ci * hw + px]);
            }
            let mut denom = 0.0f32;
            for ci in 0..c {
                let e = (logit_slice[base + ci * hw + px] - max).exp();
                probs[ci] = e;
                denom += e;
            }
            let lse = max as f64 + (denom as f64).ln();
            loss += weight as f64 * (lse - logit_slice[base + label as usize * hw + px] as f64);

            if let Some(g) = grad.as_mut() {
                let g_slice = g.as_slice_mut().expect("grad standard layout");
                let inv = 1.0 / denom;
                for ci in 0..c {
                    let p = probs[ci] * inv;
                    let delta = f32::from(u8::from(ci == label as usize));
                    g_slice[base + ci * hw + px] = weight * (p - delta);
                }
            }
        }
    }

    if n_counted == 0 {
        if let Some(g) = grad.as_mut() {
            g.fill(0.0);
        }
        return Ok(0.0);
    }
    let inv_n = 1.0 / n_counted as f64;
    if let Some(g) = grad.as_mut() {
        let s = inv_n as f32;
        g.mapv_inplace(|v| v * s);
    }
    Ok(loss * inv_n)
}

/// Spec-surface form on a single image (`logits: [C, H, W]`).
pub fn weighted_cross_entropy(
    logits: &ArrayView3<'_, f32>,
    labels: &ArrayView2<'_, u8>,
    weights: &ArrayView2<'_, f32>,
    ignore_index: u8,
) -> Result<f64> {
    let (c, h, w) = logits.dim();
    let logits4 = logits.to_owned().into_shape_with_order((1, c, h, w)).expect("standard layout");
    let labels3 = labels.to_owned().into_shape_with_order((1, h, w)).expect("standard layout");
    let weights3 = weights.to_owned().into_shape_with_order((1, h, w)).expect("standard layout");
    weighted_cross_entropy_batch(&logits4, &labels3.view(), &weights3.view(), ignore_index)
}

/// The eight terms of the training objective plus their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub seg_init_src: f64,
    pub seg_init_tgt: f64,
    pub depth_init_src: f64,
    pub depth_init_tgt: f64,
    pub seg_final_src: f64,
    pub seg_final_tgt: f64,
    pub depth_final_src: f64,
    pub depth_final_tgt: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combine already-computed terms:
    /// total = seg terms + alpha_source * source depth + alpha_target * target depth.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        seg_init_src: f64,
        seg_init_tgt: f64,
        depth_init_src: f64,
        depth_init_tgt: f64,
        seg_final_src: f64,
        seg_final_tgt: f64,
        depth_final_src: f64,
        depth_final_tgt: f64,
        weights: &LossWeights,
    ) -> Self {
        let total = seg_init_src
            + seg_init_tgt
            + seg_final_src
            + seg_final_tgt
            + weights.alpha_source * (depth_init_src + depth_final_src)
            + weights.alpha_target * (depth_init_tgt + depth_final_tgt);
        LossBreakdown {
            seg_init_src,
            seg_init_tgt,
            depth_init_src,
            depth_init_tgt,
            seg_final_src,
            seg_final_tgt,
            depth_final_src,
            depth_final_tgt,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.seg_init_src,
            self.seg_init_tgt,
            self.depth_init_src,
            self.depth_init_tgt,
            self.seg_final_src,
            self.seg_final_tgt,
            self.depth_final_src,
            self.depth_final_tgt,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub const CSV_FIELDS: [&'static str; 9] = [
        "seg_init_src",
        "seg_init_tgt",
        "depth_init_src",
        "depth_init_tgt",
        "seg_final_src",
        "seg_final_tgt",
        "depth_final_src",
        "depth_final_tgt",
        "total",
    ];

    pub fn csv_values(&self) -> [f64; 9] {
        [
            self.seg_init_src,
            self.seg_init_tgt,
            self.depth_init_src,
            self.depth_init_tgt,
            self.seg_final_src,
            self.seg_final_tgt,
            self.depth_final_src,
            self.depth_final_tgt,
            self.total,
        ]
    }
}

/// Assemble the full objective from one source and one target forward pass.
///
/// The pixel weight map `w_tgt` applies to both target segmentation terms;
/// depth terms use only pixels with valid (pseudo) depth.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    out_src: &ModelOutput,
    out_tgt: &ModelOutput,
    labels_src: &ArrayView3<'_, u8>,
    depth_src_inv: &ArrayView3<'_, f32>,
    valid_src: &ArrayView3<'_, bool>,
    pseudo_tgt: &ArrayView3<'_, u8>,
    w_tgt: &ArrayView3<'_, f32>,
    depth_tgt_inv: &ArrayView3<'_, f32>,
    valid_tgt: &ArrayView3<'_, bool>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate().map_err(|e| CordaError::contract(e.to_string()))?;
    let ones_src = Array3::<f32>::ones(labels_src.dim());
    let seg_init_src =
        weighted_cross_entropy_batch(&out_src.sem_init, labels_src, &ones_src.view(), IGNORE_LABEL)?;
    let seg_final_src =
        weighted_cross_entropy_batch(&out_src.sem_final, labels_src, &ones_src.view(), IGNORE_LABEL)?;
    let seg_init_tgt = weighted_cross_entropy_batch(&out_tgt.sem_init, pseudo_tgt, w_tgt, IGNORE_LABEL)?;
    let seg_final_tgt = weighted_cross_entropy_batch(&out_tgt.sem_final, pseudo_tgt, w_tgt, IGNORE_LABEL)?;

    let c = weights.berhu_c_fraction;
    let depth_init_src = berhu(&out_src.depth_init.view(), depth_src_inv, valid_src, c)?.loss;
    let depth_final_src = berhu(&out_src.depth_final.view(), depth_src_inv, valid_src, c)?.loss;
    let depth_init_tgt = berhu(&out_tgt.depth_init.view(), depth_tgt_inv, valid_tgt, c)?.loss;
    let depth_final_tgt = berhu(&out_tgt.depth_final.view(), depth_tgt_inv, valid_tgt, c)?.loss;

    Ok(LossBreakdown::assemble(
        seg_init_src,
        seg_init_tgt,
        depth_init_src,
        depth_init_tgt,
        seg_final_src,
        seg_final_tgt,
        depth_final_src,
        depth_final_tgt,
        weights,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn all_valid(dim: (usize, usize, usize)) -> Array3<bool> {
        Array3::from_elem(dim, true)
    }

    #[test]
    fn berhu_zero_when_pred_equals_target() {
        let p = array![[[0.3f32, 0.7], [0.1, 0.9]]];
        let v = all_valid(p.dim());
        let r = berhu(&p.view(), &p.view(), &v.view(), 0.2).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(!r.all_invalid);
    }

    #[test]
    fn berhu_single_pixel_hand_case() {
        // e = 0.5 forces c = 0.1; quadratic branch: (0.25 + 0.01) / 0.2 = 1.3.
        let p = array![[[0.5f32]]];
        let t = array![[[0.0f32]]];
        let v = all_valid(p.dim());
        let r = berhu(&p.view(), &t.view(), &v.view(), 0.2).unwrap();
        assert!((r.loss - 1.3).abs() < 1e-6, "loss = {}", r.loss);
        assert!((r.threshold - 0.1).abs() < 1e-9);
    }

    #[test]
    fn berhu_two_pixel_hand_case() {
        // e = {0.1, 1.0}: c = 0.2; |0.1| <= c -> 0.1; 1.0 -> (1 + 0.04)/0.4 = 2.6.
        let p = array![[[0.1f32, 1.0]]];
        let t = array![[[0.0f32, 0.0]]];
        let v = all_valid(p.dim());
        let r = berhu(&p.view(), &t.view(), &v.view(), 0.2).unwrap();
        assert!((r.loss - 1.35).abs() < 1e-6, "loss = {}", r.loss);
    }

    #[test]
    fn berhu_all_invalid_returns_zero_with_flag() {
        let p = array![[[0.5f32, 0.2]]];
        let t = array![[[0.0f32, 0.0]]];
        let v = Array3::from_elem(p.dim(), false);
        let r = berhu(&p.view(), &t.view(), &v.view(), 0.2).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.all_invalid);
    }

    #[test]
    fn berhu_rejects_nan() {
        let p = array![[[f32::NAN]]];
        let t = array![[[0.0f32]]];
        let v = all_valid(p.dim());
        assert!(matches!(
            berhu(&p.view(), &t.view(), &v.view(), 0.2),
            Err(CordaError::Contract(_))
        ));
    }

    #[test]
    fn berhu_rejects_shape_mismatch() {
        let p = Array3::<f32>::zeros((1, 2, 2));
        let t = Array3::<f32>::zeros((1, 2, 3));
        let v = all_valid((1, 2, 2));
        assert!(berhu(&p.view(), &t.view(), &v.view(), 0.2).is_err());
    }

    #[test]
    fn berhu_continuous_at_threshold() {
        // Exact jump across the kink is 2*eps + eps^2/(2c); continuity means
        // it matches 2*eps up to that quadratic term.
        let eps = 1e-6;
        for &c in &[0.1, 0.37, 1.0] {
            let below = berhu_pointwise(c - eps, c);
            let above = berhu_pointwise(c + eps, c);
            assert!(((above - below) - 2.0 * eps).abs() <= 1e-9, "c={c}");
        }
    }

    #[test]
    fn berhu_gradient_matches_finite_difference_frozen_c() {
        let c = 0.25f64;
        for &e in &[-0.9, -0.3, -0.1, 0.05, 0.2, 0.6, 1.4] {
            let h = 1e-6;
            let fd = (berhu_pointwise(e + h, c) - berhu_pointwise(e - h, c)) / (2.0 * h);
            let an = berhu_pointwise_grad(e, c);
            assert!((fd - an).abs() < 1e-4, "e={e}: fd={fd} an={an}");
        }
    }

    #[test]
    fn ce_uniform_logits_equal_ln_c() {
        let logits = Array4::<f32>::zeros((1, 5, 3, 3));
        let labels = Array3::<u8>::from_elem((1, 3, 3), 2);
        let weights = Array3::<f32>::ones((1, 3, 3));
        let loss = weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-6, "loss = {loss}");
    }

    #[test]
    fn ce_saturated_correct_logits_vanish() {
        let mut logits = Array4::<f32>::zeros((1, 3, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                logits[[0, 1, y, x]] = 50.0;
            }
        }
        let labels = Array3::<u8>::from_elem((1, 2, 2), 1);
        let weights = Array3::<f32>::ones((1, 2, 2));
        let loss = weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn ce_zero_weights_annihilate() {
        let mut logits = Array4::<f32>::zeros((1, 4, 2, 2));
        logits[[0, 0, 0, 0]] = 3.0;
        let labels = Array3::<u8>::from_elem((1, 2, 2), 1);
        let weights = Array3::<f32>::zeros((1, 2, 2));
        let loss = weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ce_linear_in_weights() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut logits = Array4::<f32>::zeros((1, 4, 4, 4));
        for v in logits.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let labels = Array3::<u8>::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 4) as u8);
        let w1 = Array3::<f32>::from_shape_fn((1, 4, 4), |(_, y, x)| ((y * 4 + x) as f32) / 16.0);
        let lambda = 0.375f32;
        let w2 = w1.mapv(|v| v * lambda);
        let l1 = weighted_cross_entropy_batch(&logits, &labels.view(), &w1.view(), IGNORE_LABEL).unwrap();
        let l2 = weighted_cross_entropy_batch(&logits, &labels.view(), &w2.view(), IGNORE_LABEL).unwrap();
        assert!((l2 - lambda as f64 * l1).abs() < 1e-9);
    }

    #[test]
    fn ce_ignores_ignore_index() {
        let mut logits = Array4::<f32>::zeros((1, 3, 1, 2));
        logits[[0, 2, 0, 0]] = 9.0; // would be a large loss for label 0
        let mut labels = Array3::<u8>::from_elem((1, 1, 2), 0);
        labels[[0, 0, 0]] = IGNORE_LABEL;
        let weights = Array3::<f32>::ones((1, 1, 2));
        let with_ignored =
            weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
        // Only the second pixel counts: uniform logits over 3 classes.
        assert!((with_ignored - 3.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let logits = Array4::<f32>::zeros((1, 3, 1, 1));
        let labels = Array3::<u8>::from_elem((1, 1, 1), 3);
        let weights = Array3::<f32>::ones((1, 1, 1));
        assert!(matches!(
            weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL),
            Err(CordaError::Contract(_))
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut logits = Array4::<f32>::zeros((1, 5, 3, 3));
        for v in logits.iter_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        let labels = Array3::<u8>::from_shape_fn((1, 3, 3), |(_, y, x)| ((y * 3 + x) % 5) as u8);
        let weights = Array3::<f32>::from_shape_fn((1, 3, 3), |(_, y, x)| 0.1 + 0.08 * (y * 3 + x) as f32);
        let (_, grad) =
            weighted_cross_entropy_with_grad(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
        let h = 5e-3f32;
        for &idx in &[[0usize, 0, 0, 0], [0, 3, 1, 2], [0, 4, 2, 2], [0, 2, 1, 1]] {
            let orig = logits[idx];
            logits[idx] = orig + h;
            let up = weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
            logits[idx] = orig - h;
            let down = weighted_cross_entropy_batch(&logits, &labels.view(), &weights.view(), IGNORE_LABEL).unwrap();
            logits[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grad[idx] as f64;
            assert!(
                (fd - an).abs() < 1e-4 * an.abs().max(1.0),
                "idx {idx:?}: fd={fd} an={an}"
            );
        }
    }

    #[test]
    fn breakdown_total_follows_weighting() {
        let w = LossWeights {
            alpha_source: 0.5,
            alpha_target: 0.25,
            berhu_c_fraction: 0.2,
        };
        let b = LossBreakdown::assemble(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, &w);
        let expect = 1.0 + 2.0 + 5.0 + 6.0 + 0.5 * (3.0 + 7.0) + 0.25 * (4.0 + 8.0);
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_alphas_reduce_total_to_seg_terms() {
        let w = LossWeights {
            alpha_source: 0.0,
            alpha_target: 0.0,
            berhu_c_fraction: 0.2,
        };
        let b = LossBreakdown::assemble(1.0, 2.0, 30.0, 40.0, 5.0, 6.0, 70.0, 80.0, &w);
        assert!((b.total - 14.0).abs() < 1e-12);
    }
}
