//! Pseudo-label refinement from adaptation difficulty.
//!
//! The two domain-specific depth decoders are run on the same target image;
//! where they disagree the domain gap is assumed large and the semantic
//! pseudo-label weight drops towards zero:
//! `delta = |f_src - f_tgt|`, `w = relu(1 - delta / d_tgt)`.

use ndarray::{Array2, ArrayView2};

use crate::error::{CordaError, Result};

/// Per-pixel pseudo-label weights derived from depth-decoder discrepancy.
#[derive(Debug, Clone)]
pub struct WeightMap {
    /// Weight in [0, 1]; 1 where no discrepancy evidence exists.
    pub w: Array2<f32>,
    /// Absolute decoder discrepancy.
    pub delta: Array2<f32>,
    /// Pixels with usable pseudo depth.
    pub valid: Array2<bool>,
}

impl WeightMap {
    pub fn mean_weight(&self) -> f64 {
        let n = self.w.len().max(1);
        self.w.iter().map(|&v| v as f64).sum::<f64>() / n as f64
    }

    pub fn zero_fraction(&self) -> f64 {
        let n = self.w.len().max(1);
        self.w.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64
    }
}

/// Elementwise absolute difference between the two decoders' predictions on
/// one target image. Symmetric in its arguments.
pub fn depth_discrepancy(pred_src: &ArrayView2<'_, f32>, pred_tgt: &ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    if pred_src.dim() != pred_tgt.dim() {
        return Err(CordaError::contract(format!(
            "discrepancy shapes differ: {:?} vs {:?}",
            pred_src.dim(),
            pred_tgt.dim()
        )));
    }
    let mut out = Array2::<f32>::zeros(pred_src.dim());
    ndarray::azip!((o in &mut out, &a in pred_src, &b in pred_tgt) *o = (a - b).abs());
    Ok(out)
}

/// Turn a discrepancy map into pseudo-label weights.
///
/// `d_tgt` is the pseudo ground-truth *inverse* depth (the same space the
/// decoders predict in); `epsilon` guards the division where it approaches 0.
/// Invalid pixels carry no discrepancy evidence and keep weight 1; they are
/// excluded from depth losses separately. No gradient flows through this
/// computation.
pub fn difficulty_weights(
    delta: &ArrayView2<'_, f32>,
    d_tgt: &ArrayView2<'_, f32>,
    valid: &ArrayView2<'_, bool>,
    epsilon: f32,
) -> Result<WeightMap> {
    if delta.dim() != d_tgt.dim() || delta.dim() != valid.dim() {
        return Err(CordaError::contract(format!(
            "difficulty weight shapes differ: delta {:?}, d_tgt {:?}, valid {:?}",
            delta.dim(),
            d_tgt.dim(),
            valid.dim()
        )));
    }
    if epsilon <= 0.0 {
        return Err(CordaError::contract("epsilon must be > 0"));
    }
    if delta.iter().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(CordaError::contract("delta must be non-negative and finite"));
    }

    let mut w = Array2::<f32>::zeros(delta.dim());
    ndarray::azip!((w in &mut w, &d in delta, &gt in d_tgt, &v in valid) {
        *w = if v {
            (1.0 - d / (gt + epsilon)).max(0.0)
        } else {
            1.0
        };
    });
    Ok(WeightMap {
        w,
        delta: delta.to_owned(),
        valid: valid.to_owned(),
    })
}

pub const DEFAULT_EPSILON: f32 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_predictions_give_zero_delta() {
        let p = array![[0.2f32, 0.8], [0.5, 0.1]];
        let d = depth_discrepancy(&p.view(), &p.view()).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discrepancy_is_absolute_difference_and_symmetric() {
        let a = array![[3.0f32]];
        let b = array![[5.0f32]];
        let ab = depth_discrepancy(&a.view(), &b.view()).unwrap();
        let ba = depth_discrepancy(&b.view(), &a.view()).unwrap();
        assert_eq!(ab[[0, 0]], 2.0);
        assert_eq!(ab, ba);
    }

    #[test]
    fn discrepancy_rejects_shape_mismatch() {
        let a = Array2::<f32>::zeros((2, 2));
        let b = Array2::<f32>::zeros((2, 3));
        assert!(matches!(
            depth_discrepancy(&a.view(), &b.view()),
            Err(CordaError::Contract(_))
        ));
    }

    #[test]
    fn zero_delta_gives_weight_one() {
        let delta = Array2::<f32>::zeros((2, 2));
        let d_tgt = Array2::<f32>::from_elem((2, 2), 0.6);
        let valid = Array2::from_elem((2, 2), true);
        let wm = difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), DEFAULT_EPSILON).unwrap();
        assert!(wm.w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn delta_equal_to_depth_gives_weight_near_zero() {
        let delta = array![[0.7f32]];
        let d_tgt = array![[0.7f32]];
        let valid = array![[true]];
        let wm = difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), DEFAULT_EPSILON).unwrap();
        assert!(wm.w[[0, 0]] < 1e-5);
    }

    #[test]
    fn half_delta_hand_case() {
        // delta = 0.5 * d, d = 0.8, eps = 1e-6 -> w = 1 - 0.4/(0.8 + 1e-6),
        // a hair above 0.5 because epsilon shrinks the ratio.
        let delta = array![[0.4f32]];
        let d_tgt = array![[0.8f32]];
        let valid = array![[true]];
        let wm = difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), 1e-6).unwrap();
        let expect = 1.0 - 0.4f64 / (0.8 + 1e-6);
        assert!((wm.w[[0, 0]] as f64 - expect).abs() < 1e-6, "w = {}", wm.w[[0, 0]]);
    }

    #[test]
    fn invalid_pixels_get_weight_one() {
        let delta = array![[5.0f32, 5.0]];
        let d_tgt = array![[0.0f32, 1.0]];
        let valid = array![[false, true]];
        let wm = difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), DEFAULT_EPSILON).unwrap();
        assert_eq!(wm.w[[0, 0]], 1.0);
        assert_eq!(wm.w[[0, 1]], 0.0);
    }

    #[test]
    fn weights_always_in_unit_interval() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let delta = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..3.0f32));
            let d_tgt = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0f32));
            let valid = Array2::from_shape_fn((4, 4), |_| rng.random_range(0.0..1.0f32) > 0.2);
            let wm = difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), DEFAULT_EPSILON).unwrap();
            assert!(wm.w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn monotone_in_delta_and_depth() {
        let valid = array![[true]];
        let eval = |delta: f32, d: f32| {
            difficulty_weights(&array![[delta]].view(), &array![[d]].view(), &valid.view(), DEFAULT_EPSILON)
                .unwrap()
                .w[[0, 0]]
        };
        assert!(eval(0.1, 0.8) >= eval(0.2, 0.8));
        assert!(eval(0.2, 0.9) >= eval(0.2, 0.5));
    }

    #[test]
    fn negative_delta_rejected() {
        let delta = array![[-0.1f32]];
        let d_tgt = array![[0.5f32]];
        let valid = array![[true]];
        assert!(matches!(
            difficulty_weights(&delta.view(), &d_tgt.view(), &valid.view(), DEFAULT_EPSILON),
            Err(CordaError::Contract(_))
        ));
    }
}
