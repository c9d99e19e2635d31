//! Per-class IoU and mean IoU (full set and subset) over an accumulated
//! confusion matrix.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{CordaError, Result};

/// C x C counts; rows are ground truth, columns are predictions. Ignored
/// pixels are never counted.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(CordaError::contract("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Accumulate one prediction/ground-truth pair.
    pub fn update(&mut self, pred: &ArrayView2<'_, u8>, gt: &ArrayView2<'_, u8>, ignore_index: u8) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(CordaError::contract(format!(
                "confusion update shapes differ: pred {:?} vs gt {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if g == ignore_index {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(CordaError::contract(format!(
                    "class id out of range: gt {g}, pred {p}, classes {c}"
                )));
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Sum another matrix into this one (accumulation is associative).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes() != other.num_classes() {
            return Err(CordaError::contract("cannot merge confusion matrices of different size"));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// IoU per class: `diag / (row + col - diag)`. `None` marks classes absent
    /// from both ground truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.num_classes();
        (0..c)
            .map(|i| {
                let tp = self.counts[[i, i]];
                let row: u64 = self.counts.row(i).sum();
                let col: u64 = self.counts.column(i).sum();
                let denom = row + col - tp;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over defined classes, optionally restricted to a subset.
    pub fn mean_iou(&self, subset: Option<&[usize]>) -> Result<f64> {
        let ious = self.iou_per_class();
        let c = self.num_classes();
        let selected: Vec<usize> = match subset {
            Some(ids) => {
                for &id in ids {
                    if id >= c {
                        return Err(CordaError::contract(format!(
                            "subset class {id} out of range for {c} classes"
                        )));
                    }
                }
                ids.to_vec()
            }
            None => (0..c).collect(),
        };
        let defined: Vec<f64> = selected.iter().filter_map(|&i| ious[i]).collect();
        if defined.is_empty() {
            return Err(CordaError::contract("no class with defined IoU in the selected set"));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Evaluation summary serialized to JSON.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `null` entries mark classes absent from both gt and prediction.
    pub iou_per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub subset_class_ids: Vec<usize>,
    pub miou_subset: f64,
}

impl EvalReport {
    pub fn from_confusion(conf: &ConfusionMatrix, class_names: &[String], subset: &[usize]) -> Result<Self> {
        Ok(EvalReport {
            class_names: class_names.to_vec(),
            iou_per_class: conf.iou_per_class(),
            miou: conf.mean_iou(None)?,
            subset_class_ids: subset.to_vec(),
            miou_subset: conf.mean_iou(Some(subset))?,
        })
    }

    /// Render the per-class table the CLI prints.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let name_w = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!("{:<name_w$}  IoU\n", "class"));
        for (name, iou) in self.class_names.iter().zip(&self.iou_per_class) {
            match iou {
                Some(v) => out.push_str(&format!("{name:<name_w$}  {:.4}\n", v)),
                None => out.push_str(&format!("{name:<name_w$}  --\n")),
            }
        }
        out.push_str(&format!("{:<name_w$}  {:.4}\n", "mIoU", self.miou));
        out.push_str(&format!(
            "{:<name_w$}  {:.4}  (classes {:?})\n",
            "mIoU*", self.miou_subset, self.subset_class_ids
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions_only_fill_diagonal() {
        let gt = array![[0u8, 1], [2, 1]];
        let mut conf = ConfusionMatrix::new(3);
        conf.update(&gt.view(), &gt.view(), 255).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(conf.counts()[[i, j]], 0);
                }
            }
        }
        assert_eq!(conf.mean_iou(None).unwrap(), 1.0);
    }

    #[test]
    fn ignored_gt_leaves_matrix_unchanged() {
        let gt = Array2::<u8>::from_elem((2, 2), 255);
        let pred = Array2::<u8>::zeros((2, 2));
        let mut conf = ConfusionMatrix::new(2);
        conf.update(&pred.view(), &gt.view(), 255).unwrap();
        assert_eq!(conf.counts().sum(), 0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        // gt = [0,0;1,1], pred = [0,1;1,1]
        let gt = array![[0u8, 0], [1, 1]];
        let pred = array![[0u8, 1], [1, 1]];
        let mut conf = ConfusionMatrix::new(2);
        conf.update(&pred.view(), &gt.view(), 255).unwrap();
        assert_eq!(conf.counts()[[0, 0]], 1);
        assert_eq!(conf.counts()[[0, 1]], 1);
        assert_eq!(conf.counts()[[1, 1]], 2);
        assert_eq!(conf.counts()[[1, 0]], 0);
    }

    #[test]
    fn iou_hand_case() {
        // conf = [[1,1],[0,2]] -> IoU_0 = 1/2, IoU_1 = 2/3, mIoU = 7/12.
        let conf = ConfusionMatrix::from_counts(array![[1u64, 1], [0, 2]]).unwrap();
        let ious = conf.iou_per_class();
        assert!((ious[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((ious[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((conf.mean_iou(None).unwrap() - 7.0 / 12.0).abs() < 1e-12);
        assert!((conf.mean_iou(Some(&[1])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let conf = ConfusionMatrix::from_counts(array![[4u64, 0, 0], [1, 3, 0], [0, 0, 0]]).unwrap();
        let ious = conf.iou_per_class();
        assert!(ious[2].is_none());
        let miou = conf.mean_iou(None).unwrap();
        let expect = (4.0 / 5.0 + 3.0 / 4.0) / 2.0;
        assert!((miou - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_effective_set_errors() {
        let conf = ConfusionMatrix::new(3);
        assert!(conf.mean_iou(None).is_err());
        let conf = ConfusionMatrix::from_counts(array![[1u64, 0], [0, 0]]).unwrap();
        assert!(conf.mean_iou(Some(&[1])).is_err());
    }

    #[test]
    fn subset_out_of_range_rejected() {
        let conf = ConfusionMatrix::from_counts(array![[1u64]]).unwrap();
        assert!(matches!(conf.mean_iou(Some(&[1])), Err(CordaError::Contract(_))));
    }

    #[test]
    fn accumulation_order_independent() {
        let a_gt = array![[0u8, 1]];
        let a_pr = array![[1u8, 1]];
        let b_gt = array![[1u8, 0]];
        let b_pr = array![[1u8, 0]];
        let mut c1 = ConfusionMatrix::new(2);
        c1.update(&a_pr.view(), &a_gt.view(), 255).unwrap();
        c1.update(&b_pr.view(), &b_gt.view(), 255).unwrap();
        let mut c2 = ConfusionMatrix::new(2);
        c2.update(&b_pr.view(), &b_gt.view(), 255).unwrap();
        c2.update(&a_pr.view(), &a_gt.view(), 255).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn duplicating_samples_preserves_iou() {
        let gt = array![[0u8, 1], [1, 0]];
        let pred = array![[0u8, 0], [1, 0]];
        let mut once = ConfusionMatrix::new(2);
        once.update(&pred.view(), &gt.view(), 255).unwrap();
        let mut twice = ConfusionMatrix::new(2);
        twice.update(&pred.view(), &gt.view(), 255).unwrap();
        twice.update(&pred.view(), &gt.view(), 255).unwrap();
        assert_eq!(once.iou_per_class(), twice.iou_per_class());
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt = array![[0u8, 1], [2, 1]];
        let pred = array![[0u8, 2], [2, 1]];
        let mut joint = ConfusionMatrix::new(3);
        joint.update(&pred.view(), &gt.view(), 255).unwrap();
        joint.update(&gt.view(), &gt.view(), 255).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.update(&pred.view(), &gt.view(), 255).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.update(&gt.view(), &gt.view(), 255).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
    }
}
