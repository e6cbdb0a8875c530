//! Segmentation metrics: per-class and mean IoU, pixel accuracy, mean class
//! accuracy, and the superpixel majority-vote oracle upper bound.
//!
//! All metrics are computed from one dataset-level confusion matrix; pixels
//! whose ground truth is IGNORE are excluded everywhere.

use crate::imagecore::{LabelMap, IGNORE};
use crate::superpixel::Superpixelization;
use crate::{Error, Result};

/// C x C counts; rows are ground truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.width != truth.width || pred.height != truth.height {
            return Err(Error::Dimension(
                "prediction and truth dimensions differ".into(),
            ));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE {
                continue;
            }
            if p == IGNORE || p as usize >= self.num_classes || t as usize >= self.num_classes {
                return Err(Error::Data(format!(
                    "label out of range: pred {p}, truth {t}, C {}",
                    self.num_classes
                )));
            }
            self.counts[t as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge; used to combine per-image matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|j| self.count(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|i| self.count(i, c)).sum()
    }

    /// IoU for class c; None when the class appears in neither prediction nor
    /// truth (zero union).
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        let tp = self.count(c, c);
        let union = self.row_sum(c) + self.col_sum(c) - tp;
        if union == 0 {
            None
        } else {
            Some(tp as f64 / union as f64)
        }
    }

    /// Mean IoU over classes with non-zero union.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.num_classes)
            .filter_map(|c| self.class_iou(c))
            .collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.num_classes).map(|c| self.count(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Mean over classes of per-class recall; classes with no truth pixels are
    /// excluded.
    pub fn mean_class_accuracy(&self) -> Result<f64> {
        let accs: Vec<f64> = (0..self.num_classes)
            .filter_map(|c| {
                let row = self.row_sum(c);
                if row == 0 {
                    None
                } else {
                    Some(self.count(c, c) as f64 / row as f64)
                }
            })
            .collect();
        if accs.is_empty() {
            return Err(Error::Data("confusion matrix has no truth pixels".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// Aligned text table plus a machine-readable key-value block.
    pub fn report(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>8} {:>10}\n", "class", "iou", "accuracy"));
        for c in 0..self.num_classes {
            let name = class_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("class{c}"));
            let iou = self
                .class_iou(c)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into());
            let row = self.row_sum(c);
            let acc = if row == 0 {
                "-".into()
            } else {
                format!("{:.4}", self.count(c, c) as f64 / row as f64)
            };
            out.push_str(&format!("{name:<16} {iou:>8} {acc:>10}\n"));
        }
        out.push('\n');
        out.push_str(&format!("mean_iou={:.6}\n", self.mean_iou()));
        if let Ok(pa) = self.pixel_accuracy() {
            out.push_str(&format!("pixel_accuracy={pa:.6}\n"));
        }
        if let Ok(mca) = self.mean_class_accuracy() {
            out.push_str(&format!("mean_class_accuracy={mca:.6}\n"));
        }
        out
    }
}

/// Majority-vote label per superpixel projected back to pixels, scored as
/// pixel accuracy against the truth. This bounds every piecewise-constant
/// prediction on the same superpixelization.
pub fn oracle_upper_bound(sp: &Superpixelization, truth: &LabelMap) -> Result<f64> {
    if sp.width != truth.width || sp.height != truth.height {
        return Err(Error::Dimension(
            "superpixelization and truth dimensions differ".into(),
        ));
    }
    let c = truth.num_classes;
    let mut hist = vec![0u64; sp.count() * c];
    for (idx, &id) in sp.ids.iter().enumerate() {
        let t = truth.data[idx];
        if t != IGNORE {
            hist[id as usize * c + t as usize] += 1;
        }
    }
    let majority: Vec<Option<u8>> = (0..sp.count())
        .map(|s| {
            let row = &hist[s * c..(s + 1) * c];
            let best = row.iter().enumerate().max_by(|a, b| {
                a.1.cmp(b.1).then(b.0.cmp(&a.0)) // ties to lowest class id
            });
            match best {
                Some((cls, &n)) if n > 0 => Some(cls as u8),
                _ => None,
            }
        })
        .collect();
    let mut correct = 0u64;
    let mut total = 0u64;
    for (idx, &id) in sp.ids.iter().enumerate() {
        let t = truth.data[idx];
        if t == IGNORE {
            continue;
        }
        total += 1;
        if majority[id as usize] == Some(t) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no evaluated pixels (all IGNORE)".into()));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(w: usize, h: usize, c: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(w, h, c, data).unwrap()
    }

    #[test]
    fn perfect_prediction_diagonal() {
        let truth = lm(2, 2, 3, vec![0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.count(1, 1), 2);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.mean_iou(), 1.0);
        assert_eq!(cm.mean_class_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn all_ignore_truth_leaves_matrix_unchanged() {
        let truth = lm(2, 1, 2, vec![IGNORE, IGNORE]);
        let pred = lm(2, 1, 2, vec![0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn small_example_counts() {
        let truth = lm(2, 1, 2, vec![0, 1]);
        let pred = lm(2, 1, 2, vec![1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 1), 1);
    }

    #[test]
    fn iou_hand_example() {
        // class 0: 10 TP, 5 FN, 0 FP -> 10/15
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..10 {
            cm.accumulate(&lm(1, 1, 2, vec![0]), &lm(1, 1, 2, vec![0]))
                .unwrap();
        }
        for _ in 0..5 {
            cm.accumulate(&lm(1, 1, 2, vec![1]), &lm(1, 1, 2, vec![0]))
                .unwrap();
        }
        let iou = cm.class_iou(0).unwrap();
        assert!((iou - 10.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let truth = lm(2, 1, 3, vec![1, 1]);
        let pred = lm(2, 1, 3, vec![2, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &truth).unwrap();
        assert_eq!(cm.class_iou(1), Some(0.0));
        assert_eq!(cm.class_iou(2), Some(0.0));
        assert_eq!(cm.class_iou(0), None); // absent everywhere: excluded
    }

    #[test]
    fn imbalanced_accuracy_example() {
        // 90% class 0 all correct, class 1 all wrong
        let mut cm = ConfusionMatrix::new(2);
        for _ in 0..9 {
            cm.accumulate(&lm(1, 1, 2, vec![0]), &lm(1, 1, 2, vec![0]))
                .unwrap();
        }
        cm.accumulate(&lm(1, 1, 2, vec![0]), &lm(1, 1, 2, vec![1]))
            .unwrap();
        assert!((cm.pixel_accuracy().unwrap() - 0.9).abs() < 1e-12);
        assert!((cm.mean_class_accuracy().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn oracle_majority_on_single_superpixel() {
        let sp = Superpixelization::from_id_map(10, 1, vec![0; 10]).unwrap();
        let mut data = vec![0u8; 6];
        data.extend(vec![1u8; 4]);
        let truth = lm(10, 1, 2, data);
        let acc = oracle_upper_bound(&sp, &truth).unwrap();
        assert!((acc - 0.6).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_exact_on_aligned_superpixels() {
        let ids = vec![0, 0, 1, 1];
        let sp = Superpixelization::from_id_map(4, 1, ids).unwrap();
        let truth = lm(4, 1, 2, vec![0, 0, 1, 1]);
        assert_eq!(oracle_upper_bound(&sp, &truth).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        let a = lm(2, 1, 2, vec![0, 1]);
        let b = lm(1, 2, 2, vec![0, 1]);
        assert!(cm.accumulate(&a, &b).is_err());
    }
}
