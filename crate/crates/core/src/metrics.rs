//! Confusion matrices, IoU and prediction aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;

/// Row sums of aggregated distributions must be within this of 1.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both labels and predictions.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub excluded: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every point where `mask` is true (or all points without a mask).
    pub fn update(&mut self, labels: &[usize], predictions: &[usize], mask: Option<&[bool]>) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::shape("confusion update", labels.len(), predictions.len()));
        }
        if let Some(m) = mask {
            if m.len() != labels.len() {
                return Err(Error::shape("confusion mask", labels.len(), m.len()));
            }
        }
        let k = self.num_classes;
        if let Some(&bad) = labels.iter().chain(predictions).find(|&&c| c >= k) {
            return Err(Error::ClassOutOfRange {
                index: bad as i64,
                num_classes: k,
            });
        }
        for (i, (&t, &p)) in labels.iter().zip(predictions).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                self.counts[t * k + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("confusion merge", self.num_classes, other.num_classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k = TP / (TP + FP + FN)`; zero-denominator classes are excluded.
    pub fn iou(&self) -> IouReport {
        let k = self.num_classes;
        let mut per_class = Vec::with_capacity(k);
        let mut excluded = Vec::new();
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
            let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
            let denom = row + col - tp;
            if denom == 0 {
                per_class.push(None);
                excluded.push(c);
            } else {
                per_class.push(Some(tp as f64 / denom as f64));
            }
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport {
            per_class,
            miou,
            excluded,
        }
    }
}

/// Row-wise argmax with ties resolved toward the lower class index.
pub fn argmax_rows(m: &Mat) -> (Vec<usize>, Vec<f64>) {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            (best, row[best])
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub probs: Mat,
    pub predictions: Vec<usize>,
}

/// Elementwise mean of two distributions and its argmax.
pub fn aggregate(a: &Mat, b: &Mat) -> Result<Aggregate> {
    if a.dim() != b.dim() {
        return Err(Error::shape("aggregate", a.dim(), b.dim()));
    }
    for (name, m) in [("first", a), ("second", b)] {
        for (i, row) in m.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > SIMPLEX_TOLERANCE || row.iter().any(|&v| v < 0.0) {
                return Err(Error::invariant(
                    "aggregate",
                    format!("row {i} of the {name} input is not a distribution (sum {s})"),
                ));
            }
        }
    }
    let probs = (a + b) * 0.5;
    let (predictions, _) = argmax_rows(&probs);
    Ok(Aggregate { probs, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn update_examples() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 0, 1], &[0, 1, 1], None).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 1));
        let before = cm.clone();
        cm.update(&[1, 1], &[0, 0], Some(&[false, false])).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(cm.update(&[2], &[0], None), Err(Error::ClassOutOfRange { index: 2, .. })));
        assert!(cm.update(&[0], &[0, 1], None).is_err());
    }

    #[test]
    fn iou_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 0, 1], &[0, 1, 1], None).unwrap();
        let r = cm.iou();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5), None]);
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.excluded, vec![2]);

        let mut diag = ConfusionMatrix::new(2);
        diag.update(&[0, 1, 1], &[0, 1, 1], None).unwrap();
        assert_eq!(diag.iou().miou, 1.0);
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap();
        assert_eq!(r.probs, array![[0.5, 0.5]]);
        assert_eq!(r.predictions, vec![0]);
        let r = aggregate(&array![[0.8, 0.2]], &array![[0.4, 0.6]]).unwrap();
        assert!((r.probs[[0, 0]] - 0.6).abs() < 1e-12);
        assert_eq!(r.predictions, vec![0]);
        let same = array![[0.3, 0.7], [0.9, 0.1]];
        assert_eq!(aggregate(&same, &same).unwrap().probs, same);
        assert!(aggregate(&array![[0.5, 0.6]], &array![[0.5, 0.5]]).is_err());
    }

    proptest! {
        #[test]
        fn update_is_additive(pairs in proptest::collection::vec((0usize..4, 0usize..4), 0..40), split in 0usize..40) {
            let (labels, preds): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let cut = split.min(labels.len());
            let mut whole = ConfusionMatrix::new(4);
            whole.update(&labels, &preds, None).unwrap();
            let mut a = ConfusionMatrix::new(4);
            a.update(&labels[..cut], &preds[..cut], None).unwrap();
            let mut b = ConfusionMatrix::new(4);
            b.update(&labels[cut..], &preds[cut..], None).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, whole);
        }

        #[test]
        fn iou_is_permutation_covariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..40), shift in 1usize..4) {
            let perm = |c: usize| (c + shift) % 4;
            let (labels, preds): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut cm = ConfusionMatrix::new(4);
            cm.update(&labels, &preds, None).unwrap();
            let mut pm = ConfusionMatrix::new(4);
            let pl: Vec<_> = labels.iter().map(|&c| perm(c)).collect();
            let pp: Vec<_> = preds.iter().map(|&c| perm(c)).collect();
            pm.update(&pl, &pp, None).unwrap();
            let (r, rp) = (cm.iou(), pm.iou());
            for c in 0..4 {
                prop_assert_eq!(r.per_class[c], rp.per_class[perm(c)]);
            }
            prop_assert!((r.miou - rp.miou).abs() < 1e-12);
        }

        #[test]
        fn aggregate_stays_on_simplex(a in proptest::collection::vec(0.01f64..1.0, 3), b in proptest::collection::vec(0.01f64..1.0, 3)) {
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); Mat::from_shape_fn((1, 3), |(_, j)| v[j] / s) };
            let r = aggregate(&norm(&a), &norm(&b)).unwrap();
            prop_assert!((r.probs.sum() - 1.0).abs() < 1e-12);
            prop_assert!(r.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
