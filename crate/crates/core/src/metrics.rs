//! Confusion counting and the derived change-detection scores.

use std::ops::{Add, AddAssign};

use ndarray::{ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, pred: u8, gt: u8) {
        match (pred != 0, gt != 0) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over two equally shaped binary maps (any nonzero value is "changed").
pub fn confusion<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(shape_err(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let mut counts = ConfusionCounts::default();
    ndarray::Zip::from(&pred).and(&gt).for_each(|&p, &g| counts.record(p, g));
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub oa: f64,
    pub kappa: f64,
    pub iou: f64,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Set when neither the prediction nor the ground truth contains a
    /// changed pixel, in which case F1 and IoU are reported as 1.
    #[serde(default)]
    pub no_positives: bool,
}

/// Harmonic mean `2 / (1/pre + 1/rec)`, 0 when either is 0.
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        2.0 / (1.0 / precision + 1.0 / recall)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Scores from globally accumulated counts.
    ///
    /// Degenerate denominators: precision and recall are 0 when undefined;
    /// with no positives anywhere F1 and IoU are 1 and `no_positives` is set;
    /// when chance agreement is 1, kappa is 1 for perfect accuracy and 0 otherwise.
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let ConfusionCounts { tp, tn, fp, fn_ } = c;
        let total = c.total();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let no_positives = tp + fp + fn_ == 0;
        let (f1, iou) = if no_positives {
            (1.0, 1.0)
        } else {
            (f1_from_precision_recall(precision, recall), ratio(tp, tp + fn_ + fp))
        };
        let oa = ratio(tp + tn, total);
        let t2 = (total as f64).powi(2);
        let chance = if total == 0 {
            1.0
        } else {
            ((tp + fn_) as f64 * (tp + fp) as f64 + (tn + fp) as f64 * (tn + fn_) as f64) / t2
        };
        let kappa = if (1.0 - chance).abs() <= f64::EPSILON {
            if oa == 1.0 || total == 0 { 1.0 } else { 0.0 }
        } else {
            (oa - chance) / (1.0 - chance)
        };
        Self { f1, precision, recall, oa, kappa, iou, tp, tn, fp, fn_, no_positives }
    }

    pub fn counts(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, tn: self.tn, fp: self.fp, fn_: self.fn_ }
    }

    /// JSON document with keys `f1, precision, recall, oa, kappa, iou, tp, tn, fp, fn`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "oa": self.oa,
            "kappa": self.kappa,
            "iou": self.iou,
            "tp": self.tp,
            "tn": self.tn,
            "fp": self.fp,
            "fn": self.fn_,
            "no_positives": self.no_positives,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let num = |k: &str| v.get(k).and_then(|x| x.as_f64()).ok_or_else(|| missing(k));
        let int = |k: &str| v.get(k).and_then(|x| x.as_u64()).ok_or_else(|| missing(k));
        Ok(Self {
            f1: num("f1")?,
            precision: num("precision")?,
            recall: num("recall")?,
            oa: num("oa")?,
            kappa: num("kappa")?,
            iou: num("iou")?,
            tp: int("tp")?,
            tn: int("tn")?,
            fp: int("fp")?,
            fn_: int("fn")?,
            no_positives: v.get("no_positives").and_then(|x| x.as_bool()).unwrap_or(false),
        })
    }

    pub const CSV_HEADER: &'static str = "f1,precision,recall,oa,kappa,iou,tp,tn,fp,fn";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{},{}",
            self.f1, self.precision, self.recall, self.oa, self.kappa, self.iou, self.tp, self.tn, self.fp, self.fn_
        )
    }
}

fn missing(key: &str) -> crate::Error {
    crate::Error::Config(format!("metrics document lacks `{key}`"))
}

pub fn report(counts: ConfusionCounts) -> MetricsReport {
    MetricsReport::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};

    #[test]
    fn enumerated_counts() {
        let c = confusion(arr1(&[1u8, 1, 0, 0]).view(), arr1(&[1u8, 0, 1, 0]).view()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, tn: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn all_changed_agreement() {
        let ones = Array2::from_elem((4, 4), 1u8);
        let c = confusion(ones.view(), ones.view()).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 16, ..Default::default() });
        let r = report(c);
        assert_eq!((r.f1, r.oa, r.iou, r.kappa), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn perfect_prediction_with_both_classes() {
        let r = report(ConfusionCounts { tp: 10, tn: 30, fp: 0, fn_: 0 });
        assert_eq!((r.f1, r.oa, r.iou, r.kappa), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn iou_arithmetic() {
        let r = report(ConfusionCounts { tp: 3, tn: 10, fp: 1, fn_: 1 });
        assert!((r.iou - 0.6).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(confusion(a.view(), b.view()).is_err());
    }

    #[test]
    fn degenerate_sentinels() {
        let r = report(ConfusionCounts { tp: 0, tn: 9, fp: 0, fn_: 0 });
        assert!(r.no_positives);
        assert_eq!((r.precision, r.f1, r.kappa), (0.0, 1.0, 1.0));

        let r = report(ConfusionCounts { tp: 0, tn: 5, fp: 0, fn_: 4 });
        assert!(!r.no_positives);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn json_roundtrip() {
        let r = report(ConfusionCounts { tp: 7, tn: 80, fp: 3, fn_: 2 });
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
    }
}
