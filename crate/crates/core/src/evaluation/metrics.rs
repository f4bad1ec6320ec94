//! Per-image metric kernels on probability maps.
//!
//! Predictions are binarised with `p > threshold`, labels with `y > 0.5`;
//! the positive class is "defocus".

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{DbdError, Result};

/// Label binarisation threshold.
pub const LABEL_THRESHOLD: f64 = 0.5;

fn check_shapes(pred: &ArrayView2<'_, f32>, label: &ArrayView2<'_, f32>) -> Result<()> {
    if pred.dim() != label.dim() {
        return Err(DbdError::Dimension(format!(
            "prediction {:?} and label {:?} differ in shape",
            pred.dim(),
            label.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count(
        pred: ArrayView2<'_, f32>,
        label: ArrayView2<'_, f32>,
        threshold: f64,
    ) -> Result<Self> {
        check_shapes(&pred, &label)?;
        let mut c = Self::default();
        Zip::from(&pred).and(&label).for_each(|&p, &y| {
            match (p as f64 > threshold, y as f64 > LABEL_THRESHOLD) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        });
        Ok(c)
    }

    pub fn add(&mut self, other: &Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// No predicted and no labelled positives.
    pub fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// `TP / (TP + FP)`; an empty denominator gives 0, or 1 when both sides are empty.
    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.both_empty() => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    /// `TP / (TP + FN)`; an empty denominator gives 0, or 1 when both sides are empty.
    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.both_empty() => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    /// `(1 + b2) P R / (b2 P + R)`, 0 when `P = R = 0`.
    pub fn fbeta(&self, beta_squared: f64) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        let p = self.precision();
        let r = self.recall();
        let denom = beta_squared * p + r;
        if denom == 0.0 {
            0.0
        } else {
            (1.0 + beta_squared) * p * r / denom
        }
    }

    /// `TP / (TP + FP + FN)`, 1 when both sides are empty.
    pub fn iou(&self) -> f64 {
        if self.both_empty() {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp + self.fn_) as f64
        }
    }
}

/// Mean absolute difference over pixels.
pub fn mae(pred: ArrayView2<'_, f32>, label: ArrayView2<'_, f32>) -> Result<f64> {
    check_shapes(&pred, &label)?;
    if pred.is_empty() {
        return Err(DbdError::Dimension("cannot score an empty map".into()));
    }
    let mut sum = 0.0f64;
    Zip::from(&pred)
        .and(&label)
        .for_each(|&p, &y| sum += (p as f64 - y as f64).abs());
    Ok(sum / pred.len() as f64)
}

pub fn fbeta(
    pred: ArrayView2<'_, f32>,
    label: ArrayView2<'_, f32>,
    beta_squared: f64,
    threshold: f64,
) -> Result<f64> {
    Ok(Confusion::count(pred, label, threshold)?.fbeta(beta_squared))
}

pub fn iou(pred: ArrayView2<'_, f32>, label: ArrayView2<'_, f32>, threshold: f64) -> Result<f64> {
    Ok(Confusion::count(pred, label, threshold)?.iou())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(DbdError::Argument(
            "PR curve needs at least one threshold".into(),
        ));
    }
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(DbdError::Argument(
            "PR thresholds must lie in [0, 1]".into(),
        ));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DbdError::Argument(
            "PR thresholds must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// `0, 0.01, ..., 1`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Confusion counts per threshold, summed over all images.
pub fn pr_counts(
    preds: &[Array2<f32>],
    labels: &[Array2<f32>],
    thresholds: &[f64],
) -> Result<Vec<Confusion>> {
    check_thresholds(thresholds)?;
    if preds.is_empty() {
        return Err(DbdError::EmptyDataset("PR curve over no images".into()));
    }
    if preds.len() != labels.len() {
        return Err(DbdError::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![Confusion::default(); thresholds.len()];
    for (p, y) in preds.iter().zip(labels) {
        for (c, &t) in counts.iter_mut().zip(thresholds) {
            c.add(&Confusion::count(p.view(), y.view(), t)?);
        }
    }
    Ok(counts)
}

/// Micro-averaged PR curve: counts are summed over images before dividing.
pub fn pr_curve(
    preds: &[Array2<f32>],
    labels: &[Array2<f32>],
    thresholds: &[f64],
) -> Result<PrCurve> {
    Ok(curve_from_counts(
        &pr_counts(preds, labels, thresholds)?,
        thresholds,
    ))
}

pub fn curve_from_counts(counts: &[Confusion], thresholds: &[f64]) -> PrCurve {
    PrCurve {
        thresholds: thresholds.to_vec(),
        precision: counts.iter().map(Confusion::precision).collect(),
        recall: counts.iter().map(Confusion::recall).collect(),
    }
}
