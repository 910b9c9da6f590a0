//! Segmentation metrics: IoU, mean IoU and Precision@X.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Recorded in every report: how masks that are empty on both sides count.
pub const EMPTY_MASK_CONVENTION: &str =
    "iou of two empty masks is 1; empty against non-empty is 0; precision counts iou strictly above X";

/// Pixel is foreground iff its logit is strictly positive.
pub fn binarize<T: Scalar>(logits: &Tensor<T>) -> Tensor<f32> {
    Tensor::new(
        logits.shape(),
        logits.data().iter().map(|&v| if v > T::zero() { 1.0 } else { 0.0 }).collect(),
    )
    .expect("same extents")
}

/// Intersection and union pixel counts of two binary masks (value > 0.5 is
/// foreground).
pub fn overlap_counts(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "iou",
            format!("mask extents differ: {:?} vs {:?}", pred.shape(), gt.shape()),
        ));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((inter, union))
}

pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let (inter, union) = overlap_counts(pred, gt)?;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("metrics need at least one mask pair".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

pub fn miou(pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let ious = pairs.iter().map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
    mean(&ious)
}

/// Fraction of IoUs strictly above each threshold.
pub fn pr_from_ious(ious: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if ious.is_empty() {
        return Err(Error::Contract("metrics need at least one mask pair".into()));
    }
    Ok(thresholds
        .iter()
        .map(|&x| (x, ious.iter().filter(|&&v| v > x).count() as f64 / ious.len() as f64))
        .collect())
}

pub fn pr_at_x(pairs: &[(Tensor<f32>, Tensor<f32>)], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let ious = pairs.iter().map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?;
    pr_from_ious(&ious, thresholds)
}

pub fn threshold_key(x: f64) -> String {
    format!("{x:.1}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub convention: String,
    pub miou: f64,
    /// Precision@X keyed by `X` formatted with one decimal.
    pub pr: BTreeMap<String, f64>,
    pub ious: Vec<f64>,
}

impl MetricReport {
    pub fn from_ious(ious: Vec<f64>) -> Result<Self> {
        let miou = mean(&ious)?;
        let pr = pr_from_ious(&ious, &PR_THRESHOLDS)?
            .into_iter()
            .map(|(x, v)| (threshold_key(x), v))
            .collect();
        Ok(Self {
            convention: EMPTY_MASK_CONVENTION.to_string(),
            miou,
            pr,
            ious,
        })
    }

    pub fn from_pairs(pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<Self> {
        Self::from_ious(pairs.iter().map(|(p, g)| iou(p, g)).collect::<Result<Vec<_>>>()?)
    }

    pub fn pr_at(&self, x: f64) -> Option<f64> {
        self.pr.get(&threshold_key(x)).copied()
    }
}
