//! One-pass-evaluation scoring: per-frame overlap and center error,
//! turned into Success and Precision numbers (each the exact area under
//! the corresponding threshold curve, which collapses to a closed-form
//! mean — the test suite checks this against dense threshold sweeps).

use crate::error::{Error, Result};
use crate::geom::{center_distance, iou3d, Box3D};
use std::collections::BTreeMap;

/// Success: the area under the curve of `fraction(overlap > t)` for
/// thresholds `t` in [0, 1], scaled to [0, 100]. That integral equals
/// the mean overlap exactly.
pub fn success_score(overlaps: &[f64]) -> Result<f64> {
    if overlaps.is_empty() {
        return Err(Error::invalid("cannot score an empty evaluation"));
    }
    for &o in overlaps {
        if !(0.0..=1.0).contains(&o) {
            return Err(Error::invalid(format!("overlap {o} outside [0, 1]")));
        }
    }
    Ok(100.0 * overlaps.iter().sum::<f64>() / overlaps.len() as f64)
}

/// Precision: the area under the curve of `fraction(error < t)` for
/// thresholds `t` in [0, 2] meters, scaled to [0, 100]. That integral
/// equals `mean((2 - min(error, 2)) / 2)` exactly.
pub fn precision_score(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("cannot score an empty evaluation"));
    }
    for &e in errors {
        if !(e >= 0.0) || !e.is_finite() {
            return Err(Error::invalid(format!("center error {e} must be finite and >= 0")));
        }
    }
    let mean: f64 = errors.iter().map(|&e| (2.0 - e.min(2.0)) / 2.0).sum::<f64>()
        / errors.len() as f64;
    Ok(100.0 * mean)
}

/// Per-frame comparison of a prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEval {
    pub overlap: f64,
    pub error: f64,
}

/// Score aligned prediction/ground-truth box lists frame by frame.
pub fn evaluate_frames(pred: &[Box3D], gt: &[Box3D]) -> Result<Vec<FrameEval>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction count {} does not match ground-truth count {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| FrameEval {
            overlap: iou3d(p, g),
            error: center_distance(p, g),
        })
        .collect())
}

/// Scores of one category.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CategoryOpe {
    pub category: String,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

/// Full evaluation summary: per-category scores plus the frame-weighted
/// overall numbers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OpeSummary {
    pub categories: Vec<CategoryOpe>,
    pub frames: usize,
    pub success: f64,
    pub precision: f64,
}

/// Aggregate per-sequence frame evaluations into category and overall
/// scores. Every frame counts once, so the overall numbers are weighted
/// by frame count, not by sequence or category.
pub fn summarize(per_sequence: &[(String, Vec<FrameEval>)]) -> Result<OpeSummary> {
    let mut by_category: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all_overlaps = Vec::new();
    let mut all_errors = Vec::new();
    for (category, evals) in per_sequence {
        let slot = by_category.entry(category.as_str()).or_default();
        for e in evals {
            slot.0.push(e.overlap);
            slot.1.push(e.error);
            all_overlaps.push(e.overlap);
            all_errors.push(e.error);
        }
    }
    if all_overlaps.is_empty() {
        return Err(Error::invalid("no frames to summarize"));
    }
    let mut categories = Vec::with_capacity(by_category.len());
    for (name, (overlaps, errors)) in &by_category {
        categories.push(CategoryOpe {
            category: (*name).to_string(),
            frames: overlaps.len(),
            success: success_score(overlaps)?,
            precision: precision_score(errors)?,
        });
    }
    Ok(OpeSummary {
        categories,
        frames: all_overlaps.len(),
        success: success_score(&all_overlaps)?,
        precision: precision_score(&all_errors)?,
    })
}
