//! Precision-recall curves and threshold calibration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, descending; a sample is predicted positive
/// when its score is at least the threshold.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Vec<PrPoint> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|l| **l).count();
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut out = Vec::new();
    let (mut tp, mut taken) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            tp += labels[idx[i]] as usize;
            taken += 1;
            i += 1;
        }
        out.push(PrPoint {
            threshold: t,
            precision: tp as f64 / taken as f64,
            recall: if positives == 0 {
                0.0
            } else {
                tp as f64 / positives as f64
            },
        });
    }
    out
}

/// Area under the precision-recall curve as average precision; tied scores
/// are treated as one step.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in pr_curve(scores, labels) {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub target_recall: f64,
    pub achieved_recall: f64,
    pub achieved_precision: f64,
    pub auc: f64,
}

/// Largest observed score whose recall on `labels` is at least `target`.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool], target: f64) -> Result<(Calibration, Vec<PrPoint>)> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Calibration(format!("target recall {target} outside [0, 1]")));
    }
    if scores.is_empty() || !labels.iter().any(|l| *l) {
        return Err(Error::Calibration("no positive calibration samples".into()));
    }
    let curve = pr_curve(scores, labels);
    let hit = curve
        .iter()
        .find(|p| p.recall >= target)
        .ok_or_else(|| Error::Calibration(format!("recall {target} unreachable")))?;
    Ok((
        Calibration {
            tau: hit.threshold,
            target_recall: target,
            achieved_recall: hit.recall,
            achieved_precision: hit.precision,
            auc: average_precision(scores, labels),
        },
        curve,
    ))
}

pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<()> {
    let mut s = String::from("threshold,precision,recall\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    crate::io::write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_threshold() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.2];
        let labels = [true; 5];
        let (c, _) = calibrate_threshold(&scores, &labels, 0.8).unwrap();
        assert_eq!(c.tau, 0.6);
        assert_eq!(c.achieved_recall, 0.8);
        let (c, _) = calibrate_threshold(&scores, &labels, 0.0).unwrap();
        assert_eq!(c.tau, 0.9);
    }

    #[test]
    fn unreachable_or_empty_targets_fail() {
        assert!(calibrate_threshold(&[0.5], &[false], 0.5).is_err());
        assert!(calibrate_threshold(&[0.5], &[true], 1.5).is_err());
    }

    #[test]
    fn average_precision_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        // All tied: one step at prevalence.
        assert_eq!(average_precision(&[0.5; 4], &[true, false, true, false]), 0.5);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[false, true, true]);
        assert!((ap - (0.5 * 0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }
}
