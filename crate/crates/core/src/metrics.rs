//! ROC analysis of membership scores. Lower scores mean "more likely member".

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Operating points reported by default.
pub const REPORT_FPRS: [f64; 2] = [0.001, 0.01];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with `score <= threshold` are predicted members at this point.
    /// The origin point carries `-inf`.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|&&m| m).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both members and non-members"));
    }
    Ok((pos, neg))
}

/// Sweeps the threshold upward through every distinct score. Equal scores
/// flip together, so a tie between classes contributes a diagonal segment.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::NEG_INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: s };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// Largest TPR among operating points with FPR at most `fpr_target`.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> f64 {
    curve.points.iter().filter(|p| p.fpr <= fpr_target).map(|p| p.tpr).fold(0.0, f64::max)
}

/// Median with the central-pair convention for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Accuracy and F1 of `score < median(scores)`. F1 is 0 without positive
/// predictions.
pub fn accuracy_f1_at_median(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let tau = median(scores)?;
    let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &m) in scores.iter().zip(labels) {
        let pred = s < tau;
        match (pred, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
        if pred == m {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / scores.len() as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    Ok((accuracy, f1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: String,
    pub statistic: String,
    pub truncation_fraction: f64,
    pub seed: u64,
    pub auc: f64,
    /// Keyed by the FPR target formatted with `{}`.
    pub tpr_at: BTreeMap<String, f64>,
    pub accuracy: f64,
    pub f1: f64,
}

impl AttackReport {
    pub fn from_scores(
        scores: &[f64],
        labels: &[bool],
        scenario: &str,
        statistic: &str,
        truncation_fraction: f64,
        seed: u64,
        fpr_targets: &[f64],
    ) -> Result<(Self, RocCurve)> {
        if let Some(f) = fpr_targets.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::invalid(format!("FPR target {f} outside [0, 1]")));
        }
        let curve = roc_curve(scores, labels)?;
        let tpr_at = fpr_targets.iter().map(|&f| (f.to_string(), tpr_at_fpr(&curve, f))).collect();
        let (accuracy, f1) = accuracy_f1_at_median(scores, labels)?;
        let report = Self {
            scenario: scenario.to_string(),
            statistic: statistic.to_string(),
            truncation_fraction,
            seed,
            auc: curve.auc,
            tpr_at,
            accuracy,
            f1,
        };
        Ok((report, curve))
    }

    pub fn tpr(&self, fpr: f64) -> Option<f64> {
        self.tpr_at.get(&fpr.to_string()).copied()
    }

    /// Flat `(key, value)` record.
    pub fn to_record(&self) -> Vec<(String, String)> {
        let mut rec = vec![
            ("scenario".to_string(), self.scenario.clone()),
            ("statistic".to_string(), self.statistic.clone()),
            ("truncation_fraction".to_string(), self.truncation_fraction.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("auc".to_string(), self.auc.to_string()),
        ];
        for (k, v) in &self.tpr_at {
            rec.push((format!("tpr_at_fpr_{k}"), v.to_string()));
        }
        rec.push(("accuracy".to_string(), self.accuracy.to_string()));
        rec.push(("f1".to_string(), self.f1.to_string()));
        rec
    }
}

pub fn write_roc(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in &curve.points {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_report(report: &AttackReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["key", "value"])?;
    for (k, v) in report.to_record() {
        w.write_record([k, v])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
