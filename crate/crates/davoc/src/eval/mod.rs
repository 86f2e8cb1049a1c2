//! Precision-recall evaluation, seed aggregation, and significance testing.
//!
//! PR-AUC uses the average-precision formulation: scores are sorted
//! descending, tied scores form a single threshold group, and the area is
//! the sum of `delta-recall * precision` over threshold groups. This is
//! deterministic and independent of the input order.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dsp::{Device, Label};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("PR curve needs at least one positive label")]
    NoPositives,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("sample {0} has fewer than 2 values")]
    TooFewValues(&'static str),
    #[error("no runs to aggregate")]
    EmptyRuns,
}

/// An ordered precision-recall curve with its area.
#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    /// (recall, precision) per threshold group, recall nondecreasing.
    pub points: Vec<(f64, f64)>,
    /// Average precision: sum of delta-recall times precision.
    pub auc: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// PR curve and AUC for pathology scores. `Pathological` is the positive
/// class; higher scores mean more pathological.
pub fn pr_auc(scores: &[f64], labels: &[Label]) -> Result<PrCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let n_positive = labels.iter().filter(|l| **l == Label::Pathological).count();
    let n_negative = labels.len() - n_positive;
    if n_positive == 0 {
        return Err(EvalError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = Vec::new();
    let mut auc = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // one threshold group per distinct score
        let score = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == score {
            match labels[order[j]] {
                Label::Pathological => tp += 1,
                Label::Control => fp += 1,
            }
            j += 1;
        }
        let recall = tp as f64 / n_positive as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        points.push((recall, precision));
        prev_recall = recall;
        i = j;
    }

    Ok(PrCurve {
        points,
        auc,
        n_positive,
        n_negative,
    })
}

/// Mean and sample standard deviation of per-seed PR-AUCs.
#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Aggregate per-seed metric values. The std is the sample standard
/// deviation (n-1), defined as 0 for a single run.
pub fn aggregate_seeds(runs: &[f64]) -> Result<SeedSummary, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = if runs.len() < 2 {
        0.0
    } else {
        (runs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(SeedSummary {
        runs: runs.to_vec(),
        mean,
        std,
    })
}

/// Two-sided Welch's t-test over two samples (unpaired, unequal variance).
///
/// Returns the p-value. When both samples have zero variance and equal
/// means the p-value is 1 by convention.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() < 2 {
        return Err(EvalError::TooFewValues("a"));
    }
    if b.len() < 2 {
        return Err(EvalError::TooFewValues("b"));
    }
    let (ma, va, na) = mean_var(a);
    let (mb, vb, nb) = mean_var(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // degenerate: identical constants compare equal, different ones maximally unequal
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    // Welch-Satterthwaite degrees of freedom
    let dof = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).expect("valid dof");
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

fn mean_var(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var, n)
}

/// One scored utterance as written to / read from a scores CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub score: f64,
    pub label: String,
    pub device: String,
}

impl ScoredUtterance {
    pub fn new(id: &str, score: f64, label: Label, device: Device) -> Self {
        ScoredUtterance {
            utterance_id: id.to_string(),
            score,
            label: match label {
                Label::Pathological => "pathological".into(),
                Label::Control => "control".into(),
            },
            device: match device {
                Device::Source => "source".into(),
                Device::Target => "target".into(),
            },
        }
    }

    pub fn parsed_label(&self) -> Option<Label> {
        match self.label.as_str() {
            "pathological" => Some(Label::Pathological),
            "control" => Some(Label::Control),
            _ => None,
        }
    }
}

/// Write scores as CSV with header `utterance_id,score,label,device`.
pub fn write_scores_csv(path: &std::path::Path, rows: &[ScoredUtterance]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a scores CSV written by [`write_scores_csv`].
pub fn read_scores_csv(path: &std::path::Path) -> Result<Vec<ScoredUtterance>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect()
}

/// Export a PR curve as `recall,precision` CSV rows.
pub fn write_curve_csv(path: &std::path::Path, curve: &PrCurve) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "recall,precision")?;
    for (r, p) in &curve.points {
        writeln!(f, "{r},{p}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
