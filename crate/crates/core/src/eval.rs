//! Classification metrics.
//!
//! Zero denominators score 0. Macro averages run over the classes that
//! occur in the truth or the prediction; classes absent from both are
//! skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub mrecall: f64,
    pub mprecision: f64,
    pub mf1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// rows = truth, columns = prediction
    pub confusion: Vec<Vec<usize>>,
    #[serde(skip)]
    pub confusion_row_normalized: Vec<Vec<f64>>,
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::validation(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(Error::validation(format!(
                "label pair ({t}, {p}) at position {i} out of range for {num_classes} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Each row divided by its sum; rows of absent true classes stay zero.
pub fn row_normalize(confusion: &[Vec<usize>]) -> Vec<Vec<f64>> {
    confusion
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&v| if total == 0 { 0.0 } else { v as f64 / total as f64 })
                .collect()
        })
        .collect()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<MetricsReport> {
    let confusion = confusion_matrix(y_true, y_pred, num_classes)?;
    let k = num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut active = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support + predicted > 0 {
            active.push(c);
        }
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
        });
    }

    let macro_of = |f: fn(&ClassMetrics) -> f64| {
        if active.is_empty() {
            0.0
        } else {
            active.iter().map(|&c| f(&per_class[c])).sum::<f64>() / active.len() as f64
        }
    };
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: ratio(correct, y_true.len()),
        mrecall: macro_of(|m| m.recall),
        mprecision: macro_of(|m| m.precision),
        mf1: macro_of(|m| m.f1),
        confusion_row_normalized: row_normalize(&confusion),
        per_class,
        confusion,
    })
}
