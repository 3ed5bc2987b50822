//! Classification metrics.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("metrics need at least one example")]
    Empty,
    #[error("class {0} out of range")]
    ClassOutOfRange(usize),
}

fn check(preds: &[usize], labels: &[usize]) -> Result<(), MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Fraction of positions where `preds` and `labels` agree.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricError> {
    check(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `confusion[label][pred]`
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<usize>>, MetricError> {
    check(preds, labels)?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(MetricError::ClassOutOfRange(p.max(l)));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1 over all `classes`. A class with no
/// true positives scores 0, including one absent from both inputs.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64, MetricError> {
    let m = confusion_matrix(preds, labels, classes)?;
    let total: f64 = (0..classes)
        .map(|c| {
            let tp = m[c][c];
            let predicted: usize = (0..classes).map(|l| m[l][c]).sum();
            let actual: usize = m[c].iter().sum();
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (predicted + actual) as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}
