//! Weighted and unweighted accuracy and confusion matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{data_err, dim_err, Result};

fn check(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(dim_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return Err(data_err!("no predictions to score"));
    }
    Ok(())
}

/// Overall accuracy, in percent.
pub fn wacc(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check(predictions, labels)?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Unweighted accuracy together with the classes that had no examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Uacc {
    pub percent: f64,
    /// Classes in `0..classes` absent from the labels; they are left out of
    /// the mean and callers should warn about them.
    pub absent: Vec<usize>,
}

/// Mean per-class recall over the classes `0..classes` that occur in
/// `labels`, in percent.
pub fn uacc_over(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Uacc> {
    check(predictions, labels)?;
    let cm = confusion_matrix(predictions, labels, classes)?;
    let mut sum = 0.0;
    let mut present = 0usize;
    let mut absent = Vec::new();
    for (c, row) in cm.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            absent.push(c);
        } else {
            sum += row[c] as f64 / total as f64;
            present += 1;
        }
    }
    Ok(Uacc {
        percent: 100.0 * sum / present as f64,
        absent,
    })
}

/// Mean per-class recall over the classes present in `labels`, in percent.
pub fn uacc(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    let classes = labels.iter().chain(predictions).max().map_or(0, |&m| m + 1);
    Ok(uacc_over(predictions, labels, classes)?.percent)
}

/// `classes x classes` counts indexed `[true][predicted]`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(dim_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(data_err!("class index {} out of range for {} classes", p.max(l), classes));
        }
        cm[l][p] += 1;
    }
    Ok(cm)
}
