//! Detection and classification metrics. ID is the positive class
//! throughout: a higher score means "more in-distribution".

use serde::{Deserialize, Serialize};

use crate::energy::threshold_at_tpr;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub id_accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub gamma: f64,
}

fn check_sets(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Data(format!(
            "detection metrics need ID and OOD scores, got {} and {}",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite detection score".into()));
    }
    Ok(())
}

/// P(score_id > score_ood) + ½ P(equal), from midranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let ids = all[i..j].iter().filter(|x| x.1).count();
        rank_sum += mid * ids as f64;
        i = j;
    }
    let (n1, n0) = (id.len() as f64, ood.len() as f64);
    Ok((rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0))
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over descending distinct
/// score thresholds, tied scores entering together.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_sets(id, ood)?;
    let mut all: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n1 = id.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n1;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Fraction of OOD scores at or above the threshold that accepts `tpr` of
/// the ID scores. Returns `(fpr, gamma)`.
pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check_sets(id, ood)?;
    let gamma = threshold_at_tpr(id, tpr)?;
    let above = ood.iter().filter(|&&s| s >= gamma).count();
    Ok((above as f64 / ood.len() as f64, gamma))
}

/// Index of the largest entry, ties going to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = k;
        }
    }
    best
}

pub fn id_accuracy(logits: &Matrix, labels: &[usize], rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::Data("accuracy over an empty node set".into()));
    }
    if labels.len() != rows.len() {
        return Err(Error::Data(format!(
            "{} labels for {} nodes",
            labels.len(),
            rows.len()
        )));
    }
    let correct = rows
        .iter()
        .zip(labels)
        .filter(|&(&r, &y)| argmax(logits.row(r)) == y)
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

/// All three detection metrics at once.
pub fn detection(id: &[f64], ood: &[f64], tpr: f64, id_accuracy: f64) -> Result<DetectionResult> {
    let (fpr95, gamma) = fpr_at_tpr(id, ood, tpr)?;
    Ok(DetectionResult {
        auroc: auroc(id, ood)?,
        aupr: aupr(id, ood)?,
        fpr95,
        id_accuracy,
        n_id: id.len(),
        n_ood: ood.len(),
        gamma,
    })
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[3.0, 2.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[2.0, 0.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[3.0, 2.0], &[1.0, 0.0]).unwrap(), 1.0);
        // thresholds 2 → P=1 R=½; 1 → P=½ R=½; 0 → P=⅔ R=1
        let v = aupr(&[2.0, 0.0], &[1.0]).unwrap();
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        // all tied: one threshold, precision = ID share
        assert_eq!(aupr(&[1.0], &[1.0, 1.0, 1.0]).unwrap(), 0.25);
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        let (fpr, gamma) = fpr_at_tpr(&id, &[0.0, 1.0, 2.0, 3.0], 0.95).unwrap();
        assert_eq!((fpr, gamma), (0.5, 2.0));
        assert_eq!(fpr_at_tpr(&id, &[-1.0, 0.5], 0.95).unwrap().0, 0.0);
        assert_eq!(fpr_at_tpr(&id, &[21.0, 30.0], 0.95).unwrap().0, 1.0);
    }

    #[test]
    fn accuracy_tie_breaks_low() {
        let z = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 5.0, 2.0]]);
        assert_eq!(id_accuracy(&z, &[0, 1], &[0, 1]).unwrap(), 1.0);
        assert_eq!(id_accuracy(&z, &[1], &[0]).unwrap(), 0.0);
        assert!(id_accuracy(&z, &[], &[]).is_err());
    }

    #[test]
    fn std_dev_basic() {
        assert_eq!(std_dev(&[2.0, 4.0]), 1.0);
        assert_eq!(std_dev(&[]), 0.0);
    }
}
