//! Detection scores and their propagation over the graph.
//!
//! Scores follow the convention that higher means more in-distribution: the
//! energy score is `logsumexp(z_v)`, the negation of the energy.

use serde::{Deserialize, Serialize};

use crate::graph::{row_normalize, GraphDataset};
use crate::tensor::{logsumexp, Matrix, SparseMatrix};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScoreKind {
    RawEnergy,
    PropagatedEnergy { hops: usize },
    Msp,
}

impl ScoreKind {
    pub fn label(self) -> &'static str {
        match self {
            ScoreKind::RawEnergy => "raw-energy",
            ScoreKind::PropagatedEnergy { .. } => "propagated-energy",
            ScoreKind::Msp => "msp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub kind: ScoreKind,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, nodes: &[usize]) -> Vec<f64> {
        nodes.iter().map(|&v| self.values[v]).collect()
    }
}

/// `s_v = logsumexp(z_v)` for every row of the logits.
pub fn negative_energy(logits: &Matrix) -> ScoreVector {
    ScoreVector {
        values: (0..logits.rows()).map(|i| logsumexp(logits.row(i))).collect(),
        kind: ScoreKind::RawEnergy,
    }
}

/// Maximum softmax probability of each row.
pub fn msp_score(logits: &Matrix) -> ScoreVector {
    let values = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (max - logsumexp(row)).exp()
        })
        .collect();
    ScoreVector {
        values,
        kind: ScoreKind::Msp,
    }
}

fn check_eta(eta: f64) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

/// Applies `s ← η s + (1 − η) D⁻¹A s` `hops` times. Isolated nodes keep
/// their score.
pub fn propagate(
    scores: &ScoreVector,
    g: &GraphDataset,
    eta: f64,
    hops: usize,
) -> Result<ScoreVector, Error> {
    check_eta(eta)?;
    if scores.len() != g.num_nodes() {
        return Err(Error::Config(format!(
            "{} scores for {} nodes",
            scores.len(),
            g.num_nodes()
        )));
    }
    let p = row_normalize(g);
    let mut current = scores.values.clone();
    for _ in 0..hops {
        let next = (0..current.len())
            .map(|i| {
                if p.row_nnz(i) == 0 {
                    return current[i];
                }
                let neighbor: f64 = p.row(i).map(|(j, w)| w * current[j]).sum();
                eta * current[i] + (1.0 - eta) * neighbor
            })
            .collect();
        current = next;
    }
    let kind = match scores.kind {
        ScoreKind::PropagatedEnergy { hops: h } => ScoreKind::PropagatedEnergy { hops: h + hops },
        _ => ScoreKind::PropagatedEnergy { hops },
    };
    Ok(ScoreVector {
        values: current,
        kind,
    })
}

/// One propagation hop as a single sparse operator, `ηI + (1 − η)D⁻¹A` with
/// identity rows for isolated nodes. Used where gradients must flow through
/// the propagation.
pub fn propagation_operator(g: &GraphDataset, eta: f64) -> Result<SparseMatrix, Error> {
    check_eta(eta)?;
    let p = row_normalize(g);
    let n = p.dim();
    let mut entries = Vec::with_capacity(p.nnz() + n);
    for i in 0..n {
        if p.row_nnz(i) == 0 {
            entries.push((i, i, 1.0));
            continue;
        }
        if eta > 0.0 {
            entries.push((i, i, eta));
        }
        if eta < 1.0 {
            entries.extend(p.row(i).map(|(j, w)| (i, j, (1.0 - eta) * w)));
        }
    }
    Ok(SparseMatrix::from_triplets(n, entries).expect("no self-loops in adjacency"))
}

/// Threshold accepting at least `⌈tpr · n⌉` of the ID scores.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64, Error> {
    if id_scores.is_empty() {
        return Err(Error::Config("threshold_at_tpr: no ID scores".into()));
    }
    if !(0.0..=1.0).contains(&tpr) {
        return Err(Error::Config(format!("tpr must lie in [0, 1], got {tpr}")));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard against tpr·n landing a hair above an integer (0.95·20)
    let accepted = ((tpr * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let rejected = n - accepted.min(n);
    Ok(if rejected < n { sorted[rejected] } else { sorted[0] })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    In,
    Out,
}

/// `In` iff the score reaches the threshold.
pub fn decide(scores: &[f64], gamma: f64) -> Vec<Decision> {
    scores
        .iter()
        .map(|&s| if s >= gamma { Decision::In } else { Decision::Out })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeRole;

    fn path2() -> GraphDataset {
        GraphDataset::from_edges(
            1,
            &[(0, 1)],
            Matrix::zeros(2, 1),
            vec![-1, -1],
            vec![None::<NodeRole>; 2],
        )
        .unwrap()
    }

    #[test]
    fn energy_of_zero_and_single_class() {
        let s = negative_energy(&Matrix::zeros(1, 5));
        assert!((s.values[0] - 5f64.ln()).abs() < 1e-15);
        let s = negative_energy(&Matrix::from_rows(&[[-3.25]]));
        assert_eq!(s.values[0], -3.25);
    }

    #[test]
    fn msp_values() {
        let s = msp_score(&Matrix::zeros(1, 4));
        assert!((s.values[0] - 0.25).abs() < 1e-15);
        let s = msp_score(&Matrix::from_rows(&[[10.0, -10.0]]));
        assert!((s.values[0] - (1.0 - 2.061_153_618_190_204_5e-9)).abs() < 1e-15);
    }

    #[test]
    fn propagate_half_on_path() {
        let s = ScoreVector {
            values: vec![0.0, 2.0],
            kind: ScoreKind::RawEnergy,
        };
        let out = propagate(&s, &path2(), 0.5, 1).unwrap();
        assert_eq!(out.values, vec![1.0, 1.0]);
        assert_eq!(out.kind, ScoreKind::PropagatedEnergy { hops: 1 });
    }

    #[test]
    fn propagate_eta_one_is_identity() {
        let s = ScoreVector {
            values: vec![0.3, -2.0],
            kind: ScoreKind::RawEnergy,
        };
        assert_eq!(propagate(&s, &path2(), 1.0, 7).unwrap().values, s.values);
    }

    #[test]
    fn propagate_rejects_eta_out_of_range() {
        let s = ScoreVector {
            values: vec![0.0, 0.0],
            kind: ScoreKind::RawEnergy,
        };
        assert!(propagate(&s, &path2(), 1.5, 1).is_err());
        assert!(propagate(&s, &path2(), -0.1, 1).is_err());
    }

    #[test]
    fn isolated_node_keeps_score() {
        let g = GraphDataset::from_edges(
            1,
            &[(0, 1)],
            Matrix::zeros(3, 1),
            vec![-1; 3],
            vec![None; 3],
        )
        .unwrap();
        let s = ScoreVector {
            values: vec![0.0, 2.0, 9.0],
            kind: ScoreKind::RawEnergy,
        };
        let out = propagate(&s, &g, 0.2, 3).unwrap();
        assert_eq!(out.values[2], 9.0);
        let op = propagation_operator(&g, 0.2).unwrap();
        assert_eq!(op.get(2, 2), 1.0);
    }

    #[test]
    fn threshold_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(threshold_at_tpr(&id, 0.95).unwrap(), 2.0);
        assert_eq!(threshold_at_tpr(&id, 1.0).unwrap(), 1.0);
        assert_eq!(threshold_at_tpr(&[4.0; 9], 0.95).unwrap(), 4.0);
        assert!(threshold_at_tpr(&[], 0.95).is_err());
    }

    #[test]
    fn threshold_guarantee_with_fractional_count() {
        // 0.95 · 10 = 9.5 → at least 10 accepted
        let id: Vec<f64> = (1..=10).map(f64::from).collect();
        let gamma = threshold_at_tpr(&id, 0.95).unwrap();
        assert_eq!(id.iter().filter(|&&s| s >= gamma).count(), 10);
    }

    #[test]
    fn decide_boundaries() {
        let gamma = 0.5;
        assert_eq!(decide(&[gamma], gamma), vec![Decision::In]);
        assert_eq!(decide(&[gamma - 1e-12], gamma), vec![Decision::Out]);
        assert!(decide(&[], gamma).is_empty());
    }
}
