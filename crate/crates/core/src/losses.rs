//! Training objectives.
//!
//! Every loss is built on a [`Tape`] so its gradient comes from the reverse
//! sweep. [`bound_loss_gradient`] and [`uniform_loss_gradient`] evaluate the
//! closed-form gradients of the two variance regularisers directly and serve
//! as an independent check on the recorded versions.

use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix, SparseMatrix, Tape, TensorError, Var};
use crate::Error;

/// Floor applied to `|M_sum|` before dividing by it.
pub const MIN_SUM_SCALE: f64 = 1e-8;

/// Added to the row norm in the LogitNorm rescaling.
pub const LOGITNORM_EPS: f64 = 1e-7;

type TResult<T> = std::result::Result<T, TensorError>;

/// Mean cross-entropy over `rows`.
pub fn nll_loss(tape: &mut Tape, logits: Var, rows: &[usize], labels: &[usize]) -> TResult<Var> {
    tape.softmax_cross_entropy(logits, rows, labels)
}

/// Squared hinge on energies `E = −score`: ID energies above `m_in` and
/// exposed-OOD energies below `m_out` are penalised.
///
/// `scores` is an `n×1` column of negative energies.
pub fn hinge_reg(
    tape: &mut Tape,
    scores: Var,
    in_rows: &[usize],
    out_rows: &[usize],
    m_in: f64,
    m_out: f64,
) -> Result<Var, Error> {
    if out_rows.is_empty() {
        return Err(Error::Data(
            "energy regularisation needs exposed OOD nodes, expose_ood is empty".into(),
        ));
    }
    if in_rows.is_empty() {
        return Err(Error::Data("energy regularisation needs ID training nodes".into()));
    }
    // max(0, E_in − m_in) = relu(−s − m_in)
    let s_in = tape.select_rows(scores, in_rows)?;
    let e_in = tape.scale(s_in, -1.0);
    let e_in = tape.offset(e_in, -m_in);
    let h_in = tape.relu(e_in);
    let h_in = tape.square(h_in);
    let in_term = tape.mean(h_in)?;

    // max(0, m_out − E_out) = relu(m_out + s)
    let s_out = tape.select_rows(scores, out_rows)?;
    let h_out = tape.offset(s_out, m_out);
    let h_out = tape.relu(h_out);
    let h_out = tape.square(h_out);
    let out_term = tape.mean(h_out)?;

    Ok(tape.add(in_term, out_term)?)
}

/// Variance of the row norms over `rows`, divided by their (stopped) mean.
pub fn bound_loss(tape: &mut Tape, logits: Var, rows: &[usize]) -> TResult<Var> {
    if rows.is_empty() {
        return Err(TensorError::EmptyRows { op: "bound_loss" });
    }
    let z = tape.select_rows(logits, rows)?;
    let norms = tape.row_norm2(z);
    let mean = tape.mean(norms)?;
    if tape.value(mean).item() == 0.0 {
        debug!("bound_loss: all logits are zero, loss defined as 0");
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let centered = tape.sub(norms, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean(sq)?;
    let scale = tape.stop_gradient(mean);
    tape.div(var, scale)
}

fn group_uniform(tape: &mut Tape, logits: Var, rows: &[usize]) -> TResult<Var> {
    let z = tape.select_rows(logits, rows)?;
    let sums = tape.row_sum(z);
    let mean = tape.mean(sums)?;
    let centered = tape.sub(sums, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean(sq)?;
    let m_sum = tape.stop_gradient(mean);
    let raw = tape.value(m_sum).item();
    let scale = raw.abs().max(MIN_SUM_SCALE);
    if raw.abs() < MIN_SUM_SCALE {
        debug!("uniform_loss: |M_sum| = {raw:e} clamped to {MIN_SUM_SCALE:e}");
    }
    Ok(tape.scale(var, 1.0 / scale))
}

/// Sum over the ID group and, when non-empty, the OOD group of the variance
/// of row sums divided by the absolute (stopped) group mean.
pub fn uniform_loss(
    tape: &mut Tape,
    logits: Var,
    id_rows: &[usize],
    ood_rows: &[usize],
) -> TResult<Var> {
    if id_rows.is_empty() {
        return Err(TensorError::EmptyRows { op: "uniform_loss" });
    }
    let mut total = group_uniform(tape, logits, id_rows)?;
    if !ood_rows.is_empty() {
        let ood = group_uniform(tape, logits, ood_rows)?;
        total = tape.add(total, ood)?;
    }
    Ok(total)
}

/// `λ1 · uniform + (1 − λ1) · bound`, with the bound term over both groups.
pub fn ub_loss(
    tape: &mut Tape,
    logits: Var,
    id_rows: &[usize],
    ood_rows: &[usize],
    lambda1: f64,
) -> TResult<Var> {
    let uniform = uniform_loss(tape, logits, id_rows, ood_rows)?;
    let all: Vec<usize> = id_rows.iter().chain(ood_rows).copied().collect();
    let bound = bound_loss(tape, logits, &all)?;
    let u = tape.scale(uniform, lambda1);
    let b = tape.scale(bound, 1.0 - lambda1);
    tape.add(u, b)
}

/// Cross-entropy on rows rescaled to `z / (τ (‖z‖₂ + ε))`.
pub fn logitnorm_loss(
    tape: &mut Tape,
    logits: Var,
    rows: &[usize],
    labels: &[usize],
    tau: f64,
) -> TResult<Var> {
    let norms = tape.row_norm2(logits);
    let denom = tape.offset(norms, LOGITNORM_EPS);
    let denom = tape.scale(denom, tau);
    let normed = tape.div(logits, denom)?;
    tape.softmax_cross_entropy(normed, rows, labels)
}

/// Closed-form gradient of [`bound_loss`] with respect to the full logit
/// matrix; rows outside `rows` get zero.
pub fn bound_loss_gradient(logits: &Matrix, rows: &[usize]) -> Matrix {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let k = rows.len() as f64;
    let norms: Vec<f64> = rows
        .iter()
        .map(|&r| logits.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mean = norms.iter().sum::<f64>() / k;
    if mean == 0.0 {
        return grad;
    }
    for (a, &r) in rows.iter().enumerate() {
        let own = 2.0 * (norms[a] - mean) * (1.0 - 1.0 / k);
        let others: f64 = norms
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &nb)| 2.0 * (nb - mean) * (-1.0 / k))
            .sum();
        let d_norm = (own + others) / (mean * k);
        if norms[a] == 0.0 {
            continue;
        }
        // ∂‖z‖₂/∂z_i = (Σ z_j²)^{-1/2} · z_i
        let inv = 1.0 / norms[a];
        for (g, z) in grad.row_mut(r).iter_mut().zip(logits.row(r)) {
            *g += d_norm * inv * z;
        }
    }
    grad
}

fn group_uniform_gradient(logits: &Matrix, rows: &[usize], grad: &mut Matrix) {
    let k = rows.len() as f64;
    let sums: Vec<f64> = rows.iter().map(|&r| logits.row(r).iter().sum()).collect();
    let mean = sums.iter().sum::<f64>() / k;
    let scale = mean.abs().max(MIN_SUM_SCALE);
    for (a, &r) in rows.iter().enumerate() {
        let own = 2.0 * (sums[a] - mean) * (1.0 - 1.0 / k);
        let others: f64 = sums
            .iter()
            .enumerate()
            .filter(|&(b, _)| b != a)
            .map(|(_, &sb)| 2.0 * (sb - mean) * (-1.0 / k))
            .sum();
        // ∂Σ(z)/∂z_i = 1
        let d_sum = (own + others) / (scale * k);
        for g in grad.row_mut(r) {
            *g += d_sum;
        }
    }
}

/// Closed-form gradient of [`uniform_loss`].
pub fn uniform_loss_gradient(logits: &Matrix, id_rows: &[usize], ood_rows: &[usize]) -> Matrix {
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    group_uniform_gradient(logits, id_rows, &mut grad);
    if !ood_rows.is_empty() {
        group_uniform_gradient(logits, ood_rows, &mut grad);
    }
    grad
}

/// Classification objective of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Nll,
    LogitNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub classifier: Classifier,
    pub tau: f64,
    /// Hinge energy regularisation on exposed OOD nodes.
    pub energy_reg: bool,
    pub use_bound: bool,
    pub use_uniform: bool,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub ub_start_epoch: usize,
    pub ub_over_all_nodes: bool,
    pub reg_on_propagated: bool,
}

impl LossSettings {
    pub fn ub_enabled(&self) -> bool {
        (self.use_bound || self.use_uniform) && self.lambda2 != 0.0
    }

    /// Whether the UB terms are part of the objective at `epoch`.
    pub fn ub_active(&self, epoch: usize) -> bool {
        self.ub_enabled() && epoch >= self.ub_start_epoch
    }
}

/// Node sets and constant operators a loss needs for one graph.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub num_nodes: usize,
    pub train_rows: Vec<usize>,
    pub train_labels: Vec<usize>,
    pub expose_rows: Vec<usize>,
    /// One propagation hop, applied `hops` times to the energy scores fed to
    /// the hinge term when `reg_on_propagated` is set.
    pub propagation: Option<(Arc<SparseMatrix>, usize)>,
}

impl LossContext {
    /// `(bound rows, uniform ID rows, uniform OOD rows)`.
    pub fn ub_groups(&self, settings: &LossSettings) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let expose = if settings.energy_reg {
            self.expose_rows.clone()
        } else {
            Vec::new()
        };
        if settings.ub_over_all_nodes {
            let id: Vec<usize> = (0..self.num_nodes)
                .filter(|v| expose.binary_search(v).is_err())
                .collect();
            ((0..self.num_nodes).collect(), id, expose)
        } else {
            let mut all: Vec<usize> = self.train_rows.iter().chain(&expose).copied().collect();
            all.sort_unstable();
            (all, self.train_rows.clone(), expose)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Classification term (cross-entropy, or LogitNorm for that baseline).
    pub nll: f64,
    pub reg: f64,
    pub bound: f64,
    pub uniform: f64,
    pub ub: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Full objective `nll + α·reg + λ2·(λ1·uniform + (1 − λ1)·bound)` with
/// inactive terms left at exactly zero.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    ctx: &LossContext,
    settings: &LossSettings,
    epoch: usize,
) -> Result<(Var, LossBreakdown), Error> {
    let mut out = LossBreakdown {
        alpha: settings.alpha,
        lambda1: settings.lambda1,
        lambda2: settings.lambda2,
        ..LossBreakdown::default()
    };
    let cls = match settings.classifier {
        Classifier::Nll => nll_loss(tape, logits, &ctx.train_rows, &ctx.train_labels)?,
        Classifier::LogitNorm => {
            logitnorm_loss(tape, logits, &ctx.train_rows, &ctx.train_labels, settings.tau)?
        }
    };
    out.nll = tape.value(cls).item();
    let mut total = cls;

    if settings.energy_reg {
        let mut scores = tape.row_logsumexp(logits)?;
        if settings.reg_on_propagated {
            if let Some((op, hops)) = &ctx.propagation {
                for _ in 0..*hops {
                    scores = tape.spmm(op, scores)?;
                }
            }
        }
        let reg = hinge_reg(
            tape,
            scores,
            &ctx.train_rows,
            &ctx.expose_rows,
            settings.m_in,
            settings.m_out,
        )?;
        out.reg = tape.value(reg).item();
        let weighted = tape.scale(reg, settings.alpha);
        total = tape.add(total, weighted)?;
    }

    if settings.ub_active(epoch) {
        let (bound_rows, id_rows, ood_rows) = ctx.ub_groups(settings);
        let mut ub: Option<Var> = None;
        if settings.use_uniform {
            let u = uniform_loss(tape, logits, &id_rows, &ood_rows)?;
            out.uniform = tape.value(u).item();
            let w = tape.scale(u, settings.lambda1);
            ub = Some(w);
        }
        if settings.use_bound {
            let b = bound_loss(tape, logits, &bound_rows)?;
            out.bound = tape.value(b).item();
            let w = tape.scale(b, 1.0 - settings.lambda1);
            ub = Some(match ub {
                Some(u) => tape.add(u, w)?,
                None => w,
            });
        }
        if let Some(ub) = ub {
            out.ub = tape.value(ub).item();
            let weighted = tape.scale(ub, settings.lambda2);
            total = tape.add(total, weighted)?;
        }
    }

    out.total = tape.value(total).item();
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape, Var) -> Var, z: Matrix) -> f64 {
        let mut t = Tape::new();
        let v = t.leaf(z);
        let out = f(&mut t, v);
        t.value(out).item()
    }

    #[test]
    fn hinge_zero_when_margins_hold() {
        let mut t = Tape::new();
        // energies: ID −6 ≤ m_in = −5, OOD −0.5 ≥ m_out = −1
        let s = t.leaf(Matrix::column(vec![6.0, 0.5]));
        let r = hinge_reg(&mut t, s, &[0], &[1], -5.0, -1.0).unwrap();
        assert_eq!(t.value(r).item(), 0.0);
    }

    #[test]
    fn hinge_single_violation() {
        let mut t = Tape::new();
        // E_in = m_in + 2 → score = −(m_in + 2) = 3
        let s = t.leaf(Matrix::column(vec![3.0, -10.0]));
        let r = hinge_reg(&mut t, s, &[0], &[1], -5.0, -1.0).unwrap();
        assert!((t.value(r).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_requires_exposure() {
        let mut t = Tape::new();
        let s = t.leaf(Matrix::column(vec![1.0]));
        assert!(hinge_reg(&mut t, s, &[0], &[], -5.0, -1.0).is_err());
    }

    #[test]
    fn bound_loss_examples() {
        let equal = Matrix::from_rows(&[[3.0, 4.0], [0.0, 5.0], [-5.0, 0.0]]);
        assert!(eval(|t, z| bound_loss(t, z, &[0, 1, 2]).unwrap(), equal).abs() < 1e-15);
        let two = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]);
        assert!((eval(|t, z| bound_loss(t, z, &[0, 1]).unwrap(), two) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bound_loss_zero_logits_degenerate() {
        let mut t = Tape::new();
        let z = t.leaf(Matrix::zeros(3, 2));
        let l = bound_loss(&mut t, z, &[0, 1, 2]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        assert_eq!(t.backward(l).unwrap().wrt(z), Matrix::zeros(3, 2));
        assert_eq!(bound_loss_gradient(&Matrix::zeros(3, 2), &[0, 1]), Matrix::zeros(3, 2));
    }

    #[test]
    fn uniform_loss_examples() {
        let equal = Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]);
        assert_eq!(eval(|t, z| uniform_loss(t, z, &[0, 1], &[]).unwrap(), equal), 0.0);
        let two = Matrix::from_rows(&[[0.0, 0.0], [1.0, 3.0]]);
        assert!((eval(|t, z| uniform_loss(t, z, &[0, 1], &[]).unwrap(), two) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_loss_uses_absolute_scale() {
        // sums {0, −4}: variance 4, |M_sum| 2
        let z = Matrix::from_rows(&[[0.0, 0.0], [-1.0, -3.0]]);
        assert!((eval(|t, z| uniform_loss(t, z, &[0, 1], &[]).unwrap(), z) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_loss_clamps_zero_mean() {
        // sums {−1, 1}: variance 1, M_sum 0 → clamped
        let z = Matrix::from_rows(&[[-1.0, 0.0], [0.5, 0.5]]);
        let v = eval(|t, z| uniform_loss(t, z, &[0, 1], &[]).unwrap(), z);
        assert!((v - 1.0 / MIN_SUM_SCALE).abs() < 1e-3);
    }

    #[test]
    fn ub_loss_weights() {
        // bound fixture rows 0,1 (norms 1, 3); uniform fixture rows 2,3 (sums 0, 4)
        let z = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0], [0.0, 0.0], [1.0, 3.0]]);
        let mut t = Tape::new();
        let v = t.leaf(z);
        let b = bound_loss(&mut t, v, &[0, 1]).unwrap();
        let u = uniform_loss(&mut t, v, &[2, 3], &[]).unwrap();
        let combined = 0.5 * t.value(u).item() + 0.5 * t.value(b).item();
        assert!((combined - 1.25).abs() < 1e-15);

        let only_bound = ub_loss(&mut t, v, &[0, 1], &[], 0.0).unwrap();
        assert!((t.value(only_bound).item() - 0.5).abs() < 1e-15);
        let only_uniform = ub_loss(&mut t, v, &[2, 3], &[], 1.0).unwrap();
        assert!((t.value(only_uniform).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn logitnorm_large_tau_tends_to_log_c() {
        let z = Matrix::from_rows(&[[2.0, -1.0, 0.5]]);
        let v = eval(|t, z| logitnorm_loss(t, z, &[0], &[1], 1e6).unwrap(), z);
        assert!((v - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn logitnorm_scale_invariance() {
        let z = Matrix::from_rows(&[[2.0, -1.0, 0.5]]);
        let a = eval(|t, v| logitnorm_loss(t, v, &[0], &[0], 0.5).unwrap(), z.clone());
        let b = eval(|t, v| logitnorm_loss(t, v, &[0], &[0], 0.5).unwrap(), z.map(|x| 7.5 * x));
        assert!((a - b).abs() < 1e-6);
    }
}
