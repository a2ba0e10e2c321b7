//! Full-batch training with best-validation snapshotting.

use std::sync::Arc;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::energy::propagation_operator;
use crate::graph::{GraphDataset, NodeRole};
use crate::losses::{total_loss, Classifier, LossBreakdown, LossContext, LossSettings, LOGITNORM_EPS};
use crate::model::{init_model, GraphInputs, ModelParams};
use crate::tensor::{logsumexp, Matrix, Tape};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_loss: f64,
}

/// Training progress on one dataset.
pub struct TrainState {
    pub params: ModelParams,
    pub epoch: usize,
    pub seed: u64,
    pub inputs: GraphInputs,
    pub best: Option<(usize, f64, ModelParams)>,
    ctx: LossContext,
    settings: LossSettings,
    val_rows: Vec<usize>,
    val_labels: Vec<usize>,
}

/// Result of a finished run: the selected parameters and the per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Mean classification loss of `logits` over `rows`, outside any tape.
pub fn classification_loss(
    logits: &Matrix,
    rows: &[usize],
    labels: &[usize],
    classifier: Classifier,
    tau: f64,
) -> f64 {
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(&r, &y)| {
            let row = logits.row(r);
            match classifier {
                Classifier::Nll => logsumexp(row) - row[y],
                Classifier::LogitNorm => {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let k = 1.0 / (tau * (norm + LOGITNORM_EPS));
                    let scaled: Vec<f64> = row.iter().map(|x| x * k).collect();
                    logsumexp(&scaled) - scaled[y]
                }
            }
        })
        .sum();
    total / rows.len() as f64
}

impl TrainState {
    pub fn new(g: &GraphDataset, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let settings = cfg.loss_settings();
        let train_rows = g.nodes(NodeRole::Train);
        if train_rows.is_empty() {
            return Err(Error::Data("dataset has no training nodes".into()));
        }
        let val_rows = g.nodes(NodeRole::Val);
        if val_rows.is_empty() {
            return Err(Error::Data("dataset has no validation nodes".into()));
        }
        let expose_rows = g.nodes(NodeRole::ExposeOod);
        if settings.energy_reg && expose_rows.is_empty() {
            return Err(Error::Data(format!(
                "method {} needs exposed OOD nodes but expose_ood is empty",
                cfg.method
            )));
        }
        let propagation = if settings.energy_reg && settings.reg_on_propagated {
            Some((Arc::new(propagation_operator(g, cfg.eta)?), cfg.hops))
        } else {
            None
        };
        let ctx = LossContext {
            num_nodes: g.num_nodes(),
            train_labels: g.class_labels(&train_rows),
            train_rows,
            expose_rows,
            propagation,
        };
        Ok(Self {
            params: init_model(g.num_features(), cfg.hidden, g.num_classes(), cfg.seed)?,
            epoch: 0,
            seed: cfg.seed,
            inputs: GraphInputs::new(g),
            best: None,
            ctx,
            settings,
            val_labels: g.class_labels(&val_rows),
            val_rows,
        })
    }

    /// Epochs before UB switches on are not eligible as snapshots when the
    /// method uses UB, so the selected model has been trained with it.
    fn eligible(&self, epoch: usize) -> bool {
        !self.settings.ub_enabled() || epoch >= self.settings.ub_start_epoch
    }

    /// One forward/backward/update cycle. The validation loss and the
    /// snapshot refer to the parameters before the update.
    pub fn step(&mut self, adam: &crate::model::AdamConfig) -> Result<EpochLog> {
        let mut tape = Tape::new();
        let (vars, z) = self.params.forward_on_tape(&mut tape, &self.inputs)?;
        let (loss, breakdown) = total_loss(&mut tape, z, &self.ctx, &self.settings, self.epoch)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at epoch {}",
                self.epoch
            )));
        }
        let val_loss = classification_loss(
            tape.value(z),
            &self.val_rows,
            &self.val_labels,
            self.settings.classifier,
            self.settings.tau,
        );
        if self.eligible(self.epoch) && val_loss.is_finite() {
            let better = match &self.best {
                Some((_, best, _)) => val_loss < *best,
                None => true,
            };
            if better {
                self.best = Some((self.epoch, val_loss, self.params.clone()));
            }
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<Matrix> = vars.0.iter().map(|&v| grads.wrt(v)).collect();
        self.params.adam_step(&grads, adam)?;
        let log = EpochLog {
            epoch: self.epoch,
            loss: breakdown,
            val_loss,
        };
        debug!(
            "epoch {} total {:.6} nll {:.6} val {:.6}",
            log.epoch, breakdown.total, breakdown.nll, val_loss
        );
        self.epoch += 1;
        Ok(log)
    }
}

/// Trains for `cfg.epochs` epochs and returns the snapshot with the lowest
/// validation classification loss.
pub fn train(g: &GraphDataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::new(g, cfg)?;
    let adam = cfg.adam();
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        log.push(state.step(&adam)?);
    }
    let (best_epoch, best_val_loss, params) = match state.best.take() {
        Some(b) => b,
        // every eligible epoch had a non-finite validation loss, or UB
        // starts after the last epoch
        None => (state.epoch, f64::NAN, state.params.clone()),
    };
    if !params.is_finite() {
        return Err(Error::Numerical("trained parameters are not finite".into()));
    }
    info!(
        "{} seed {}: best epoch {} val loss {:.6}",
        cfg.method, cfg.seed, best_epoch, best_val_loss
    );
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_loss,
        log,
    })
}
