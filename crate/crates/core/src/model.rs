//! Two-layer GCN encoder and its Adam optimiser.
//!
//! `Z = Â · relu(Â X W0 + b0) · W1 + b1` with `Â` the symmetric-normalised
//! adjacency with self-loops.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{sym_normalize, GraphDataset};
use crate::tensor::{Matrix, SparseMatrix, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    /// Weight matrices decay, biases do not.
    pub decay: bool,
    #[serde(skip, default)]
    first_moment: Vec<f64>,
    #[serde(skip, default)]
    second_moment: Vec<f64>,
}

impl Param {
    fn new(name: &str, value: Matrix, decay: bool) -> Self {
        let (rows, cols) = value.shape();
        let len = rows * cols;
        Self {
            name: name.to_string(),
            rows,
            cols,
            value: value.into_vec(),
            decay,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }

    pub fn matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.value.clone()).expect("param shape")
    }

    fn ensure_state(&mut self) {
        let len = self.value.len();
        if self.first_moment.len() != len {
            self.first_moment = vec![0.0; len];
            self.second_moment = vec![0.0; len];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weights only: `w ← w − lr · wd · w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// GCN weights `W0: d×h, b0: 1×h, W1: h×C, b1: 1×C` plus Adam state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub params: Vec<Param>,
    #[serde(skip, default)]
    step: u64,
}

/// Parameter handles recorded on a tape, in `ModelParams::params` order.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars(pub [Var; 4]);

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized")
}

/// Glorot-uniform weights from a seeded ChaCha stream, zero biases.
pub fn init_model(d: usize, h: usize, c: usize, seed: u64) -> Result<ModelParams> {
    if d == 0 || h == 0 || c == 0 {
        return Err(Error::Config(format!(
            "model dimensions must be positive, got d={d} h={h} C={c}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = glorot(&mut rng, d, h);
    let w1 = glorot(&mut rng, h, c);
    Ok(ModelParams {
        params: vec![
            Param::new("W0", w0, true),
            Param::new("b0", Matrix::zeros(1, h), false),
            Param::new("W1", w1, true),
            Param::new("b1", Matrix::zeros(1, c), false),
        ],
        step: 0,
    })
}

/// Graph-dependent constants of the forward pass.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub a_hat: Arc<SparseMatrix>,
    /// `Â X`, fixed for the whole run.
    pub ax: Matrix,
}

impl GraphInputs {
    pub fn new(g: &GraphDataset) -> Self {
        let a_hat = Arc::new(sym_normalize(g));
        let ax = a_hat
            .mul_dense(g.features())
            .expect("normalised adjacency matches feature rows");
        Self { a_hat, ax }
    }
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.params[0].rows
    }

    pub fn hidden_dim(&self) -> usize {
        self.params[0].cols
    }

    pub fn num_classes(&self) -> usize {
        self.params[2].cols
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Records the forward pass with every parameter as a leaf.
    pub fn forward_on_tape(&self, tape: &mut Tape, inputs: &GraphInputs) -> Result<(ParamVars, Var)> {
        if inputs.ax.cols() != self.input_dim() {
            return Err(Error::Data(format!(
                "dataset has {} features, model expects {}",
                inputs.ax.cols(),
                self.input_dim()
            )));
        }
        let vars = ParamVars([
            tape.leaf(self.params[0].matrix()),
            tape.leaf(self.params[1].matrix()),
            tape.leaf(self.params[2].matrix()),
            tape.leaf(self.params[3].matrix()),
        ]);
        let [w0, b0, w1, b1] = vars.0;
        let ax = tape.constant(inputs.ax.clone());
        let h = tape.matmul(ax, w0)?;
        let h = tape.add(h, b0)?;
        let h = tape.relu(h);
        let hw = tape.matmul(h, w1)?;
        let z = tape.spmm(&inputs.a_hat, hw)?;
        let z = tape.add(z, b1)?;
        Ok((vars, z))
    }

    /// Logits for every node.
    pub fn forward(&self, g: &GraphDataset) -> Result<Matrix> {
        self.forward_with(&GraphInputs::new(g))
    }

    pub fn forward_with(&self, inputs: &GraphInputs) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (_, z) = self.forward_on_tape(&mut tape, inputs)?;
        Ok(tape.value(z).clone())
    }

    /// One Adam update from gradients given in parameter order.
    pub fn adam_step(&mut self, grads: &[Matrix], cfg: &AdamConfig) -> Result<()> {
        assert_eq!(grads.len(), self.params.len(), "one gradient per parameter");
        for (p, g) in self.params.iter().zip(grads) {
            if g.shape() != (p.rows, p.cols) {
                return Err(Error::Numerical(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    (p.rows, p.cols)
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.ensure_state();
            for (k, &gk) in g.data().iter().enumerate() {
                let m = cfg.beta1 * p.first_moment[k] + (1.0 - cfg.beta1) * gk;
                let v = cfg.beta2 * p.second_moment[k] + (1.0 - cfg.beta2) * gk * gk;
                p.first_moment[k] = m;
                p.second_moment[k] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let mut update = m_hat / (v_hat.sqrt() + cfg.eps);
                if p.decay {
                    update += cfg.weight_decay * p.value[k];
                }
                p.value[k] -= cfg.lr * update;
            }
        }
        Ok(())
    }

    /// Clears the optimiser moments and step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.first_moment = vec![0.0; p.value.len()];
            p.second_moment = vec![0.0; p.value.len()];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeRole;

    #[test]
    fn init_is_seeded() {
        let a = init_model(16, 64, 3, 7).unwrap();
        let b = init_model(16, 64, 3, 7).unwrap();
        let c = init_model(16, 64, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params[0].value, c.params[0].value);
    }

    #[test]
    fn init_respects_glorot_bound() {
        let p = init_model(16, 64, 3, 1).unwrap();
        let bound = (6.0f64 / 80.0).sqrt();
        assert!((bound - 0.273_861_278_752_583).abs() < 1e-12);
        assert!(p.params[0].value.iter().all(|w| w.abs() <= bound));
        assert!(p.params[1].value.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(init_model(0, 4, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let g = GraphDataset::from_edges(
            2,
            &[(0, 1)],
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            vec![0, 1],
            vec![Some(NodeRole::Train); 2],
        )
        .unwrap();
        let mut p = init_model(2, 4, 2, 0).unwrap();
        for param in &mut p.params {
            param.value.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(p.forward(&g).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn single_node_identity_weights() {
        let g = GraphDataset::from_edges(
            1,
            &[],
            Matrix::from_rows(&[[2.5]]),
            vec![0],
            vec![Some(NodeRole::Train)],
        )
        .unwrap();
        let mut p = init_model(1, 1, 1, 0).unwrap();
        p.params[0].value = vec![1.0];
        p.params[2].value = vec![1.0];
        assert_eq!(p.forward(&g).unwrap().item(), 2.5);
    }

    #[test]
    fn adam_zero_gradient_only_decays_weights() {
        let mut p = init_model(2, 3, 2, 4).unwrap();
        let before = p.clone();
        let grads: Vec<Matrix> = p.params.iter().map(|q| Matrix::zeros(q.rows, q.cols)).collect();
        let cfg = AdamConfig::default();
        p.adam_step(&grads, &cfg).unwrap();
        for (a, b) in p.params.iter().zip(&before.params) {
            for (x, y) in a.value.iter().zip(&b.value) {
                let expected = if a.decay { y - cfg.lr * cfg.weight_decay * y } else { *y };
                assert_eq!(*x, expected);
            }
        }
    }

    #[test]
    fn adam_scalar_quadratic_step() {
        // f(w) = w², w = 1: g = 2, m̂ = 2, v̂ = 4, step = 1 − lr·(1 + wd·1)
        let mut p = ModelParams {
            params: vec![Param::new("w", Matrix::scalar(1.0), true)],
            step: 0,
        };
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        p.adam_step(&[Matrix::scalar(2.0)], &cfg).unwrap();
        let expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8) + 5e-4);
        assert!((p.params[0].value[0] - expected).abs() < 1e-15);
        assert!((p.params[0].value[0] - 0.89995).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = init_model(2, 3, 2, 4).unwrap();
        let mut grads: Vec<Matrix> =
            p.params.iter().map(|q| Matrix::zeros(q.rows, q.cols)).collect();
        grads[2].set(0, 0, f64::NAN);
        let err = p.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("W1"));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn adam_trajectory_is_reproducible() {
        let grads: Vec<Matrix> = init_model(2, 3, 2, 4)
            .unwrap()
            .params
            .iter()
            .map(|q| Matrix::filled(q.rows, q.cols, 0.3))
            .collect();
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = init_model(2, 3, 2, 4).unwrap();
            p.adam_step(&grads, &cfg).unwrap();
            p.adam_step(&grads, &cfg).unwrap();
            p
        };
        let a = run();
        let mut b = run();
        assert_eq!(a, b);
        b.reset_optimizer();
        assert_eq!(b.steps(), 0);
    }
}
