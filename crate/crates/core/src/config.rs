//! Run configuration and the method taxonomy.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::losses::{Classifier, LossSettings};
use crate::model::AdamConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Msp,
    Energy,
    EnergyFt,
    Gnnsafe,
    GnnsafePp,
    Nodesafe,
    NodesafePp,
    Logitnorm,
}

/// How a method turns logits into detection scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    Msp,
    RawEnergy,
    PropagatedEnergy,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Msp,
        Method::Energy,
        Method::EnergyFt,
        Method::Gnnsafe,
        Method::GnnsafePp,
        Method::Nodesafe,
        Method::NodesafePp,
        Method::Logitnorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Msp => "msp",
            Method::Energy => "energy",
            Method::EnergyFt => "energy-ft",
            Method::Gnnsafe => "gnnsafe",
            Method::GnnsafePp => "gnnsafe-pp",
            Method::Nodesafe => "nodesafe",
            Method::NodesafePp => "nodesafe-pp",
            Method::Logitnorm => "logitnorm",
        }
    }

    /// Trains with the hinge energy term on exposed OOD nodes.
    pub fn uses_exposure(self) -> bool {
        matches!(self, Method::EnergyFt | Method::GnnsafePp | Method::NodesafePp)
    }

    pub fn uses_ub(self) -> bool {
        matches!(self, Method::Nodesafe | Method::NodesafePp)
    }

    pub fn scoring(self) -> Scoring {
        match self {
            Method::Msp => Scoring::Msp,
            Method::Energy | Method::EnergyFt => Scoring::RawEnergy,
            _ => Scoring::PropagatedEnergy,
        }
    }

    pub fn classifier(self) -> Classifier {
        match self {
            Method::Logitnorm => Classifier::LogitNorm,
            _ => Classifier::Nll,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Every hyperparameter of a run. Serialised field names are the config
/// file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Propagation keep-weight.
    pub eta: f64,
    /// Propagation hops.
    pub hops: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub m_in: f64,
    pub m_out: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
    pub ub_start_epoch: usize,
    pub ub_over_all_nodes: bool,
    pub reg_on_propagated: bool,
    /// Use exposed OOD nodes in training. Defaults to the method's own
    /// setting when absent.
    pub exposure: Option<bool>,
    /// Ablation switches for the two UB terms.
    pub use_bound: bool,
    pub use_uniform: bool,
    pub tpr: f64,
    pub histogram_bins: usize,
    pub dataset: Option<String>,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Nodesafe,
            eta: 0.5,
            hops: 2,
            lambda1: 0.001,
            lambda2: 1.0,
            alpha: 0.01,
            m_in: -5.0,
            m_out: -1.0,
            tau: 0.04,
            lr: 0.01,
            weight_decay: 5e-4,
            dropout: 0.0,
            epochs: 200,
            hidden: 64,
            seed: 0,
            ub_start_epoch: 50,
            ub_over_all_nodes: false,
            reg_on_propagated: true,
            exposure: None,
            use_bound: true,
            use_uniform: true,
            tpr: 0.95,
            histogram_bins: 50,
            dataset: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn exposure(&self) -> bool {
        self.exposure.unwrap_or_else(|| self.method.uses_exposure())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return bad(format!("lambda1 must lie in [0, 1], got {}", self.lambda1));
        }
        if self.lambda2 < 0.0 || self.alpha < 0.0 {
            return bad("lambda2 and alpha must be non-negative".into());
        }
        if self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.dropout != 0.0 {
            return bad("dropout is not supported, set it to 0".into());
        }
        if self.epochs == 0 || self.hidden == 0 {
            return bad("epochs and hidden must be positive".into());
        }
        if !(0.0 < self.tpr && self.tpr <= 1.0) {
            return bad(format!("tpr must lie in (0, 1], got {}", self.tpr));
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive".into());
        }
        if self.exposure == Some(false) && self.method.uses_exposure() {
            return bad(format!("method {} requires exposure", self.method));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn loss_settings(&self) -> LossSettings {
        let ub = self.method.uses_ub();
        LossSettings {
            classifier: self.method.classifier(),
            tau: self.tau,
            energy_reg: self.exposure(),
            use_bound: ub && self.use_bound,
            use_uniform: ub && self.use_uniform,
            alpha: self.alpha,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            m_in: self.m_in,
            m_out: self.m_out,
            ub_start_epoch: self.ub_start_epoch,
            ub_over_all_nodes: self.ub_over_all_nodes,
            reg_on_propagated: self.reg_on_propagated,
        }
    }

    /// Parses a config document, applying `key=value` overrides first.
    /// Values are read as JSON, falling back to a plain string.
    pub fn from_json_with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = match text {
            Some(t) => serde_json::from_str(t)
                .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Default::default()),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            obj.insert(key.trim().to_string(), value);
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_json_with_overrides(text.as_deref(), overrides)
    }
}
