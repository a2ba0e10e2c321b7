//! Node-level out-of-distribution detection on graphs.
//!
//! A two-layer GCN is trained on the in-distribution nodes of a graph; the
//! per-node negative energy `logsumexp(z_v)` of its logits, optionally
//! propagated over the graph, scores how in-distribution each node looks.
//! Two variance regularisers on the logits keep those scores bounded and
//! comparable across nodes: one on the spread of logit norms, one on the
//! spread of logit sums.
//!
//! Modules, bottom-up: [`tensor`] (dense/sparse matrices and reverse-mode
//! differentiation), [`graph`] (datasets and adjacency normalisation),
//! [`model`] and [`train`] (GCN, Adam, training loop), [`energy`] (scores
//! and propagation), [`losses`], [`oodgen`] (synthetic benchmarks),
//! [`metrics`], and [`config`]/[`pipeline`] behind the command line.

pub mod bench;
pub mod config;
pub mod energy;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oodgen;
pub mod pipeline;
pub mod selfcheck;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use graph::{DatasetError, GraphDataset, NodeRole};
pub use tensor::{Matrix, SparseMatrix, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("numerical error: {0}")]
    Tensor(#[from] TensorError),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Dataset(_) | Error::Io { .. } => 3,
            Error::Tensor(_) | Error::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
