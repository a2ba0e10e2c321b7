//! Graph container, adjacency normalisations and the dataset directory
//! format.
//!
//! A dataset directory holds five UTF-8 files:
//!
//! | file           | content                                                    |
//! |----------------|------------------------------------------------------------|
//! | `graph.json`   | `{"num_nodes": n, "num_features": d, "num_classes": C}`    |
//! | `edges.csv`    | one `src,dst` per line, each undirected edge once          |
//! | `features.csv` | `n` lines of `d` comma-separated floats                    |
//! | `labels.csv`   | `n` lines, one integer in `{-1} ∪ [0, C)`                  |
//! | `masks.csv`    | header `train,val,test_id,test_ood,expose_ood`, `n` rows of flags |

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, SparseMatrix};

pub const MASK_HEADER: &str = "train,val,test_id,test_ood,expose_ood";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: missing file", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: parse error: {msg}")]
    Parse {
        file: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{file}:{line}: dimension mismatch: {msg}")]
    Dimension {
        file: &'static str,
        line: usize,
        msg: String,
    },
    #[error("labels.csv:{line}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        num_classes: usize,
    },
    #[error("masks.csv:{line}: more than one role flag set")]
    OverlappingMasks { line: usize },
    #[error("edges.csv:{line}: {msg}")]
    BadEdge { line: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Role of a node in the experiment. Every node has at most one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Train,
    Val,
    TestId,
    TestOod,
    ExposeOod,
}

impl NodeRole {
    pub const ALL: [NodeRole; 5] = [
        NodeRole::Train,
        NodeRole::Val,
        NodeRole::TestId,
        NodeRole::TestOod,
        NodeRole::ExposeOod,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::Train => "train",
            NodeRole::Val => "val",
            NodeRole::TestId => "test_id",
            NodeRole::TestOod => "test_ood",
            NodeRole::ExposeOod => "expose_ood",
        }
    }

    fn column(self) -> usize {
        NodeRole::ALL.iter().position(|&r| r == self).unwrap()
    }

    /// Roles whose nodes must carry an in-distribution label.
    pub fn is_labeled(self) -> bool {
        matches!(self, NodeRole::Train | NodeRole::Val | NodeRole::TestId)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    num_classes: usize,
    adjacency: SparseMatrix,
    features: Matrix,
    labels: Vec<i64>,
    roles: Vec<Option<NodeRole>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

impl GraphDataset {
    /// Builds a validated dataset from an undirected edge list.
    pub fn from_edges(
        num_classes: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<i64>,
        roles: Vec<Option<NodeRole>>,
    ) -> Result<Self> {
        let n = features.rows();
        let adjacency = adjacency_from_edges(n, edges)?;
        let g = Self {
            num_classes,
            adjacency,
            features,
            labels,
            roles,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.adjacency.dim() != n {
            return Err(DatasetError::Invalid(format!(
                "adjacency is {0}x{0}, expected {n}x{n}",
                self.adjacency.dim()
            )));
        }
        if self.labels.len() != n || self.roles.len() != n {
            return Err(DatasetError::Invalid(format!(
                "{} labels and {} roles for {n} nodes",
                self.labels.len(),
                self.roles.len()
            )));
        }
        if self.num_classes == 0 {
            return Err(DatasetError::Invalid("num_classes must be positive".into()));
        }
        if !self.adjacency.is_symmetric(0.0) {
            return Err(DatasetError::Invalid("adjacency is not symmetric".into()));
        }
        for i in 0..n {
            if self.adjacency.get(i, i) != 0.0 {
                return Err(DatasetError::Invalid(format!("self-loop at node {i}")));
            }
        }
        if !self.features.is_finite() {
            return Err(DatasetError::Invalid("non-finite feature value".into()));
        }
        for (v, (&label, role)) in self.labels.iter().zip(&self.roles).enumerate() {
            if label < -1 || label >= self.num_classes as i64 {
                return Err(DatasetError::LabelOutOfRange {
                    line: v + 1,
                    label,
                    num_classes: self.num_classes,
                });
            }
            if let Some(role) = role {
                if role.is_labeled() && label < 0 {
                    return Err(DatasetError::Invalid(format!(
                        "node {v} has role {} but no label",
                        role.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn roles(&self) -> &[Option<NodeRole>] {
        &self.roles
    }

    pub fn role(&self, v: usize) -> Option<NodeRole> {
        self.roles[v]
    }

    /// Boolean mask of nodes holding `role`.
    pub fn mask(&self, role: NodeRole) -> Vec<bool> {
        self.roles.iter().map(|r| *r == Some(role)).collect()
    }

    /// Indices of nodes holding `role`, ascending.
    pub fn nodes(&self, role: NodeRole) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Some(role))
            .map(|(i, _)| i)
            .collect()
    }

    /// Labels of `nodes` as class indices. Callers pass labeled nodes only.
    pub fn class_labels(&self, nodes: &[usize]) -> Vec<usize> {
        nodes
            .iter()
            .map(|&v| {
                let y = self.labels[v];
                debug_assert!(y >= 0, "node {v} is unlabeled");
                y as usize
            })
            .collect()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency.row_nnz(v)
    }

    /// Undirected edges with `src < dst`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.adjacency.nnz() / 2);
        for i in 0..self.num_nodes() {
            for (j, _) in self.adjacency.row(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }
}

fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut seen = HashSet::with_capacity(edges.len());
    let mut triplets = Vec::with_capacity(edges.len() * 2);
    for (k, &(a, b)) in edges.iter().enumerate() {
        let line = k + 1;
        if a >= n || b >= n {
            return Err(DatasetError::BadEdge {
                line,
                msg: format!("endpoint out of range for {n} nodes: {a},{b}"),
            });
        }
        if a == b {
            return Err(DatasetError::BadEdge {
                line,
                msg: format!("self-loop {a},{b}"),
            });
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(DatasetError::BadEdge {
                line,
                msg: format!("duplicate edge {a},{b}"),
            });
        }
        triplets.push((a, b, 1.0));
        triplets.push((b, a, 1.0));
    }
    SparseMatrix::from_triplets(n, triplets).map_err(|e| DatasetError::Invalid(e.to_string()))
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn sym_normalize(g: &GraphDataset) -> SparseMatrix {
    let a = g.adjacency();
    let n = a.dim();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((a.row(i).map(|(_, v)| v).sum::<f64>() + 1.0).sqrt()))
        .collect();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    offsets.push(0);
    for i in 0..n {
        let mut diag_done = false;
        for (j, v) in a.row(i) {
            if !diag_done && j > i {
                indices.push(i);
                values.push(inv_sqrt[i] * inv_sqrt[i]);
                diag_done = true;
            }
            indices.push(j);
            values.push(inv_sqrt[i] * v * inv_sqrt[j]);
        }
        if !diag_done {
            indices.push(i);
            values.push(inv_sqrt[i] * inv_sqrt[i]);
        }
        offsets.push(indices.len());
    }
    SparseMatrix::from_csr(n, offsets, indices, values).expect("normalised CSR keeps layout")
}

/// `D⁻¹A` without self-loops. Isolated nodes get an all-zero row.
pub fn row_normalize(g: &GraphDataset) -> SparseMatrix {
    let a = g.adjacency();
    let n = a.dim();
    let mut values = Vec::with_capacity(a.nnz());
    for i in 0..n {
        let deg: f64 = a.row(i).map(|(_, v)| v).sum();
        values.extend(a.row(i).map(|(_, v)| v / deg));
    }
    SparseMatrix::from_csr(n, a.offsets().to_vec(), a.indices().to_vec(), values)
        .expect("same layout as adjacency")
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(DatasetError::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|source| DatasetError::Io { path, source })
}

fn parse_err(file: &'static str, line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        file,
        line,
        msg: msg.into(),
    }
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let header_text = read(dir, "graph.json")?;
    let header: Header = serde_json::from_str(&header_text)
        .map_err(|e| parse_err("graph.json", e.line(), e.to_string()))?;
    let n = header.num_nodes;
    let d = header.num_features;

    let edges_text = read(dir, "edges.csv")?;
    let mut edges = Vec::new();
    for (k, line) in edges_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut endpoint = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(|| parse_err("edges.csv", k + 1, "expected src,dst"))?
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err("edges.csv", k + 1, e.to_string()))
        };
        let (a, b) = (endpoint()?, endpoint()?);
        if parts.next().is_some() {
            return Err(parse_err("edges.csv", k + 1, "expected exactly two fields"));
        }
        edges.push((a, b));
    }

    let feat_text = read(dir, "features.csv")?;
    let feat_lines: Vec<&str> = feat_text.lines().collect();
    if feat_lines.len() != n {
        return Err(DatasetError::Dimension {
            file: "features.csv",
            line: feat_lines.len(),
            msg: format!("{} rows, graph.json declares {n}", feat_lines.len()),
        });
    }
    let mut features = Vec::with_capacity(n * d);
    for (k, line) in feat_lines.iter().enumerate() {
        let before = features.len();
        if d > 0 {
            for field in line.split(',') {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err("features.csv", k + 1, e.to_string()))?;
                features.push(v);
            }
        }
        let got = features.len() - before;
        if got != d {
            return Err(DatasetError::Dimension {
                file: "features.csv",
                line: k + 1,
                msg: format!("{got} values, graph.json declares {d}"),
            });
        }
    }
    let features = Matrix::from_vec(n, d, features).expect("length checked per row");

    let label_text = read(dir, "labels.csv")?;
    let label_lines: Vec<&str> = label_text.lines().collect();
    if label_lines.len() != n {
        return Err(DatasetError::Dimension {
            file: "labels.csv",
            line: label_lines.len(),
            msg: format!("{} rows, graph.json declares {n}", label_lines.len()),
        });
    }
    let mut labels = Vec::with_capacity(n);
    for (k, line) in label_lines.iter().enumerate() {
        let y = line
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err("labels.csv", k + 1, e.to_string()))?;
        if y < -1 || y >= header.num_classes as i64 {
            return Err(DatasetError::LabelOutOfRange {
                line: k + 1,
                label: y,
                num_classes: header.num_classes,
            });
        }
        labels.push(y);
    }

    let mask_text = read(dir, "masks.csv")?;
    let mut mask_lines = mask_text.lines();
    match mask_lines.next() {
        Some(h) if h.trim() == MASK_HEADER => {}
        _ => return Err(parse_err("masks.csv", 1, format!("header must be {MASK_HEADER}"))),
    }
    let mask_lines: Vec<&str> = mask_lines.collect();
    if mask_lines.len() != n {
        return Err(DatasetError::Dimension {
            file: "masks.csv",
            line: mask_lines.len() + 1,
            msg: format!("{} rows, graph.json declares {n}", mask_lines.len()),
        });
    }
    let mut roles = Vec::with_capacity(n);
    for (k, line) in mask_lines.iter().enumerate() {
        let line_no = k + 2;
        let flags: Vec<&str> = line.split(',').map(str::trim).collect();
        if flags.len() != 5 {
            return Err(parse_err("masks.csv", line_no, "expected five 0/1 flags"));
        }
        let mut role = None;
        for (col, flag) in flags.iter().enumerate() {
            match *flag {
                "0" => {}
                "1" => {
                    if role.is_some() {
                        return Err(DatasetError::OverlappingMasks { line: line_no });
                    }
                    role = Some(NodeRole::ALL[col]);
                }
                other => {
                    return Err(parse_err(
                        "masks.csv",
                        line_no,
                        format!("flag must be 0 or 1, got {other:?}"),
                    ))
                }
            }
        }
        roles.push(role);
    }

    GraphDataset::from_edges(header.num_classes, &edges, features, labels, roles)
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| DatasetError::Io { path, source })
}

/// Writes `g` in the directory format, creating the directory if needed.
pub fn save_dataset(g: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let header = Header {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: g.num_classes(),
    };
    let mut json = serde_json::to_string_pretty(&header).expect("plain struct");
    json.push('\n');
    write(dir, "graph.json", &json)?;

    let mut edges = String::new();
    for (a, b) in g.edges() {
        writeln!(edges, "{a},{b}").unwrap();
    }
    write(dir, "edges.csv", &edges)?;

    let mut features = String::new();
    for i in 0..g.num_nodes() {
        let row = g.features().row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                features.push(',');
            }
            // Debug formatting is the shortest representation that parses
            // back to the same bits
            write!(features, "{v:?}").unwrap();
        }
        features.push('\n');
    }
    write(dir, "features.csv", &features)?;

    let mut labels = String::new();
    for y in g.labels() {
        writeln!(labels, "{y}").unwrap();
    }
    write(dir, "labels.csv", &labels)?;

    let mut masks = String::from(MASK_HEADER);
    masks.push('\n');
    for role in g.roles() {
        let mut flags = ['0'; 5];
        if let Some(r) = role {
            flags[r.column()] = '1';
        }
        let row: Vec<String> = flags.iter().map(|c| c.to_string()).collect();
        masks.push_str(&row.join(","));
        masks.push('\n');
    }
    write(dir, "masks.csv", &masks)
}
