//! Command implementations behind the CLI and the files they write.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig, Scoring};
use crate::energy::{msp_score, negative_energy, propagate, ScoreKind, ScoreVector};
use crate::graph::{load_dataset, save_dataset, GraphDataset, NodeRole};
use crate::metrics::{detection, id_accuracy, std_dev, DetectionResult};
use crate::model::ModelParams;
use crate::oodgen::{apply_ood, generate_sbm, OodSpec, SbmConfig};
use crate::tensor::Matrix;
use crate::train::{train, EpochLog};
use crate::{Error, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";

const TRAIN_LOG_HEADER: &str = "epoch,total,nll,reg,bound,uniform,ub,val_loss";
const SCORES_HEADER: &str = "node,role,score";
const HISTOGRAM_HEADER: &str = "bin_left,bin_right,count_id,count_ood";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config: RunConfig,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub model: ModelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seed: u64,
    pub config: RunConfig,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub id_accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub gamma: f64,
    pub score_kind: String,
    pub positive_class: String,
    pub version: String,
}

/// Everything produced by scoring one model on one dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub logits: Matrix,
    pub scores: ScoreVector,
    pub detection: DetectionResult,
}

impl Evaluation {
    pub fn id_scores(&self, g: &GraphDataset) -> Vec<f64> {
        self.scores.select(&g.nodes(NodeRole::TestId))
    }

    pub fn ood_scores(&self, g: &GraphDataset) -> Vec<f64> {
        self.scores.select(&g.nodes(NodeRole::TestOod))
    }
}

/// Detection scores of a method for every node.
pub fn score_logits(logits: &Matrix, g: &GraphDataset, cfg: &RunConfig) -> Result<ScoreVector> {
    match cfg.method.scoring() {
        Scoring::Msp => Ok(msp_score(logits)),
        Scoring::RawEnergy => Ok(negative_energy(logits)),
        Scoring::PropagatedEnergy => propagate(&negative_energy(logits), g, cfg.eta, cfg.hops),
    }
}

pub fn evaluate_model(g: &GraphDataset, params: &ModelParams, cfg: &RunConfig) -> Result<Evaluation> {
    let logits = params.forward(g)?;
    if !logits.is_finite() {
        return Err(Error::Numerical("model produced non-finite logits".into()));
    }
    let scores = score_logits(&logits, g, cfg)?;
    let id_nodes = g.nodes(NodeRole::TestId);
    let acc = id_accuracy(&logits, &g.class_labels(&id_nodes), &id_nodes)?;
    let id = scores.select(&id_nodes);
    let ood = scores.select(&g.nodes(NodeRole::TestOod));
    let detection = detection(&id, &ood, cfg.tpr, acc)?;
    Ok(Evaluation {
        logits,
        scores,
        detection,
    })
}

/// Trains and evaluates in memory.
pub fn run(g: &GraphDataset, cfg: &RunConfig) -> Result<(Checkpoint, Vec<EpochLog>, Evaluation)> {
    if g.nodes(NodeRole::TestOod).is_empty() {
        return Err(Error::Data("dataset has no test_ood nodes".into()));
    }
    let outcome = train(g, cfg)?;
    let eval = evaluate_model(g, &outcome.params, cfg)?;
    let checkpoint = Checkpoint {
        version: VERSION.into(),
        config: cfg.clone(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss.is_finite().then_some(outcome.best_val_loss),
        model: outcome.params,
    };
    Ok((checkpoint, outcome.log, eval))
}

pub fn metrics_report(cfg: &RunConfig, d: &DetectionResult, kind: ScoreKind) -> MetricsReport {
    MetricsReport {
        method: cfg.method,
        seed: cfg.seed,
        config: cfg.clone(),
        auroc: d.auroc,
        aupr: d.aupr,
        fpr95: d.fpr95,
        id_accuracy: d.id_accuracy,
        n_id: d.n_id,
        n_ood: d.n_ood,
        gamma: d.gamma,
        score_kind: kind.label().into(),
        positive_class: "id".into(),
        version: VERSION.into(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

fn parse_csv_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| data_err(path, line, format!("not a number: {field:?}")))
}

fn checked_lines<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(data_err(path, 1, format!("expected header {header:?}")));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(k, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != width {
                return Err(data_err(path, k + 2, format!("expected {width} fields")));
            }
            Ok((k + 2, fields))
        })
        .collect()
}

pub fn format_train_log(log: &[EpochLog]) -> String {
    let mut s = format!("{TRAIN_LOG_HEADER}\n");
    for e in log {
        let l = &e.loss;
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            e.epoch, l.total, l.nll, l.reg, l.bound, l.uniform, l.ub, e.val_loss
        )
        .unwrap();
    }
    s
}

/// Reads back the rows written by [`format_train_log`] as
/// `(epoch, [total, nll, reg, bound, uniform, ub, val_loss])`.
pub fn parse_train_log(path: &Path, text: &str) -> Result<Vec<(usize, [f64; 7])>> {
    checked_lines(path, text, TRAIN_LOG_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let epoch = f[0]
                .parse()
                .map_err(|_| data_err(path, line, "bad epoch"))?;
            let mut values = [0.0; 7];
            for (v, field) in values.iter_mut().zip(&f[1..]) {
                *v = parse_csv_f64(path, line, field)?;
            }
            Ok((epoch, values))
        })
        .collect()
}

pub fn format_scores(g: &GraphDataset, scores: &ScoreVector) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    for (v, score) in scores.values.iter().enumerate() {
        let role = g.role(v).map_or("", NodeRole::as_str);
        writeln!(s, "{v},{role},{score:?}").unwrap();
    }
    s
}

pub fn parse_scores(path: &Path, text: &str) -> Result<Vec<(usize, Option<NodeRole>, f64)>> {
    checked_lines(path, text, SCORES_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let node = f[0].parse().map_err(|_| data_err(path, line, "bad node"))?;
            let role = match f[1] {
                "" => None,
                r => Some(
                    NodeRole::ALL
                        .into_iter()
                        .find(|x| x.as_str() == r)
                        .ok_or_else(|| data_err(path, line, format!("unknown role {r:?}")))?,
                ),
            };
            Ok((node, role, parse_csv_f64(path, line, f[2])?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count_id: usize,
    pub count_ood: usize,
}

/// Equal-width bins over `[min − ε, max + ε]` of the pooled scores.
pub fn histogram(id: &[f64], ood: &[f64], bins: usize) -> Vec<HistogramBin> {
    let all = || id.iter().chain(ood);
    let lo = all().copied().fold(f64::INFINITY, f64::min);
    let hi = all().copied().fold(f64::NEG_INFINITY, f64::max);
    if bins == 0 || !lo.is_finite() || !hi.is_finite() {
        return Vec::new();
    }
    let eps = 1e-6 * (hi - lo).max(1.0);
    let (lo, hi) = (lo - eps, hi + eps);
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            left: lo + b as f64 * width,
            right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count_id: 0,
            count_ood: 0,
        })
        .collect();
    let index = |s: f64| (((s - lo) / width) as usize).min(bins - 1);
    for &s in id {
        out[index(s)].count_id += 1;
    }
    for &s in ood {
        out[index(s)].count_ood += 1;
    }
    out
}

pub fn format_histogram(bins: &[HistogramBin]) -> String {
    let mut s = format!("{HISTOGRAM_HEADER}\n");
    for b in bins {
        writeln!(s, "{:?},{:?},{},{}", b.left, b.right, b.count_id, b.count_ood).unwrap();
    }
    s
}

pub fn parse_histogram(path: &Path, text: &str) -> Result<Vec<HistogramBin>> {
    checked_lines(path, text, HISTOGRAM_HEADER)?
        .into_iter()
        .map(|(line, f)| {
            let count = |x: &str| {
                x.parse::<usize>()
                    .map_err(|_| data_err(path, line, format!("bad count {x:?}")))
            };
            Ok(HistogramBin {
                left: parse_csv_f64(path, line, f[0])?,
                right: parse_csv_f64(path, line, f[1])?,
                count_id: count(f[2])?,
                count_ood: count(f[3])?,
            })
        })
        .collect()
}

/// Writes metrics.json, scores.csv and histogram.csv into `out`.
pub fn write_evaluation(out: &Path, g: &GraphDataset, cfg: &RunConfig, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = metrics_report(cfg, &eval.detection, eval.scores.kind);
    write(&out.join(METRICS_FILE), &to_json(&report))?;
    write(&out.join(SCORES_FILE), &format_scores(g, &eval.scores))?;
    let bins = histogram(&eval.id_scores(g), &eval.ood_scores(g), cfg.histogram_bins);
    write(&out.join(HISTOGRAM_FILE), &format_histogram(&bins))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| Error::Data(format!("{}: invalid checkpoint: {e}", path.display())))
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| Error::Data(format!("{}: invalid metrics: {e}", path.display())))
}

pub fn cmd_generate(cfg: &SbmConfig, out: &Path) -> Result<GraphDataset> {
    let g = generate_sbm(cfg)?;
    save_dataset(&g, out)?;
    Ok(g)
}

pub fn cmd_make_ood(dataset: &Path, spec: &OodSpec, out: &Path) -> Result<GraphDataset> {
    let g = load_dataset(dataset)?;
    let ood = apply_ood(&g, spec)?;
    save_dataset(&ood, out)?;
    Ok(ood)
}

/// Trains, then writes the checkpoint, the training log and the evaluation
/// files of the selected model into `out`.
pub fn cmd_train(dataset: &Path, cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let g = load_dataset(dataset)?;
    let (checkpoint, log, eval) = run(&g, cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CHECKPOINT_FILE), &to_json(&checkpoint))?;
    write(&out.join(TRAIN_LOG_FILE), &format_train_log(&log))?;
    write_evaluation(out, &g, cfg, &eval)?;
    Ok(metrics_report(cfg, &eval.detection, eval.scores.kind))
}

/// Re-scores a saved model. `overrides` apply on top of the checkpoint's
/// configuration, so scoring settings such as `eta` can be varied.
pub fn cmd_evaluate(
    dataset: &Path,
    checkpoint: &Path,
    overrides: &[String],
    out: &Path,
) -> Result<MetricsReport> {
    let g = load_dataset(dataset)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let base = serde_json::to_string(&ckpt.config).expect("serialisable");
    let cfg = RunConfig::from_json_with_overrides(Some(&base), overrides)?;
    if g.nodes(NodeRole::TestOod).is_empty() {
        return Err(Error::Data("dataset has no test_ood nodes".into()));
    }
    let eval = evaluate_model(&g, &ckpt.model, &cfg)?;
    write_evaluation(out, &g, &cfg, &eval)?;
    Ok(metrics_report(&cfg, &eval.detection, eval.scores.kind))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let mean = if xs.is_empty() {
            f64::NAN
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        Self {
            mean,
            std: std_dev(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub auroc: MeanStd,
    pub aupr: MeanStd,
    pub fpr95: MeanStd,
    pub id_accuracy: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: String,
    pub base_config: RunConfig,
    pub rows: Vec<CompareRow>,
}

const COMPARE_HEADER: &str = "method,auroc_mean,auroc_std,aupr_mean,aupr_std,fpr95_mean,fpr95_std,id_accuracy_mean,id_accuracy_std";

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{COMPARE_HEADER}\n");
        for r in &self.rows {
            write!(s, "{}", r.method).unwrap();
            for m in [r.auroc, r.aupr, r.fpr95, r.id_accuracy] {
                write!(s, ",{:?},{:?}", m.mean, m.std).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Human-readable table in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>15} {:>15} {:>15} {:>15}\n",
            "method", "AUROC", "AUPR", "FPR95", "ID acc"
        );
        for r in &self.rows {
            write!(s, "{:<12}", r.method.name()).unwrap();
            for m in [r.auroc, r.aupr, r.fpr95, r.id_accuracy] {
                write!(s, " {:>8.2} ± {:<4.2}", 100.0 * m.mean, 100.0 * m.std).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every (method, seed) cell on the same dataset and aggregates the
/// detection metrics per method.
pub fn compare(
    g: &GraphDataset,
    base: &RunConfig,
    methods: &[Method],
    seeds: &[u64],
) -> Result<(Comparison, Vec<MetricsReport>)> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one method and one seed".into()));
    }
    let mut rows = Vec::with_capacity(methods.len());
    let mut reports = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        let mut cells = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = RunConfig {
                method,
                seed,
                exposure: None,
                ..base.clone()
            };
            cfg.validate()?;
            let (_, _, eval) = run(g, &cfg)?;
            cells.push(eval.detection);
            reports.push(metrics_report(&cfg, &eval.detection, eval.scores.kind));
        }
        let col = |f: fn(&DetectionResult) -> f64| MeanStd::of(&cells.iter().map(f).collect::<Vec<_>>());
        rows.push(CompareRow {
            method,
            seeds: seeds.to_vec(),
            auroc: col(|d| d.auroc),
            aupr: col(|d| d.aupr),
            fpr95: col(|d| d.fpr95),
            id_accuracy: col(|d| d.id_accuracy),
        });
    }
    let comparison = Comparison {
        version: VERSION.into(),
        base_config: base.clone(),
        rows,
    };
    Ok((comparison, reports))
}

/// Writes compare.json, compare.csv and one metrics file per cell.
pub fn cmd_compare(
    dataset: &Path,
    base: &RunConfig,
    methods: &[Method],
    seeds: &[u64],
    out: &Path,
) -> Result<Comparison> {
    let g = load_dataset(dataset)?;
    let (comparison, reports) = compare(&g, base, methods, seeds)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("compare.json"), &to_json(&comparison))?;
    write(&out.join("compare.csv"), &comparison.to_csv())?;
    for r in &reports {
        let name: PathBuf = format!("metrics_{}_seed{}.json", r.method, r.seed).into();
        write(&out.join(name), &to_json(r))?;
    }
    Ok(comparison)
}
