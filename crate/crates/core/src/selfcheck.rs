//! Randomised consistency suites: gradients against finite differences,
//! the logit-shift and norm-bound identities, propagation properties and
//! metric oracles. Each suite is seeded and returns a [`CheckReport`].

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::energy::{negative_energy, propagate, propagation_operator, ScoreKind, ScoreVector};
use crate::graph::{row_normalize, GraphDataset};
use crate::losses::{bound_loss, bound_loss_gradient, uniform_loss, uniform_loss_gradient, MIN_SUM_SCALE};
use crate::metrics::{aupr, auroc, fpr_at_tpr};
use crate::tensor::{logsumexp, Matrix, Tape};

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({} cases): {}", self.name, self.cases, self.detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn norm(m: &Matrix) -> f64 {
    m.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `z`.
pub fn finite_difference(z: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    let mut probe = z.clone();
    for k in 0..z.data().len() {
        let x = z.data()[k];
        probe.data_mut()[k] = x + h;
        let up = f(&probe);
        probe.data_mut()[k] = x - h;
        let down = f(&probe);
        probe.data_mut()[k] = x;
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    grad
}

fn variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

fn row_norms(z: &Matrix, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&r| z.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn row_sums(z: &Matrix, rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&r| z.row(r).iter().sum()).collect()
}

/// Bound loss with its scale held at `scale`, the function whose gradient
/// the stop-gradient version reports.
pub fn bound_value_frozen(z: &Matrix, rows: &[usize], scale: f64) -> f64 {
    variance(&row_norms(z, rows)) / scale
}

pub fn uniform_value_frozen(z: &Matrix, groups: &[(&[usize], f64)]) -> f64 {
    groups
        .iter()
        .map(|(rows, scale)| variance(&row_sums(z, rows)) / scale)
        .sum()
}

fn sum_scale(z: &Matrix, rows: &[usize]) -> f64 {
    let s = row_sums(z, rows);
    (s.iter().sum::<f64>() / s.len() as f64).abs().max(MIN_SUM_SCALE)
}

/// Three gradients of each variance regulariser: closed form, tape, and
/// central differences with the scale frozen.
pub struct GradientTriple {
    pub analytic: Matrix,
    pub autodiff: Matrix,
    pub numeric: Matrix,
}

impl GradientTriple {
    pub fn worst(&self) -> f64 {
        relative_error(&self.analytic, &self.autodiff)
            .max(relative_error(&self.analytic, &self.numeric))
            .max(relative_error(&self.autodiff, &self.numeric))
    }
}

pub fn bound_gradients(z: &Matrix, rows: &[usize]) -> GradientTriple {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let loss = bound_loss(&mut tape, v, rows).expect("valid rows");
    let autodiff = tape.backward(loss).expect("scalar").wrt(v);
    let scale = row_norms(z, rows).iter().sum::<f64>() / rows.len() as f64;
    GradientTriple {
        analytic: bound_loss_gradient(z, rows),
        autodiff,
        numeric: finite_difference(z, FD_STEP, |p| bound_value_frozen(p, rows, scale)),
    }
}

pub fn uniform_gradients(z: &Matrix, id: &[usize], ood: &[usize]) -> GradientTriple {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let loss = uniform_loss(&mut tape, v, id, ood).expect("valid rows");
    let autodiff = tape.backward(loss).expect("scalar").wrt(v);
    let mut groups = vec![(id, sum_scale(z, id))];
    if !ood.is_empty() {
        groups.push((ood, sum_scale(z, ood)));
    }
    GradientTriple {
        analytic: uniform_loss_gradient(z, id, ood),
        autodiff,
        numeric: finite_difference(z, FD_STEP, |p| uniform_value_frozen(p, &groups)),
    }
}

/// Random logits with `n ∈ [5, 50]`, `C ∈ [2, 10]`, a random subset of rows
/// as the bound group and a random split of it into ID and OOD groups.
pub fn random_loss_instance(rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>, Vec<usize>) {
    let n = rng.gen_range(5..=50);
    let c = rng.gen_range(2..=10);
    let scale = rng.gen_range(0.5..5.0);
    let z = normal_matrix(rng, n, c, scale);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let used = rng.gen_range(4..=n);
    rows.truncate(used);
    let cut = rng.gen_range(2..=used);
    let mut id = rows[..cut].to_vec();
    let mut ood = rows[cut..].to_vec();
    id.sort_unstable();
    ood.sort_unstable();
    (z, id, ood)
}

pub fn gradient_suite(instances: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut worst_bound: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    for _ in 0..instances {
        let (z, id, ood) = random_loss_instance(&mut rng);
        let all: Vec<usize> = {
            let mut a: Vec<usize> = id.iter().chain(&ood).copied().collect();
            a.sort_unstable();
            a
        };
        worst_bound = worst_bound.max(bound_gradients(&z, &all).worst());
        worst_uniform = worst_uniform.max(uniform_gradients(&z, &id, &ood).worst());
    }
    CheckReport {
        name: "variance-regulariser gradients",
        passed: worst_bound < 1e-5 && worst_uniform < 1e-5,
        cases: instances,
        detail: format!(
            "max pairwise relative error: bound {worst_bound:.2e}, uniform {worst_uniform:.2e} (limit 1e-5)"
        ),
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = logsumexp(row);
    row.iter().map(|x| (x - lse).exp()).collect()
}

pub const SHIFTS: [f64; 5] = [-100.0, -1.0, 0.0, 1.0, 100.0];

/// Softmax is unchanged by a constant logit shift.
pub fn shift_invariance_suite(rows: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let c = rng.gen_range(2..=10);
        let z: Vec<f64> = (0..c).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let base = softmax(&z);
        for s in SHIFTS {
            let shifted: Vec<f64> = z.iter().map(|x| x + s).collect();
            for (a, b) in softmax(&shifted).iter().zip(&base) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckReport {
        name: "softmax shift invariance",
        passed: worst < 1e-12,
        cases: rows * SHIFTS.len(),
        detail: format!("max |Δp| = {worst:.2e} (limit 1e-12)"),
    }
}

/// The energy score moves by exactly the shift.
pub fn shift_energy_suite(rows: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let c = rng.gen_range(1..=10);
        let z = normal_matrix(&mut rng, 1, c, 3.0);
        let base = negative_energy(&z).values[0];
        for s in SHIFTS {
            let shifted = negative_energy(&z.map(|x| x + s)).values[0];
            worst = worst.max((shifted - base - s).abs());
        }
    }
    CheckReport {
        name: "energy shift identity",
        passed: worst < 1e-12,
        cases: rows * SHIFTS.len(),
        detail: format!("max |(-E(z+s)) - (-E(z)) - s| = {worst:.2e} (limit 1e-12)"),
    }
}

/// Rows rescaled to norm `M ∈ (0, 1]` score within `log C ± M/√C`, and the
/// constant rows `±(M/√C)·1` reach the two ends.
pub fn norm_bound_suite(rows: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut violations = 0;
    let mut worst_violation: f64 = 0.0;
    let mut worst_extreme: f64 = 0.0;
    for _ in 0..rows {
        let c = rng.gen_range(2..=10);
        let m = 1.0 - rng.gen_range(0.0..1.0);
        let raw: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let len = raw.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
        let z: Vec<f64> = raw.iter().map(|x| x * m / len).collect();
        let score = logsumexp(&z);
        let half = m / (c as f64).sqrt();
        let (lo, hi) = ((c as f64).ln() - half, (c as f64).ln() + half);
        if score < lo - 1e-12 || score > hi + 1e-12 {
            violations += 1;
            worst_violation = worst_violation.max((lo - score).max(score - hi));
        }
        let top = logsumexp(&vec![half; c]);
        let bottom = logsumexp(&vec![-half; c]);
        worst_extreme = worst_extreme.max((top - hi).abs()).max((bottom - lo).abs());
    }
    CheckReport {
        name: "energy norm bounds",
        passed: violations == 0 && worst_extreme < 1e-10,
        cases: rows,
        detail: format!(
            "{violations} rows outside the bounds (worst by {worst_violation:.2e}), extremal rows off by {worst_extreme:.2e}"
        ),
    }
}

/// Random undirected graph on `n` nodes with edge probability `p`.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> GraphDataset {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    GraphDataset::from_edges(1, &edges, Matrix::zeros(n, 1), vec![-1; n], vec![None; n])
        .expect("valid random graph")
}

pub fn propagation_suite(instances: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut failures = Vec::new();
    let mut worst_compose: f64 = 0.0;
    let mut checked_nodes = 0;
    for case in 0..instances {
        let n = rng.gen_range(2..=30);
        let p = rng.gen_range(0.0..0.5);
        let g = random_graph(&mut rng, n, p);
        let values: Vec<f64> = (0..n).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = ScoreVector {
            values: values.clone(),
            kind: ScoreKind::RawEnergy,
        };
        let eta = rng.gen_range(0.0..0.95);
        let hops = rng.gen_range(1..=5);
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));

        let out = propagate(&s, &g, eta, hops).expect("valid eta");
        if out.values.iter().any(|&x| x < lo - 1e-12 || x > hi + 1e-12) {
            failures.push(format!("case {case}: convex bound"));
        }

        let one = propagate(&s, &g, eta, 1).expect("valid eta");
        let p_row = row_normalize(&g);
        for i in 0..n {
            if p_row.row_nnz(i) == 0 {
                continue;
            }
            checked_nodes += 1;
            let mean: f64 = p_row.row(i).map(|(j, w)| w * values[j]).sum();
            let ok = if mean > values[i] {
                one.values[i] > values[i]
            } else if mean < values[i] {
                one.values[i] < values[i]
            } else {
                true
            };
            if !ok {
                failures.push(format!("case {case}: monotonicity at node {i}"));
            }
        }

        if propagate(&s, &g, 1.0, hops).expect("valid eta").values != values {
            failures.push(format!("case {case}: eta = 1 is not the identity"));
        }

        let mut step = s.clone();
        for _ in 0..hops {
            step = propagate(&step, &g, eta, 1).expect("valid eta");
        }
        let op = Arc::new(propagation_operator(&g, eta).expect("valid eta"));
        let mut tape = Tape::new();
        let mut v = tape.constant(Matrix::column(values.clone()));
        for _ in 0..hops {
            v = tape.spmm(&op, v).expect("shapes");
        }
        for (k, &x) in out.values.iter().enumerate() {
            worst_compose = worst_compose
                .max((x - step.values[k]).abs())
                .max((x - tape.value(v).data()[k]).abs());
        }
    }
    if worst_compose > 1e-12 {
        failures.push(format!("composed hops differ by {worst_compose:.2e}"));
    }
    CheckReport {
        name: "score propagation",
        passed: failures.is_empty(),
        cases: instances,
        detail: if failures.is_empty() {
            format!(
                "bounds, identity and composition hold; monotonicity checked on {checked_nodes} nodes; composition error {worst_compose:.2e}"
            )
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    }
}

/// Pairwise-comparison AUROC.
pub fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &a in id {
        for &b in ood {
            credit += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (id.len() * ood.len()) as f64
}

/// Average precision from precision and recall counted afresh at every
/// distinct score.
pub fn aupr_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|&&s| s >= t).count() as f64;
        let fp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / id.len() as f64;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    area
}

/// FPR at the highest ID score that still accepts `⌈tpr · n⌉` ID scores.
pub fn fpr_oracle(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let need = ((tpr * id.len() as f64) - 1e-9).ceil() as usize;
    let gamma = id
        .iter()
        .copied()
        .filter(|&t| id.iter().filter(|&&s| s >= t).count() >= need)
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|&&s| s >= gamma).count() as f64 / ood.len() as f64
}

/// Random ID/OOD score sets; half the instances draw from a few integers to
/// force ties.
pub fn random_score_sets(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n_id = rng.gen_range(1..=40);
    let n_ood = rng.gen_range(1..=40);
    let tied = rng.gen_bool(0.5);
    let mut draw = |shift: f64| {
        if tied {
            f64::from(rng.gen_range(0..5)) + if rng.gen_bool(0.5) { shift.round() } else { 0.0 }
        } else {
            rng.sample::<f64, _>(StandardNormal) + shift
        }
    };
    let id = (0..n_id).map(|_| draw(0.7)).collect();
    let ood = (0..n_ood).map(|_| draw(0.0)).collect();
    (id, ood)
}

pub fn metric_oracle_suite(instances: usize, seed: u64) -> CheckReport {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (id, ood) = random_score_sets(&mut rng);
        let tpr = [0.95, 0.9, 0.5, 1.0][rng.gen_range(0..4)];
        worst = worst
            .max((auroc(&id, &ood).unwrap() - auroc_oracle(&id, &ood)).abs())
            .max((aupr(&id, &ood).unwrap() - aupr_oracle(&id, &ood)).abs())
            .max((fpr_at_tpr(&id, &ood, tpr).unwrap().0 - fpr_oracle(&id, &ood, tpr)).abs());
    }
    CheckReport {
        name: "metric oracles",
        passed: worst < 1e-12,
        cases: instances,
        detail: format!("max |fast - oracle| = {worst:.2e} (limit 1e-12)"),
    }
}

/// Every suite at its acceptance size.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    vec![
        gradient_suite(100, seed),
        shift_invariance_suite(10_000, seed + 1),
        shift_energy_suite(10_000, seed + 2),
        norm_bound_suite(100_000, seed + 3),
        propagation_suite(1000, seed + 4),
        metric_oracle_suite(100, seed + 5),
    ]
}
