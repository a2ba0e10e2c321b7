//! Seeded synthetic graphs and OOD construction.
//!
//! Every generator is a pure function of its inputs and seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{GraphDataset, NodeRole};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Stochastic block model with Gaussian class-conditional features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmConfig {
    pub num_blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Norm of each class mean.
    pub class_mean_scale: f64,
    /// Standard deviation of the per-coordinate noise.
    pub feature_noise: f64,
    pub seed: u64,
    /// Log-normal spread of per-node degree weights (degree-corrected
    /// SBM); 0 gives the plain model.
    #[serde(default)]
    pub degree_spread: f64,
}

impl SbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.nodes_per_block == 0 || self.feature_dim == 0 {
            return Err(Error::Config("SBM counts must be positive".into()));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if !(self.class_mean_scale >= 0.0 && self.feature_noise >= 0.0 && self.degree_spread >= 0.0) {
            return Err(Error::Config("feature scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Builds the dataset: block-wise edges, class mean plus noise features and
/// a per-class 1:1:8 train/val/test split.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<GraphDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_blocks;
    let n = c * cfg.nodes_per_block;
    let block = |v: usize| v / cfg.nodes_per_block;

    // weights with unit mean inside each block keep the expected block
    // densities at p_in and p_out
    let mut theta = vec![1.0; n];
    if cfg.degree_spread > 0.0 {
        let spread = Normal::new(0.0, cfg.degree_spread).map_err(|e| Error::Config(e.to_string()))?;
        for chunk in theta.chunks_mut(cfg.nodes_per_block) {
            for t in chunk.iter_mut() {
                *t = spread.sample(&mut rng).exp();
            }
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            chunk.iter_mut().for_each(|t| *t /= mean);
        }
    }

    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if block(a) == block(b) { cfg.p_in } else { cfg.p_out };
            if rng.gen_bool((p * theta[a] * theta[b]).min(1.0)) {
                edges.push((a, b));
            }
        }
    }

    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| x / norm * cfg.class_mean_scale).collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = Matrix::zeros(n, cfg.feature_dim);
    for v in 0..n {
        for (x, m) in features.row_mut(v).iter_mut().zip(&means[block(v)]) {
            *x = m + noise.sample(&mut rng);
        }
    }

    let mut roles = vec![None; n];
    for k in 0..c {
        let mut members: Vec<usize> = (k * cfg.nodes_per_block..(k + 1) * cfg.nodes_per_block).collect();
        members.shuffle(&mut rng);
        let tenth = (members.len() as f64 / 10.0).round().max(1.0) as usize;
        for (i, &v) in members.iter().enumerate() {
            roles[v] = Some(if i < tenth {
                NodeRole::Train
            } else if i < 2 * tenth {
                NodeRole::Val
            } else {
                NodeRole::TestId
            });
        }
    }
    let labels = (0..n).map(|v| block(v) as i64).collect();
    Ok(GraphDataset::from_edges(c, &edges, features, labels, roles)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OodKind {
    /// New nodes with copied features and random wiring.
    Structure {
        frac_ood: f64,
        /// Expected degree of a new node; the original graph's mean degree
        /// when absent.
        #[serde(default)]
        avg_degree: Option<f64>,
        /// Expected share of a new node's edges that join other new nodes;
        /// one probability for every pair when absent.
        #[serde(default)]
        ood_edge_share: Option<f64>,
    },
    /// Test nodes whose features become a mix of two random nodes.
    Feature {
        frac_ood: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
        /// Draw λ from U(0, 1) per node instead.
        #[serde(default)]
        random_lambda: bool,
    },
    LabelLeaveOut { held_out: Vec<usize> },
}

fn default_lambda() -> f64 {
    0.5
}

fn default_expose() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSpec {
    #[serde(flatten)]
    pub kind: OodKind,
    /// Share of the OOD nodes marked `expose_ood` instead of `test_ood`.
    #[serde(default = "default_expose")]
    pub expose_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

pub fn apply_ood(g: &GraphDataset, spec: &OodSpec) -> Result<GraphDataset> {
    match &spec.kind {
        OodKind::Structure {
            frac_ood,
            avg_degree,
            ood_edge_share,
        } => structure_manipulation(
            g,
            *frac_ood,
            *avg_degree,
            *ood_edge_share,
            spec.expose_fraction,
            spec.seed,
        ),
        OodKind::Feature {
            frac_ood,
            lambda,
            random_lambda,
        } => {
            let lambda = if *random_lambda { None } else { Some(*lambda) };
            feature_interpolation(g, *frac_ood, lambda, spec.expose_fraction, spec.seed)
        }
        OodKind::LabelLeaveOut { held_out } => {
            label_leave_out(g, held_out, spec.expose_fraction, spec.seed)
        }
    }
}

fn check_fractions(frac_ood: f64, expose_fraction: f64) -> Result<()> {
    if !(frac_ood > 0.0 && frac_ood < 1.0) {
        return Err(Error::Config(format!("frac_ood must lie in (0, 1), got {frac_ood}")));
    }
    check_expose(expose_fraction)
}

fn check_expose(expose_fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&expose_fraction) {
        return Err(Error::Config(format!(
            "expose_fraction must lie in [0, 1], got {expose_fraction}"
        )));
    }
    Ok(())
}

/// Marks the shuffled OOD nodes: the first `round(f · m)` are exposed.
fn assign_ood_roles(
    roles: &mut [Option<NodeRole>],
    ood: &[usize],
    expose_fraction: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut order = ood.to_vec();
    order.shuffle(rng);
    let exposed = (expose_fraction * order.len() as f64).round() as usize;
    for (i, &v) in order.iter().enumerate() {
        roles[v] = Some(if i < exposed {
            NodeRole::ExposeOod
        } else {
            NodeRole::TestOod
        });
    }
}

fn ood_count(frac_ood: f64, n: usize) -> usize {
    // 0.2 · 600 must give 120, not 121
    ((frac_ood * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Appends `⌈frac_ood · n⌉` nodes with features copied from random original
/// nodes. Every pair with at least one new endpoint becomes an edge
/// independently, with probabilities that give a new node `avg_degree`
/// expected neighbours. Without `ood_edge_share` all such pairs share one
/// probability; with it, that share of the expected degree goes to other new
/// nodes and the rest to original ones.
pub fn structure_manipulation(
    g: &GraphDataset,
    frac_ood: f64,
    avg_degree: Option<f64>,
    ood_edge_share: Option<f64>,
    expose_fraction: f64,
    seed: u64,
) -> Result<GraphDataset> {
    check_fractions(frac_ood, expose_fraction)?;
    let n = g.num_nodes();
    let m = ood_count(frac_ood, n);
    let avg_degree = avg_degree.unwrap_or(2.0 * g.num_edges() as f64 / n as f64);
    if avg_degree.is_nan() || avg_degree < 0.0 {
        return Err(Error::Config(format!("avg_degree must be non-negative, got {avg_degree}")));
    }
    let (p_new, p_old) = match ood_edge_share {
        None => {
            let p = (avg_degree / (n + m - 1) as f64).min(1.0);
            (p, p)
        }
        Some(share) if (0.0..=1.0).contains(&share) => {
            let p_new = if m > 1 {
                share * avg_degree / (m - 1) as f64
            } else {
                0.0
            };
            (p_new.min(1.0), ((1.0 - share) * avg_degree / n as f64).min(1.0))
        }
        Some(share) => {
            return Err(Error::Config(format!(
                "ood_edge_share must lie in [0, 1], got {share}"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let d = g.num_features();
    let mut data = g.features().data().to_vec();
    for _ in 0..m {
        let src = rng.gen_range(0..n);
        data.extend_from_slice(g.features().row(src));
    }
    let features = Matrix::from_vec(n + m, d, data)?;

    let mut edges = g.edges();
    for a in n..n + m {
        for b in 0..a {
            let p = if b < n { p_old } else { p_new };
            if rng.gen_bool(p) {
                edges.push((b, a));
            }
        }
    }

    let mut labels = g.labels().to_vec();
    labels.resize(n + m, -1);
    let mut roles = g.roles().to_vec();
    roles.resize(n + m, None);
    let ood: Vec<usize> = (n..n + m).collect();
    assign_ood_roles(&mut roles, &ood, expose_fraction, &mut rng);
    Ok(GraphDataset::from_edges(g.num_classes(), &edges, features, labels, roles)?)
}

/// Turns `⌈frac_ood · n⌉` test nodes into OOD nodes with features
/// `λ x_u + (1 − λ) x_v` for random original nodes `u, v`. `lambda = None`
/// draws λ from U(0, 1) for each node.
pub fn feature_interpolation(
    g: &GraphDataset,
    frac_ood: f64,
    lambda: Option<f64>,
    expose_fraction: f64,
    seed: u64,
) -> Result<GraphDataset> {
    check_fractions(frac_ood, expose_fraction)?;
    if let Some(l) = lambda {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {l}")));
        }
    }
    let n = g.num_nodes();
    let m = ood_count(frac_ood, n);
    let mut candidates = g.nodes(NodeRole::TestId);
    if candidates.len() < m {
        return Err(Error::Data(format!(
            "{m} OOD nodes requested but only {} test nodes exist",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut chosen = candidates[..m].to_vec();
    chosen.sort_unstable();

    let original = g.features();
    let mut features = original.clone();
    for &w in &chosen {
        let u = rng.gen_range(0..n);
        let v = rng.gen_range(0..n);
        let l = lambda.unwrap_or_else(|| rng.gen_range(0.0..1.0));
        for ((x, &a), &b) in features
            .row_mut(w)
            .iter_mut()
            .zip(original.row(u))
            .zip(original.row(v))
        {
            *x = l * a + (1.0 - l) * b;
        }
    }

    let mut labels = g.labels().to_vec();
    for &w in &chosen {
        labels[w] = -1;
    }
    let mut roles = g.roles().to_vec();
    assign_ood_roles(&mut roles, &chosen, expose_fraction, &mut rng);
    Ok(GraphDataset::from_edges(g.num_classes(), &g.edges(), features, labels, roles)?)
}

/// Makes every node of the held-out classes OOD and relabels the remaining
/// classes to `0..C'` in their original order.
pub fn label_leave_out(
    g: &GraphDataset,
    held_out: &[usize],
    expose_fraction: f64,
    seed: u64,
) -> Result<GraphDataset> {
    check_expose(expose_fraction)?;
    let c = g.num_classes();
    if held_out.is_empty() {
        return Err(Error::Config("held_out must name at least one class".into()));
    }
    if let Some(&bad) = held_out.iter().find(|&&k| k >= c) {
        return Err(Error::Config(format!("held-out class {bad} not in 0..{c}")));
    }
    let map = relabel_map(c, held_out);
    let kept = map.iter().flatten().count();
    if kept == 0 {
        return Err(Error::Config("cannot hold out every class".into()));
    }

    let mut labels = g.labels().to_vec();
    let mut ood = Vec::new();
    for (v, label) in labels.iter_mut().enumerate() {
        if *label < 0 {
            continue;
        }
        match map[*label as usize] {
            Some(new) => *label = new as i64,
            None => {
                *label = -1;
                ood.push(v);
            }
        }
    }
    let mut roles = g.roles().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    assign_ood_roles(&mut roles, &ood, expose_fraction, &mut rng);
    Ok(GraphDataset::from_edges(
        kept,
        &g.edges(),
        g.features().clone(),
        labels,
        roles,
    )?)
}

/// Class relabelling applied by [`label_leave_out`].
pub fn relabel_map(num_classes: usize, held_out: &[usize]) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..num_classes)
        .map(|k| {
            if held_out.contains(&k) {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sbm(p_in: f64, p_out: f64, blocks: usize, per: usize, seed: u64) -> GraphDataset {
        generate_sbm(&SbmConfig {
            num_blocks: blocks,
            nodes_per_block: per,
            p_in,
            p_out,
            feature_dim: 4,
            class_mean_scale: 1.0,
            feature_noise: 0.1,
            seed,
            degree_spread: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn complete_blocks_are_triangles() {
        let g = sbm(1.0, 0.0, 2, 3, 0);
        assert_eq!(
            g.edges(),
            vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]
        );
    }

    #[test]
    fn edge_count_matches_binomial() {
        let (p_in, p_out) = (0.2, 0.05);
        let (blocks, per) = (3, 20);
        let intra = (blocks * per * (per - 1) / 2) as f64;
        let total = (blocks * per * (blocks * per - 1) / 2) as f64;
        let inter = total - intra;
        let mean = intra * p_in + inter * p_out;
        let sd = (intra * p_in * (1.0 - p_in) + inter * p_out * (1.0 - p_out)).sqrt();
        for seed in 0..20 {
            let e = sbm(p_in, p_out, blocks, per, seed).num_edges() as f64;
            assert!((e - mean).abs() < 3.0 * sd, "seed {seed}: {e} vs {mean}±{sd}");
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(sbm(0.3, 0.1, 2, 10, 5), sbm(0.3, 0.1, 2, 10, 5));
        assert_ne!(sbm(0.3, 0.1, 2, 10, 5), sbm(0.3, 0.1, 2, 10, 6));
    }

    #[test]
    fn split_is_one_one_eight() {
        let g = sbm(0.1, 0.01, 2, 50, 1);
        assert_eq!(g.nodes(NodeRole::Train).len(), 10);
        assert_eq!(g.nodes(NodeRole::Val).len(), 10);
        assert_eq!(g.nodes(NodeRole::TestId).len(), 80);
        let train = g.nodes(NodeRole::Train);
        assert_eq!(g.class_labels(&train).iter().filter(|&&y| y == 0).count(), 5);
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = SbmConfig {
            num_blocks: 2,
            nodes_per_block: 3,
            p_in: 0.1,
            p_out: 0.2,
            feature_dim: 2,
            class_mean_scale: 1.0,
            feature_noise: 0.1,
            seed: 0,
            degree_spread: 0.0,
        };
        assert_eq!(generate_sbm(&cfg).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn structure_single_isolated_node() {
        let g = sbm(0.5, 0.1, 2, 5, 0);
        let out = structure_manipulation(&g, 0.05, Some(0.0), None, 0.0, 1).unwrap();
        assert_eq!(out.num_nodes(), 11);
        assert_eq!(out.degree(10), 0);
        assert_eq!(out.role(10), Some(NodeRole::TestOod));
        assert_eq!(out.labels()[10], -1);
    }

    #[test]
    fn structure_keeps_original_subgraph() {
        let g = sbm(0.3, 0.05, 3, 20, 2);
        let out = structure_manipulation(&g, 0.2, None, None, 0.5, 3).unwrap();
        assert_eq!(out.num_nodes(), 72);
        let inner: Vec<_> = out.edges().into_iter().filter(|&(_, b)| b < 60).collect();
        assert_eq!(inner, g.edges());
        assert_eq!(out.nodes(NodeRole::ExposeOod).len(), 6);
        assert_eq!(out.nodes(NodeRole::TestOod).len(), 6);
        assert!(structure_manipulation(&g, 1.0, None, None, 0.5, 3).is_err());
        assert!(structure_manipulation(&g, 0.0, None, None, 0.5, 3).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let features = Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0], [5.0, 5.0], [7.0, 7.0]]);
        let roles = vec![
            Some(NodeRole::Train),
            Some(NodeRole::Val),
            Some(NodeRole::TestId),
            Some(NodeRole::TestId),
        ];
        let g = GraphDataset::from_edges(1, &[(0, 1)], features, vec![0; 4], roles).unwrap();
        let out = feature_interpolation(&g, 0.25, Some(1.0), 0.0, 4).unwrap();
        let ood = out.nodes(NodeRole::TestOod);
        assert_eq!(ood.len(), 1);
        let w = ood[0];
        assert!((0..4).any(|u| out.features().row(w) == g.features().row(u)));
        for v in (0..4).filter(|&v| v != w) {
            assert_eq!(out.features().row(v), g.features().row(v));
        }
        assert_eq!(out.edges(), g.edges());
    }

    #[test]
    fn interpolation_half_mixes() {
        // two nodes only, so u and v range over {0, 1}
        let features = Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]]);
        let roles = vec![Some(NodeRole::TestId), Some(NodeRole::TestId)];
        let g = GraphDataset::from_edges(1, &[], features, vec![0, 0], roles).unwrap();
        let mixed = (0..50).any(|seed| {
            let out = feature_interpolation(&g, 0.5, Some(0.5), 0.0, seed).unwrap();
            let w = out.nodes(NodeRole::TestOod)[0];
            out.features().row(w) == [1.0, 1.0]
        });
        assert!(mixed);
    }

    #[test]
    fn leave_out_relabels() {
        let g = sbm(0.3, 0.05, 3, 10, 3);
        let out = label_leave_out(&g, &[2], 0.0, 0).unwrap();
        assert_eq!(out.num_classes(), 2);
        assert_eq!(out.num_nodes(), g.num_nodes());
        assert_eq!(relabel_map(3, &[2]), vec![Some(0), Some(1), None]);
        for v in 0..g.num_nodes() {
            if g.labels()[v] == 2 {
                assert_eq!(out.labels()[v], -1);
                assert_eq!(out.role(v), Some(NodeRole::TestOod));
            } else {
                assert_eq!(out.labels()[v], g.labels()[v]);
            }
        }
        assert!(label_leave_out(&g, &[], 0.0, 0).is_err());
        assert!(label_leave_out(&g, &[0, 1, 2], 0.0, 0).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec: OodSpec =
            serde_json::from_str(r#"{"kind": "structure", "frac_ood": 0.2}"#).unwrap();
        assert_eq!(spec.expose_fraction, 0.5);
        assert_eq!(
            spec.kind,
            OodKind::Structure {
                frac_ood: 0.2,
                avg_degree: None,
                ood_edge_share: None,
            }
        );
        let back: OodSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
