use nodesafe::config::{Method, RunConfig};
use nodesafe::energy::{negative_energy, propagate, ScoreKind, ScoreVector};
use nodesafe::graph::{row_normalize, sym_normalize};
use nodesafe::losses::{bound_loss, uniform_loss};
use nodesafe::metrics::{argmax, aupr, auroc, fpr_at_tpr, std_dev};
use nodesafe::model::{init_model, GraphInputs};
use nodesafe::oodgen::{generate_sbm, SbmConfig};
use nodesafe::selfcheck::random_graph;
use nodesafe::tensor::logsumexp;
use nodesafe::train::train;
use nodesafe::{GraphDataset, Matrix, NodeRole, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn finite() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

fn logits(max_rows: usize) -> impl Strategy<Value = Matrix> {
    (1..max_rows, 2..6usize).prop_flat_map(|(n, c)| {
        prop::collection::vec(finite(), n * c)
            .prop_map(move |data| Matrix::from_vec(n, c, data).unwrap())
    })
}

fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // coarse values so ties occur
    let score = (-20i32..20).prop_map(|k| k as f64 / 4.0);
    (
        prop::collection::vec(score.clone(), 1..40),
        prop::collection::vec(score, 1..40),
    )
}

fn uniform_value(z: &Matrix, id: &[usize], ood: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let u = uniform_loss(&mut tape, v, id, ood).unwrap();
    tape.value(u).item()
}

fn bound_value(z: &Matrix, rows: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(z.clone());
    let b = bound_loss(&mut tape, v, rows).unwrap();
    tape.value(b).item()
}

proptest! {
    #[test]
    fn logsumexp_shifts_with_its_input(row in prop::collection::vec(finite(), 1..8), c in -100.0..100.0f64) {
        let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
        prop_assert!((logsumexp(&shifted) - logsumexp(&row) - c).abs() < 1e-9);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(logsumexp(&row) >= max);
        prop_assert!(logsumexp(&row) <= max + (row.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn propagation_stays_within_neighbour_range(
        seed in any::<u64>(),
        eta in 0.0..=1.0f64,
        hops in 0..5usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 15, 0.2);
        let values: Vec<f64> = (0..15).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let s = ScoreVector { values: values.clone(), kind: ScoreKind::RawEnergy };
        let out = propagate(&s, &g, eta, hops).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in &out.values {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        // constant scores are a fixed point
        let flat = ScoreVector { values: vec![2.5; 15], kind: ScoreKind::RawEnergy };
        let out = propagate(&flat, &g, eta, hops).unwrap();
        prop_assert!(out.values.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn metrics_invariant_under_increasing_maps((id, ood) in score_sets(), a in 0.1..5.0f64, b in -10.0..10.0f64) {
        let f = |x: &f64| (a * x + b).exp();
        let (fid, food): (Vec<f64>, Vec<f64>) = (id.iter().map(f).collect(), ood.iter().map(f).collect());
        prop_assert!((auroc(&id, &ood).unwrap() - auroc(&fid, &food).unwrap()).abs() < 1e-12);
        prop_assert!((aupr(&id, &ood).unwrap() - aupr(&fid, &food).unwrap()).abs() < 1e-12);
        let (fpr, _) = fpr_at_tpr(&id, &ood, 0.95).unwrap();
        let (ffpr, _) = fpr_at_tpr(&fid, &food, 0.95).unwrap();
        prop_assert!((fpr - ffpr).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_antisymmetric((id, ood) in score_sets()) {
        let sum = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fpr_is_monotone_in_tpr((id, ood) in score_sets(), t1 in 0.01..1.0f64, t2 in 0.01..1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (f_lo, g_lo) = fpr_at_tpr(&id, &ood, lo).unwrap();
        let (f_hi, g_hi) = fpr_at_tpr(&id, &ood, hi).unwrap();
        prop_assert!(f_lo <= f_hi);
        prop_assert!(g_lo >= g_hi);
        prop_assert!((0.0..=1.0).contains(&f_hi));
    }

    #[test]
    fn uniform_is_order_invariant_and_nonnegative(z in logits(10), c in -5.0..5.0f64) {
        let n = z.rows();
        let id: Vec<usize> = (0..n).filter(|i| i % 2 == 0).collect();
        let ood: Vec<usize> = (0..n).filter(|i| i % 2 == 1).collect();
        let base = uniform_value(&z, &id, &ood);
        prop_assert!(base >= 0.0);
        // reordering rows within a group leaves the loss unchanged
        let mut reversed = z.clone();
        for (k, &r) in id.iter().enumerate() {
            let src = id[id.len() - 1 - k];
            reversed.row_mut(r).copy_from_slice(z.row(src));
        }
        prop_assert!((uniform_value(&reversed, &id, &ood) - base).abs() <= 1e-9 * (1.0 + base));
        // a common shift keeps every group variance, only the scale moves
        let mut shifted = z.clone();
        for r in 0..n {
            for x in shifted.row_mut(r) { *x += c; }
        }
        let v = uniform_value(&shifted, &id, &ood);
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn bound_is_nonnegative_and_scale_covariant(z in logits(10), k in 0.1..10.0f64) {
        let rows: Vec<usize> = (0..z.rows()).collect();
        let b = bound_value(&z, &rows);
        prop_assert!(b >= 0.0);
        // var/mean is homogeneous of degree one
        let scaled = bound_value(&z.map(|x| k * x), &rows);
        prop_assert!((scaled - k * b).abs() <= 1e-9 * (1.0 + k * b));
    }

    #[test]
    fn normalised_adjacencies(seed in any::<u64>(), p in 0.05..0.6f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 12, p);
        let s = sym_normalize(&g);
        prop_assert!(s.is_symmetric(1e-15));
        let r = row_normalize(&g);
        for i in 0..12 {
            let sum: f64 = r.row(i).map(|(_, w)| w).sum();
            if g.degree(i) > 0 {
                prop_assert!((sum - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(r.row_nnz(i), 0);
            }
        }
    }
}

#[test]
fn sym_normalised_regular_graph_rows_sum_to_one() {
    // a cycle is 2-regular; with self-loops every row of D^-1/2 (A+I) D^-1/2
    // sums to one
    let n = 9;
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect();
    let g = GraphDataset::from_edges(1, &edges, Matrix::zeros(n, 1), vec![-1; n], vec![None; n]).unwrap();
    let s = sym_normalize(&g);
    for i in 0..n {
        let sum: f64 = s.row(i).map(|(_, w)| w).sum();
        assert!((sum - 1.0).abs() < 1e-12, "row {i}: {sum}");
    }
}

#[test]
fn gcn_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let base = random_graph(&mut rng, n, 0.4);
    let features = Matrix::from_vec(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let g = GraphDataset::from_edges(3, &base.edges(), features.clone(), vec![-1; n], vec![None; n]).unwrap();

    let perm = [5, 2, 7, 0, 3, 6, 1, 4];
    let edges: Vec<(usize, usize)> = base
        .edges()
        .iter()
        .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
        .collect();
    let mut permuted_features = Matrix::zeros(n, 4);
    for (v, &pv) in perm.iter().enumerate() {
        permuted_features.row_mut(pv).copy_from_slice(features.row(v));
    }
    let h = GraphDataset::from_edges(3, &edges, permuted_features, vec![-1; n], vec![None; n]).unwrap();

    let params = init_model(4, 6, 3, 11).unwrap();
    let z = params.forward(&g).unwrap();
    let zp = params.forward(&h).unwrap();
    for (v, &pv) in perm.iter().enumerate() {
        for (a, b) in z.row(v).iter().zip(zp.row(pv)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn descending_bound_loss_equalises_row_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 30;
    let mut z = Matrix::from_vec(n, 4, (0..n * 4).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let rows: Vec<usize> = (0..n).collect();
    let cv = |z: &Matrix| {
        let norms: Vec<f64> = (0..n).map(|r| z.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        std_dev(&norms) / (norms.iter().sum::<f64>() / n as f64)
    };
    let start = cv(&z);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let v = tape.leaf(z.clone());
        let l = bound_loss(&mut tape, v, &rows).unwrap();
        let g = tape.backward(l).unwrap().wrt(v);
        for (x, d) in z.data_mut().iter_mut().zip(g.data()) {
            *x -= 0.5 * d;
        }
    }
    let end = cv(&z);
    assert!(end < 0.01, "cv {start:.4} -> {end:.4}");
}

#[test]
fn plain_training_fits_separable_blocks() {
    let mut fitted = 0;
    for seed in 0..10 {
        let g = generate_sbm(&SbmConfig {
            num_blocks: 2,
            nodes_per_block: 40,
            p_in: 0.25,
            p_out: 0.01,
            feature_dim: 8,
            class_mean_scale: 3.0,
            feature_noise: 0.5,
            seed,
            degree_spread: 0.0,
        })
        .unwrap();
        let cfg = RunConfig {
            epochs: 100,
            seed,
            ..RunConfig::for_method(Method::Gnnsafe)
        };
        let out = train(&g, &cfg).unwrap();
        let z = out.params.forward(&g).unwrap();
        let train_nodes = g.nodes(NodeRole::Train);
        let labels = g.class_labels(&train_nodes);
        if train_nodes.iter().zip(&labels).all(|(&v, &y)| argmax(z.row(v)) == y) {
            fitted += 1;
        }
    }
    assert!(fitted >= 9, "{fitted}/10 seeds fit the training set");
}

#[test]
fn uninformative_scores_give_aupr_near_base_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in [0.2, 0.5, 0.8] {
        let n = 10_000;
        let n_id = (p * n as f64) as usize;
        let id: Vec<f64> = (0..n_id).map(|_| rng.gen()).collect();
        let ood: Vec<f64> = (0..n - n_id).map(|_| rng.gen()).collect();
        let ap = aupr(&id, &ood).unwrap();
        assert!((ap - p).abs() < 0.02, "p {p}: AUPR {ap}");
        assert!((auroc(&id, &ood).unwrap() - 0.5).abs() < 0.02);
    }
}

#[test]
fn energy_score_of_constant_rows() {
    let z = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
    let s = negative_energy(&z);
    assert!((s.values[0] - 3f64.ln()).abs() < 1e-15);
    assert!((s.values[1] - 1.0 - 3f64.ln()).abs() < 1e-15);
    let inputs = GraphInputs::new(&random_graph(&mut ChaCha8Rng::seed_from_u64(1), 4, 0.5));
    assert_eq!(inputs.ax.rows(), 4);
}
