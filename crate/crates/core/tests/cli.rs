use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nodesafe::graph::load_dataset;
use nodesafe::pipeline::{
    parse_histogram, parse_scores, parse_train_log, read_checkpoint, read_metrics, Comparison,
    CHECKPOINT_FILE, HISTOGRAM_FILE, METRICS_FILE, SCORES_FILE, TRAIN_LOG_FILE,
};
use nodesafe::NodeRole;
use tempfile::TempDir;

fn nodesafe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nodesafe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nodesafe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small generated dataset with structural OOD nodes, half of them exposed.
fn fixture(expose_fraction: f64) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let sbm = dir.path().join("sbm.json");
    fs::write(
        &sbm,
        r#"{"num_blocks": 3, "nodes_per_block": 30, "p_in": 0.2, "p_out": 0.02,
            "feature_dim": 6, "class_mean_scale": 1.5, "feature_noise": 1.0, "seed": 4}"#,
    )
    .unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        format!(r#"{{"kind": "structure", "frac_ood": 0.2, "expose_fraction": {expose_fraction}, "seed": 8}}"#),
    )
    .unwrap();
    let base = dir.path().join("base");
    let ood = dir.path().join("ood");
    ok(&["generate", "--config", p(&sbm), "--out", p(&base)]);
    ok(&["make-ood", "--dataset", p(&base), "--spec", p(&spec), "--out", p(&ood)]);
    (dir, ood)
}

#[test]
fn training_is_deterministic_and_outputs_parse() {
    let (dir, data) = fixture(0.5);
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        ok(&["train", "--dataset", p(&data), "--set", "epochs=60", "--set", "ub_start_epoch=20", "--out", p(out)]);
    }
    for file in [METRICS_FILE, CHECKPOINT_FILE, SCORES_FILE, TRAIN_LOG_FILE, HISTOGRAM_FILE] {
        let a = fs::read(runs[0].join(file)).unwrap();
        let b = fs::read(runs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between identical runs");
    }

    let out = &runs[0];
    let g = load_dataset(&data).unwrap();
    let metrics = read_metrics(&out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.method.name(), "nodesafe");
    assert_eq!(metrics.positive_class, "id");
    assert_eq!(metrics.n_ood, g.nodes(NodeRole::TestOod).len());
    assert!((0.0..=1.0).contains(&metrics.auroc));

    let ckpt = read_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert!(ckpt.best_epoch >= 20);
    let relearned = ckpt.model.forward(&g).unwrap();
    assert!(relearned.is_finite());

    let read = |f: &str| fs::read_to_string(out.join(f)).unwrap();
    let log = parse_train_log(&out.join(TRAIN_LOG_FILE), &read(TRAIN_LOG_FILE)).unwrap();
    assert_eq!(log.len(), 60);
    assert!(log.iter().enumerate().all(|(i, (e, _))| *e == i));
    let scores = parse_scores(&out.join(SCORES_FILE), &read(SCORES_FILE)).unwrap();
    assert_eq!(scores.len(), g.num_nodes());
    assert!(scores.iter().all(|(v, role, s)| *role == g.role(*v) && s.is_finite()));
    let bins = parse_histogram(&out.join(HISTOGRAM_FILE), &read(HISTOGRAM_FILE)).unwrap();
    assert_eq!(bins.len(), metrics.config.histogram_bins);
    assert_eq!(bins.iter().map(|b| b.count_ood).sum::<usize>(), metrics.n_ood);
    assert_eq!(bins.iter().map(|b| b.count_id).sum::<usize>(), metrics.n_id);

    // evaluating the saved model reproduces the training-time metrics
    let again = dir.path().join("eval");
    ok(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&out.join(CHECKPOINT_FILE)), "--out", p(&again)]);
    assert_eq!(fs::read(again.join(METRICS_FILE)).unwrap(), fs::read(out.join(METRICS_FILE)).unwrap());
}

#[test]
fn evaluate_uses_the_checkpoint_method() {
    let (dir, data) = fixture(0.5);
    let run = dir.path().join("msp");
    ok(&["train", "--dataset", p(&data), "--set", "method=msp", "--set", "epochs=20", "--out", p(&run)]);
    let eval = dir.path().join("eval");
    ok(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&run.join(CHECKPOINT_FILE)), "--out", p(&eval)]);
    let m = read_metrics(&eval.join(METRICS_FILE)).unwrap();
    assert_eq!(m.score_kind, "msp");

    let run = dir.path().join("gnnsafe");
    ok(&["train", "--dataset", p(&data), "--set", "method=gnnsafe", "--set", "epochs=20", "--out", p(&run)]);
    ok(&["evaluate", "--dataset", p(&data), "--checkpoint", p(&run.join(CHECKPOINT_FILE)), "--set", "hops=0", "--out", p(&eval)]);
    let m = read_metrics(&eval.join(METRICS_FILE)).unwrap();
    assert_eq!(m.config.hops, 0);
}

#[test]
fn exit_codes_follow_error_kind() {
    let (dir, data) = fixture(0.0);
    let out = dir.path().join("x");
    let code = |args: &[&str]| nodesafe(args).status.code().unwrap();

    assert_eq!(code(&["train", "--dataset", p(&data), "--set", "method=bogus", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--dataset", p(&data), "--set", "eta=1.5", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--dataset", p(&data), "--set", "no_such_key=1", "--out", p(&out)]), 2);
    // no exposed nodes for a method that trains on them
    assert_eq!(code(&["train", "--dataset", p(&data), "--set", "method=nodesafe-pp", "--out", p(&out)]), 3);
    let missing = dir.path().join("missing");
    assert_eq!(code(&["train", "--dataset", p(&missing), "--out", p(&out)]), 3);
    // an absurd step size drives the logits to infinity
    assert_eq!(
        code(&["train", "--dataset", p(&data), "--set", "lr=1e300", "--set", "epochs=20", "--out", p(&out)]),
        4
    );
    let err = nodesafe(&["train", "--dataset", p(&data), "--set", "method=bogus", "--out", p(&out)]);
    assert!(String::from_utf8_lossy(&err.stderr).starts_with("error: "));
}

#[test]
fn compare_writes_mean_and_std_per_method() {
    let (dir, data) = fixture(0.5);
    let out = dir.path().join("cmp");
    let table = ok(&[
        "compare", "--dataset", p(&data), "--set", "epochs=30", "--set", "ub_start_epoch=10",
        "--methods", "gnnsafe,nodesafe", "--seeds", "0,1,2,3,4,5,6,7,8,9", "--out", p(&out),
    ]);
    assert_eq!(table.lines().count(), 3);

    let c: Comparison = serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(c.rows.len(), 2);
    for row in &c.rows {
        assert_eq!(row.seeds, (0..10).collect::<Vec<u64>>());
        for m in [row.auroc, row.aupr, row.fpr95, row.id_accuracy] {
            assert!(m.mean.is_finite() && m.std >= 0.0);
        }
    }
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.split(',').count() == 9));
    assert_eq!(csv, c.to_csv());

    for method in ["gnnsafe", "nodesafe"] {
        for seed in 0..10 {
            let m = read_metrics(&out.join(format!("metrics_{method}_seed{seed}.json"))).unwrap();
            assert_eq!((m.method.name(), m.seed), (method, seed));
        }
    }
}

#[test]
fn selfcheck_passes() {
    let stdout = ok(&["selfcheck", "--seed", "3"]);
    assert!(stdout.lines().count() >= 5);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
