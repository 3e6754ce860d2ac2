use std::path::Path;

use envae::data::load_csv;
use envae::report::{ReportRecord, RunReport};
use envae_cli::run_command;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["envae"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 14] = [
    "--set", "m=3", "--set", "max_epochs=12", "--set", "patience=4", "--set", "beta_warmup=4",
    "--set", "clf_max_epochs=25", "--set", "clf_patience=5", "--set", "latent_dim=4",
];

fn trained_run(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("d.csv");
    assert_eq!(run(&["synth", "--n", "50", "--d", "18", "--classes", "2", "--seed", "3", "--out", s(&data)]), 0);
    let out = dir.join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
    args.extend_from_slice(&QUICK);
    assert_eq!(run(&args), 0);
    out
}

#[test]
fn synth_writes_features_and_label() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    assert_eq!(run(&["synth", "--n", "30", "--d", "1000", "--classes", "4", "--out", s(&out)]), 0);
    let header = std::fs::read_to_string(&out).unwrap().lines().next().unwrap().split(',').count();
    assert_eq!(header, 1001);
    let ds = load_csv(&out, "label").unwrap();
    assert_eq!(ds.x.shape(), (30, 1000));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["train", "--set", "nonsense=1"]), 1);
    assert_eq!(run(&["train", "--set", "m=9", "--set", "elbo_mode=full_enumeration"]), 1);
    let missing = dir.path().join("absent.csv");
    assert_eq!(run(&["train", "--data", s(&missing), "--out", s(&dir.path().join("r"))]), 2);
    assert_eq!(run(&["eval", "--run", s(&dir.path().join("nowhere"))]), 2);
}

#[test]
fn train_eval_mask_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained_run(dir.path());
    for f in ["report.jsonl", "report.csv", "timing.json", "fold0.json", "fold4_history.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(run(&["eval", "--run", s(&out)]), 0);
    let eval = RunReport::read_jsonl(out.join("eval.jsonl")).unwrap();
    let downstream: Vec<f64> = eval
        .records
        .iter()
        .filter_map(|r| match r {
            ReportRecord::Downstream { balanced_accuracy, .. } => Some(*balanced_accuracy),
            _ => None,
        })
        .collect();
    assert_eq!(downstream.len(), 25);

    assert_eq!(run(&["mask-eval", "--run", s(&out)]), 0);
    let mask = RunReport::read_jsonl(out.join("mask.jsonl")).unwrap();
    let rows: Vec<(usize, usize, Vec<f64>)> = mask
        .records
        .iter()
        .filter_map(|r| match r {
            ReportRecord::Mask { dropped, n_subsets, values, .. } => Some((*dropped, *n_subsets, values.clone())),
            _ => None,
        })
        .collect();
    let shape: Vec<(usize, usize)> = rows.iter().map(|r| (r.0, r.1)).collect();
    assert_eq!(shape, vec![(0, 1), (1, 3), (2, 3)]);
    // Nothing dropped reproduces the eval protocol exactly.
    assert_eq!(rows[0].2, downstream);
    assert_eq!(rows[1].2.len(), 3 * 25);

    assert_eq!(run(&["tc", "--run", s(&out)]), 0);
    let tc = RunReport::read_jsonl(out.join("tc.jsonl")).unwrap();
    assert!(tc.summary("tc").is_some_and(|(m, _)| m >= 0.0));

    let lat = dir.path().join("z.csv");
    assert_eq!(run(&["export-latents", "--run", s(&out), "--fold", "1", "--out", s(&lat)]), 0);
    let text = std::fs::read_to_string(&lat).unwrap();
    assert_eq!(text.lines().count(), 51);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 4);
}

#[test]
fn sweep_reports_improvement_over_one_expert() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert_eq!(run(&["synth", "--n", "40", "--d", "16", "--classes", "2", "--out", s(&data)]), 0);
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep-experts", "--data", s(&data), "--ks", "2", "--out", s(&out), "--set", "folds=2"];
    args.extend_from_slice(&QUICK);
    assert_eq!(run(&args), 0);
    let report = RunReport::read_jsonl(out.join("sweep.jsonl")).unwrap();
    let sweep: Vec<(usize, f64, f64)> = report
        .records
        .iter()
        .filter_map(|r| match r {
            ReportRecord::Sweep { k, mean, improvement, .. } => Some((*k, *mean, *improvement)),
            _ => None,
        })
        .collect();
    assert_eq!(sweep.len(), 2);
    assert_eq!((sweep[0].0, sweep[0].2), (1, 0.0));
    assert_eq!(sweep[1].0, 2);
    assert!((sweep[1].2 - (sweep[1].1 - sweep[0].1)).abs() < 1e-15);
}
