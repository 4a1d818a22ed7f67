use std::path::{Path, PathBuf};

use fqr_core::cli::{main_with_args, read_fit_artifact, RunManifest, EXIT_INPUT};
use fqr_core::design::{load_csv, DatasetManifest};
use fqr_core::inference::{read_band_csv, BootstrapSummary};
use fqr_core::simlab::{BetaShape, SimScenario};
use fqr_core::tune::read_score_table;
use fqr_core::{assemble_design, compute_gram_set, fit_close, SolverConfig, SplineBasis};

fn toy() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    (dir.join("toy.csv"), dir.join("toy.json"))
}

fn run(cmd: &str, extra: &[&str], out: &Path) -> i32 {
    let (csv, json) = toy();
    let mut args: Vec<String> = vec!["fqr".into(), cmd.into()];
    if cmd != "simulate" {
        args.extend(["--data".into(), csv.display().to_string(), "--manifest".into(), json.display().to_string()]);
    }
    args.extend(extra.iter().map(|s| s.to_string()));
    args.extend(["--out".into(), out.display().to_string()]);
    main_with_args(args)
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn toy_data_regenerates() {
    let (csv, json) = toy();
    let stored = load_csv(&csv, &DatasetManifest::read(&json).unwrap()).unwrap();
    let mut sc = SimScenario::normal(240, 0.5).with_seed(424242);
    sc.betas = vec![BetaShape::SineLeft];
    sc.grid_len = 41;
    let fresh = sc.generate(0).unwrap();
    assert_eq!(stored.y, fresh.y);
    assert_eq!(stored.x, fresh.x);
    assert_eq!(stored.grid, fresh.grid);
}

#[test]
fn fit_sql_has_no_null_regions_and_close_finds_the_zero_half() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("fit", &["--tau", "0.5", "--sql"], &dir.path().join("sql")), 0);
    let (_, sql) = read_fit_artifact(&dir.path().join("sql/fit.json")).unwrap();
    assert!(sql.null_regions(0).is_empty());

    assert_eq!(run("fit", &["--tau", "0.5", "--lambda", "0.01"], &dir.path().join("close")), 0);
    let (manifest, close) = read_fit_artifact(&dir.path().join("close/fit.json")).unwrap();
    let regions = close.null_regions(0);
    assert!(!regions.is_empty());
    assert!(regions.iter().all(|(a, _)| *a >= 0.0), "{regions:?}");
    assert_eq!(manifest.command, "fit");
    assert_eq!(manifest.input_hashes.len(), 2);

    let beta = dir.path().join("close/beta_X1.csv");
    assert_eq!(RunManifest::from_csv(&beta).unwrap(), manifest);
    let text = std::fs::read_to_string(&beta).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (t, b): (f64, f64) = (rec[0].parse().unwrap(), rec[1].parse().unwrap());
        assert_eq!(b, close.beta(0, t).unwrap());
        if &rec[2] == "1" {
            assert_eq!(b, 0.0);
        }
    }
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run("fit", &[], &out), EXIT_INPUT);
    assert_eq!(run("fit", &["--tau", "1.5"], &out), EXIT_INPUT);
    assert_eq!(run("tune", &["--tau", "0.5"], &out), EXIT_INPUT);
    assert_eq!(run("simulate", &["--scenario", "uniform"], &out), EXIT_INPUT);
    let code = main_with_args([
        "fqr", "fit", "--data", "/nonexistent.csv", "--manifest", "/nonexistent.json", "--tau", "0.5", "--out", "x",
    ]);
    assert_eq!(code, EXIT_INPUT);
}

#[test]
fn tune_single_cell_matches_fit_and_winner_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cell = ["--tau", "0.5", "--lambda-grid", "0.02", "--gamma-grid", "1e-5"];
    assert_eq!(run("tune", &cell, &p.join("t")), 0);
    assert_eq!(run("fit", &["--tau", "0.5", "--lambda", "0.02", "--gamma", "1e-5"], &p.join("f")), 0);
    let (_, a) = read_fit_artifact(&p.join("t/fit.json")).unwrap();
    let (_, b) = read_fit_artifact(&p.join("f/fit.json")).unwrap();
    assert_eq!(a.alpha, b.alpha);
    assert_eq!(a.theta, b.theta);
    assert_eq!(
        std::fs::read_to_string(p.join("t/beta_X1.csv")).unwrap().lines().skip(1).collect::<Vec<_>>(),
        std::fs::read_to_string(p.join("f/beta_X1.csv")).unwrap().lines().skip(1).collect::<Vec<_>>()
    );

    assert_eq!(run("tune", &["--tau", "0.5", "--auto-grid"], &p.join("auto")), 0);
    let table = read_score_table(&p.join("auto/scores.csv")).unwrap();
    assert_eq!(table.len(), 48);
    let best = table.iter().filter(|r| r.bic.is_finite()).min_by(|x, y| x.bic.total_cmp(&y.bic)).unwrap();

    let (csv, json) = toy();
    let data = load_csv(&csv, &DatasetManifest::read(&json).unwrap()).unwrap();
    let basis = SplineBasis::cubic(-1.0, 1.0, 20).unwrap();
    let gram = compute_gram_set(&basis, 2).unwrap();
    let design = assemble_design(&data, &basis).unwrap();
    let mut cfg = SolverConfig::new(0.5, 1);
    cfg.lambda = best.lambda.clone();
    cfg.gamma = best.gamma.clone();
    let fit = fit_close(&design, &basis, &gram, &cfg).unwrap();
    let score = fqr_core::tune::bic(fit.mean_check_loss(&design), fit.num_active() + 3, data.len());
    assert!((score - best.bic).abs() < 1e-10);
}

#[test]
fn bootstrap_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = ["--tau", "0.5", "--B", "10", "--seed", "9"];
    assert_eq!(run("bootstrap", &args, &p.join("a")), 0);
    assert_eq!(run("bootstrap", &args, &p.join("b")), 0);
    let mut names: Vec<_> = std::fs::read_dir(p.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        let x = std::fs::read(p.join("a").join(name)).unwrap();
        let y = std::fs::read(p.join("b").join(name)).unwrap();
        assert!(x == y, "{name:?} differs between reruns");
    }
    assert_eq!(data_rows(&p.join("a/replicates.csv")), 10);

    #[derive(serde::Deserialize)]
    struct Wrapped {
        summary: BootstrapSummary,
    }
    let s: Wrapped = serde_json::from_str(&std::fs::read_to_string(p.join("a/bootstrap.json")).unwrap()).unwrap();
    assert_eq!(s.summary.replicates, 10);
    let scb = read_band_csv(&p.join("a/scb_X1.csv")).unwrap();
    let pcb = read_band_csv(&p.join("a/pcb_X1.csv")).unwrap();
    assert_eq!(scb.len(), s.summary.eval_grid[0].len());
    for (a, b) in scb.iter().zip(&pcb) {
        assert!(a[2] <= b[2] && b[3] <= a[3]);
    }

    assert_eq!(run("bootstrap", &["--tau", "0.5", "--B", "10", "--seed", "9", "--level", "0.10"], &p.join("c")), 0);
    let wide = read_band_csv(&p.join("a/pcb_X1.csv")).unwrap();
    let narrow = read_band_csv(&p.join("c/pcb_X1.csv")).unwrap();
    for (w, n) in wide.iter().zip(&narrow) {
        assert!(n[3] - n[2] <= w[3] - w[2]);
    }
}

#[test]
fn simulate_single_replicate_and_paired_methods() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let args = ["--scenario", "normal", "--n", "150", "--replicates", "1", "--K", "12", "--lambda", "0.01"];
    assert_eq!(run("simulate", &args, &p.join("s")), 0);
    assert_eq!(data_rows(&p.join("s/report.csv")), 2);
    let text = std::fs::read_to_string(p.join("s/report.csv")).unwrap();
    assert!(text.contains("normal,sql,150") && text.contains("normal,close,150"));
    let lines = std::fs::read_to_string(p.join("s/replicates.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let mut close_only = args.to_vec();
    close_only.extend(["--method", "close"]);
    assert_eq!(run("simulate", &close_only, &p.join("c")), 0);
    assert_eq!(data_rows(&p.join("c/report.csv")), 1);
    let both = std::fs::read_to_string(p.join("s/report.csv")).unwrap();
    let close_line = both.lines().find(|l| l.starts_with("normal,close")).unwrap();
    assert!(std::fs::read_to_string(p.join("c/report.csv")).unwrap().contains(close_line));
}
