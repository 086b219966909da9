use std::path::Path;
use std::process::{Command, Output};

use kvmerge::harness::{decay_spectrum, DEFAULT_GAIN};
use kvmerge::numerics::Matrix;
use kvmerge_cli::report::Summary;
use kvmerge_cli::tensor_file::{DType, TensorFile};

fn kvmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvmerge")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Parses spectrum CSV rows as (head, mode, lambda, cumulative_energy, c_i).
fn spectrum_rows(csv: &str) -> Vec<(usize, usize, f64, f64, String)> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("head,mode_index,lambda,cumulative_energy,c_i"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].to_string())
        })
        .collect()
}

fn summaries(out: &Output) -> Vec<Summary> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn spectrum_of_identity_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("eye.kvsl");
    let eye = Matrix::<f64>::identity(8);
    TensorFile::from_matrix(&eye, DType::F64).write(&w).unwrap();
    let out = kvmerge(&["spectrum", "--weights", p(&w)]);
    assert_eq!(out.status.code(), Some(0));
    let rows = spectrum_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 8);
    for (i, (head, mode, lambda, cum, c)) in rows.iter().enumerate() {
        assert_eq!((*head, *mode), (0, i));
        assert!((lambda - 1.0).abs() < 1e-12);
        assert!((cum - (i + 1) as f64 / 8.0).abs() < 1e-12);
        assert!(c.is_empty());
    }
}

#[test]
fn generated_weights_recover_their_decay() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("wk.kvsl");
    let csv = dir.path().join("spec.csv");
    let st = dir.path().join("x.kvsl");
    let gen = kvmerge(&["gen-weights", "--seed", "4", "--beta", "2", "--heads", "2", "--out", p(&w)]);
    assert!(gen.status.success());
    let states = kvmerge(&["gen-states", "--seed", "4", "--length", "32", "--out", p(&st)]);
    assert!(states.status.success());
    let out = kvmerge(&["spectrum", "--weights", p(&w), "--heads", "2", "--states", p(&st), "--out", p(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = spectrum_rows(&std::fs::read_to_string(&csv).unwrap());
    let sigma = decay_spectrum(16, 2.0, DEFAULT_GAIN);
    assert_eq!(rows.len(), 32);
    for (head, mode, lambda, _, c) in rows {
        assert!(head < 2);
        let want = sigma[mode] * sigma[mode];
        assert!((lambda - want).abs() <= 1e-8 * want.max(1.0), "head {head} mode {mode}: {lambda} vs {want}");
        assert!(c.parse::<f64>().unwrap().is_finite());
    }
}

#[test]
fn bad_magic_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("bad.kvsl");
    std::fs::write(&w, b"NOPE\x01\x00\x00\x00\x02\x00\x00\x00").unwrap();
    assert_eq!(kvmerge(&["spectrum", "--weights", p(&w)]).status.code(), Some(3));
    assert_eq!(kvmerge(&["spectrum", "--weights", p(&dir.path().join("missing"))]).status.code(), Some(3));
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["frobnicate"][..],
        &["simulate", "--algo", "bogus"],
        &["compare", "--algos", "mean,mean"],
        &["simulate", "--budget", "16", "--chunk-size", "16", "--sink", "4"],
        &["simulate", "--rho", "1.5"],
    ] {
        assert_eq!(kvmerge(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn none_within_budget_is_exact() {
    let out = kvmerge(&["simulate", "--algo", "none", "--desk", "--length", "200"]);
    let s = summaries(&out);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].algo, "none");
    assert_eq!(s[0].mean_error, 0.0);
    assert_eq!(s[0].final_cache_len, 200);
}

#[test]
fn compare_reports_one_row_per_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("steps.csv");
    let out = kvmerge(&["compare", "--desk", "--length", "400", "--seeds", "2", "--out", p(&csv)]);
    let s = summaries(&out);
    let names: Vec<&str> = s.iter().map(|r| r.algo.as_str()).collect();
    assert_eq!(names, ["mean", "asymkv", "kvslimmer"]);
    for r in &s {
        assert!(r.mean_error > 0.0 && r.mean_error.is_finite());
        assert!(r.p95_error >= r.mean_error * 0.5);
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("seed,step,cache_len,algorithm,l2_error,cos_error,merges,fallbacks\n"));
    // two seeds, three algorithms, 400 steps each
    assert_eq!(text.lines().count(), 1 + 2 * 3 * 400);
}

#[test]
fn compare_with_only_none_gives_a_zero_row() {
    let out = kvmerge(&["compare", "--algos", "none", "--desk", "--length", "300"]);
    let s = summaries(&out);
    assert_eq!(s.len(), 1);
    assert_eq!((s[0].algo.as_str(), s[0].mean_error, s[0].p95_error), ("none", 0.0, 0.0));
}
