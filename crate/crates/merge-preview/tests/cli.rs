use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use merge_preview::experiment::Comparison;
use merge_preview::formats::{read_json, read_surface_csv};
use merge_preview::store::STORE_ENV;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_merge-preview"))
            .args(args)
            .env(STORE_ENV, self.path("store"))
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["train", "--suite", "lse", "--method", "adam"])), 2);
    assert_eq!(code(&ws.run(&["sweep", "--suite", "lse", "--strategy", "simple", "--spacing", "0.3"])), 2);
    assert_eq!(code(&ws.run(&["joint", "--suite", "lse", "--spacing", "0"])), 2);
    assert_eq!(code(&ws.run(&["sweep", "--suite", "nope", "--strategy", "simple"])), 2);
    assert_eq!(code(&ws.run(&["sweep", "--strategy", "simple"])), 2);
    assert_eq!(code(&ws.run(&["train", "--suite", "lse", "--method", "gd", "--workers", "0"])), 2);
    assert_eq!(code(&ws.run(&["--help"])), 0);
}

#[test]
fn missing_artifacts_are_listed_by_key() {
    let ws = Workspace::new();
    let out = ws.run(&["sweep", "--suite", "lse", "--strategy", "hessian"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    for task in ["lse-1", "lse-2", "lse-3"] {
        assert!(err.contains(task), "{err}");
    }
}

#[test]
fn von_training_is_stationary_and_idempotent() {
    let ws = Workspace::new();
    let stdout = ws.ok(&["train", "--suite", "lse", "--method", "von_full"]);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.contains("residual")).collect();
    assert_eq!(lines.len(), 3, "{stdout}");
    for line in &lines {
        assert!(line.contains("gaussian_full"), "{line}");
        let residual: f64 = line.split("residual ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!(residual < 0.05, "{line}");
    }
    let dir = ws.path("store/lse");
    let snapshot = |dir: &Path| {
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "post"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    };
    let first = snapshot(&dir);
    assert_eq!(first.len(), 3);
    ws.ok(&["train", "--suite", "lse", "--method", "von_full"]);
    assert_eq!(snapshot(&dir), first);
}

#[test]
fn simple_sweep_covers_the_fine_grid_and_is_repeatable() {
    let ws = Workspace::new();
    let out = ws.out();
    let o = out.to_str().unwrap();
    ws.ok(&["train", "--suite", "lse", "--method", "gd"]);
    let stdout = ws.ok(&["sweep", "--suite", "lse", "--strategy", "simple", "--spacing", "0.02", "--out", o]);
    assert!(stdout.contains("best alpha"), "{stdout}");
    let csv = out.join("simple.csv");
    assert_eq!(rows(&csv), 1326);
    assert!(out.join("simple.json").exists());
    let before = fs::read(&csv).unwrap();
    ws.ok(&["sweep", "--suite", "lse", "--strategy", "simple", "--spacing", "0.02", "--out", o]);
    assert_eq!(fs::read(&csv).unwrap(), before);
}

#[test]
fn single_component_mixtures_reproduce_the_hessian_surface() {
    let ws = Workspace::new();
    let cfg = ws.path("k1.toml");
    // the mixture role uses the Gaussian trainer, so each task is a one-component mixture
    fs::write(
        &cfg,
        "suite = \"lse\"\nid = \"k1\"\n[trainers.mixture]\nmethod = \"von_full\"\niterations = 300\nmc_samples = 64\nprior_precision = 0.0\nloss_scale = 1.0\n",
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let out = ws.out();
    let o = out.to_str().unwrap();
    ws.ok(&["train", "--config", c, "--method", "von_full"]);
    ws.ok(&["sweep", "--config", c, "--strategy", "hessian", "--spacing", "0.05", "--out", o]);
    ws.ok(&["sweep", "--config", c, "--strategy", "mixture", "--spacing", "0.05", "--out", o]);
    let h = read_surface_csv(&out.join("hessian.csv"), "hessian").unwrap();
    let m = read_surface_csv(&out.join("mixture.csv"), "mixture").unwrap();
    assert_eq!(h.entries.len(), 231);
    for (a, b) in h.entries.iter().zip(&m.entries) {
        assert_eq!(a.alpha, b.alpha);
        let (x, y) = (a.metric.unwrap(), b.metric.unwrap());
        assert!((x - y).abs() <= 1e-10, "{:?}: {x} vs {y}", a.alpha);
    }
}

#[test]
fn joint_surface_is_cached_and_matches_single_task_vertices() {
    let ws = Workspace::new();
    let out = ws.out();
    let o = out.to_str().unwrap();
    let first = ws.ok(&["joint", "--suite", "lse", "--spacing", "0.1", "--out", o]);
    assert!(first.contains("0 cached, 66 trained"), "{first}");
    assert_eq!(rows(&out.join("joint.csv")), 66);
    let t0 = Instant::now();
    let again = ws.ok(&["joint", "--suite", "lse", "--spacing", "0.1", "--out", o]);
    assert!(t0.elapsed().as_secs_f64() < 1.0);
    assert!(again.contains("66 cached, 0 trained"), "{again}");

    // vertices of the simple-average sweep evaluate the single-task models
    ws.ok(&["train", "--suite", "lse", "--method", "gd"]);
    ws.ok(&["sweep", "--suite", "lse", "--strategy", "simple", "--spacing", "0.1", "--out", o]);
    let joint = read_surface_csv(&out.join("joint.csv"), "joint").unwrap();
    let simple = read_surface_csv(&out.join("simple.csv"), "simple").unwrap();
    for t in 0..3 {
        let mut e = vec![0.0; 3];
        e[t] = 1.0;
        let (a, b) = (joint.metric_at(&e).unwrap(), simple.metric_at(&e).unwrap());
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "vertex {t}: {a} vs {b}");
    }
}

#[test]
fn compare_is_zero_on_identical_files_and_ignores_row_order() {
    let ws = Workspace::new();
    let out = ws.out();
    let o = out.to_str().unwrap();
    ws.ok(&["joint", "--suite", "lse", "--spacing", "0.1", "--out", o]);
    let exact = out.join("joint.csv");
    let same = out.join("same.csv");
    fs::copy(&exact, &same).unwrap();
    let text = fs::read_to_string(&exact).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1..].reverse();
    let shuffled = out.join("shuffled.csv");
    fs::write(&shuffled, lines.join("\n") + "\n").unwrap();

    let report = out.join("cmp");
    let r = report.to_str().unwrap();
    ws.ok(&[
        "compare",
        "--preview",
        same.to_str().unwrap(),
        shuffled.to_str().unwrap(),
        "--exact",
        exact.to_str().unwrap(),
        "--out",
        r,
    ]);
    let cmp: Comparison = read_json(&report.join("comparison.json")).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert_eq!(cmp.rows[0].mse, 0.0);
    assert_eq!(cmp.rows[0].gap, 0.0);
    let (a, b) = (&cmp.rows[0], &cmp.rows[1]);
    assert_eq!((a.mse, &a.best_alpha, a.preview_best), (b.mse, &b.best_alpha, b.preview_best));

    // a preview coarser than the exact grid has no value at most exact points
    ws.ok(&["joint", "--suite", "lse", "--spacing", "0.5", "--out", r]);
    let mismatch = ws.run(&[
        "compare",
        "--preview",
        report.join("joint.csv").to_str().unwrap(),
        "--exact",
        exact.to_str().unwrap(),
    ]);
    assert_eq!(code(&mismatch), 1);
}
