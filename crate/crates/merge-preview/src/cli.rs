//! Command-line front end: `train`, `sweep`, `joint`, `compare`, `report`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use merge_preview_core::preview::{best_alpha, MetricScale, SweepReport};
use merge_preview_core::vartrain::stationarity_residual;
use merge_preview_core::{SimplexGrid, Strategy, TrainMethod};

use crate::config::{ExperimentConfig, SuiteKind};
use crate::error::{Error, Result};
use crate::experiment::{
    build_suite, compare_surfaces, joint_surface, merger_for, produced_kind, run_protocol, train_tasks, Suite,
};
use crate::formats::{read_surface_csv, write_json, write_report, write_surface_csv};
use crate::store::{ArtifactKey, ArtifactStore, STORE_ENV};
use crate::sweep::{default_workers, parallel_preview_sweep, JointCache};

/// Store root used when the environment does not name one.
pub const DEFAULT_STORE: &str = "merge-preview-store";

/// Draws used for the post-training stationarity check.
const RESIDUAL_SAMPLES: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "merge-preview", version, about = "Preview weighted multitask training by merging per-task posteriors")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment file (TOML); values not given fall back to the suite preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Task suite preset, used when no config file is given.
    #[arg(long, global = true)]
    pub suite: Option<SuiteKind>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Grid spacing; must divide 1.
    #[arg(long, global = true)]
    pub spacing: Option<f64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory (default: the experiment's store directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "fraction|percent")]
    pub metric_scale: Option<MetricScale>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one posterior per task and store it.
    Train {
        #[arg(long)]
        method: TrainMethod,
    },
    /// Preview surface of one merge strategy from stored artifacts.
    Sweep {
        #[arg(long)]
        strategy: Strategy,
    },
    /// Exact surface from joint training, cached per grid point.
    Joint,
    /// Compare preview surfaces with an exact surface.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        preview: Vec<PathBuf>,
        #[arg(long)]
        exact: PathBuf,
    },
    /// Full protocol: train, sweep every strategy, joint oracle, compare.
    Report,
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn store_root() -> PathBuf {
    std::env::var_os(STORE_ENV).map_or_else(|| PathBuf::from(DEFAULT_STORE), PathBuf::from)
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, common.suite) {
        (Some(path), suite) => {
            let cfg = ExperimentConfig::load(path)?;
            if let Some(s) = suite.filter(|s| *s != cfg.suite) {
                return Err(Error::Usage(format!(
                    "--suite {} conflicts with suite {} in {}",
                    s.as_str(),
                    cfg.suite.as_str(),
                    path.display()
                )));
            }
            cfg
        }
        (None, Some(suite)) => ExperimentConfig::preset(suite),
        (None, None) => return Err(Error::Usage("give --config or --suite".into())),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scale) = common.metric_scale {
        cfg.metric_scale = scale;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workers(common: &Common) -> Result<usize> {
    match common.workers {
        Some(0) => Err(Error::Usage("--workers must be >= 1".into())),
        Some(n) => Ok(n),
        None => Ok(default_workers()),
    }
}

fn out_dir(common: &Common, store: &Path, exp: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| store.join(&exp.id));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let c = &cli.common;
    if let Command::Compare { preview, exact } = &cli.command {
        return compare(c, preview, exact, out);
    }
    let exp = experiment(c)?;
    let workers = workers(c)?;
    let root = store_root();
    match &cli.command {
        Command::Train { method } => train(&exp, *method, workers, &root, out),
        Command::Sweep { strategy } => {
            let spacing = c.spacing.unwrap_or(exp.spacing);
            let dir = out_dir(c, &root, &exp)?;
            sweep(&exp, *strategy, spacing, workers, &root, &dir, out)
        }
        Command::Joint => {
            let spacing = c.spacing.unwrap_or(exp.exact_spacing);
            let dir = out_dir(c, &root, &exp)?;
            joint(&exp, spacing, workers, &root, &dir, out)
        }
        Command::Report => {
            let mut exp = exp;
            if let Some(s) = c.spacing {
                exp.spacing = s;
                exp.validate()?;
            }
            let dir = out_dir(c, &root, &exp)?;
            report(&exp, workers, &root, &dir, out)
        }
        Command::Compare { .. } => unreachable!("handled above"),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn train(exp: &ExperimentConfig, method: TrainMethod, workers: usize, root: &Path, out: &mut dyn Write) -> Result<i32> {
    let suite = build_suite(exp)?;
    let trainer = suite.resolve(&exp.trainer_for(method));
    let mut store = ArtifactStore::open(root)?;
    let results = train_tasks(&suite, &trainer, workers)?;
    let mut failed = 0;
    for (task, result) in suite.tasks.iter().zip(results) {
        match result {
            Ok(art) => {
                let residual = stationarity_residual(task.as_ref(), &trainer, &art, RESIDUAL_SAMPLES, exp.seed)?;
                let path = store.save(&exp.id, trainer.seed, &art)?;
                writeln!(
                    out,
                    "{}: {} loss {:.6} residual {:.3e} -> {}",
                    task.id(),
                    art.kind(),
                    art.provenance.final_loss,
                    residual,
                    path.display()
                )
                .map_err(io_err)?;
                for flag in &art.provenance.flags {
                    writeln!(out, "  note: {flag}").map_err(io_err)?;
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}: training failed: {e}", task.id());
            }
        }
    }
    if failed > 0 {
        eprintln!("error: {failed} of {} tasks failed", suite.tasks.len());
        return Ok(1);
    }
    Ok(0)
}

fn stored_artifacts(
    exp: &ExperimentConfig,
    suite: &Suite,
    strategy: Strategy,
    store: &ArtifactStore,
) -> Result<Vec<merge_preview_core::PosteriorArtifact>> {
    let trainer = suite.resolve(&exp.trainer_for_strategy(strategy));
    let kind = produced_kind(trainer.method);
    let keys: Vec<ArtifactKey> = suite
        .tasks
        .iter()
        .map(|t| ArtifactKey::new(&exp.id, t.id(), kind, trainer.seed))
        .collect();
    let arts = store.load_all(&keys)?;
    for (k, a) in keys.iter().zip(&arts) {
        if a.provenance.trainer != trainer {
            eprintln!("warning: {k} was trained with a different configuration");
        }
    }
    Ok(arts)
}

fn sweep(
    exp: &ExperimentConfig,
    strategy: Strategy,
    spacing: f64,
    workers: usize,
    root: &Path,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    merge_preview_core::preview::divisions_for(spacing)?;
    let suite = build_suite(exp)?;
    let grid = SimplexGrid::new(suite.tasks.len(), spacing)?;
    let store = ArtifactStore::open(root)?;
    let arts = stored_artifacts(exp, &suite, strategy, &store)?;
    let merger = merger_for(exp, &suite, strategy, &arts)?;
    let surface = parallel_preview_sweep(&merger, &grid, suite.evaluator.as_ref(), workers)?;
    let report = SweepReport::new(surface, None, exp.metric_scale, exp.histogram_bins)?;
    let csv = dir.join(format!("{strategy}.csv"));
    write_surface_csv(&csv, &report.preview)?;
    write_report(&dir.join(format!("{strategy}.json")), &report)?;
    writeln!(
        out,
        "{strategy}: {} points -> {}\nbest alpha {:?} metric {:.6}",
        grid.len(),
        csv.display(),
        report.best_alpha,
        report.best_metric
    )
    .map_err(io_err)?;
    Ok(0)
}

fn joint(exp: &ExperimentConfig, spacing: f64, workers: usize, root: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    merge_preview_core::preview::divisions_for(spacing)?;
    let suite = build_suite(exp)?;
    let cache = JointCache::new(root.join("joint-cache"));
    let (surface, stats) = joint_surface(exp, &suite, spacing, workers, Some(&cache))?;
    if stats.mismatched {
        eprintln!("warning: joint cache was written for different inputs; recomputed");
    }
    let csv = dir.join("joint.csv");
    write_surface_csv(&csv, &surface)?;
    let (alpha, best) = best_alpha(&surface)?;
    writeln!(
        out,
        "joint: {} points ({} cached, {} trained) -> {}\nbest alpha {:?} metric {:.6}",
        surface.entries.len(),
        stats.hits,
        stats.computed,
        csv.display(),
        alpha,
        best * exp.metric_scale.factor()
    )
    .map_err(io_err)?;
    Ok(0)
}

fn method_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "preview".into(), |s| s.to_string_lossy().into_owned())
}

fn compare(c: &Common, previews: &[PathBuf], exact: &Path, out: &mut dyn Write) -> Result<i32> {
    let (scale, bins) = match (&c.config, c.suite) {
        (None, None) => (c.metric_scale.unwrap_or_default(), 20),
        _ => {
            let exp = experiment(c)?;
            (exp.metric_scale, exp.histogram_bins)
        }
    };
    let exact_surface = read_surface_csv(exact, "joint")?;
    let surfaces = previews
        .iter()
        .map(|p| {
            let name = method_name(p);
            read_surface_csv(p, &name).map(|s| (name, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let (comparison, _) = compare_surfaces(&surfaces, &exact_surface, scale, bins, None)?;
    let dir = match &c.out {
        Some(d) => d.clone(),
        None => exact.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("comparison.json");
    write_json(&path, &comparison)?;
    write!(out, "{}", comparison.to_table()).map_err(io_err)?;
    writeln!(out, "-> {}", path.display()).map_err(io_err)?;
    Ok(0)
}

fn report(exp: &ExperimentConfig, workers: usize, root: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let mut store = ArtifactStore::open(root)?;
    let cache = JointCache::new(root.join("joint-cache"));
    let run = run_protocol(exp, workers, Some(&mut store), Some(&cache))?;
    for (name, sweep) in &run.sweeps {
        write_surface_csv(&dir.join(format!("{name}.csv")), &sweep.preview)?;
        write_report(&dir.join(format!("{name}.json")), sweep)?;
    }
    write_surface_csv(&dir.join("joint.csv"), &run.exact)?;
    let path = dir.join("report.json");
    write_json(&path, &run.report)?;
    write!(out, "{}", run.report.to_table()).map_err(io_err)?;
    writeln!(
        out,
        "joint points: {} cached, {} trained\n-> {}",
        run.cache.hits,
        run.cache.computed,
        path.display()
    )
    .map_err(io_err)?;
    Ok(0)
}
