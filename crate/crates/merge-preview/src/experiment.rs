//! Task suites and the end-to-end protocol: train per task, sweep each merge
//! strategy, run the joint oracle, compare.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use merge_preview_core::preview::{joint_point, MetricScale, PreviewMerger, SweepReport};
use merge_preview_core::tasks::{
    make_class_split_tasks, make_lse_tasks, ClassSplitDataset, Dataset, MeanTaskLoss, SharedTask, SplitPreset,
    SyntheticDigits,
};
use merge_preview_core::vartrain::train;
use merge_preview_core::{
    ArtifactKind, Evaluator, ParamVector, PosteriorArtifact, PreviewSurface, SimplexGrid, SimplexWeights, Strategy,
    TrainMethod, TrainerConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DigitsSource, ExperimentConfig, SuiteKind};
use crate::error::{Error, Result};
use crate::formats::load_idx_dataset;
use crate::store::{ArtifactKey, ArtifactStore};
use crate::sweep::{cached_joint_sweep, parallel_preview_sweep, CacheStats, JointCache};

/// Offset between the synthetic training and held-out sample seeds.
const TEST_SEED_OFFSET: u64 = 0x7e57;

/// Tasks sharing one parameter space, with the combined metric (higher is
/// better) and the starting point of every run.
pub struct Suite {
    pub kind: SuiteKind,
    pub tasks: Vec<SharedTask>,
    pub evaluator: Arc<dyn Evaluator>,
    pub init: ParamVector,
    /// `λ` filled into trainers that leave it unset.
    pub loss_scale: f64,
    /// Digest of everything the tasks and metric depend on.
    pub fingerprint: String,
    pub data_source: String,
}

impl Suite {
    pub fn dim(&self) -> usize {
        self.init.len()
    }

    pub fn resolve(&self, trainer: &TrainerConfig) -> TrainerConfig {
        TrainerConfig {
            loss_scale: Some(trainer.loss_scale.unwrap_or(self.loss_scale)),
            ..trainer.clone()
        }
    }
}

fn digest_f64s(h: &mut Sha256, values: &[f64]) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_dataset(h: &mut Sha256, ds: &Dataset) {
    h.update((ds.dim() as u64).to_le_bytes());
    h.update((ds.classes() as u64).to_le_bytes());
    digest_f64s(h, ds.features());
    for l in ds.labels() {
        h.update(l.to_le_bytes());
    }
}

fn truncate(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let d = ds.dim();
            Ok(Dataset::new(d, ds.classes(), ds.features()[..n * d].to_vec(), ds.labels()[..n].to_vec())?)
        }
        _ => Ok(ds),
    }
}

fn digit_data(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>, String)> {
    let s = &cfg.digits;
    match s.source {
        DigitsSource::Synthetic => {
            let gen = SyntheticDigits::new(s.per_class, s.dim, s.classes).with_noise(s.noise);
            let train = gen.generate(cfg.seed)?;
            let test = (s.test_per_class > 0)
                .then(|| {
                    SyntheticDigits {
                        per_class: s.test_per_class,
                        ..gen
                    }
                    .generate(cfg.seed.wrapping_add(TEST_SEED_OFFSET))
                })
                .transpose()?;
            Ok((train, test, "synthetic digits".into()))
        }
        DigitsSource::Idx => {
            let (Some(images), Some(labels)) = (&s.train_images, &s.train_labels) else {
                return Err(Error::Usage("idx source needs train_images and train_labels".into()));
            };
            let train = truncate(load_idx_dataset(images, labels, s.side, s.classes)?, s.limit)?;
            let test = match (&s.test_images, &s.test_labels) {
                (Some(i), Some(l)) => Some(load_idx_dataset(i, l, s.side, s.classes)?),
                (None, None) => None,
                _ => return Err(Error::Usage("test_images and test_labels go together".into())),
            };
            Ok((train, test, format!("idx {}", images.display())))
        }
    }
}

pub fn build_suite(cfg: &ExperimentConfig) -> Result<Suite> {
    cfg.validate()?;
    let mut h = Sha256::new();
    h.update(cfg.suite.as_str());
    h.update(cfg.seed.to_le_bytes());
    match cfg.suite {
        SuiteKind::Lse => {
            let tasks: Vec<SharedTask> = make_lse_tasks(cfg.seed, cfg.lse.terms)?
                .into_iter()
                .map(|t| {
                    let (a, b) = t.coefficients();
                    digest_f64s(&mut h, a);
                    digest_f64s(&mut h, b);
                    Arc::new(t) as SharedTask
                })
                .collect();
            let mean = MeanTaskLoss { tasks: tasks.clone() };
            Ok(Suite {
                kind: cfg.suite,
                evaluator: Arc::new(move |theta: &[f64]| -mean.evaluate(theta)),
                init: ParamVector::zeros(2),
                tasks,
                loss_scale: 1.0,
                fingerprint: hex_digest(h),
                data_source: format!("log-sum-exp, {} terms per task", cfg.lse.terms),
            })
        }
        SuiteKind::MnistImbalanced | SuiteKind::MnistBalanced | SuiteKind::Synthetic => {
            let (train, test, source) = digit_data(cfg)?;
            digest_dataset(&mut h, &train);
            if let Some(t) = &test {
                digest_dataset(&mut h, t);
            }
            let split = match (&cfg.digits.split, cfg.suite) {
                (Some(s), _) => s.clone(),
                (None, SuiteKind::MnistBalanced) => SplitPreset::Balanced.classes(),
                (None, _) => SplitPreset::Imbalanced.classes(),
            };
            for part in &split {
                h.update((part.len() as u64).to_le_bytes());
                for c in part {
                    h.update(c.to_le_bytes());
                }
            }
            let n = train.len();
            let data = ClassSplitDataset::new(train, test, split)?;
            let tasks: Vec<SharedTask> = make_class_split_tasks(&data)?
                .into_iter()
                .map(|t| Arc::new(t) as SharedTask)
                .collect();
            Ok(Suite {
                kind: cfg.suite,
                evaluator: Arc::new(data.union_accuracy()),
                init: ParamVector::zeros(data.param_dim()),
                tasks,
                loss_scale: n as f64,
                fingerprint: hex_digest(h),
                data_source: source,
            })
        }
    }
}

/// Kind of artifact each training method produces.
pub fn produced_kind(method: TrainMethod) -> ArtifactKind {
    match method {
        TrainMethod::Gd => ArtifactKind::Point,
        TrainMethod::VonFull => ArtifactKind::GaussianFull,
        TrainMethod::ViDiag | TrainMethod::SqGradLaplace => ArtifactKind::GaussianDiag,
        TrainMethod::MogVi => ArtifactKind::Mixture,
    }
}

/// Trains every task with `trainer` on `workers` threads. Each task's result
/// is reported separately.
pub fn train_tasks(suite: &Suite, trainer: &TrainerConfig, workers: usize) -> Result<Vec<Result<PosteriorArtifact>>> {
    let cfg = suite.resolve(trainer);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| {
        suite
            .tasks
            .par_iter()
            .map(|t| train(t.as_ref(), &cfg, &suite.init).map_err(Error::from))
            .collect()
    }))
}

/// Artifacts for `trainer`, read from the store when an entry with the same
/// resolved trainer config exists, otherwise trained (and saved).
pub fn obtain_artifacts(
    exp: &ExperimentConfig,
    suite: &Suite,
    trainer: &TrainerConfig,
    workers: usize,
    mut store: Option<&mut ArtifactStore>,
) -> Result<Vec<PosteriorArtifact>> {
    let cfg = suite.resolve(trainer);
    let kind = produced_kind(cfg.method);
    if let Some(store) = store.as_deref() {
        let keys: Vec<ArtifactKey> = suite
            .tasks
            .iter()
            .map(|t| ArtifactKey::new(&exp.id, t.id(), kind, cfg.seed))
            .collect();
        if keys.iter().all(|k| store.contains(k)) {
            let arts = store.load_all(&keys)?;
            if arts.iter().all(|a| a.provenance.trainer == cfg) {
                return Ok(arts);
            }
        }
    }
    let arts = train_tasks(suite, &cfg, workers)?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    if let Some(store) = store.as_deref_mut() {
        for a in &arts {
            store.save(&exp.id, cfg.seed, a)?;
        }
    }
    Ok(arts)
}

pub fn merger_for(
    exp: &ExperimentConfig,
    suite: &Suite,
    strategy: Strategy,
    artifacts: &[PosteriorArtifact],
) -> Result<PreviewMerger> {
    let anchor = PreviewMerger::default_anchor(&suite.init, exp.trainers.gaussian.prior_precision)?;
    Ok(PreviewMerger::new(strategy, artifacts, anchor, exp.em.clone())?)
}

pub fn joint_surface(
    exp: &ExperimentConfig,
    suite: &Suite,
    spacing: f64,
    workers: usize,
    cache: Option<&JointCache>,
) -> Result<(PreviewSurface, CacheStats)> {
    let grid = SimplexGrid::new(suite.tasks.len(), spacing)?;
    let trainer = suite.resolve(&exp.joint_trainer());
    cached_joint_sweep(
        &suite.tasks,
        &grid,
        &trainer,
        &suite.init,
        suite.evaluator.as_ref(),
        workers,
        cache.map(|c| (c, suite.fingerprint.as_str())),
    )
}

/// One method's line in the comparison tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// Mean squared metric difference to the exact surface on shared points.
    pub mse: f64,
    pub best_alpha: Vec<f64>,
    pub preview_best: f64,
    /// Exact metric at the preview's best `α`.
    pub exact_at_best: f64,
    /// Exact grid best minus `exact_at_best`.
    pub gap: f64,
    /// The best `α` was searched on the exact grid only, because the
    /// preview's own best lies between exact points and no oracle was at
    /// hand to evaluate it.
    #[serde(default)]
    pub best_on_exact_grid: bool,
    pub seconds: f64,
}

impl MethodRow {
    pub fn from_report(method: &str, report: &SweepReport, seconds: f64) -> Result<Self> {
        let missing = |what: &str| Error::Failed(format!("report for `{method}` lacks {what}"));
        let exact = report.exact.as_ref().ok_or_else(|| missing("an exact surface"))?;
        let exact_best = report.exact_best_metric.ok_or_else(|| missing("an exact surface"))?;
        let f = report.metric_scale.factor();
        let (best_alpha, preview_best, exact_at_best, on_grid) = match report.exact_at_best {
            Some(e) => (report.best_alpha.clone(), report.best_metric, e, false),
            None => {
                let coarse = SimplexGrid::with_divisions(exact.grid.tasks, exact.grid.divisions)?;
                let shared = report.preview.restrict_to(&coarse)?;
                let (a, m) = merge_preview_core::preview::best_alpha(&shared)?;
                let e = exact.metric_at(&a).ok_or_else(|| missing("the exact metric at its best alpha"))?;
                (a, m * f, e * f, true)
            }
        };
        Ok(Self {
            method: method.into(),
            mse: report.mse.ok_or_else(|| missing("an MSE"))?,
            best_alpha,
            preview_best,
            exact_at_best,
            gap: exact_best - exact_at_best,
            best_on_exact_grid: on_grid,
            seconds,
        })
    }
}

/// Exact metric at one weighting, for preview optima between exact grid
/// points.
pub type ExactProbe<'a> = &'a (dyn Fn(&[f64]) -> Result<f64> + Sync);

/// MSE and best-`α` comparison of preview surfaces against one exact
/// surface, one row per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric_scale: MetricScale,
    pub exact_spacing: f64,
    pub exact_best_alpha: Vec<f64>,
    pub exact_best_metric: f64,
    pub rows: Vec<MethodRow>,
}

impl Comparison {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "metric scale {}, exact best {:.4} at {:?}\n",
            self.metric_scale.as_str(),
            self.exact_best_metric,
            self.exact_best_alpha
        );
        out.push_str(&format!(
            "{:<16} {:>12} {:>10} {:>12} {:>8}  best alpha\n",
            "method", "mse", "preview", "exact@best", "gap"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<16} {:>12.4e} {:>10.4} {:>12.4} {:>8.4}  {:?}\n",
                r.method, r.mse, r.preview_best, r.exact_at_best, r.gap, r.best_alpha
            ));
        }
        out
    }
}

/// Compares each named preview with `exact`. Previews on a finer grid are
/// restricted to the exact grid's points for the MSE; a best `α` off the
/// exact grid is evaluated with `probe` when given. Rows may be in any order.
pub fn compare_surfaces(
    previews: &[(String, PreviewSurface)],
    exact: &PreviewSurface,
    scale: MetricScale,
    bins: usize,
    probe: Option<ExactProbe<'_>>,
) -> Result<(Comparison, Vec<SweepReport>)> {
    let mut rows = Vec::with_capacity(previews.len());
    let mut reports = Vec::with_capacity(previews.len());
    for (name, surface) in previews {
        let mut report = SweepReport::new(surface.clone(), Some(exact.clone()), scale, bins)?;
        if let (None, Some(probe)) = (report.exact_at_best, probe) {
            report.exact_at_best = Some(probe(&report.best_alpha)? * scale.factor());
        }
        rows.push(MethodRow::from_report(name, &report, 0.0)?);
        reports.push(report);
    }
    let (best_alpha, best) = merge_preview_core::preview::best_alpha(exact)?;
    Ok((
        Comparison {
            metric_scale: scale,
            exact_spacing: 1.0 / exact.grid.divisions as f64,
            exact_best_alpha: best_alpha,
            exact_best_metric: best * scale.factor(),
            rows,
        },
        reports,
    ))
}

/// A protocol run's comparison plus what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub experiment: String,
    pub suite: SuiteKind,
    pub data_source: String,
    pub preview_spacing: f64,
    pub exact_seconds: f64,
    pub comparison: Comparison,
    /// The configuration with every default and loss scale filled in.
    pub config: ExperimentConfig,
}

impl ProtocolReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.comparison.row(method)
    }

    pub fn to_table(&self) -> String {
        format!("{} ({})\n{}", self.experiment, self.data_source, self.comparison.to_table())
    }
}

/// Everything one protocol run produced.
pub struct ProtocolRun {
    pub report: ProtocolReport,
    pub sweeps: BTreeMap<String, SweepReport>,
    pub exact: PreviewSurface,
    pub cache: CacheStats,
}

/// Train → sweep every configured strategy → joint oracle → compare.
pub fn run_protocol(
    exp: &ExperimentConfig,
    workers: usize,
    mut store: Option<&mut ArtifactStore>,
    cache: Option<&JointCache>,
) -> Result<ProtocolRun> {
    let suite = build_suite(exp)?;
    let grid = SimplexGrid::new(suite.tasks.len(), exp.spacing)?;

    let start = Instant::now();
    let (exact, cache_stats) = joint_surface(exp, &suite, exp.exact_spacing, workers, cache)?;
    let exact_seconds = start.elapsed().as_secs_f64();

    let mut trained: Vec<(TrainerConfig, Vec<PosteriorArtifact>, f64)> = Vec::new();
    let mut previews = Vec::new();
    let mut seconds = Vec::new();
    for &strategy in &exp.strategies {
        let trainer = suite.resolve(&exp.trainer_for_strategy(strategy));
        if !trained.iter().any(|(t, _, _)| *t == trainer) {
            let t0 = Instant::now();
            let arts = obtain_artifacts(exp, &suite, &trainer, workers, store.as_deref_mut())?;
            trained.push((trainer.clone(), arts, t0.elapsed().as_secs_f64()));
        }
        let (_, arts, train_secs) = trained.iter().find(|(t, _, _)| *t == trainer).expect("just inserted");
        let t0 = Instant::now();
        let merger = merger_for(exp, &suite, strategy, arts)?;
        let surface = parallel_preview_sweep(&merger, &grid, suite.evaluator.as_ref(), workers)?;
        seconds.push(train_secs + t0.elapsed().as_secs_f64());
        previews.push((strategy.as_str().to_string(), surface));
    }
    let joint = suite.resolve(&exp.joint_trainer());
    let probe = |alpha: &[f64]| -> Result<f64> {
        let w = SimplexWeights::new(alpha.to_vec())?;
        let e = joint_point(&suite.tasks, &w, &joint, &suite.init, suite.evaluator.as_ref());
        e.metric
            .ok_or_else(|| Error::Failed(format!("joint training failed at {alpha:?}: {}", e.note.unwrap_or_default())))
    };
    let (mut comparison, reports) =
        compare_surfaces(&previews, &exact, exp.metric_scale, exp.histogram_bins, Some(&probe))?;
    for (row, s) in comparison.rows.iter_mut().zip(seconds) {
        row.seconds = s;
    }
    let sweeps = previews.into_iter().map(|(n, _)| n).zip(reports).collect();
    let mut config = exp.clone();
    for t in [
        &mut config.trainers.point,
        &mut config.trainers.gaussian,
        &mut config.trainers.mixture,
        &mut config.trainers.joint,
    ] {
        *t = suite.resolve(t);
    }
    Ok(ProtocolRun {
        report: ProtocolReport {
            experiment: exp.id.clone(),
            suite: exp.suite,
            data_source: suite.data_source.clone(),
            preview_spacing: exp.spacing,
            exact_seconds,
            comparison,
            config,
        },
        sweeps,
        exact,
        cache: cache_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_digits() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::preset(SuiteKind::MnistImbalanced);
        cfg.digits.per_class = 4;
        cfg.digits.test_per_class = 2;
        cfg.digits.dim = 3;
        cfg.spacing = 0.5;
        cfg.exact_spacing = 0.5;
        cfg.trainers.point.iterations = 20;
        cfg.trainers.joint.iterations = 20;
        cfg.trainers.gaussian.iterations = 3;
        cfg.trainers.mixture.iterations = 3;
        cfg.trainers.mixture.mixture = Some(merge_preview_core::vartrain::MixtureStage {
            components: 2,
            iterations: 2,
            ..Default::default()
        });
        cfg
    }

    #[test]
    fn suites_build_with_common_scale() {
        let lse = build_suite(&ExperimentConfig::preset(SuiteKind::Lse)).unwrap();
        assert_eq!((lse.tasks.len(), lse.dim(), lse.loss_scale), (3, 2, 1.0));
        let cfg = tiny_digits();
        let s = build_suite(&cfg).unwrap();
        assert_eq!(s.tasks.len(), 3);
        assert_eq!(s.dim(), 10 * 4);
        assert_eq!(s.loss_scale, 40.0);
        assert_eq!(s.resolve(&cfg.trainers.gaussian).loss_scale, Some(40.0));
        assert_eq!(s.fingerprint, build_suite(&cfg).unwrap().fingerprint);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(s.fingerprint, build_suite(&other).unwrap().fingerprint);
    }

    #[test]
    fn protocol_runs_end_to_end_and_reuses_stored_artifacts() {
        let cfg = tiny_digits();
        let dir = tempfile::tempdir().unwrap();
        let mut store = ArtifactStore::open(dir.path()).unwrap();
        let run = run_protocol(&cfg, 2, Some(&mut store), None).unwrap();
        assert_eq!(run.report.comparison.rows.len(), 3);
        assert_eq!(store.keys().count(), 9);
        let again = run_protocol(&cfg, 1, Some(&mut store), None).unwrap();
        for (a, b) in run.report.comparison.rows.iter().zip(&again.report.comparison.rows) {
            assert_eq!((a.mse, &a.best_alpha), (b.mse, &b.best_alpha));
        }
        assert_eq!(run.report.config.trainers.point.loss_scale, Some(40.0));
    }
}
