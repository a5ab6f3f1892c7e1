//! Simplex grids, preview sweeps, the joint-training oracle and surface
//! metrics.
//!
//! Grid points are visited independently; [`preview_point`] and
//! [`joint_point`] evaluate one point so callers can fan out over workers
//! and reassemble with [`PreviewSurface::from_entries`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{GaussianPosterior, Layout, MixturePosterior, ParamVector};
use crate::merging::{
    hessian_weighted, hessian_weighted_ta, mog_em_merge, simple_average, task_arithmetic,
    EmConfig, MergeResult, SimplexWeights,
};
use crate::tasks::{Evaluator, SharedTask, TaskHandle, WeightedTask};
use crate::vartrain::{gd_train, ArtifactKind, PosteriorArtifact, TrainerConfig};

/// Gradient norm below which a joint-oracle run counts as converged.
pub const JOINT_CONVERGED_GRAD_NORM: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "GridSpec", try_from = "GridSpec")]
pub struct GridShape {
    pub tasks: usize,
    /// `n = 1 / spacing`.
    pub divisions: usize,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    tasks: usize,
    divisions: usize,
}

impl From<GridShape> for GridSpec {
    fn from(s: GridShape) -> Self {
        Self {
            tasks: s.tasks,
            divisions: s.divisions,
        }
    }
}

impl TryFrom<GridSpec> for GridShape {
    type Error = Error;

    fn try_from(s: GridSpec) -> Result<Self> {
        if s.tasks == 0 || s.divisions == 0 {
            return Err(Error::InvalidConfig("grid needs tasks >= 1 and divisions >= 1".into()));
        }
        Ok(Self {
            tasks: s.tasks,
            divisions: s.divisions,
        })
    }
}

/// Lattice points `k / n` of the probability simplex, `α₁` descending, then
/// `α₂` descending, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    shape: GridShape,
    counts: Vec<Vec<u32>>,
    points: Vec<SimplexWeights>,
}

/// `n` with `n · spacing = 1`, rejecting spacings that do not divide the
/// unit interval.
pub fn divisions_for(spacing: f64) -> Result<usize> {
    if !(spacing > 0.0 && spacing <= 1.0) {
        return Err(Error::InvalidSpacing(spacing));
    }
    let inv = 1.0 / spacing;
    let n = libm::round(inv);
    if libm::fabs(inv - n) > 1e-9 * n {
        return Err(Error::InvalidSpacing(spacing));
    }
    Ok(n as usize)
}

impl SimplexGrid {
    pub fn new(tasks: usize, spacing: f64) -> Result<Self> {
        Self::with_divisions(tasks, divisions_for(spacing)?)
    }

    pub fn with_divisions(tasks: usize, divisions: usize) -> Result<Self> {
        let shape = GridShape::try_from(GridSpec { tasks, divisions })?;
        let mut counts = Vec::new();
        let mut current = vec![0u32; tasks];
        fill(&mut counts, &mut current, 0, divisions as u32);
        let n = divisions as f64;
        let points = counts
            .iter()
            .map(|k| SimplexWeights::new(k.iter().map(|&c| f64::from(c) / n).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape,
            counts,
            points,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn tasks(&self) -> usize {
        self.shape.tasks
    }

    pub fn divisions(&self) -> usize {
        self.shape.divisions
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.shape.divisions as f64
    }

    pub fn points(&self) -> &[SimplexWeights] {
        &self.points
    }

    /// Integer coordinates `k_t` of point `i`.
    pub fn counts(&self, i: usize) -> &[u32] {
        &self.counts[i]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the lattice point at `alpha`, if it lies on this grid.
    pub fn index_of(&self, alpha: &[f64]) -> Option<usize> {
        if alpha.len() != self.tasks() {
            return None;
        }
        let n = self.divisions() as f64;
        let mut k = Vec::with_capacity(alpha.len());
        for &a in alpha {
            let s = a * n;
            let r = libm::round(s);
            if !(r >= 0.0) || libm::fabs(s - r) > 1e-7 {
                return None;
            }
            k.push(r as u32);
        }
        // points are sorted by descending counts
        self.counts
            .binary_search_by(|probe| k.cmp(probe))
            .ok()
    }
}

fn fill(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        fill(out, current, pos + 1, remaining - k);
    }
}

pub fn simplex_grid(tasks: usize, spacing: f64) -> Result<SimplexGrid> {
    SimplexGrid::new(tasks, spacing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Simple,
    TaskArithmetic,
    Hessian,
    HessianTa,
    Mixture,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Self::Simple,
        Self::TaskArithmetic,
        Self::Hessian,
        Self::HessianTa,
        Self::Mixture,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simple => "simple",
            Self::TaskArithmetic => "task_arithmetic",
            Self::Hessian => "hessian",
            Self::HessianTa => "hessian_ta",
            Self::Mixture => "mixture",
        }
    }

    /// Whether artifacts of `kind` can feed this strategy. Averaging
    /// strategies read Gaussian means as points and the mixture merge reads
    /// a Gaussian as a single component.
    pub fn accepts(self, kind: ArtifactKind) -> bool {
        use ArtifactKind as K;
        match self {
            Self::Simple | Self::TaskArithmetic => {
                matches!(kind, K::Point | K::GaussianDiag | K::GaussianFull)
            }
            Self::Hessian | Self::HessianTa => matches!(kind, K::GaussianDiag | K::GaussianFull),
            Self::Mixture => kind != K::Point,
        }
    }
}

impl core::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown merge strategy `{s}`")))
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
enum Models {
    Points(Vec<ParamVector>),
    Gaussians(Vec<GaussianPosterior>),
    Mixtures(Vec<MixturePosterior>),
}

/// A strategy bound to its per-task artifacts.
///
/// `anchor` plays the prior for Hessian merges with `γ > 0`, the
/// pretrained point for task arithmetic, and the anchor Gaussian for
/// Hessian-weighted task arithmetic.
#[derive(Debug, Clone)]
pub struct PreviewMerger {
    strategy: Strategy,
    models: Models,
    anchor: GaussianPosterior,
    em: EmConfig,
}

impl PreviewMerger {
    pub fn new(
        strategy: Strategy,
        artifacts: &[PosteriorArtifact],
        anchor: GaussianPosterior,
        em: EmConfig,
    ) -> Result<Self> {
        if artifacts.is_empty() {
            return Err(Error::Empty("artifacts"));
        }
        for a in artifacts {
            if !strategy.accepts(a.kind()) {
                return Err(Error::IncompatibleStrategy {
                    strategy: strategy.to_string(),
                    kind: a.kind().to_string(),
                });
            }
            crate::expfam::check_dim(anchor.dim(), a.dim())?;
        }
        em.validate()?;
        let models = match strategy {
            Strategy::Simple | Strategy::TaskArithmetic => Models::Points(
                artifacts
                    .iter()
                    .map(|a| a.point().expect("accepted kinds carry a point").clone())
                    .collect(),
            ),
            Strategy::Hessian | Strategy::HessianTa => Models::Gaussians(
                artifacts
                    .iter()
                    .map(|a| a.gaussian().expect("accepted kinds are Gaussian").clone())
                    .collect(),
            ),
            Strategy::Mixture => Models::Mixtures(
                artifacts
                    .iter()
                    .map(|a| match (a.mixture(), a.gaussian()) {
                        (Some(m), _) => Ok(m.clone()),
                        (None, Some(g)) => MixturePosterior::uniform(vec![g.clone()]),
                        _ => unreachable!("accepted kinds are Gaussian or mixtures"),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            strategy,
            models,
            anchor,
            em,
        })
    }

    /// Isotropic anchor `N(θ₀, δ⁻¹ I)`, unit precision when `δ = 0`.
    pub fn default_anchor(theta0: &ParamVector, prior_precision: f64) -> Result<GaussianPosterior> {
        let s = if prior_precision > 0.0 { prior_precision } else { 1.0 };
        GaussianPosterior::isotropic(theta0.clone(), s, Layout::Diagonal)
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn tasks(&self) -> usize {
        match &self.models {
            Models::Points(v) => v.len(),
            Models::Gaussians(v) => v.len(),
            Models::Mixtures(v) => v.len(),
        }
    }

    /// Merged parameters at `w`, plus a note when the weights were adjusted.
    pub fn merge(&self, w: &SimplexWeights) -> Result<(MergeResult, Option<String>)> {
        match &self.models {
            Models::Points(m) => match self.strategy {
                Strategy::Simple => Ok((simple_average(m, w)?, None)),
                _ => Ok((task_arithmetic(self.anchor.mean(), m, w)?, None)),
            },
            Models::Gaussians(g) => match self.strategy {
                Strategy::Hessian => Ok((hessian_weighted(g, w, &self.anchor)?, None)),
                _ => Ok((hessian_weighted_ta(&self.anchor, g, w)?, None)),
            },
            Models::Mixtures(q) => {
                if libm::fabs(w.sum() - 1.0) > 1e-9 {
                    let r = w.renormalized().ok_or(Error::DegenerateWeights)?;
                    let note = format!("weights renormalized from sum {}", w.sum());
                    Ok((mog_em_merge(q, &r, &self.em)?, Some(note)))
                } else {
                    Ok((mog_em_merge(q, w, &self.em)?, None))
                }
            }
        }
    }
}

/// One row of a surface. A failed point keeps `metric = None` and the
/// reason in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceEntry {
    pub alpha: Vec<f64>,
    pub metric: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SurfaceEntry {
    fn failed(alpha: &[f64], err: &Error) -> Self {
        Self {
            alpha: alpha.to_vec(),
            metric: None,
            iterations: 0,
            converged: false,
            note: Some(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewSurface {
    pub grid: GridShape,
    pub method: String,
    pub entries: Vec<SurfaceEntry>,
}

impl PreviewSurface {
    /// Assembles a surface from entries given in grid order.
    pub fn from_entries(grid: &SimplexGrid, method: impl Into<String>, entries: Vec<SurfaceEntry>) -> Result<Self> {
        if entries.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            grid: grid.shape(),
            method: method.into(),
            entries,
        })
    }

    /// Looks up rows by lattice coordinates, ignoring row order. Used when
    /// reading surfaces written by other tools.
    pub fn from_unordered(grid: &SimplexGrid, method: impl Into<String>, rows: Vec<SurfaceEntry>) -> Result<Self> {
        let mut slots: Vec<Option<SurfaceEntry>> = vec![None; grid.len()];
        for row in rows {
            let i = grid.index_of(&row.alpha).ok_or(Error::GridMismatch)?;
            if slots[i].is_some() {
                return Err(Error::GridMismatch);
            }
            let mut row = row;
            row.alpha = grid.points()[i].alpha().to_vec();
            slots[i] = Some(row);
        }
        let entries = slots.into_iter().collect::<Option<Vec<_>>>().ok_or(Error::GridMismatch)?;
        Self::from_entries(grid, method, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn metric_at(&self, alpha: &[f64]) -> Option<f64> {
        let grid = SimplexGrid::with_divisions(self.grid.tasks, self.grid.divisions).ok()?;
        self.entries.get(grid.index_of(alpha)?)?.metric
    }

    /// The rows lying on the coarser grid `coarse`, in its order.
    pub fn restrict_to(&self, coarse: &SimplexGrid) -> Result<Self> {
        if coarse.tasks() != self.grid.tasks || self.grid.divisions % coarse.divisions() != 0 {
            return Err(Error::GridMismatch);
        }
        let fine = SimplexGrid::with_divisions(self.grid.tasks, self.grid.divisions)?;
        let entries = coarse
            .points()
            .iter()
            .map(|w| {
                fine.index_of(w.alpha())
                    .map(|i| self.entries[i].clone())
                    .ok_or(Error::GridMismatch)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(coarse, self.method.clone(), entries)
    }

    fn metrics(&self) -> Result<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.metric.filter(|m| m.is_finite()).ok_or(Error::NonFinite("surface metric")))
            .collect()
    }
}

/// Merges and evaluates one grid point. Merge failures become failed rows.
pub fn preview_point(merger: &PreviewMerger, evaluator: &dyn Evaluator, w: &SimplexWeights) -> SurfaceEntry {
    match merger.merge(w) {
        Ok((res, note)) => {
            let metric = evaluator.evaluate(&res.theta);
            SurfaceEntry {
                alpha: w.alpha().to_vec(),
                metric: metric.is_finite().then_some(metric),
                iterations: res.iterations,
                converged: res.converged,
                note: if metric.is_finite() {
                    note
                } else {
                    Some("non-finite metric".into())
                },
            }
        }
        Err(e) => SurfaceEntry::failed(w.alpha(), &e),
    }
}

/// Sequential preview sweep over every grid point.
pub fn preview_sweep(merger: &PreviewMerger, grid: &SimplexGrid, evaluator: &dyn Evaluator) -> Result<PreviewSurface> {
    if merger.tasks() != grid.tasks() {
        return Err(Error::GridMismatch);
    }
    let entries = grid
        .points()
        .iter()
        .map(|w| preview_point(merger, evaluator, w))
        .collect();
    PreviewSurface::from_entries(grid, merger.strategy().as_str(), entries)
}

/// Gradient descent on `Σ_t α_t ℓ_t` from `init`, using the step size,
/// iteration count, prior and loss scale of `trainer`.
pub fn joint_solution(
    tasks: &[SharedTask],
    w: &SimplexWeights,
    trainer: &TrainerConfig,
    init: &ParamVector,
) -> Result<PosteriorArtifact> {
    let objective = WeightedTask::new(tasks.to_vec(), w.alpha().to_vec())?;
    gd_train(&objective, trainer, init)
}

/// Joint training and evaluation at one grid point. Divergence becomes a
/// failed row.
pub fn joint_point(
    tasks: &[SharedTask],
    w: &SimplexWeights,
    trainer: &TrainerConfig,
    init: &ParamVector,
    evaluator: &dyn Evaluator,
) -> SurfaceEntry {
    match joint_solution(tasks, w, trainer, init) {
        Ok(art) => {
            let theta = art.point().expect("gradient descent returns a point");
            let objective = WeightedTask::new(tasks.to_vec(), w.alpha().to_vec())
                .expect("validated by joint_solution");
            let ridge = trainer.prior_precision / trainer.loss_scale_for(&objective);
            let g: Vec<f64> = objective
                .grad(theta)
                .iter()
                .zip(theta.iter())
                .map(|(g, t)| g + ridge * t)
                .collect();
            let metric = evaluator.evaluate(theta);
            SurfaceEntry {
                alpha: w.alpha().to_vec(),
                metric: metric.is_finite().then_some(metric),
                iterations: trainer.iterations,
                converged: crate::math::norm2(&g) < JOINT_CONVERGED_GRAD_NORM,
                note: (!metric.is_finite()).then(|| "non-finite metric".into()),
            }
        }
        Err(e) => SurfaceEntry::failed(w.alpha(), &e),
    }
}

/// Sequential joint-training sweep; every point starts from `init`.
pub fn joint_oracle_sweep(
    tasks: &[SharedTask],
    grid: &SimplexGrid,
    trainer: &TrainerConfig,
    init: &ParamVector,
    evaluator: &dyn Evaluator,
) -> Result<PreviewSurface> {
    if tasks.len() != grid.tasks() {
        return Err(Error::GridMismatch);
    }
    trainer.validate()?;
    let entries = grid
        .points()
        .iter()
        .map(|w| joint_point(tasks, w, trainer, init, evaluator))
        .collect();
    PreviewSurface::from_entries(grid, "joint", entries)
}

/// Mean squared metric difference over a shared grid.
pub fn preview_mse(preview: &PreviewSurface, exact: &PreviewSurface) -> Result<f64> {
    if preview.grid != exact.grid || preview.len() != exact.len() {
        return Err(Error::GridMismatch);
    }
    let a = preview.metrics()?;
    let b = exact.metrics()?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Maximum metric, ties broken toward the lexicographically smallest `α`.
/// Failed rows are skipped.
pub fn best_alpha(surface: &PreviewSurface) -> Result<(Vec<f64>, f64)> {
    let mut best: Option<(&[f64], f64)> = None;
    for e in &surface.entries {
        let Some(m) = e.metric.filter(|m| m.is_finite()) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((alpha, bm)) => {
                m > bm || (m == bm && lex_cmp(&e.alpha, alpha) == Ordering::Less)
            }
        };
        if better {
            best = Some((&e.alpha, m));
        }
    }
    best.map(|(a, m)| (a.to_vec(), m))
        .ok_or(Error::Empty("surface with finite metrics"))
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[min, max]` of the surface.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Counts of finite metrics per equal-width bin over `[min, max]`; the last
/// bin is closed. A constant surface puts everything in the first bin.
pub fn metric_histogram(surface: &PreviewSurface, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let values: Vec<f64> = surface
        .entries
        .iter()
        .filter_map(|e| e.metric.filter(|m| m.is_finite()))
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; bins];
    if values.is_empty() {
        return Ok(Histogram {
            edges: vec![0.0; bins + 1],
            counts,
        });
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    for v in values {
        let i = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScale {
    /// Accuracies in `[0, 1]`.
    #[default]
    Fraction,
    /// Accuracies in percentage points.
    Percent,
}

impl MetricScale {
    pub fn factor(self) -> f64 {
        match self {
            Self::Fraction => 1.0,
            Self::Percent => 100.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Fraction => "fraction",
            Self::Percent => "percent",
        }
    }
}

impl core::str::FromStr for MetricScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fraction" => Ok(Self::Fraction),
            "percent" => Ok(Self::Percent),
            _ => Err(Error::InvalidConfig(format!("unknown metric scale `{s}`"))),
        }
    }
}

/// Preview summary: the best weighting, a histogram and, when an exact
/// surface is supplied, the preview error against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metric_scale: MetricScale,
    pub preview: PreviewSurface,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<PreviewSurface>,
    /// In squared units of `metric_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    pub best_alpha: Vec<f64>,
    pub best_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_at_best: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_best_alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_best_metric: Option<f64>,
    pub histogram: Histogram,
}

impl SweepReport {
    /// Surfaces hold fractions; reported metrics are multiplied by the scale
    /// factor and the MSE by its square. An exact surface on a coarser grid
    /// is compared on the shared points only.
    pub fn new(
        preview: PreviewSurface,
        exact: Option<PreviewSurface>,
        scale: MetricScale,
        bins: usize,
    ) -> Result<Self> {
        let f = scale.factor();
        let (best_at, best) = best_alpha(&preview)?;
        let histogram = metric_histogram(&preview, bins)?;
        let mut report = Self {
            metric_scale: scale,
            preview,
            exact: None,
            mse: None,
            best_alpha: best_at,
            best_metric: best * f,
            exact_at_best: None,
            exact_best_alpha: None,
            exact_best_metric: None,
            histogram,
        };
        if let Some(exact) = exact {
            let coarse = SimplexGrid::with_divisions(exact.grid.tasks, exact.grid.divisions)?;
            let shared = if report.preview.grid == exact.grid {
                report.preview.clone()
            } else {
                report.preview.restrict_to(&coarse)?
            };
            report.mse = Some(preview_mse(&shared, &exact)? * f * f);
            report.exact_at_best = exact.metric_at(&report.best_alpha).map(|m| m * f);
            let (ea, em) = best_alpha(&exact)?;
            report.exact_best_alpha = Some(ea);
            report.exact_best_metric = Some(em * f);
            report.exact = Some(exact);
        }
        Ok(report)
    }
}
