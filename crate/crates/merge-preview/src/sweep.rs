//! Parallel sweeps over simplex grids and the persistent joint-oracle cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use merge_preview_core::preview::{joint_point, preview_point, PreviewMerger};
use merge_preview_core::tasks::SharedTask;
use merge_preview_core::{Evaluator, ParamVector, PreviewSurface, SimplexGrid, SurfaceEntry, TrainerConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json};

/// Worker count when none is given: the available cores.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {workers} workers: {e}")))
}

/// Evaluates `f` at every grid point on `workers` threads; results come back
/// in grid order whatever the scheduling.
pub fn map_grid<F>(points: &[merge_preview_core::SimplexWeights], workers: usize, f: F) -> Result<Vec<SurfaceEntry>>
where
    F: Fn(&merge_preview_core::SimplexWeights) -> SurfaceEntry + Sync,
{
    let pool = pool(workers)?;
    Ok(pool.install(|| points.par_iter().map(&f).collect()))
}

pub fn parallel_preview_sweep(
    merger: &PreviewMerger,
    grid: &SimplexGrid,
    evaluator: &dyn Evaluator,
    workers: usize,
) -> Result<PreviewSurface> {
    if merger.tasks() != grid.tasks() {
        return Err(merge_preview_core::Error::GridMismatch.into());
    }
    let entries = map_grid(grid.points(), workers, |w| preview_point(merger, evaluator, w))?;
    Ok(PreviewSurface::from_entries(grid, merger.strategy().as_str(), entries)?)
}

/// What a cached joint run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCacheKey {
    /// Digest of the task definitions and evaluation data.
    pub tasks: String,
    pub trainer: TrainerConfig,
    /// Bit patterns of the initial parameters.
    pub init: Vec<u64>,
}

impl JointCacheKey {
    pub fn new(task_fingerprint: &str, trainer: &TrainerConfig, init: &ParamVector) -> Self {
        Self {
            tasks: task_fingerprint.into(),
            trainer: trainer.clone(),
            init: init.as_slice().iter().map(|v| v.to_bits()).collect(),
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("cache key serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    key: JointCacheKey,
    /// Keyed by the comma-joined bit patterns of `α`.
    entries: BTreeMap<String, SurfaceEntry>,
}

fn alpha_key(alpha: &[f64]) -> String {
    alpha.iter().map(|a| format!("{:016x}", a.to_bits())).collect::<Vec<_>>().join(",")
}

/// Joint-oracle results on disk, one file per (tasks, trainer, init) and one
/// entry per `α`, so surfaces at different spacings share points.
#[derive(Debug, Clone)]
pub struct JointCache {
    dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: usize,
    pub computed: usize,
    /// The cache file was present but written for different inputs.
    pub mismatched: bool,
}

impl JointCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &JointCacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    fn load(&self, path: &Path, key: &JointCacheKey, stats: &mut CacheStats) -> BTreeMap<String, SurfaceEntry> {
        if !path.exists() {
            return BTreeMap::new();
        }
        match read_json::<CacheFile>(path) {
            Ok(file) if &file.key == key => file.entries,
            _ => {
                stats.mismatched = true;
                BTreeMap::new()
            }
        }
    }
}

/// Joint-oracle surface with per-point caching. Only uncached points are
/// trained, in parallel.
pub fn cached_joint_sweep(
    tasks: &[SharedTask],
    grid: &SimplexGrid,
    trainer: &TrainerConfig,
    init: &ParamVector,
    evaluator: &dyn Evaluator,
    workers: usize,
    cache: Option<(&JointCache, &str)>,
) -> Result<(PreviewSurface, CacheStats)> {
    if tasks.len() != grid.tasks() {
        return Err(merge_preview_core::Error::GridMismatch.into());
    }
    trainer.validate()?;
    let mut stats = CacheStats::default();
    let key = cache.map(|(_, fp)| JointCacheKey::new(fp, trainer, init));
    let path = cache.zip(key.as_ref()).map(|((c, _), k)| c.path(k));
    let mut known = match (cache, &key, &path) {
        (Some((c, _)), Some(k), Some(p)) => c.load(p, k, &mut stats),
        _ => BTreeMap::new(),
    };
    let todo: Vec<_> = grid
        .points()
        .iter()
        .filter(|w| !known.contains_key(&alpha_key(w.alpha())))
        .cloned()
        .collect();
    stats.hits = grid.len() - todo.len();
    stats.computed = todo.len();
    let fresh = map_grid(&todo, workers, |w| joint_point(tasks, w, trainer, init, evaluator))?;
    for e in fresh {
        known.insert(alpha_key(&e.alpha), e);
    }
    let entries = grid
        .points()
        .iter()
        .map(|w| known[&alpha_key(w.alpha())].clone())
        .collect();
    if let (Some(k), Some(p)) = (key, path) {
        if stats.computed > 0 || stats.mismatched {
            write_json(&p, &CacheFile { key: k, entries: known })?;
        }
    }
    Ok((PreviewSurface::from_entries(grid, "joint", entries)?, stats))
}
