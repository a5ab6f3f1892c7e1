//! Per-task training: point estimates, Gaussian posteriors and mixtures.
//!
//! Variational runs target the posterior `p(θ) ∝ exp(−λ ℓ(θ)) N(θ | 0, δ⁻¹ I)`
//! where `λ` is the loss scale (effective sample size) and `δ` the prior
//! precision. Gradient descent minimizes the matching MAP objective divided
//! by `λ`, i.e. `ℓ(θ) + (δ / 2λ) ‖θ‖²`, so point estimates and posterior
//! means agree on the same problem.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{GaussianPosterior, Layout, MixturePosterior, ParamVector, PrecisionMatrix};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::tasks::TaskHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    Gd,
    VonFull,
    ViDiag,
    SqGradLaplace,
    /// Full-Gaussian VON followed by a jointly fitted mixture.
    MogVi,
}

impl TrainMethod {
    pub const ALL: [TrainMethod; 5] = [
        Self::Gd,
        Self::VonFull,
        Self::ViDiag,
        Self::SqGradLaplace,
        Self::MogVi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gd => "gd",
            Self::VonFull => "von_full",
            Self::ViDiag => "vi_diag",
            Self::SqGradLaplace => "sq_grad_laplace",
            Self::MogVi => "mog_vi",
        }
    }
}

impl core::str::FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown training method `{s}`")))
    }
}

impl core::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub method: TrainMethod,
    pub learning_rate: f64,
    pub iterations: usize,
    pub mc_samples: usize,
    /// `δ` of the shared prior `N(0, δ⁻¹ I)`.
    pub prior_precision: f64,
    /// Minibatch size; full batch when absent or when the task cannot batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// `λ`; defaults to the task's example count, or 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f64>,
    pub precision_floor: f64,
    /// Largest parameter count allowed for dense precisions.
    pub max_full_dim: usize,
    /// Starting precision of variational runs; `δ + λ` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_precision: Option<f64>,
    /// Mixture stage of `mog_vi`; defaults apply when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureStage>,
}

/// Natural-gradient fit of a uniform mixture of full Gaussians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureStage {
    pub components: usize,
    /// `β` for both means and precisions.
    pub step_size: f64,
    pub iterations: usize,
    /// Component means start at `m + spread · ε`, `ε` drawn from the warm start.
    pub spread: f64,
}

impl Default for MixtureStage {
    fn default() -> Self {
        Self {
            components: 20,
            step_size: 0.02,
            iterations: 25,
            spread: 1.0,
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::gd()
    }
}

impl TrainerConfig {
    /// Full-batch gradient descent, `ρ = 3.0` for 2500 steps.
    pub fn gd() -> Self {
        Self {
            method: TrainMethod::Gd,
            learning_rate: 3.0,
            iterations: 2500,
            mc_samples: 1,
            prior_precision: 0.0,
            batch_size: None,
            seed: 0,
            loss_scale: None,
            precision_floor: 1e-8,
            max_full_dim: 2000,
            init_precision: None,
            mixture: None,
        }
    }

    /// Full-covariance variational online Newton, `ρ = 0.1`, 3 samples, 25 steps.
    pub fn von_full() -> Self {
        Self {
            method: TrainMethod::VonFull,
            learning_rate: 0.1,
            iterations: 25,
            mc_samples: 3,
            prior_precision: 1.0,
            ..Self::gd()
        }
    }

    pub fn vi_diag() -> Self {
        Self {
            method: TrainMethod::ViDiag,
            ..Self::von_full()
        }
    }

    pub fn sq_grad_laplace() -> Self {
        Self {
            method: TrainMethod::SqGradLaplace,
            ..Self::gd()
        }
    }

    /// VON warm start, then 20 components with `β = 0.02` for 25 steps.
    pub fn mog_vi() -> Self {
        Self {
            method: TrainMethod::MogVi,
            mixture: Some(MixtureStage::default()),
            ..Self::von_full()
        }
    }

    pub fn mixture_stage(&self) -> MixtureStage {
        self.mixture.unwrap_or_default()
    }

    pub fn for_method(method: TrainMethod) -> Self {
        match method {
            TrainMethod::Gd => Self::gd(),
            TrainMethod::VonFull => Self::von_full(),
            TrainMethod::ViDiag => Self::vi_diag(),
            TrainMethod::SqGradLaplace => Self::sq_grad_laplace(),
            TrainMethod::MogVi => Self::mog_vi(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be >= 1".into());
        }
        if !(self.prior_precision >= 0.0 && self.prior_precision.is_finite()) {
            return bad(format!("prior precision {} must be >= 0", self.prior_precision));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be >= 1".into());
        }
        if let Some(l) = self.loss_scale {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("loss scale {l} must be > 0"));
            }
        }
        if let Some(s) = self.init_precision {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("initial precision {s} must be > 0"));
            }
        }
        if !(self.precision_floor > 0.0) {
            return bad("precision floor must be > 0".into());
        }
        if let Some(m) = self.mixture {
            if m.components == 0 || m.iterations == 0 {
                return bad("mixture stage needs >= 1 component and >= 1 iteration".into());
            }
            if !(m.step_size > 0.0 && m.step_size.is_finite()) {
                return bad(format!("mixture step size {} must be > 0", m.step_size));
            }
            if !(m.spread >= 0.0 && m.spread.is_finite()) {
                return bad(format!("mixture spread {} must be >= 0", m.spread));
            }
        }
        let variational = matches!(
            self.method,
            TrainMethod::VonFull | TrainMethod::ViDiag | TrainMethod::MogVi
        );
        if variational && self.learning_rate > 1.0 {
            return bad(format!(
                "variational learning rate {} must be <= 1",
                self.learning_rate
            ));
        }
        Ok(())
    }

    pub fn loss_scale_for(&self, task: &dyn TaskHandle) -> f64 {
        self.loss_scale
            .unwrap_or_else(|| task.num_examples().map_or(1.0, |n| n as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Point,
    GaussianDiag,
    GaussianFull,
    Mixture,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Point => "point",
            Self::GaussianDiag => "gaussian_diag",
            Self::GaussianFull => "gaussian_full",
            Self::Mixture => "mixture",
        }
    }
}

impl core::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Point(ParamVector),
    Gaussian(GaussianPosterior),
    Mixture(MixturePosterior),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trainer: TrainerConfig,
    pub task_id: String,
    pub final_loss: f64,
    /// Non-fatal events such as clamped precisions.
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorArtifact {
    pub payload: Payload,
    pub provenance: Provenance,
}

impl PosteriorArtifact {
    pub fn kind(&self) -> ArtifactKind {
        match &self.payload {
            Payload::Point(_) => ArtifactKind::Point,
            Payload::Gaussian(g) => match g.layout() {
                Layout::Diagonal => ArtifactKind::GaussianDiag,
                Layout::Full => ArtifactKind::GaussianFull,
            },
            Payload::Mixture(_) => ArtifactKind::Mixture,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.payload {
            Payload::Point(p) => p.len(),
            Payload::Gaussian(g) => g.dim(),
            Payload::Mixture(m) => m.dim(),
        }
    }

    /// The point estimate: the vector itself or the Gaussian mean. Mixtures
    /// have none.
    pub fn point(&self) -> Option<&ParamVector> {
        match &self.payload {
            Payload::Point(p) => Some(p),
            Payload::Gaussian(g) => Some(g.mean()),
            Payload::Mixture(_) => None,
        }
    }

    pub fn gaussian(&self) -> Option<&GaussianPosterior> {
        match &self.payload {
            Payload::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub fn mixture(&self) -> Option<&MixturePosterior> {
        match &self.payload {
            Payload::Mixture(m) => Some(m),
            _ => None,
        }
    }
}

fn provenance(task: &dyn TaskHandle, cfg: &TrainerConfig, theta: &[f64], flags: Vec<String>) -> Provenance {
    Provenance {
        trainer: cfg.clone(),
        task_id: task.id().into(),
        final_loss: task.loss(theta),
        flags,
    }
}

/// Draws minibatch index sets by reshuffling once per pass over the data.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(task: &dyn TaskHandle, cfg: &TrainerConfig) -> Option<Self> {
        let n = task.num_examples()?;
        let size = cfg.batch_size.filter(|&b| b < n)?;
        Some(Self {
            order: (0..n).collect(),
            pos: n,
            size,
        })
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.size];
        self.pos += self.size;
        b
    }
}

fn loss_grad(
    task: &dyn TaskHandle,
    theta: &[f64],
    batcher: &mut Option<Batcher>,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    if let Some(b) = batcher {
        let idx = b.next(rng);
        if let Some(out) = task.minibatch_loss_grad(theta, idx) {
            return out;
        }
    }
    task.loss_grad(theta)
}

fn check_init(task: &dyn TaskHandle, cfg: &TrainerConfig, p: usize) -> Result<()> {
    cfg.validate()?;
    crate::expfam::check_dim(task.dim(), p)
}

/// `θ ← θ − ρ (∇ℓ(θ) + (δ/λ) θ)` for `iterations` steps.
pub fn gd_train(task: &dyn TaskHandle, cfg: &TrainerConfig, init: &ParamVector) -> Result<PosteriorArtifact> {
    check_init(task, cfg, init.len())?;
    let ridge = cfg.prior_precision / cfg.loss_scale_for(task);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(task, cfg);
    let mut theta = init.as_slice().to_vec();
    for it in 0..cfg.iterations {
        let (l, g) = loss_grad(task, &theta, &mut batcher, &mut rng);
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        for (t, gj) in theta.iter_mut().zip(&g) {
            *t -= cfg.learning_rate * (gj + ridge * *t);
        }
    }
    if theta.iter().any(|v| !v.is_finite()) || !task.loss(&theta).is_finite() {
        return Err(Error::Divergence {
            iteration: cfg.iterations,
        });
    }
    let prov = provenance(task, cfg, &theta, Vec::new());
    Ok(PosteriorArtifact {
        payload: Payload::Point(ParamVector::new(theta)?),
        provenance: prov,
    })
}

/// Standard-normal draws; the second half mirrors the first when the count
/// is even.
fn normal_draws(rng: &mut ChaCha8Rng, samples: usize, p: usize) -> Vec<Vec<f64>> {
    let antithetic = samples % 2 == 0;
    let fresh = if antithetic { samples / 2 } else { samples };
    let mut out: Vec<Vec<f64>> = (0..fresh)
        .map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    if antithetic {
        let mirrored: Vec<Vec<f64>> = out.iter().map(|z| z.iter().map(|v| -v).collect()).collect();
        out.extend(mirrored);
    }
    out
}

/// `λ Σ_i g_i g_iᵀ / n`, the empirical Fisher of the scaled mean loss.
fn empirical_fisher(task: &dyn TaskHandle, theta: &[f64], scale: f64) -> Result<DenseMatrix> {
    let p = task.dim();
    let mut f = DenseMatrix::zeros(p);
    let mut n = 0usize;
    task.visit_example_grads(theta, &mut |g| {
        n += 1;
        for j in 0..p {
            if g[j] == 0.0 {
                continue;
            }
            for k in j..p {
                f.add_at(j, k, g[j] * g[k]);
            }
        }
    })?;
    f.symmetrize_from_upper();
    f.scale(scale / n.max(1) as f64);
    Ok(f)
}

fn curvature(task: &dyn TaskHandle, theta: &[f64], scale: f64) -> Result<DenseMatrix> {
    match task.hessian(theta) {
        Some(mut h) => {
            h.scale(scale);
            Ok(h)
        }
        None => empirical_fisher(task, theta, scale),
    }
}

fn check_dense_cap(cfg: &TrainerConfig, p: usize) -> Result<()> {
    if p > cfg.max_full_dim {
        return Err(Error::InvalidConfig(format!(
            "dense precision of dimension {p} exceeds the cap of {}",
            cfg.max_full_dim
        )));
    }
    Ok(())
}

fn finite_or_diverged(v: &[f64], iteration: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { iteration })
    }
}

/// Variational online Newton with a dense precision.
///
/// Each step draws `S` samples from the current Gaussian, averages the
/// scaled gradient `ḡ` and Hessian `H̄` over them, then sets
/// `prec ← (1−ρ) prec + ρ (H̄ + δI)` and `m ← m − ρ prec⁻¹ (ḡ + δ m)`.
/// Tasks without an analytic Hessian use the empirical Fisher.
pub fn von_full_train(task: &dyn TaskHandle, cfg: &TrainerConfig, init: &GaussianPosterior) -> Result<PosteriorArtifact> {
    let p = init.dim();
    check_init(task, cfg, p)?;
    check_dense_cap(cfg, p)?;
    let scale = cfg.loss_scale_for(task);
    let delta = cfg.prior_precision;
    let rho = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(task, cfg);
    let mut mean = init.mean().as_slice().to_vec();
    let mut prec = init.precision().to_dense();
    let mut factor = Cholesky::new(&prec)?;

    for it in 0..cfg.iterations {
        let draws = normal_draws(&mut rng, cfg.mc_samples, p);
        let inv_s = 1.0 / draws.len() as f64;
        let mut g_bar = vec![0.0; p];
        let mut h_bar = DenseMatrix::zeros(p);
        for z in &draws {
            let eps = factor.solve_upper(z);
            let theta: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + e).collect();
            let (_, g) = loss_grad(task, &theta, &mut batcher, &mut rng);
            g_bar.iter_mut().zip(&g).for_each(|(a, b)| *a += inv_s * scale * b);
            h_bar.add_scaled(inv_s, &curvature(task, &theta, scale)?);
        }
        finite_or_diverged(&g_bar, it)?;
        if !h_bar.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        prec.scale(1.0 - rho);
        prec.add_scaled(rho, &h_bar);
        for j in 0..p {
            prec.add_at(j, j, rho * delta);
        }
        // average away rounding asymmetry from the sampled Hessians
        for j in 0..p {
            for k in (j + 1)..p {
                let v = 0.5 * (prec.get(j, k) + prec.get(k, j));
                prec.set(j, k, v);
            }
        }
        prec.symmetrize_from_upper();
        factor = Cholesky::new(&prec).map_err(|_| Error::PrecisionRepair { iteration: it })?;
        let rhs: Vec<f64> = g_bar.iter().zip(&mean).map(|(g, m)| g + delta * m).collect();
        let step = factor.solve(&rhs);
        mean.iter_mut().zip(&step).for_each(|(m, s)| *m -= rho * s);
        finite_or_diverged(&mean, it)?;
    }
    let prov = provenance(task, cfg, &mean, Vec::new());
    Ok(PosteriorArtifact {
        payload: Payload::Gaussian(GaussianPosterior::new(
            ParamVector::new(mean)?,
            PrecisionMatrix::full(prec)?,
        )?),
        provenance: prov,
    })
}

/// Diagonal variational online Newton.
///
/// The curvature estimate is the exact Hessian diagonal when the task has
/// one, otherwise the reparameterization estimate `g ⊙ (θ − m) ⊙ s`, so the
/// precision is accumulated from the same gradients that move the mean.
/// Entries pushed below the floor are clamped and flagged.
pub fn vi_diag_train(task: &dyn TaskHandle, cfg: &TrainerConfig, init: &GaussianPosterior) -> Result<PosteriorArtifact> {
    let p = init.dim();
    check_init(task, cfg, p)?;
    let PrecisionMatrix::Diagonal(init_prec) = init.precision() else {
        return Err(Error::LayoutMismatch);
    };
    let scale = cfg.loss_scale_for(task);
    let delta = cfg.prior_precision;
    let rho = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(task, cfg);
    let mut mean = init.mean().as_slice().to_vec();
    let mut prec = init_prec.clone();
    let mut flags = Vec::new();

    for it in 0..cfg.iterations {
        let draws = normal_draws(&mut rng, cfg.mc_samples, p);
        let inv_s = 1.0 / draws.len() as f64;
        let mut g_bar = vec![0.0; p];
        let mut h_bar = vec![0.0; p];
        for z in &draws {
            let eps: Vec<f64> = z.iter().zip(&prec).map(|(z, s)| z / libm::sqrt(*s)).collect();
            let theta: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + e).collect();
            let (_, g) = loss_grad(task, &theta, &mut batcher, &mut rng);
            for j in 0..p {
                g_bar[j] += inv_s * scale * g[j];
            }
            match task.hessian_diag(&theta) {
                Some(h) => {
                    for j in 0..p {
                        h_bar[j] += inv_s * scale * h[j];
                    }
                }
                None => {
                    for j in 0..p {
                        h_bar[j] += inv_s * scale * g[j] * eps[j] * prec[j];
                    }
                }
            }
        }
        finite_or_diverged(&g_bar, it)?;
        finite_or_diverged(&h_bar, it)?;
        let mut clamped = 0usize;
        for j in 0..p {
            let s = (1.0 - rho) * prec[j] + rho * (h_bar[j] + delta);
            prec[j] = if s < cfg.precision_floor {
                clamped += 1;
                cfg.precision_floor
            } else {
                s
            };
        }
        if clamped > 0 {
            flags.push(format!("precision floor applied to {clamped} entries at iteration {it}"));
        }
        for j in 0..p {
            mean[j] -= rho * (g_bar[j] + delta * mean[j]) / prec[j];
        }
        finite_or_diverged(&mean, it)?;
    }
    let prov = provenance(task, cfg, &mean, flags);
    Ok(PosteriorArtifact {
        payload: Payload::Gaussian(GaussianPosterior::new(
            ParamVector::new(mean)?,
            PrecisionMatrix::diagonal(prec)?,
        )?),
        provenance: prov,
    })
}

/// Gradient and Hessian of `log q` for a uniform mixture of Gaussians.
///
/// With `g_k = −S_k (θ − m_k)` and responsibilities `r_k`, the gradient is
/// `ḡ = Σ r_k g_k` and the Hessian `Σ r_k (g_k g_kᵀ − S_k) − ḡ ḡᵀ`.
fn mixture_log_density_derivs(
    theta: &[f64],
    means: &[Vec<f64>],
    precs: &[DenseMatrix],
    log_dets: &[f64],
) -> (Vec<f64>, DenseMatrix) {
    let p = theta.len();
    let mut logs = Vec::with_capacity(means.len());
    let mut grads = Vec::with_capacity(means.len());
    for ((m, s), ld) in means.iter().zip(precs).zip(log_dets) {
        let d: Vec<f64> = theta.iter().zip(m).map(|(t, m)| t - m).collect();
        let sd = s.mat_vec(&d);
        let quad: f64 = d.iter().zip(&sd).map(|(a, b)| a * b).sum();
        logs.push(0.5 * ld - 0.5 * quad);
        grads.push(sd.into_iter().map(|v| -v).collect::<Vec<f64>>());
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut resp: Vec<f64> = logs.iter().map(|l| libm::exp(l - top)).collect();
    let total: f64 = resp.iter().sum();
    resp.iter_mut().for_each(|r| *r /= total);

    let mut g_bar = vec![0.0; p];
    let mut hess = DenseMatrix::zeros(p);
    for ((r, g), s) in resp.iter().zip(&grads).zip(precs) {
        if *r == 0.0 {
            continue;
        }
        for j in 0..p {
            g_bar[j] += r * g[j];
            let rg = r * g[j];
            for k in j..p {
                hess.add_at(j, k, rg * g[k]);
            }
        }
        hess.add_scaled(-r, s);
    }
    for j in 0..p {
        for k in j..p {
            hess.add_at(j, k, -g_bar[j] * g_bar[k]);
        }
    }
    hess.symmetrize_from_upper();
    (g_bar, hess)
}

/// Joint natural-gradient fit of a uniform mixture of full Gaussians to
/// `p(θ) ∝ exp(−λ ℓ(θ)) N(θ | 0, δ⁻¹ I)`, started around `init`.
///
/// With `h = λ ℓ + (δ/2) ‖θ‖² + log q`, each component takes
/// `S_k ← S_k + β E_k[∇²h]` and `m_k ← m_k − β S_k⁻¹ E_k[∇h]`, expectations
/// over `S` draws from component `k`. All components move from the same
/// snapshot. A precision step that loses definiteness is skipped and
/// flagged; the mean step then uses the old precision. Weights stay uniform.
pub fn mog_vi_train(task: &dyn TaskHandle, cfg: &TrainerConfig, init: &GaussianPosterior) -> Result<PosteriorArtifact> {
    let p = init.dim();
    check_init(task, cfg, p)?;
    check_dense_cap(cfg, p)?;
    let stage = cfg.mixture_stage();
    let scale = cfg.loss_scale_for(task);
    let delta = cfg.prior_precision;
    let beta = stage.step_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(task, cfg);

    let start = init.precision().to_dense();
    let start_factor = Cholesky::new(&start)?;
    let mut means: Vec<Vec<f64>> = (0..stage.components)
        .map(|_| {
            let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let eps = start_factor.solve_upper(&z);
            init.mean()
                .as_slice()
                .iter()
                .zip(&eps)
                .map(|(m, e)| m + stage.spread * e)
                .collect()
        })
        .collect();
    let mut precs = vec![start; stage.components];
    let mut flags = Vec::new();

    for it in 0..stage.iterations {
        let factors = precs.iter().map(Cholesky::new).collect::<Result<Vec<_>>>()?;
        let log_dets: Vec<f64> = factors.iter().map(Cholesky::log_det).collect();
        let mut next = Vec::with_capacity(stage.components);
        let mut skipped = 0usize;
        for k in 0..stage.components {
            let draws = normal_draws(&mut rng, cfg.mc_samples, p);
            let inv_s = 1.0 / draws.len() as f64;
            let mut g_bar = vec![0.0; p];
            let mut h_bar = DenseMatrix::zeros(p);
            for z in &draws {
                let eps = factors[k].solve_upper(z);
                let theta: Vec<f64> = means[k].iter().zip(&eps).map(|(m, e)| m + e).collect();
                let (_, g) = loss_grad(task, &theta, &mut batcher, &mut rng);
                let (gq, hq) = mixture_log_density_derivs(&theta, &means, &precs, &log_dets);
                for j in 0..p {
                    g_bar[j] += inv_s * (scale * g[j] + delta * theta[j] + gq[j]);
                }
                h_bar.add_scaled(inv_s, &curvature(task, &theta, scale)?);
                h_bar.add_scaled(inv_s, &hq);
            }
            finite_or_diverged(&g_bar, it)?;
            if !h_bar.is_finite() {
                return Err(Error::Divergence { iteration: it });
            }
            let mut prec = precs[k].clone();
            prec.add_scaled(beta, &h_bar);
            for j in 0..p {
                prec.add_at(j, j, beta * delta);
            }
            prec.symmetrize_from_upper();
            let (prec, factor) = match Cholesky::new(&prec) {
                Ok(f) => (prec, f),
                Err(_) => {
                    skipped += 1;
                    (precs[k].clone(), factors[k].clone())
                }
            };
            let step = factor.solve(&g_bar);
            let mean: Vec<f64> = means[k].iter().zip(&step).map(|(m, s)| m - beta * s).collect();
            finite_or_diverged(&mean, it)?;
            next.push((mean, prec));
        }
        if skipped > 0 {
            flags.push(format!(
                "indefinite precision step skipped for {skipped} components at iteration {it}"
            ));
        }
        (means, precs) = next.into_iter().unzip();
    }

    let mut gaussians = Vec::with_capacity(stage.components);
    let mut loss = 0.0;
    for (m, s) in means.into_iter().zip(precs) {
        loss += task.loss(&m);
        gaussians.push(GaussianPosterior::new(ParamVector::new(m)?, PrecisionMatrix::full(s)?)?);
    }
    Ok(PosteriorArtifact {
        payload: Payload::Mixture(MixturePosterior::uniform(gaussians)?),
        provenance: Provenance {
            trainer: cfg.clone(),
            task_id: task.id().into(),
            final_loss: loss / stage.components as f64,
            flags,
        },
    })
}

/// Laplace-style diagonal Gaussian at `theta` with precision
/// `Σ_i (∇ℓ_i(θ))² + floor` over the task's examples.
pub fn sq_grad_laplace(task: &dyn TaskHandle, cfg: &TrainerConfig, theta: &ParamVector) -> Result<PosteriorArtifact> {
    crate::expfam::check_dim(task.dim(), theta.len())?;
    let mut h = vec![0.0; theta.len()];
    task.visit_example_grads(theta, &mut |g| {
        for (hj, gj) in h.iter_mut().zip(g) {
            *hj += gj * gj;
        }
    })?;
    for v in &mut h {
        *v += cfg.precision_floor;
    }
    let prov = provenance(task, cfg, theta, Vec::new());
    Ok(PosteriorArtifact {
        payload: Payload::Gaussian(GaussianPosterior::new(
            theta.clone(),
            PrecisionMatrix::diagonal(h)?,
        )?),
        provenance: prov,
    })
}

/// Starting Gaussian `N(init, s⁻¹ I)` with `s` from `init_precision`,
/// else `δ + λ`: the prior plus unit curvature of the scaled loss.
pub fn initial_gaussian(
    task: &dyn TaskHandle,
    init: &ParamVector,
    cfg: &TrainerConfig,
    layout: Layout,
) -> Result<GaussianPosterior> {
    let s = cfg
        .init_precision
        .unwrap_or_else(|| cfg.prior_precision + cfg.loss_scale_for(task));
    GaussianPosterior::isotropic(init.clone(), s, layout)
}

/// Runs `cfg.method` from `init`, starting variational methods from
/// [`initial_gaussian`]. The squared-gradient method runs gradient descent
/// first and measures the precision at its endpoint.
pub fn train(task: &dyn TaskHandle, cfg: &TrainerConfig, init: &ParamVector) -> Result<PosteriorArtifact> {
    match cfg.method {
        TrainMethod::Gd => gd_train(task, cfg, init),
        TrainMethod::VonFull => von_full_train(task, cfg, &initial_gaussian(task, init, cfg, Layout::Full)?),
        TrainMethod::ViDiag => vi_diag_train(task, cfg, &initial_gaussian(task, init, cfg, Layout::Diagonal)?),
        TrainMethod::SqGradLaplace => {
            let point = gd_train(task, cfg, init)?;
            let theta = point.point().expect("gd returns a point").clone();
            sq_grad_laplace(task, cfg, &theta)
        }
        TrainMethod::MogVi => {
            let warm_cfg = TrainerConfig {
                method: TrainMethod::VonFull,
                ..cfg.clone()
            };
            let warm = von_full_train(task, &warm_cfg, &initial_gaussian(task, init, cfg, Layout::Full)?)?;
            let start = warm.gaussian().expect("von returns a Gaussian");
            mog_vi_train(task, cfg, start)
        }
    }
}

/// Uniform mixture of independent variational runs, one per
/// `(seed, iterations)` pair. Uses `cfg.method`, which must be `vi_diag` or
/// `von_full`.
pub fn multi_run_mixture(
    task: &dyn TaskHandle,
    cfg: &TrainerConfig,
    init: &GaussianPosterior,
    runs: &[(u64, usize)],
) -> Result<PosteriorArtifact> {
    if runs.is_empty() {
        return Err(Error::Empty("mixture runs"));
    }
    let trainer = match cfg.method {
        TrainMethod::ViDiag => vi_diag_train,
        TrainMethod::VonFull => von_full_train,
        other => {
            return Err(Error::InvalidConfig(format!(
                "mixtures are built from variational runs, not `{other}`"
            )))
        }
    };
    let mut gaussians = Vec::with_capacity(runs.len());
    let mut flags = Vec::new();
    let mut loss = 0.0;
    for &(seed, iterations) in runs {
        let run_cfg = cfg.clone().with_seed(seed).with_iterations(iterations);
        let art = trainer(task, &run_cfg, init).map_err(|e| Error::ComponentFailed {
            seed,
            source: alloc::boxed::Box::new(e),
        })?;
        loss += art.provenance.final_loss;
        flags.extend(art.provenance.flags.into_iter().map(|f| format!("seed {seed}: {f}")));
        let Payload::Gaussian(g) = art.payload else {
            unreachable!("variational trainers return Gaussians")
        };
        gaussians.push(g);
    }
    Ok(PosteriorArtifact {
        payload: Payload::Mixture(MixturePosterior::uniform(gaussians)?),
        provenance: Provenance {
            trainer: cfg.clone(),
            task_id: task.id().into(),
            final_loss: loss / runs.len() as f64,
            flags,
        },
    })
}

/// Size of the gradient of the trained objective at the artifact, in
/// per-example loss units: `‖∇ℓ(θ) + (δ/λ) θ‖` for a point,
/// `‖E_q[∇ℓ] + (δ/λ) m‖` for a Gaussian, and for a mixture the largest
/// `‖E_k[∇ℓ + (δ/λ) θ + λ⁻¹ ∇log q]‖` over components. Expectations use
/// `samples` antithetic draws seeded by `seed`.
pub fn stationarity_residual(
    task: &dyn TaskHandle,
    cfg: &TrainerConfig,
    artifact: &PosteriorArtifact,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let p = artifact.dim();
    crate::expfam::check_dim(task.dim(), p)?;
    let scale = cfg.loss_scale_for(task);
    let ridge = cfg.prior_precision / scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum());
    let expected = |mean: &[f64], factor: &Cholesky, extra: &dyn Fn(&[f64]) -> Vec<f64>, rng: &mut ChaCha8Rng| {
        let draws = normal_draws(rng, samples.max(2) & !1, p);
        let inv_s = 1.0 / draws.len() as f64;
        let mut acc = vec![0.0; p];
        for z in &draws {
            let eps = factor.solve_upper(z);
            let theta: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + e).collect();
            let g = task.grad(&theta);
            let x = extra(&theta);
            for j in 0..p {
                acc[j] += inv_s * (g[j] + ridge * theta[j] + x[j]);
            }
        }
        acc
    };
    let residual = match &artifact.payload {
        Payload::Point(theta) => {
            let t = theta.as_slice();
            let g: Vec<f64> = task.grad(t).iter().zip(t).map(|(g, t)| g + ridge * t).collect();
            norm(&g)
        }
        Payload::Gaussian(q) => {
            let factor = Cholesky::new(&q.precision().to_dense())?;
            norm(&expected(q.mean().as_slice(), &factor, &|_| vec![0.0; p], &mut rng))
        }
        Payload::Mixture(q) => {
            let means: Vec<Vec<f64>> = q.components().iter().map(|c| c.gaussian.mean().as_slice().to_vec()).collect();
            let precs: Vec<DenseMatrix> = q.components().iter().map(|c| c.gaussian.precision().to_dense()).collect();
            let factors = precs.iter().map(Cholesky::new).collect::<Result<Vec<_>>>()?;
            let log_dets: Vec<f64> = factors.iter().map(Cholesky::log_det).collect();
            let log_q = |theta: &[f64]| {
                let (g, _) = mixture_log_density_derivs(theta, &means, &precs, &log_dets);
                g.into_iter().map(|v| v / scale).collect()
            };
            let mut worst: f64 = 0.0;
            for (m, f) in means.iter().zip(&factors) {
                worst = worst.max(norm(&expected(m, f, &log_q, &mut rng)));
            }
            worst
        }
    };
    Ok(residual)
}
