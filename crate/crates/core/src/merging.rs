//! Merging per-task posteriors into one parameter vector.
//!
//! Every closed-form merge here is the minimizer of a weighted surrogate
//! objective `γ R̂₀(θ) + Σ_t α_t ℓ̂_t(θ)`:
//!
//! | merge                  | surrogate `ℓ̂_t`                   | regularizer `R̂₀`            |
//! |------------------------|------------------------------------|------------------------------|
//! | [`simple_average`]     | `½‖θ − θ_t‖²`                      | `½‖θ‖²`                      |
//! | [`task_arithmetic`]    | `½‖θ − θ_t‖²`                      | `½‖θ − θ_anchor‖²`           |
//! | [`hessian_weighted`]   | `½(θ − θ_t)ᵀ H_t (θ − θ_t)`        | `½(θ − m₀)ᵀ H₀ (θ − m₀)`     |
//! | [`hessian_weighted_ta`]| `½(θ − θ_t)ᵀ (H₀ + H_t)(θ − θ_t)`  | `½(θ − θ_anchor)ᵀ H₀ (…)`    |
//!
//! Each is a quadratic, so its gradient is linear in θ. That is also why
//! only the precisions and means matter and the constants `ℓ_t(θ_t)` drop.
//!
//! Mixture posteriors have no closed-form mode; [`mog_em_merge`] runs the
//! EM fixed point whose M-step is a Hessian-weighted merge with every
//! component reweighted by its responsibility.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{
    check_dim, gaussian_surrogate, BetaNatural, GaussianNatural, GaussianPosterior, Layout,
    MixturePosterior, ParamVector, PrecisionMatrix,
};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::math::{self, Kahan};

/// Parameter count from which diagonal accumulations switch to compensated
/// summation.
pub const COMPENSATED_SUM_THRESHOLD: usize = 10_000;

/// Task weights `α` with the regularizer weight `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    alpha: Vec<f64>,
    gamma: f64,
    /// True when `γ = 1 − Σα`, false for [`SimplexWeights::prior_free`].
    normalized: bool,
}

impl SimplexWeights {
    /// Weights on the simplex: `α_t ≥ 0`, `Σα ≤ 1`, `γ = 1 − Σα`.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_alpha(&alpha)?;
        let sum: f64 = alpha.iter().sum();
        if sum > 1.0 + 1e-12 {
            return Err(Error::InvalidWeights(format!("weights sum to {sum} > 1")));
        }
        Ok(Self {
            alpha,
            gamma: (1.0 - sum).max(0.0),
            normalized: true,
        })
    }

    /// Unconstrained nonnegative weights with no regularizer (`γ = 0`).
    ///
    /// Used for the plain Hessian-weighted form `(Σα_t H_t)⁻¹ Σα_t H_t θ_t`,
    /// which is invariant to rescaling all weights.
    pub fn prior_free(alpha: Vec<f64>) -> Result<Self> {
        check_alpha(&alpha)?;
        Ok(Self {
            alpha,
            gamma: 0.0,
            normalized: false,
        })
    }

    /// Vertex `e_t` of the simplex with `len` tasks.
    pub fn vertex(len: usize, t: usize) -> Result<Self> {
        let mut alpha = vec![0.0; len];
        *alpha
            .get_mut(t)
            .ok_or_else(|| Error::InvalidWeights(format!("vertex {t} out of range")))? = 1.0;
        Self::new(alpha)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// `γ + Σα`, equal to one for simplex weights.
    fn mass(&self) -> f64 {
        if self.normalized {
            1.0
        } else {
            self.gamma + self.sum()
        }
    }

    /// `α / Σα` with `γ = 0`, or `None` when every weight is zero.
    pub fn renormalized(&self) -> Option<Self> {
        let s = self.sum();
        if !(s > 0.0) {
            return None;
        }
        let alpha = self.alpha.iter().map(|a| a / s).collect();
        Some(Self {
            alpha,
            gamma: 0.0,
            normalized: true,
        })
    }
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.is_empty() {
        return Err(Error::Empty("task weights"));
    }
    if let Some(a) = alpha.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::InvalidWeights(format!("weight {a} is not a finite value >= 0")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeResult {
    pub theta: ParamVector,
    /// 1 for closed-form merges.
    pub iterations: usize,
    pub converged: bool,
    /// Closed-form merges: the weighted surrogate at `theta`.
    /// EM: the mixture objective `Σ_t α_t log q_t(θ)`.
    pub final_objective: f64,
    /// EM only: the mixture objective at the initial point and after each
    /// M-step.
    pub objective_trace: Vec<f64>,
}

impl MergeResult {
    fn closed_form(theta: Vec<f64>, final_objective: f64) -> Result<Self> {
        Ok(Self {
            theta: ParamVector::new(theta)?,
            iterations: 1,
            converged: true,
            final_objective,
            objective_trace: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    /// One M-step with uniform responsibilities `1/K`.
    HessianUniform,
    /// `Σ_t α_t · mean_k θ_tk`.
    SimpleAverage,
    Provided(ParamVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Sup-norm threshold on the parameter change between iterates.
    pub tol: f64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            tol: 1e-8,
            init: EmInit::HessianUniform,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("EM max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("EM tol must be > 0".into()));
        }
        Ok(())
    }
}

fn check_count(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::InvalidWeights(format!(
            "{found} weights supplied for {expected} tasks"
        )));
    }
    Ok(())
}

fn shared_dim<'a>(mut vectors: impl Iterator<Item = &'a [f64]>) -> Result<usize> {
    let p = vectors.next().ok_or(Error::Empty("model list"))?.len();
    for v in vectors {
        check_dim(p, v.len())?;
    }
    Ok(p)
}

/// Accumulates `Σ c_i v_i` in task order, compensated for long vectors.
struct VecAcc {
    plain: Vec<f64>,
    comp: Option<Vec<Kahan>>,
}

impl VecAcc {
    fn new(p: usize) -> Self {
        if p >= COMPENSATED_SUM_THRESHOLD {
            Self {
                plain: Vec::new(),
                comp: Some(vec![Kahan::default(); p]),
            }
        } else {
            Self {
                plain: vec![0.0; p],
                comp: None,
            }
        }
    }

    fn add_scaled(&mut self, c: f64, v: &[f64]) {
        match &mut self.comp {
            Some(k) => k.iter_mut().zip(v).for_each(|(a, x)| a.add(c * x)),
            None => self.plain.iter_mut().zip(v).for_each(|(a, x)| *a += c * x),
        }
    }

    fn add_scaled_product(&mut self, c: f64, d: &[f64], v: &[f64]) {
        match &mut self.comp {
            Some(k) => k
                .iter_mut()
                .zip(d.iter().zip(v))
                .for_each(|(a, (h, x))| a.add(c * h * x)),
            None => self
                .plain
                .iter_mut()
                .zip(d.iter().zip(v))
                .for_each(|(a, (h, x))| *a += c * h * x),
        }
    }

    fn finish(self) -> Vec<f64> {
        match self.comp {
            Some(k) => k.into_iter().map(Kahan::value).collect(),
            None => self.plain,
        }
    }
}

/// Running sum of weighted precisions.
enum PrecAcc {
    Diagonal(VecAcc),
    Full(DenseMatrix),
}

impl PrecAcc {
    fn new(p: usize, layout: Layout) -> Self {
        match layout {
            Layout::Diagonal => Self::Diagonal(VecAcc::new(p)),
            Layout::Full => Self::Full(DenseMatrix::zeros(p)),
        }
    }

    fn add(&mut self, c: f64, h: &PrecisionMatrix) -> Result<()> {
        match (self, h) {
            (Self::Diagonal(acc), PrecisionMatrix::Diagonal(d)) => acc.add_scaled(c, d),
            (Self::Full(acc), PrecisionMatrix::Full(f)) => acc.add_scaled(c, f.matrix()),
            (Self::Full(acc), PrecisionMatrix::Diagonal(d)) => acc.add_scaled_diagonal(c, d),
            (Self::Diagonal(_), PrecisionMatrix::Full(_)) => return Err(Error::LayoutMismatch),
        }
        Ok(())
    }

    /// Solves `(Σ c_i H_i) x = rhs`; a singular sum means degenerate weights.
    fn solve(self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Diagonal(acc) => {
                let d = acc.finish();
                if d.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                    return Err(Error::DegenerateWeights);
                }
                Ok(d.iter().zip(rhs).map(|(h, b)| b / h).collect())
            }
            Self::Full(m) => {
                let c = Cholesky::new(&m).map_err(|_| Error::DegenerateWeights)?;
                Ok(c.solve(rhs))
            }
        }
    }

    fn into_precision(self) -> Result<PrecisionMatrix> {
        match self {
            Self::Diagonal(acc) => {
                PrecisionMatrix::diagonal(acc.finish()).map_err(|_| Error::DegenerateWeights)
            }
            Self::Full(m) => PrecisionMatrix::full(m).map_err(|_| Error::DegenerateWeights),
        }
    }
}

/// Adds `c · H v` to `acc`.
fn add_precision_times(acc: &mut VecAcc, c: f64, h: &PrecisionMatrix, v: &[f64]) {
    match h {
        PrecisionMatrix::Diagonal(d) => acc.add_scaled_product(c, d, v),
        PrecisionMatrix::Full(_) => acc.add_scaled(c, &h.apply(v)),
    }
}

/// Layout shared by the task posteriors. A diagonal prior may accompany full
/// task precisions; the reverse would densify a diagonal merge and is
/// rejected.
fn merge_layout<'a>(
    mut tasks: impl Iterator<Item = &'a GaussianPosterior>,
    prior: Option<&GaussianPosterior>,
) -> Result<(usize, Layout)> {
    let first = tasks.next().ok_or(Error::Empty("posterior list"))?;
    let (p, layout) = (first.dim(), first.layout());
    for q in tasks {
        check_dim(p, q.dim())?;
        if q.layout() != layout {
            return Err(Error::LayoutMismatch);
        }
    }
    if let Some(prior) = prior {
        check_dim(p, prior.dim())?;
        if layout == Layout::Diagonal && prior.layout() == Layout::Full {
            return Err(Error::LayoutMismatch);
        }
    }
    Ok((p, layout))
}

fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// `θ = Σ_t α_t θ_t`, the minimizer of `γ ½‖θ‖² + Σ_t α_t ½‖θ − θ_t‖²`.
pub fn simple_average(models: &[ParamVector], w: &SimplexWeights) -> Result<MergeResult> {
    let p = shared_dim(models.iter().map(|m| m.as_slice()))?;
    check_count(models.len(), w.len())?;
    let mass = w.mass();
    if !(mass > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut acc = VecAcc::new(p);
    for (m, &a) in models.iter().zip(w.alpha()) {
        if a != 0.0 {
            acc.add_scaled(a, m);
        }
    }
    let mut theta = acc.finish();
    if !w.normalized {
        theta.iter_mut().for_each(|v| *v /= mass);
    }
    let objective = w.gamma() * half_sq_dist(&theta, &vec![0.0; p])
        + models
            .iter()
            .zip(w.alpha())
            .map(|(m, a)| a * half_sq_dist(&theta, m))
            .sum::<f64>();
    MergeResult::closed_form(theta, objective)
}

/// `θ = θ_anchor + Σ_t α_t (θ_t − θ_anchor)`, the minimizer of
/// `γ ½‖θ − θ_anchor‖² + Σ_t α_t ½‖θ − θ_t‖²`.
pub fn task_arithmetic(
    anchor: &ParamVector,
    models: &[ParamVector],
    w: &SimplexWeights,
) -> Result<MergeResult> {
    let p = shared_dim(core::iter::once(anchor.as_slice()).chain(models.iter().map(|m| m.as_slice())))?;
    check_count(models.len(), w.len())?;
    let mass = w.mass();
    if !(mass > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut delta = VecAcc::new(p);
    for (m, &a) in models.iter().zip(w.alpha()) {
        if a != 0.0 {
            let tv: Vec<f64> = m.iter().zip(anchor.iter()).map(|(x, y)| x - y).collect();
            delta.add_scaled(a, &tv);
        }
    }
    let theta: Vec<f64> = anchor
        .iter()
        .zip(delta.finish())
        .map(|(a, d)| a + d / mass)
        .collect();
    let objective = w.gamma() * half_sq_dist(&theta, anchor)
        + models
            .iter()
            .zip(w.alpha())
            .map(|(m, a)| a * half_sq_dist(&theta, m))
            .sum::<f64>();
    MergeResult::closed_form(theta, objective)
}

fn weighted_gaussian_objective(
    theta: &[f64],
    posteriors: &[GaussianPosterior],
    w: &SimplexWeights,
    prior: &GaussianPosterior,
) -> Result<f64> {
    let mut obj = if w.gamma() != 0.0 {
        w.gamma() * gaussian_surrogate(prior, theta)?
    } else {
        0.0
    };
    for (q, &a) in posteriors.iter().zip(w.alpha()) {
        if a != 0.0 {
            obj += a * gaussian_surrogate(q, theta)?;
        }
    }
    Ok(obj)
}

/// Hessian-weighted merge
/// `θ = (γ H₀ + Σ_t α_t H_t)⁻¹ (γ H₀ m₀ + Σ_t α_t H_t θ_t)`.
///
/// Diagonal precisions are merged elementwise; full precisions go through a
/// Cholesky solve.
pub fn hessian_weighted(
    posteriors: &[GaussianPosterior],
    w: &SimplexWeights,
    prior: &GaussianPosterior,
) -> Result<MergeResult> {
    let (p, layout) = merge_layout(posteriors.iter(), Some(prior))?;
    check_count(posteriors.len(), w.len())?;
    let mut prec = PrecAcc::new(p, layout);
    let mut rhs = VecAcc::new(p);
    if w.gamma() != 0.0 {
        prec.add(w.gamma(), prior.precision())?;
        add_precision_times(&mut rhs, w.gamma(), prior.precision(), prior.mean());
    }
    for (q, &a) in posteriors.iter().zip(w.alpha()) {
        if a != 0.0 {
            prec.add(a, q.precision())?;
            add_precision_times(&mut rhs, a, q.precision(), q.mean());
        }
    }
    let theta = prec.solve(&rhs.finish())?;
    let objective = weighted_gaussian_objective(&theta, posteriors, w, prior)?;
    MergeResult::closed_form(theta, objective)
}

/// Hessian-weighted task arithmetic around an anchor `N(θ_anchor, H₀⁻¹)`.
///
/// Each task posterior carries precision `H₀ + H_t`. The result is
/// `θ_anchor + H̄⁻¹ Σ_t α_t (H₀ + H_t)(θ_t − θ_anchor)` with
/// `H̄ = H₀ + Σ_t α_t H_t = γ H₀ + Σ_t α_t (H₀ + H_t)`.
pub fn hessian_weighted_ta(
    anchor: &GaussianPosterior,
    posteriors: &[GaussianPosterior],
    w: &SimplexWeights,
) -> Result<MergeResult> {
    let (p, layout) = merge_layout(posteriors.iter(), Some(anchor))?;
    check_count(posteriors.len(), w.len())?;
    let mut h_bar = PrecAcc::new(p, layout);
    if w.gamma() != 0.0 {
        h_bar.add(w.gamma(), anchor.precision())?;
    }
    let mut shift = VecAcc::new(p);
    for (q, &a) in posteriors.iter().zip(w.alpha()) {
        if a != 0.0 {
            h_bar.add(a, q.precision())?;
            let tv: Vec<f64> = q.mean().iter().zip(anchor.mean().iter()).map(|(x, y)| x - y).collect();
            add_precision_times(&mut shift, a, q.precision(), &tv);
        }
    }
    let step = h_bar.solve(&shift.finish())?;
    let theta: Vec<f64> = anchor.mean().iter().zip(&step).map(|(a, s)| a + s).collect();
    let objective = weighted_gaussian_objective(&theta, posteriors, w, anchor)?;
    MergeResult::closed_form(theta, objective)
}

/// Natural parameters that merge by linear combination.
pub trait NaturalParameter: Sized {
    /// `c₀ λ₀ + Σ_i c_i λ_i` for a prior term and the task terms.
    fn weighted_combination(prior: (f64, &Self), tasks: &[(f64, &Self)]) -> Result<Self>;
}

impl NaturalParameter for GaussianNatural {
    fn weighted_combination(prior: (f64, &Self), tasks: &[(f64, &Self)]) -> Result<Self> {
        let (_, first) = tasks.first().ok_or(Error::Empty("natural parameters"))?;
        let p = first.linear.len();
        let layout = first.quadratic.layout();
        for (_, n) in tasks.iter().chain(core::iter::once(&prior)) {
            check_dim(p, n.linear.len())?;
            check_dim(p, n.quadratic.dim())?;
        }
        if tasks.iter().any(|(_, n)| n.quadratic.layout() != layout)
            || (layout == Layout::Diagonal && prior.1.quadratic.layout() == Layout::Full)
        {
            return Err(Error::LayoutMismatch);
        }
        let mut lin = VecAcc::new(p);
        let mut quad = PrecAcc::new(p, layout);
        for (c, n) in core::iter::once(&prior).chain(tasks) {
            if *c != 0.0 {
                lin.add_scaled(*c, &n.linear);
                quad.add(*c, &n.quadratic)?;
            }
        }
        Ok(Self {
            linear: lin.finish(),
            quadratic: quad.into_precision()?,
        })
    }
}

impl NaturalParameter for BetaNatural {
    fn weighted_combination(prior: (f64, &Self), tasks: &[(f64, &Self)]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Empty("natural parameters"));
        }
        let all = || core::iter::once(&prior).chain(tasks);
        Ok(Self {
            a_minus_one: all().map(|(c, n)| c * n.a_minus_one).sum(),
            b_minus_one: all().map(|(c, n)| c * n.b_minus_one).sum(),
        })
    }
}

/// `λ_α = γ λ₀ + Σ_t α_t λ_t`.
///
/// For Gaussians the layout rules of [`hessian_weighted`] apply, and the
/// mode of the result (its mean) is the Hessian-weighted merge.
pub fn expfam_merge<N: NaturalParameter>(
    naturals: &[N],
    w: &SimplexWeights,
    prior: &N,
) -> Result<N> {
    if naturals.is_empty() {
        return Err(Error::Empty("natural parameters"));
    }
    check_count(naturals.len(), w.len())?;
    let terms: Vec<(f64, &N)> = w.alpha().iter().copied().zip(naturals.iter()).collect();
    N::weighted_combination((w.gamma(), prior), &terms)
}

/// `Σ_t α_t log q_t(θ)` for mixture posteriors, normalizers included.
pub fn em_objective(
    mixtures: &[MixturePosterior],
    w: &SimplexWeights,
    theta: &[f64],
) -> Result<f64> {
    check_count(mixtures.len(), w.len())?;
    let mut total = 0.0;
    for (q, &a) in mixtures.iter().zip(w.alpha()) {
        if a != 0.0 {
            total += a * q.log_density(theta)?;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("EM objective"));
    }
    Ok(total)
}

fn responsibilities(q: &MixturePosterior, theta: &[f64]) -> Result<Vec<f64>> {
    let mut logs = q.component_log_densities(theta)?;
    if logs.iter().all(|l| *l == f64::NEG_INFINITY) {
        // Every density underflowed; put all mass on the first component.
        let mut r = vec![0.0; logs.len()];
        r[0] = 1.0;
        return Ok(r);
    }
    math::softmax_in_place(&mut logs);
    if logs.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("responsibilities"));
    }
    Ok(logs)
}

/// `θ = (Σ_{t,k} r_tk α_t H_tk)⁻¹ Σ_{t,k} r_tk α_t H_tk θ_tk`.
fn em_m_step(
    mixtures: &[MixturePosterior],
    alpha: &[f64],
    resp: &[Vec<f64>],
    p: usize,
    layout: Layout,
) -> Result<Vec<f64>> {
    let mut prec = PrecAcc::new(p, layout);
    let mut rhs = VecAcc::new(p);
    for ((q, &a), r) in mixtures.iter().zip(alpha).zip(resp) {
        if a == 0.0 {
            continue;
        }
        for (c, &rk) in q.components().iter().zip(r) {
            let wk = a * rk;
            if wk == 0.0 {
                continue;
            }
            prec.add(wk, c.gaussian.precision())?;
            add_precision_times(&mut rhs, wk, c.gaussian.precision(), c.gaussian.mean());
        }
    }
    prec.solve(&rhs.finish())
}

/// Mode finding for a product of tempered mixture posteriors
/// `Π_t q_t(θ)^{α_t}` by expectation-maximization.
///
/// Requires `Σ_t α_t = 1` (no regularizer). Tasks with `α_t = 0` keep their
/// place in the sums but contribute nothing.
pub fn mog_em_merge(
    mixtures: &[MixturePosterior],
    w: &SimplexWeights,
    cfg: &EmConfig,
) -> Result<MergeResult> {
    cfg.validate()?;
    let first = mixtures.first().ok_or(Error::Empty("mixture list"))?;
    check_count(mixtures.len(), w.len())?;
    let sum = w.sum();
    if libm::fabs(sum - 1.0) > 1e-9 {
        return Err(Error::InvalidWeights(format!(
            "mixture merging needs weights summing to 1, got {sum}"
        )));
    }
    let (p, layout) = (first.dim(), first.layout());
    for q in mixtures {
        check_dim(p, q.dim())?;
        if q.layout() != layout {
            return Err(Error::LayoutMismatch);
        }
    }
    let alpha = w.alpha();

    let mut theta = match &cfg.init {
        EmInit::HessianUniform => {
            let uniform: Vec<Vec<f64>> = mixtures
                .iter()
                .map(|q| vec![1.0 / q.len() as f64; q.len()])
                .collect();
            em_m_step(mixtures, alpha, &uniform, p, layout)?
        }
        EmInit::SimpleAverage => {
            let mut acc = vec![0.0; p];
            for (q, &a) in mixtures.iter().zip(alpha) {
                let c = a / q.len() as f64;
                for comp in q.components() {
                    acc.iter_mut()
                        .zip(comp.gaussian.mean().iter())
                        .for_each(|(s, m)| *s += c * m);
                }
            }
            acc
        }
        EmInit::Provided(init) => {
            check_dim(p, init.len())?;
            init.as_slice().to_vec()
        }
    };

    let mut trace = vec![em_objective(mixtures, w, &theta)?];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let resp = mixtures
            .iter()
            .map(|q| responsibilities(q, &theta))
            .collect::<Result<Vec<_>>>()?;
        let next = em_m_step(mixtures, alpha, &resp, p, layout)?;
        let change = math::sup_norm_diff(&next, &theta);
        theta = next;
        iterations += 1;
        trace.push(em_objective(mixtures, w, &theta)?);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let final_objective = *trace.last().expect("trace holds the initial objective");
    Ok(MergeResult {
        theta: ParamVector::new(theta)?,
        iterations,
        converged,
        final_objective,
        objective_trace: trace,
    })
}

/// Gradient of `Σ_t α_t log q_t(θ)`:
/// `Σ_{t,k} α_t r_tk(θ) H_tk (θ_tk − θ)`.
pub fn em_objective_gradient(
    mixtures: &[MixturePosterior],
    w: &SimplexWeights,
    theta: &[f64],
) -> Result<Vec<f64>> {
    check_count(mixtures.len(), w.len())?;
    let mut g = vec![0.0; theta.len()];
    for (q, &a) in mixtures.iter().zip(w.alpha()) {
        if a == 0.0 {
            continue;
        }
        let r = responsibilities(q, theta)?;
        for (c, rk) in q.components().iter().zip(r) {
            let diff: Vec<f64> = c.gaussian.mean().iter().zip(theta).map(|(m, x)| m - x).collect();
            let hd = c.gaussian.precision().apply(&diff);
            g.iter_mut().zip(hd).for_each(|(s, v)| *s += a * rk * v);
        }
    }
    Ok(g)
}

/// Gradient norm helper used by stationarity checks.
pub fn gradient_norm(g: &[f64]) -> f64 {
    math::norm2(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{beta_map, from_natural, to_natural, BetaPosterior, MixtureComponent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn diag_gauss(m: &[f64], h: &[f64]) -> GaussianPosterior {
        GaussianPosterior::new(pv(m), PrecisionMatrix::diagonal(h.to_vec()).unwrap()).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> Vec<f64> {
        (0..p).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Plain gradient descent on a smooth convex objective given its gradient.
    fn gd_oracle(p: usize, step: f64, grad: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        let mut x = vec![0.0; p];
        for _ in 0..200_000 {
            let g = grad(&x);
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
            if gn < 1e-12 {
                break;
            }
        }
        x
    }

    #[test]
    fn weights_validation() {
        assert!(SimplexWeights::new(vec![0.6, 0.5]).is_err());
        assert!(SimplexWeights::new(vec![-0.1, 0.5]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
        let w = SimplexWeights::new(vec![0.2, 0.3, 0.4]).unwrap();
        assert!((w.gamma() - 0.1).abs() < 1e-15);
        assert_eq!(SimplexWeights::new(vec![0.5, 0.5]).unwrap().gamma(), 0.0);
    }

    #[test]
    fn simple_average_examples() {
        let w = SimplexWeights::new(vec![1.0]).unwrap();
        let r = simple_average(&[pv(&[1.5, -2.0])], &w).unwrap();
        assert_eq!(r.theta.as_slice(), &[1.5, -2.0]);

        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let r = simple_average(&[pv(&[0.0, 2.0]), pv(&[2.0, 0.0])], &w).unwrap();
        assert_eq!(r.theta.as_slice(), &[1.0, 1.0]);
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
    }

    #[test]
    fn simple_average_matches_argmin_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let models: Vec<ParamVector> = (0..3).map(|_| pv(&rand_vec(&mut rng, 4, 2.0))).collect();
        let w = SimplexWeights::new(vec![0.2, 0.3, 0.4]).unwrap();
        let oracle = gd_oracle(4, 0.5, |x| {
            (0..4)
                .map(|j| {
                    0.1 * x[j]
                        + models
                            .iter()
                            .zip(w.alpha())
                            .map(|(m, a)| a * (x[j] - m[j]))
                            .sum::<f64>()
                })
                .collect()
        });
        let r = simple_average(&models, &w).unwrap();
        for (a, b) in r.theta.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn simple_average_errors() {
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(simple_average(&[], &w).unwrap_err(), Error::Empty("model list"));
        assert!(matches!(
            simple_average(&[pv(&[1.0]), pv(&[1.0, 2.0])], &w),
            Err(Error::DimensionMismatch { .. })
        ));
        let zero = SimplexWeights::prior_free(vec![0.0, 0.0]).unwrap();
        assert_eq!(
            simple_average(&[pv(&[1.0]), pv(&[2.0])], &zero).unwrap_err(),
            Error::DegenerateWeights
        );
    }

    #[test]
    fn task_arithmetic_examples() {
        let anchor = pv(&[1.0, -1.0, 0.5]);
        let w = SimplexWeights::new(vec![0.3, 0.2]).unwrap();
        let r = task_arithmetic(&anchor, &[anchor.clone(), anchor.clone()], &w).unwrap();
        assert_eq!(r.theta, anchor);

        let models = [pv(&[1.0, 2.0]), pv(&[3.0, -1.0])];
        let w = SimplexWeights::new(vec![0.25, 0.75]).unwrap();
        let ta = task_arithmetic(&ParamVector::zeros(2), &models, &w).unwrap();
        let sa = simple_average(&models, &w).unwrap();
        assert_eq!(ta.theta, sa.theta);
    }

    #[test]
    fn task_arithmetic_matches_argmin_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let anchor = rand_vec(&mut rng, 5, 1.0);
        let models: Vec<ParamVector> = (0..3).map(|_| pv(&rand_vec(&mut rng, 5, 2.0))).collect();
        let w = SimplexWeights::new(vec![0.1, 0.4, 0.3]).unwrap();
        let oracle = gd_oracle(5, 0.5, |x| {
            (0..5)
                .map(|j| {
                    w.gamma() * (x[j] - anchor[j])
                        + models
                            .iter()
                            .zip(w.alpha())
                            .map(|(m, a)| a * (x[j] - m[j]))
                            .sum::<f64>()
                })
                .collect()
        });
        let r = task_arithmetic(&pv(&anchor), &models, &w).unwrap();
        for (a, b) in r.theta.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_weighted_identity_is_simple_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let models: Vec<ParamVector> = (0..3).map(|_| pv(&rand_vec(&mut rng, 4, 2.0))).collect();
        let w = SimplexWeights::new(vec![0.2, 0.5, 0.1]).unwrap();
        for layout in [Layout::Diagonal, Layout::Full] {
            let posts: Vec<GaussianPosterior> = models
                .iter()
                .map(|m| GaussianPosterior::isotropic(m.clone(), 1.0, layout).unwrap())
                .collect();
            let prior = GaussianPosterior::isotropic(ParamVector::zeros(4), 1.0, layout).unwrap();
            let hw = hessian_weighted(&posts, &w, &prior).unwrap();
            let sa = simple_average(&models, &w).unwrap();
            for (a, b) in hw.theta.iter().zip(sa.theta.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_weighted_scalar_mean() {
        let posts = [diag_gauss(&[0.0], &[9.0]), diag_gauss(&[10.0], &[1.0])];
        let prior = diag_gauss(&[0.0], &[1.0]);
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let r = hessian_weighted(&posts, &w, &prior).unwrap();
        assert!((r.theta[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hessian_weighted_matches_argmin_oracle_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = 3;
        let posts: Vec<GaussianPosterior> = (0..3)
            .map(|_| {
                let h: Vec<f64> = (0..p).map(|_| rng.random_range(0.2..3.0)).collect();
                diag_gauss(&rand_vec(&mut rng, p, 2.0), &h)
            })
            .collect();
        let prior = diag_gauss(&rand_vec(&mut rng, p, 1.0), &[0.5, 1.5, 2.0]);
        let w = SimplexWeights::new(vec![0.3, 0.25, 0.25]).unwrap();
        assert!((w.gamma() - 0.2).abs() < 1e-12);
        let oracle = gd_oracle(p, 0.2, |x| {
            let mut g: Vec<f64> = prior
                .precision()
                .apply(&x.iter().zip(prior.mean().iter()).map(|(a, b)| a - b).collect::<Vec<_>>())
                .iter()
                .map(|v| w.gamma() * v)
                .collect();
            for (q, a) in posts.iter().zip(w.alpha()) {
                let d: Vec<f64> = x.iter().zip(q.mean().iter()).map(|(u, v)| u - v).collect();
                for (gi, hv) in g.iter_mut().zip(q.precision().apply(&d)) {
                    *gi += a * hv;
                }
            }
            g
        });
        let r = hessian_weighted(&posts, &w, &prior).unwrap();
        for (a, b) in r.theta.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hessian_weighted_rejects_degenerate_and_mixed() {
        let posts = [diag_gauss(&[0.0], &[1.0])];
        let prior = diag_gauss(&[0.0], &[1.0]);
        let zero = SimplexWeights::prior_free(vec![0.0]).unwrap();
        assert_eq!(hessian_weighted(&posts, &zero, &prior).unwrap_err(), Error::DegenerateWeights);

        let full = GaussianPosterior::isotropic(pv(&[0.0]), 1.0, Layout::Full).unwrap();
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(
            hessian_weighted(&[posts[0].clone(), full.clone()], &w, &prior).unwrap_err(),
            Error::LayoutMismatch
        );
        let w1 = SimplexWeights::new(vec![0.5]).unwrap();
        assert_eq!(hessian_weighted(&posts, &w1, &full).unwrap_err(), Error::LayoutMismatch);
        // a diagonal prior with full task precisions is fine
        assert!(hessian_weighted(&[full], &w1, &prior).is_ok());
    }

    #[test]
    fn hessian_weighted_is_homogeneous_without_prior() {
        let posts = [diag_gauss(&[1.0, 2.0], &[2.0, 0.5]), diag_gauss(&[-1.0, 0.0], &[1.0, 4.0])];
        let prior = diag_gauss(&[0.0, 0.0], &[1.0, 1.0]);
        let base = hessian_weighted(&posts, &SimplexWeights::prior_free(vec![0.3, 0.7]).unwrap(), &prior)
            .unwrap();
        for c in [0.01, 0.5, 3.0, 100.0] {
            let w = SimplexWeights::prior_free(vec![0.3 * c, 0.7 * c]).unwrap();
            let r = hessian_weighted(&posts, &w, &prior).unwrap();
            for (a, b) in r.theta.iter().zip(base.theta.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hessian_ta_examples() {
        let anchor = diag_gauss(&[1.0, 2.0], &[1.0, 1.0]);
        let same = [diag_gauss(&[1.0, 2.0], &[3.0, 2.0]), diag_gauss(&[1.0, 2.0], &[1.5, 7.0])];
        let w = SimplexWeights::new(vec![0.4, 0.35]).unwrap();
        let r = hessian_weighted_ta(&anchor, &same, &w).unwrap();
        for (a, b) in r.theta.iter().zip(anchor.mean().iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        // H_t = 0 so each task precision is H₀ = I
        let models = [pv(&[0.0, 3.0]), pv(&[2.0, -1.0])];
        let posts: Vec<GaussianPosterior> = models.iter().map(|m| diag_gauss(m, &[1.0, 1.0])).collect();
        let hta = hessian_weighted_ta(&anchor, &posts, &w).unwrap();
        let ta = task_arithmetic(anchor.mean(), &models, &w).unwrap();
        for (a, b) in hta.theta.iter().zip(ta.theta.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expfam_merge_gaussian_matches_hessian_weighted() {
        let posts = [diag_gauss(&[1.0, 2.0], &[2.0, 0.5]), diag_gauss(&[-1.0, 0.0], &[1.0, 4.0])];
        let prior = diag_gauss(&[0.5, 0.5], &[1.0, 2.0]);
        let w = SimplexWeights::new(vec![0.3, 0.5]).unwrap();
        let nat: Vec<GaussianNatural> = posts.iter().map(to_natural).collect();
        let merged = expfam_merge(&nat, &w, &to_natural(&prior)).unwrap();
        let mode = from_natural(&merged).unwrap();
        let hw = hessian_weighted(&posts, &w, &prior).unwrap();
        for (a, b) in mode.mean().iter().zip(hw.theta.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = expfam_merge(&nat[..1], &SimplexWeights::new(vec![1.0]).unwrap(), &to_natural(&prior))
            .unwrap();
        assert_eq!(single, nat[0]);
    }

    #[test]
    fn expfam_merge_beta_example() {
        let a = BetaPosterior::new(3.0, 2.0).unwrap().to_natural();
        let b = BetaPosterior::new(2.0, 5.0).unwrap().to_natural();
        let w = SimplexWeights::new(vec![0.5, 0.5]).unwrap();
        let merged = expfam_merge(&[a, b], &w, &BetaPosterior::uniform().to_natural()).unwrap();
        let q = BetaPosterior::from_natural(merged).unwrap();
        assert_eq!(q, BetaPosterior { a: 2.5, b: 3.5 });
        assert!((beta_map(q).unwrap() - 0.375).abs() < 1e-15);
    }

    fn mix(components: &[(f64, &[f64], &[f64])]) -> MixturePosterior {
        MixturePosterior::new(
            components
                .iter()
                .map(|(w, m, h)| MixtureComponent {
                    weight: *w,
                    gaussian: diag_gauss(m, h),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn em_with_single_components_is_hessian_weighted() {
        let posts = [diag_gauss(&[1.0, 2.0], &[2.0, 0.5]), diag_gauss(&[-1.0, 0.0], &[1.0, 4.0])];
        let mixtures: Vec<MixturePosterior> = posts
            .iter()
            .map(|g| MixturePosterior::uniform(vec![g.clone()]).unwrap())
            .collect();
        let w = SimplexWeights::new(vec![0.35, 0.65]).unwrap();
        let em = mog_em_merge(&mixtures, &w, &EmConfig::default()).unwrap();
        let prior = diag_gauss(&[0.0, 0.0], &[1.0, 1.0]);
        let hw = hessian_weighted(&posts, &w, &prior).unwrap();
        assert_eq!(em.iterations, 1);
        assert!(em.converged);
        for (a, b) in em.theta.iter().zip(hw.theta.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn em_finds_grid_mode_in_one_dimension() {
        let q = mix(&[(0.5, &[-1.0], &[1.0]), (0.5, &[3.0], &[1.0])]);
        let w = SimplexWeights::new(vec![1.0]).unwrap();
        let cfg = EmConfig {
            max_iters: 10_000,
            tol: 1e-13,
            init: EmInit::Provided(pv(&[-0.5])),
        };
        let r = mog_em_merge(&[q.clone()], &w, &cfg).unwrap();
        assert!(r.converged);
        // local maxima of the density on a dense grid over [-5, 7]
        let n = 1_000_000;
        let xs: Vec<f64> = (0..=n).map(|i| -5.0 + 12.0 * i as f64 / n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| q.log_density(&[*x]).unwrap()).collect();
        let modes: Vec<f64> = (1..n)
            .filter(|&i| ys[i] >= ys[i - 1] && ys[i] >= ys[i + 1])
            .map(|i| xs[i])
            .collect();
        assert!(modes.iter().any(|m| (m - r.theta[0]).abs() < 1e-4), "{modes:?} vs {}", r.theta[0]);
    }

    #[test]
    fn em_is_monotone_and_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mixtures: Vec<MixturePosterior> = (0..2)
            .map(|_| {
                MixturePosterior::uniform(
                    (0..2)
                        .map(|_| {
                            let h: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..3.0)).collect();
                            diag_gauss(&rand_vec(&mut rng, 2, 3.0), &h)
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let w = SimplexWeights::new(vec![0.4, 0.6]).unwrap();
        let cfg = EmConfig {
            max_iters: 5000,
            tol: 1e-14,
            init: EmInit::HessianUniform,
        };
        let r = mog_em_merge(&mixtures, &w, &cfg).unwrap();
        for pair in r.objective_trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-10);
        }
        let g = em_objective_gradient(&mixtures, &w, &r.theta).unwrap();
        assert!(gradient_norm(&g) < 1e-6);
    }

    #[test]
    fn em_requires_unit_sum() {
        let q = mix(&[(1.0, &[0.0], &[1.0])]);
        let w = SimplexWeights::new(vec![0.5]).unwrap();
        assert!(matches!(
            mog_em_merge(&[q], &w, &EmConfig::default()),
            Err(Error::InvalidWeights(_))
        ));
        let w = SimplexWeights::new(vec![1.0]).unwrap();
        assert_eq!(mog_em_merge(&[], &w, &EmConfig::default()).unwrap_err(), Error::Empty("mixture list"));
    }

    #[test]
    fn em_objective_peaks_at_single_component_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = mix(&[(1.0, &[0.7, -1.2, 2.0], &[1.0, 3.0, 0.5])]);
        let w = SimplexWeights::new(vec![1.0]).unwrap();
        let top = em_objective(&[q.clone()], &w, &[0.7, -1.2, 2.0]).unwrap();
        for _ in 0..1000 {
            let th = rand_vec(&mut rng, 3, 4.0);
            assert!(em_objective(&[q.clone()], &w, &th).unwrap() <= top);
        }
    }

    #[test]
    fn em_keeps_zero_weight_tasks() {
        let a = mix(&[(0.5, &[0.0], &[1.0]), (0.5, &[4.0], &[1.0])]);
        let b = mix(&[(1.0, &[10.0], &[1.0])]);
        let w = SimplexWeights::new(vec![1.0, 0.0]).unwrap();
        let r = mog_em_merge(&[a.clone(), b], &w, &EmConfig::default()).unwrap();
        let solo = mog_em_merge(&[a], &SimplexWeights::new(vec![1.0]).unwrap(), &EmConfig::default())
            .unwrap();
        assert_eq!(r.theta, solo.theta);
    }
}
