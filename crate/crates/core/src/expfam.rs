//! Exponential-family posterior representations.
//!
//! A task's posterior approximation `q_t` doubles as its surrogate loss
//! `-log q_t(θ)`. Surrogates are evaluated up to additive constants except
//! where the mixture log-sum-exp needs the component normalizers.
//!
//! The Gaussian natural parameters are stored as `(H m, H)`; the quadratic
//! part is kept positive and read as `-½ H` in the exponent.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, DenseMatrix};
use crate::math::{self, LN_2PI};

/// Flat parameter vector shared by every merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(p: usize) -> Self {
        Self(vec![0.0; p])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Diagonal,
    Full,
}

/// SPD matrix validated by factorization; the factor is kept for solves and
/// log-determinants.
#[derive(Debug, Clone)]
pub struct FullPrecision {
    matrix: DenseMatrix,
    factor: Cholesky,
}

impl FullPrecision {
    pub fn new(matrix: DenseMatrix) -> Result<Self> {
        if !matrix.is_finite() {
            return Err(Error::NonFinite("precision matrix"));
        }
        let scale = matrix
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(libm::fabs(*v)))
            .max(1.0);
        if matrix.max_asymmetry() > 1e-10 * scale {
            return Err(Error::InvalidPosterior("precision matrix is not symmetric".into()));
        }
        let factor = Cholesky::new(&matrix)?;
        Ok(Self { matrix, factor })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }
}

impl PartialEq for FullPrecision {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PrecisionMatrix {
    /// Strictly positive diagonal entries.
    Diagonal(Vec<f64>),
    Full(FullPrecision),
}

impl PrecisionMatrix {
    pub fn diagonal(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("precision diagonal"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidPosterior(format!(
                "diagonal precision entry {i} is {v}, must be > 0"
            )));
        }
        Ok(Self::Diagonal(values))
    }

    pub fn full(matrix: DenseMatrix) -> Result<Self> {
        Ok(Self::Full(FullPrecision::new(matrix)?))
    }

    pub fn isotropic(p: usize, value: f64, layout: Layout) -> Result<Self> {
        match layout {
            Layout::Diagonal => Self::diagonal(vec![value; p]),
            Layout::Full => Self::full(DenseMatrix::from_diagonal(&vec![value; p])),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Full(f) => f.matrix.dim(),
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Self::Diagonal(_) => Layout::Diagonal,
            Self::Full(_) => Layout::Full,
        }
    }

    /// `H v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal(d) => d.iter().zip(v).map(|(h, x)| h * x).collect(),
            Self::Full(f) => f.matrix.mat_vec(v),
        }
    }

    /// `H⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Self::Diagonal(d) => d.iter().zip(v).map(|(h, x)| x / h).collect(),
            Self::Full(f) => f.factor.solve(v),
        }
    }

    /// `vᵀ H v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        match self {
            Self::Diagonal(d) => d.iter().zip(v).map(|(h, x)| h * x * x).sum(),
            Self::Full(f) => math::dot(v, &f.matrix.mat_vec(v)),
        }
    }

    pub fn log_det(&self) -> f64 {
        match self {
            Self::Diagonal(d) => d.iter().map(|h| libm::log(*h)).sum(),
            Self::Full(f) => f.factor.log_det(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Self::Diagonal(d) => DenseMatrix::from_diagonal(d),
            Self::Full(f) => f.matrix.clone(),
        }
    }

    pub fn diagonal_values(&self) -> Vec<f64> {
        match self {
            Self::Diagonal(d) => d.clone(),
            Self::Full(f) => f.matrix.diagonal(),
        }
    }
}

/// `q(θ) = N(θ | mean, precision⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: ParamVector,
    precision: PrecisionMatrix,
}

impl GaussianPosterior {
    pub fn new(mean: ParamVector, precision: PrecisionMatrix) -> Result<Self> {
        check_dim(mean.len(), precision.dim())?;
        Ok(Self { mean, precision })
    }

    /// `N(mean, (value·I)⁻¹)` in the requested layout.
    pub fn isotropic(mean: ParamVector, value: f64, layout: Layout) -> Result<Self> {
        let p = mean.len();
        Self::new(mean, PrecisionMatrix::isotropic(p, value, layout)?)
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn precision(&self) -> &PrecisionMatrix {
        &self.precision
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn layout(&self) -> Layout {
        self.precision.layout()
    }

    /// `½ log det H − (P/2) log 2π`.
    pub fn log_normalizer(&self) -> f64 {
        0.5 * self.precision.log_det() - 0.5 * self.dim() as f64 * LN_2PI
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.log_normalizer() - gaussian_surrogate(self, theta)?)
    }
}

/// `½ (θ − m)ᵀ H (θ − m)`, the Gaussian surrogate without its constant.
pub fn gaussian_surrogate(q: &GaussianPosterior, theta: &[f64]) -> Result<f64> {
    check_dim(q.dim(), theta.len())?;
    let diff: Vec<f64> = theta.iter().zip(q.mean.iter()).map(|(a, b)| a - b).collect();
    Ok(0.5 * q.precision.quad_form(&diff))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub gaussian: GaussianPosterior,
}

/// Weighted mixture of Gaussians sharing dimension and precision layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosterior {
    components: Vec<MixtureComponent>,
}

impl MixturePosterior {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("mixture components"))?;
        let p = first.gaussian.dim();
        let layout = first.gaussian.layout();
        let mut total = 0.0;
        for c in &components {
            check_dim(p, c.gaussian.dim())?;
            if c.gaussian.layout() != layout {
                return Err(Error::LayoutMismatch);
            }
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidPosterior(format!(
                    "mixture weight {} outside (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if libm::fabs(total - 1.0) > 1e-12 {
            return Err(Error::InvalidPosterior(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { components })
    }

    /// Equal weights `1/K`.
    pub fn uniform(gaussians: Vec<GaussianPosterior>) -> Result<Self> {
        let k = gaussians.len() as f64;
        Self::new(
            gaussians
                .into_iter()
                .map(|gaussian| MixtureComponent {
                    weight: 1.0 / k,
                    gaussian,
                })
                .collect(),
        )
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].gaussian.dim()
    }

    pub fn layout(&self) -> Layout {
        self.components[0].gaussian.layout()
    }

    /// `log π_k + log N(θ | m_k, H_k⁻¹)` for every component.
    pub fn component_log_densities(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        if theta.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("mixture evaluation point"));
        }
        self.components
            .iter()
            .map(|c| Ok(libm::log(c.weight) + c.gaussian.log_density(theta)?))
            .collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        let logs = self.component_log_densities(theta)?;
        Ok(math::log_sum_exp(&logs))
    }
}

/// `-log Σ_k π_k N(θ | m_k, H_k⁻¹)`, evaluated in log space.
pub fn mixture_surrogate(q: &MixturePosterior, theta: &[f64]) -> Result<f64> {
    let v = -q.log_density(theta)?;
    if v.is_nan() {
        return Err(Error::NonFinite("mixture surrogate"));
    }
    Ok(v)
}

/// Gaussian natural parameters `(H m, H)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNatural {
    pub linear: Vec<f64>,
    pub quadratic: PrecisionMatrix,
}

pub fn to_natural(q: &GaussianPosterior) -> GaussianNatural {
    GaussianNatural {
        linear: q.precision.apply(&q.mean),
        quadratic: q.precision.clone(),
    }
}

pub fn from_natural(np: &GaussianNatural) -> Result<GaussianPosterior> {
    check_dim(np.quadratic.dim(), np.linear.len())?;
    let mean = ParamVector::new(np.quadratic.solve(&np.linear))?;
    GaussianPosterior::new(mean, np.quadratic.clone())
}

/// Beta distribution over a success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub a: f64,
    pub b: f64,
}

impl BetaPosterior {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidPosterior(format!("Beta({a}, {b}) needs a, b > 0")));
        }
        Ok(Self { a, b })
    }

    pub fn uniform() -> Self {
        Self { a: 1.0, b: 1.0 }
    }

    /// Unnormalized log density `(a−1) log π + (b−1) log(1−π)`.
    pub fn unnormalized_log_density(&self, pi: f64) -> f64 {
        (self.a - 1.0) * libm::log(pi) + (self.b - 1.0) * libm::log1p(-pi)
    }
}

/// Conjugate update with one coin flip: `(a₀ + y, b₀ + 1 − y)`.
pub fn beta_update(prior: BetaPosterior, y: bool) -> BetaPosterior {
    let y = if y { 1.0 } else { 0.0 };
    BetaPosterior {
        a: prior.a + y,
        b: prior.b + 1.0 - y,
    }
}

/// Mode `(a − 1)/(a + b − 2)` of a Beta distribution with `a, b > 1`.
///
/// The closed form is the plain ratio; no logarithm is applied.
pub fn beta_map(q: BetaPosterior) -> Result<f64> {
    if !(q.a > 1.0 && q.b > 1.0) {
        return Err(Error::NoInteriorMode { a: q.a, b: q.b });
    }
    Ok((q.a - 1.0) / (q.a + q.b - 2.0))
}

/// Beta natural parameters `(a − 1, b − 1)` for sufficient statistics
/// `(log π, log(1 − π))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaNatural {
    pub a_minus_one: f64,
    pub b_minus_one: f64,
}

impl BetaPosterior {
    pub fn to_natural(self) -> BetaNatural {
        BetaNatural {
            a_minus_one: self.a - 1.0,
            b_minus_one: self.b - 1.0,
        }
    }

    pub fn from_natural(np: BetaNatural) -> Result<Self> {
        Self::new(np.a_minus_one + 1.0, np.b_minus_one + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DenseMatrix {
        let a: Vec<f64> = (0..p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut m = DenseMatrix::zeros(p);
        for i in 0..p {
            for j in 0..p {
                let s: f64 = (0..p).map(|k| a[i * p + k] * a[j * p + k]).sum();
                m.set(i, j, s + if i == j { 0.5 } else { 0.0 });
            }
        }
        m
    }

    #[test]
    fn surrogate_at_mean_is_zero() {
        let q = GaussianPosterior::isotropic(pv(&[1.0, -2.0]), 1.0, Layout::Full).unwrap();
        assert_eq!(gaussian_surrogate(&q, &[1.0, -2.0]).unwrap(), 0.0);
    }

    #[test]
    fn surrogate_diagonal_quadratic_form() {
        let q = GaussianPosterior::new(
            pv(&[0.0, 0.0]),
            PrecisionMatrix::diagonal(vec![2.0, 8.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(gaussian_surrogate(&q, &[1.0, 1.0]).unwrap(), 5.0);
    }

    #[test]
    fn surrogate_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 5;
        let h = random_spd(&mut rng, p);
        let m: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let q = GaussianPosterior::new(pv(&m), PrecisionMatrix::full(h.clone()).unwrap()).unwrap();
        let mut naive = 0.0;
        for i in 0..p {
            for j in 0..p {
                naive += (theta[i] - m[i]) * h.get(i, j) * (theta[j] - m[j]);
            }
        }
        naive *= 0.5;
        assert!((gaussian_surrogate(&q, &theta).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn surrogate_rejects_dimension_mismatch() {
        let q = GaussianPosterior::isotropic(pv(&[0.0, 0.0]), 1.0, Layout::Diagonal).unwrap();
        assert!(matches!(
            gaussian_surrogate(&q, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn surrogate_is_convex_along_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = 4;
            let h = random_spd(&mut rng, p);
            let m: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = GaussianPosterior::new(pv(&m), PrecisionMatrix::full(h).unwrap()).unwrap();
            let f = |t: f64| {
                let x: Vec<f64> = m.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                gaussian_surrogate(&q, &x).unwrap()
            };
            // second difference of a quadratic through t = -1, 0, 1
            let lead = (f(1.0) - 2.0 * f(0.0) + f(-1.0)) / 2.0;
            assert!(lead >= 0.0);
        }
    }

    fn normal_pdf(x: f64, mean: f64, precision: f64) -> f64 {
        libm::sqrt(precision / (2.0 * core::f64::consts::PI))
            * libm::exp(-0.5 * precision * (x - mean) * (x - mean))
    }

    fn mix1d(weights: &[f64], means: &[f64], precs: &[f64]) -> MixturePosterior {
        MixturePosterior::new(
            weights
                .iter()
                .zip(means)
                .zip(precs)
                .map(|((&w, &m), &h)| MixtureComponent {
                    weight: w,
                    gaussian: GaussianPosterior::new(
                        pv(&[m]),
                        PrecisionMatrix::diagonal(vec![h]).unwrap(),
                    )
                    .unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mixture_matches_direct_density_sum() {
        let q = mix1d(&[0.3, 0.7], &[-1.0, 2.0], &[1.0, 4.0]);
        let direct = 0.3 * normal_pdf(0.0, -1.0, 1.0) + 0.7 * normal_pdf(0.0, 2.0, 4.0);
        let v = mixture_surrogate(&q, &[0.0]).unwrap();
        assert!((v + libm::log(direct)).abs() < 1e-12);
    }

    #[test]
    fn single_component_mixture_is_shifted_gaussian_surrogate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GaussianPosterior::new(
            pv(&[0.5, -1.0, 2.0]),
            PrecisionMatrix::full(random_spd(&mut rng, 3)).unwrap(),
        )
        .unwrap();
        let q = MixturePosterior::uniform(vec![g.clone()]).unwrap();
        let at_mean = mixture_surrogate(&q, g.mean()).unwrap();
        for _ in 0..10 {
            let th: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lhs = mixture_surrogate(&q, &th).unwrap() - at_mean;
            assert!((lhs - gaussian_surrogate(&g, &th).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_components_collapse() {
        let a = mix1d(&[0.5, 0.5], &[1.0, 1.0], &[2.0, 2.0]);
        let b = mix1d(&[1.0], &[1.0], &[2.0]);
        for x in [-3.0, 0.0, 0.7, 5.0] {
            let d = mixture_surrogate(&a, &[x]).unwrap() - mixture_surrogate(&b, &[x]).unwrap();
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_far_from_all_components_stays_finite() {
        let q = mix1d(&[0.5, 0.5], &[0.0, 1.0], &[1e4, 1e4]);
        let v = mixture_surrogate(&q, &[100.0]).unwrap();
        assert!(v.is_finite());
        assert!(mixture_surrogate(&q, &[f64::NAN]).is_err());
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let g = GaussianPosterior::isotropic(pv(&[0.0]), 1.0, Layout::Diagonal).unwrap();
        let bad = MixturePosterior::new(vec![
            MixtureComponent { weight: 0.5, gaussian: g.clone() },
            MixtureComponent { weight: 0.4, gaussian: g.clone() },
        ]);
        assert!(bad.is_err());
        let full = GaussianPosterior::isotropic(pv(&[0.0]), 1.0, Layout::Full).unwrap();
        let mixed = MixturePosterior::new(vec![
            MixtureComponent { weight: 0.5, gaussian: g },
            MixtureComponent { weight: 0.5, gaussian: full },
        ]);
        assert_eq!(mixed.unwrap_err(), Error::LayoutMismatch);
    }

    #[test]
    fn natural_parameters() {
        let q = GaussianPosterior::isotropic(pv(&[0.0, 0.0]), 1.0, Layout::Full).unwrap();
        let np = to_natural(&q);
        assert_eq!(np.linear, vec![0.0, 0.0]);
        assert_eq!(np.quadratic.to_dense(), DenseMatrix::identity(2));

        let q = GaussianPosterior::new(pv(&[2.0]), PrecisionMatrix::diagonal(vec![3.0]).unwrap())
            .unwrap();
        assert_eq!(to_natural(&q).linear, vec![6.0]);

        let back = from_natural(&GaussianNatural {
            linear: vec![6.0],
            quadratic: PrecisionMatrix::diagonal(vec![3.0]).unwrap(),
        })
        .unwrap();
        assert_eq!(back.mean().as_slice(), &[2.0]);
    }

    /// Textbook Gaussian elimination with partial pivoting.
    fn gauss_solve(a: &DenseMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.dim();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut r = a.row(i).to_vec();
                r.push(b[i]);
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
                .unwrap();
            m.swap(col, piv);
            for r in (col + 1)..n {
                let f = m[r][col] / m[col][col];
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        x
    }

    #[test]
    fn from_natural_solves_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_spd(&mut rng, 6);
        let lin: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q = from_natural(&GaussianNatural {
            linear: lin.clone(),
            quadratic: PrecisionMatrix::full(h.clone()).unwrap(),
        })
        .unwrap();
        let oracle = gauss_solve(&h, &lin);
        for (a, b) in q.mean().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn from_natural_rejects_singular() {
        let m = DenseMatrix::from_row_major(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(PrecisionMatrix::full(m).is_err());
        assert!(PrecisionMatrix::diagonal(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn beta_updates() {
        let prior = BetaPosterior::new(1.0, 1.0).unwrap();
        assert_eq!(beta_update(prior, true), BetaPosterior { a: 2.0, b: 1.0 });
        let prior = BetaPosterior::new(2.0, 3.0).unwrap();
        assert_eq!(beta_update(prior, false), BetaPosterior { a: 2.0, b: 4.0 });
        let ab = beta_update(beta_update(prior, true), false);
        let ba = beta_update(beta_update(prior, false), true);
        assert_eq!(ab, ba);
        assert_eq!(ab, BetaPosterior { a: 3.0, b: 4.0 });
    }

    #[test]
    fn beta_modes() {
        assert_eq!(beta_map(BetaPosterior { a: 2.0, b: 2.0 }).unwrap(), 0.5);
        assert!((beta_map(BetaPosterior { a: 3.0, b: 2.0 }).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            beta_map(BetaPosterior { a: 1.0, b: 3.0 }),
            Err(Error::NoInteriorMode { .. })
        ));
    }

    #[test]
    fn beta_map_matches_dense_grid() {
        let q = BetaPosterior::new(2.7, 4.1).unwrap();
        let n = 1_000_000;
        let best = (1..n)
            .map(|i| i as f64 / n as f64)
            .max_by(|x, y| {
                q.unnormalized_log_density(*x)
                    .partial_cmp(&q.unnormalized_log_density(*y))
                    .unwrap()
            })
            .unwrap();
        assert!((beta_map(q).unwrap() - best).abs() < 1e-4);
    }
}
