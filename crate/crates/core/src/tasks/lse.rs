//! `ℓ(θ) = log Σᵢ exp(aᵢᵀθ + bᵢ)` toy tasks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

use super::TaskHandle;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::math::{log_sum_exp, softmax_in_place};

#[derive(Debug, Clone, PartialEq)]
pub struct LseTask {
    id: String,
    dim: usize,
    /// `n × dim`, row-major.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl LseTask {
    pub fn new(id: impl Into<String>, dim: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if b.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "log-sum-exp task needs at least 2 terms, got {}",
                b.len()
            )));
        }
        if dim == 0 || a.len() != b.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: b.len() * dim,
                found: a.len(),
            });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-sum-exp coefficients"));
        }
        Ok(Self {
            id: id.into(),
            dim,
            a,
            b,
        })
    }

    pub fn terms(&self) -> usize {
        self.b.len()
    }

    pub fn coefficients(&self) -> (&[f64], &[f64]) {
        (&self.a, &self.b)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.dim..(i + 1) * self.dim]
    }

    fn logits(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.terms())
            .map(|i| {
                self.b[i]
                    + self
                        .row(i)
                        .iter()
                        .zip(theta)
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
            })
            .collect()
    }

    fn probs_grad(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut p = self.logits(theta);
        softmax_in_place(&mut p);
        let mut g = vec![0.0; self.dim];
        for (i, &pi) in p.iter().enumerate() {
            for (gj, aj) in g.iter_mut().zip(self.row(i)) {
                *gj += pi * aj;
            }
        }
        (p, g)
    }

    /// True when the origin lies strictly inside the convex hull of the 2-D
    /// rows, i.e. the loss is bounded below and has a minimizer.
    fn has_minimizer_2d(&self) -> bool {
        debug_assert_eq!(self.dim, 2);
        let mut angles: Vec<f64> = (0..self.terms())
            .map(|i| {
                let r = self.row(i);
                libm::atan2(r[1], r[0])
            })
            .collect();
        angles.sort_by(f64::total_cmp);
        let wrap = angles[0] + 2.0 * core::f64::consts::PI - angles[angles.len() - 1];
        let max_gap = angles
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(wrap, f64::max);
        max_gap < core::f64::consts::PI - 1e-3
    }
}

impl TaskHandle for LseTask {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        log_sum_exp(&self.logits(theta))
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.probs_grad(theta).1
    }

    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (self.loss(theta), self.grad(theta))
    }

    fn hessian(&self, theta: &[f64]) -> Option<DenseMatrix> {
        let (p, g) = self.probs_grad(theta);
        let d = self.dim;
        let mut h = DenseMatrix::zeros(d);
        for (i, &pi) in p.iter().enumerate() {
            let r = self.row(i);
            for j in 0..d {
                for k in j..d {
                    h.add_at(j, k, pi * r[j] * r[k]);
                }
            }
        }
        for j in 0..d {
            for k in j..d {
                h.add_at(j, k, -g[j] * g[k]);
            }
        }
        h.symmetrize_from_upper();
        Some(h)
    }

    fn eval_metric(&self, theta: &[f64]) -> f64 {
        self.loss(theta)
    }
}

/// Three 2-D tasks with `n` terms each. The first two draw coefficients from
/// standard normals, the third from `U(-1, 1)`. Draws whose loss is
/// unbounded below are rejected and redrawn from the same stream.
pub fn make_lse_tasks(seed: u64, n: usize) -> Result<Vec<LseTask>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "log-sum-exp tasks need n >= 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = Uniform::new(-1.0, 1.0).expect("valid bounds");
    let mut tasks = Vec::with_capacity(3);
    for t in 0..3 {
        loop {
            let draw = |rng: &mut ChaCha8Rng| -> f64 {
                if t < 2 {
                    rng.sample(StandardNormal)
                } else {
                    rng.sample(uniform)
                }
            };
            let a: Vec<f64> = (0..2 * n).map(|_| draw(&mut rng)).collect();
            let b: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
            let task = LseTask::new(format!("lse-{}", t + 1), 2, a, b)?;
            if task.has_minimizer_2d() {
                tasks.push(task);
                break;
            }
        }
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::check_derivatives;

    #[test]
    fn single_term_is_rejected() {
        assert!(make_lse_tasks(0, 1).is_err());
        assert!(LseTask::new("x", 2, vec![1.0, 2.0], vec![0.5]).is_err());
    }

    #[test]
    fn gradient_at_origin_is_softmax_of_offsets() {
        for task in make_lse_tasks(7, 6).unwrap() {
            let (a, b) = task.coefficients();
            let mut p = b.to_vec();
            softmax_in_place(&mut p);
            let mut expected = [0.0; 2];
            for (i, pi) in p.iter().enumerate() {
                expected[0] += pi * a[2 * i];
                expected[1] += pi * a[2 * i + 1];
            }
            let g = task.grad(&[0.0, 0.0]);
            assert!((g[0] - expected[0]).abs() < 1e-14 && (g[1] - expected[1]).abs() < 1e-14);
            let chk = check_derivatives(&task, &[0.0, 0.0], 1e-5);
            assert!(chk.grad_rel_err < 1e-6, "{chk:?}");
        }
    }

    #[test]
    fn hessian_is_psd_and_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for task in make_lse_tasks(11, 8).unwrap() {
            for _ in 0..20 {
                let theta = [rng.sample::<f64, _>(StandardNormal) * 2.0, rng.sample::<f64, _>(StandardNormal) * 2.0];
                let h = task.hessian(&theta).unwrap();
                // smallest eigenvalue of a symmetric 2x2
                let (p, q, r) = (h.get(0, 0), h.get(0, 1), h.get(1, 1));
                let min_eig = 0.5 * (p + r) - libm::sqrt(0.25 * (p - r) * (p - r) + q * q);
                assert!(min_eig >= -1e-10);
                let chk = check_derivatives(&task, &theta, 1e-5);
                assert!(chk.grad_rel_err < 1e-5);
                assert!(chk.hessian_rel_err.unwrap() < 1e-4);
            }
        }
    }

    #[test]
    fn tasks_are_deterministic_and_bounded() {
        let a = make_lse_tasks(5, 4).unwrap();
        let b = make_lse_tasks(5, 4).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert!(t.has_minimizer_2d());
        }
        // third task is uniform on [-1, 1]
        let (coef, off) = a[2].coefficients();
        assert!(coef.iter().chain(off).all(|v| v.abs() <= 1.0));
    }
}
