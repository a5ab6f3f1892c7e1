//! Benchmark problems exposing loss, gradient, Hessian and evaluation.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

mod idx;
mod logreg;
mod lse;
mod synthetic;

pub use idx::{
    dataset_from_idx, downscale_bilinear, encode_idx_images, encode_idx_labels, parse_idx_images,
    parse_idx_labels, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use logreg::{
    make_class_split_tasks, predict, ClassSplitDataset, Dataset, LogRegTask, SplitPreset,
};
pub use lse::{make_lse_tasks, LseTask};
pub use synthetic::{make_synthetic_digits, SyntheticDigits};

/// A differentiable task loss `ℓ_t(θ)` over a shared parameter space.
///
/// Optional capabilities (Hessians, per-example gradients, minibatches)
/// return `None` or [`Error::MissingCapability`] when unsupported.
pub trait TaskHandle: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    fn loss(&self, theta: &[f64]) -> f64;

    fn grad(&self, theta: &[f64]) -> Vec<f64>;

    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (self.loss(theta), self.grad(theta))
    }

    fn hessian(&self, _theta: &[f64]) -> Option<DenseMatrix> {
        None
    }

    fn hessian_diag(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.hessian(theta).map(|h| h.diagonal())
    }

    fn num_examples(&self) -> Option<usize> {
        None
    }

    /// Calls `visit` with the gradient of each example's own loss (not
    /// divided by the example count).
    fn visit_example_grads(&self, _theta: &[f64], _visit: &mut dyn FnMut(&[f64])) -> Result<()> {
        Err(Error::MissingCapability {
            task: self.id().into(),
            capability: "per-example gradients",
        })
    }

    /// Mean loss and gradient over a subset of examples.
    fn minibatch_loss_grad(&self, _theta: &[f64], _examples: &[usize]) -> Option<(f64, Vec<f64>)> {
        None
    }

    /// Accuracy in `[0, 1]` for classification tasks, raw loss otherwise.
    fn eval_metric(&self, theta: &[f64]) -> f64;
}

pub type SharedTask = Arc<dyn TaskHandle>;

/// Scalar score of a parameter vector used for preview surfaces.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, theta: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Evaluator for F {
    fn evaluate(&self, theta: &[f64]) -> f64 {
        self(theta)
    }
}

/// Mean of the task losses; the combined score for the log-sum-exp toys.
pub struct MeanTaskLoss {
    pub tasks: Vec<SharedTask>,
}

impl Evaluator for MeanTaskLoss {
    fn evaluate(&self, theta: &[f64]) -> f64 {
        self.tasks.iter().map(|t| t.loss(theta)).sum::<f64>() / self.tasks.len() as f64
    }
}

/// `Σ_t α_t ℓ_t(θ)` as a task of its own.
pub struct WeightedTask {
    id: alloc::string::String,
    tasks: Vec<SharedTask>,
    weights: Vec<f64>,
}

impl WeightedTask {
    pub fn new(tasks: Vec<SharedTask>, weights: Vec<f64>) -> Result<Self> {
        let first = tasks.first().ok_or(Error::Empty("task list"))?;
        let p = first.dim();
        if tasks.len() != weights.len() {
            return Err(Error::InvalidWeights(alloc::format!(
                "{} weights for {} tasks",
                weights.len(),
                tasks.len()
            )));
        }
        for t in &tasks {
            crate::expfam::check_dim(p, t.dim())?;
        }
        Ok(Self {
            id: "weighted".into(),
            tasks,
            weights,
        })
    }

    fn active(&self) -> impl Iterator<Item = (f64, &SharedTask)> {
        self.weights
            .iter()
            .copied()
            .zip(&self.tasks)
            .filter(|(w, _)| *w != 0.0)
    }
}

impl TaskHandle for WeightedTask {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.tasks[0].dim()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        self.active().map(|(w, t)| w * t.loss(theta)).sum()
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.loss_grad(theta).1
    }

    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; self.dim()];
        let mut l = 0.0;
        for (w, t) in self.active() {
            let (lt, gt) = t.loss_grad(theta);
            l += w * lt;
            g.iter_mut().zip(gt).for_each(|(a, b)| *a += w * b);
        }
        (l, g)
    }

    fn hessian(&self, theta: &[f64]) -> Option<DenseMatrix> {
        let mut h = DenseMatrix::zeros(self.dim());
        for (w, t) in self.active() {
            h.add_scaled(w, &t.hessian(theta)?);
        }
        Some(h)
    }

    fn hessian_diag(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let mut h = vec![0.0; self.dim()];
        for (w, t) in self.active() {
            h.iter_mut()
                .zip(t.hessian_diag(theta)?)
                .for_each(|(a, b)| *a += w * b);
        }
        Some(h)
    }

    fn eval_metric(&self, theta: &[f64]) -> f64 {
        self.loss(theta)
    }
}

/// Relative errors of analytic derivatives against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeCheck {
    pub grad_rel_err: f64,
    pub hessian_rel_err: Option<f64>,
}

fn rel_err(approx: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = approx.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = exact.iter().map(|b| b * b).sum::<f64>().max(approx.iter().map(|a| a * a).sum());
    libm::sqrt(num) / libm::sqrt(den).max(1e-8)
}

/// Central finite-difference check of `grad` (and `hessian`, when the task
/// provides it) at `theta`.
pub fn check_derivatives(task: &dyn TaskHandle, theta: &[f64], step: f64) -> DerivativeCheck {
    let p = task.dim();
    let mut x = theta.to_vec();
    let mut fd = vec![0.0; p];
    for j in 0..p {
        let orig = x[j];
        x[j] = orig + step;
        let up = task.loss(&x);
        x[j] = orig - step;
        let down = task.loss(&x);
        x[j] = orig;
        fd[j] = (up - down) / (2.0 * step);
    }
    let grad_rel_err = rel_err(&fd, &task.grad(theta));
    let hessian_rel_err = task.hessian(theta).map(|h| {
        let mut fd_h = Vec::with_capacity(p * p);
        for j in 0..p {
            let orig = x[j];
            x[j] = orig + step;
            let up = task.grad(&x);
            x[j] = orig - step;
            let down = task.grad(&x);
            x[j] = orig;
            fd_h.extend(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * step)));
        }
        // column j of the finite-difference matrix is row j of a symmetric H
        rel_err(&fd_h, h.as_slice())
    });
    DerivativeCheck {
        grad_rel_err,
        hessian_rel_err,
    }
}
