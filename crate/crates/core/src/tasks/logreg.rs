//! Multiclass logistic regression with tasks formed from disjoint class subsets.
//!
//! Parameters are class-major: row `c` holds the `d` feature weights followed
//! by the bias, so `θ[c·(d+1) + j]` and `P = C·(d+1)`. Every task uses all `C`
//! rows; tasks differ only in which examples they see.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Evaluator, TaskHandle};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::math::{log_sum_exp, softmax_in_place};

/// Labelled feature rows with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let ds = Self {
            dim,
            classes,
            features,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Re-checks invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need d >= 1 and C >= 2, got d={} C={}",
                self.dim, self.classes
            )));
        }
        if self.features.len() != self.labels.len() * self.dim {
            return Err(Error::InvalidDataset(format!(
                "{} feature values for {} examples of dimension {}",
                self.features.len(),
                self.labels.len(),
                self.dim
            )));
        }
        if let Some(v) = self.features.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidDataset(format!("feature {v} outside [0, 1]")));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::InvalidDataset(format!(
                "label {l} outside [0, {})",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> (&[f64], u32) {
        (
            &self.features[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }

    /// Parameter count of the logistic-regression model on this data.
    pub fn param_dim(&self) -> usize {
        self.classes * (self.dim + 1)
    }

    fn indices_of(&self, classes: &[u32]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPreset {
    Imbalanced,
    Balanced,
}

impl SplitPreset {
    pub fn classes(self) -> Vec<Vec<u32>> {
        match self {
            Self::Imbalanced => vec![vec![0, 1], vec![2, 3, 4], vec![5, 6, 7, 8, 9]],
            Self::Balanced => vec![vec![0, 1, 2], vec![3, 4, 5, 6], vec![7, 8, 9]],
        }
    }
}

/// Training data, optional held-out data, and the class subset of each task.
#[derive(Debug, Clone)]
pub struct ClassSplitDataset {
    train: Arc<Dataset>,
    test: Option<Arc<Dataset>>,
    split: Vec<Vec<u32>>,
}

impl ClassSplitDataset {
    pub fn new(train: Dataset, test: Option<Dataset>, split: Vec<Vec<u32>>) -> Result<Self> {
        if split.is_empty() {
            return Err(Error::Empty("class split"));
        }
        let mut seen = vec![false; train.classes];
        for (t, subset) in split.iter().enumerate() {
            if subset.is_empty() {
                return Err(Error::InvalidDataset(format!("task {t} has no classes")));
            }
            for &c in subset {
                let slot = seen.get_mut(c as usize).ok_or_else(|| {
                    Error::InvalidDataset(format!("class {c} outside [0, {})", train.classes))
                })?;
                if *slot {
                    return Err(Error::InvalidDataset(format!(
                        "class {c} appears in more than one task"
                    )));
                }
                *slot = true;
            }
        }
        if let Some(test) = &test {
            if test.dim != train.dim || test.classes != train.classes {
                return Err(Error::InvalidDataset(
                    "train and test shapes differ".into(),
                ));
            }
        }
        Ok(Self {
            train: Arc::new(train),
            test: test.map(Arc::new),
            split,
        })
    }

    pub fn train(&self) -> &Arc<Dataset> {
        &self.train
    }

    pub fn test(&self) -> Option<&Arc<Dataset>> {
        self.test.as_ref()
    }

    pub fn split(&self) -> &[Vec<u32>] {
        &self.split
    }

    pub fn param_dim(&self) -> usize {
        self.train.param_dim()
    }

    fn eval_set(&self) -> &Arc<Dataset> {
        self.test.as_ref().unwrap_or(&self.train)
    }

    fn all_classes(&self) -> Vec<u32> {
        self.split.iter().flatten().copied().collect()
    }

    /// Accuracy over the union of every task's evaluation examples.
    pub fn union_accuracy(&self) -> Accuracy {
        let data = self.eval_set().clone();
        let examples = data.indices_of(&self.all_classes());
        Accuracy { data, examples }
    }

    /// Mean of the per-task evaluation accuracies.
    pub fn macro_accuracy(&self) -> MacroAccuracy {
        let data = self.eval_set();
        MacroAccuracy {
            parts: self
                .split
                .iter()
                .map(|s| Accuracy {
                    data: data.clone(),
                    examples: data.indices_of(s),
                })
                .collect(),
        }
    }
}

/// Argmax class, ties to the lowest index.
pub fn predict(theta: &[f64], x: &[f64], classes: usize) -> usize {
    let q = x.len() + 1;
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let z = logit(&theta[c * q..(c + 1) * q], x);
        if z > best.1 {
            best = (c, z);
        }
    }
    best.0
}

#[inline]
fn logit(row: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    row[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + row[d]
}

/// Fraction of `examples` classified correctly.
#[derive(Debug, Clone)]
pub struct Accuracy {
    data: Arc<Dataset>,
    examples: Vec<usize>,
}

impl Accuracy {
    pub fn count(&self) -> usize {
        self.examples.len()
    }
}

impl Evaluator for Accuracy {
    fn evaluate(&self, theta: &[f64]) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        let hits = self
            .examples
            .iter()
            .filter(|&&i| {
                let (x, y) = self.data.example(i);
                predict(theta, x, self.data.classes) == y as usize
            })
            .count();
        hits as f64 / self.examples.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct MacroAccuracy {
    parts: Vec<Accuracy>,
}

impl Evaluator for MacroAccuracy {
    fn evaluate(&self, theta: &[f64]) -> f64 {
        self.parts.iter().map(|a| a.evaluate(theta)).sum::<f64>() / self.parts.len() as f64
    }
}

/// Mean softmax cross-entropy over the examples of one class subset.
#[derive(Debug, Clone)]
pub struct LogRegTask {
    id: String,
    data: Arc<Dataset>,
    examples: Vec<usize>,
    eval: Accuracy,
}

impl LogRegTask {
    pub fn examples(&self) -> &[usize] {
        &self.examples
    }

    /// Softmax probabilities and cross-entropy of example `i`.
    fn example_probs(&self, theta: &[f64], i: usize) -> (Vec<f64>, f64, &[f64], usize) {
        let (x, y) = self.data.example(i);
        let q = self.data.dim + 1;
        let mut z: Vec<f64> = (0..self.data.classes)
            .map(|c| logit(&theta[c * q..(c + 1) * q], x))
            .collect();
        let lse = log_sum_exp(&z);
        let loss = lse - z[y as usize];
        softmax_in_place(&mut z);
        (z, loss, x, y as usize)
    }

    fn accumulate(&self, theta: &[f64], idx: impl Iterator<Item = usize>) -> (f64, Vec<f64>, usize) {
        let q = self.data.dim + 1;
        let mut g = vec![0.0; self.dim()];
        let mut loss = 0.0;
        let mut n = 0;
        for i in idx {
            let (p, l, x, y) = self.example_probs(theta, i);
            loss += l;
            n += 1;
            add_example_grad(&mut g, &p, x, y, q);
        }
        (loss, g, n)
    }
}

fn add_example_grad(g: &mut [f64], p: &[f64], x: &[f64], y: usize, q: usize) {
    for (c, &pc) in p.iter().enumerate() {
        let r = pc - if c == y { 1.0 } else { 0.0 };
        let row = &mut g[c * q..(c + 1) * q];
        for (gj, xj) in row.iter_mut().zip(x) {
            *gj += r * xj;
        }
        row[q - 1] += r;
    }
}

impl TaskHandle for LogRegTask {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.data.param_dim()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let s: f64 = self
            .examples
            .iter()
            .map(|&i| self.example_probs(theta, i).1)
            .sum();
        s / self.examples.len() as f64
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.loss_grad(theta).1
    }

    fn loss_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (l, mut g, n) = self.accumulate(theta, self.examples.iter().copied());
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        (l * inv, g)
    }

    fn hessian(&self, theta: &[f64]) -> Option<DenseMatrix> {
        let classes = self.data.classes;
        let q = self.data.dim + 1;
        let mut h = DenseMatrix::zeros(self.dim());
        let mut xt = vec![1.0; q];
        for &i in &self.examples {
            let (p, _, x, _) = self.example_probs(theta, i);
            xt[..q - 1].copy_from_slice(x);
            for c in 0..classes {
                for c2 in c..classes {
                    let w = if c == c2 { p[c] } else { 0.0 } - p[c] * p[c2];
                    for j in 0..q {
                        let wx = w * xt[j];
                        if wx == 0.0 {
                            continue;
                        }
                        let row = c * q + j;
                        for k in j..q {
                            h.add_at(row, c2 * q + k, wx * xt[k]);
                        }
                    }
                }
            }
        }
        // off-diagonal class blocks are symmetric; fill their lower halves
        for c in 0..classes {
            for c2 in (c + 1)..classes {
                for j in 1..q {
                    for k in 0..j {
                        let v = h.get(c * q + k, c2 * q + j);
                        h.set(c * q + j, c2 * q + k, v);
                    }
                }
            }
        }
        h.symmetrize_from_upper();
        h.scale(1.0 / self.examples.len() as f64);
        Some(h)
    }

    fn hessian_diag(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let q = self.data.dim + 1;
        let mut diag = vec![0.0; self.dim()];
        for &i in &self.examples {
            let (p, _, x, _) = self.example_probs(theta, i);
            for (c, &pc) in p.iter().enumerate() {
                let w = pc * (1.0 - pc);
                let row = &mut diag[c * q..(c + 1) * q];
                for (dj, xj) in row.iter_mut().zip(x) {
                    *dj += w * xj * xj;
                }
                row[q - 1] += w;
            }
        }
        let inv = 1.0 / self.examples.len() as f64;
        diag.iter_mut().for_each(|v| *v *= inv);
        Some(diag)
    }

    fn num_examples(&self) -> Option<usize> {
        Some(self.examples.len())
    }

    fn visit_example_grads(&self, theta: &[f64], visit: &mut dyn FnMut(&[f64])) -> Result<()> {
        let q = self.data.dim + 1;
        let mut g = vec![0.0; self.dim()];
        for &i in &self.examples {
            let (p, _, x, y) = self.example_probs(theta, i);
            g.iter_mut().for_each(|v| *v = 0.0);
            add_example_grad(&mut g, &p, x, y, q);
            visit(&g);
        }
        Ok(())
    }

    fn minibatch_loss_grad(&self, theta: &[f64], examples: &[usize]) -> Option<(f64, Vec<f64>)> {
        if examples.is_empty() || examples.iter().any(|&k| k >= self.examples.len()) {
            return None;
        }
        let (l, mut g, n) = self.accumulate(theta, examples.iter().map(|&k| self.examples[k]));
        let inv = 1.0 / n as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        Some((l * inv, g))
    }

    fn eval_metric(&self, theta: &[f64]) -> f64 {
        self.eval.evaluate(theta)
    }
}

/// One task per class subset, sharing the full `C`-class parameter space.
pub fn make_class_split_tasks(data: &ClassSplitDataset) -> Result<Vec<LogRegTask>> {
    let eval_set = data.eval_set();
    data.split
        .iter()
        .enumerate()
        .map(|(t, subset)| {
            let examples = data.train.indices_of(subset);
            if examples.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "task {} has no training examples",
                    t + 1
                )));
            }
            Ok(LogRegTask {
                id: format!("task-{}", t + 1),
                data: data.train.clone(),
                examples,
                eval: Accuracy {
                    data: eval_set.clone(),
                    examples: eval_set.indices_of(subset),
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::check_derivatives;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(seed: u64, n: usize, d: usize, c: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let labels = (0..n).map(|i| (i % c) as u32).collect();
        Dataset::new(d, c, features, labels).unwrap()
    }

    #[test]
    fn zero_parameters_give_log_c() {
        let ds = random_dataset(1, 12, 3, 4);
        let split = ClassSplitDataset::new(ds, None, vec![vec![0, 1], vec![2, 3]]).unwrap();
        for t in make_class_split_tasks(&split).unwrap() {
            let l = t.loss(&vec![0.0; t.dim()]);
            assert_eq!(l, libm::log(4.0));
        }
    }

    #[test]
    fn saturated_correct_logit_gives_zero_loss() {
        let ds = Dataset::new(1, 2, vec![1.0], vec![1]).unwrap();
        let split = ClassSplitDataset::new(ds, None, vec![vec![0, 1]]).unwrap();
        let t = &make_class_split_tasks(&split).unwrap()[0];
        // class 1 logit = 800, class 0 logit = 0
        let l = t.loss(&[0.0, 0.0, 400.0, 400.0]);
        assert!(l < 1e-300);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let ds = random_dataset(2, 10, 3, 3);
        let split = ClassSplitDataset::new(ds, None, vec![vec![0, 1, 2]]).unwrap();
        let t = &make_class_split_tasks(&split).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..t.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let chk = check_derivatives(t, &theta, 1e-5);
            assert!(chk.grad_rel_err < 1e-5, "{chk:?}");
            assert!(chk.hessian_rel_err.unwrap() < 1e-4, "{chk:?}");
            let diag = t.hessian_diag(&theta).unwrap();
            let full = t.hessian(&theta).unwrap().diagonal();
            for (a, b) in diag.iter().zip(&full) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn per_example_grads_average_to_gradient() {
        let ds = random_dataset(3, 9, 2, 3);
        let split = ClassSplitDataset::new(ds, None, vec![vec![0], vec![1, 2]]).unwrap();
        let t = &make_class_split_tasks(&split).unwrap()[1];
        let theta: Vec<f64> = (0..t.dim()).map(|j| 0.1 * j as f64 - 0.3).collect();
        let mut sum = vec![0.0; t.dim()];
        let mut n = 0;
        t.visit_example_grads(&theta, &mut |g| {
            n += 1;
            sum.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        })
        .unwrap();
        assert_eq!(n, 6);
        let g = t.grad(&theta);
        for (a, b) in sum.iter().zip(&g) {
            assert!((a / n as f64 - b).abs() < 1e-14);
        }
        let all: Vec<usize> = (0..n).collect();
        let (_, mb) = t.minibatch_loss_grad(&theta, &all).unwrap();
        assert_eq!(mb, g);
    }

    #[test]
    fn split_validation() {
        let ds = random_dataset(4, 6, 2, 3);
        assert!(ClassSplitDataset::new(ds.clone(), None, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(ClassSplitDataset::new(ds.clone(), None, vec![vec![0], vec![]]).is_err());
        assert!(ClassSplitDataset::new(ds.clone(), None, vec![vec![5]]).is_err());
        // class with no examples
        let ds2 = Dataset::new(1, 3, vec![0.5, 0.2], vec![0, 1]).unwrap();
        let s = ClassSplitDataset::new(ds2, None, vec![vec![0, 1], vec![2]]).unwrap();
        assert!(make_class_split_tasks(&s).is_err());
    }

    #[test]
    fn evaluation_is_pure() {
        let ds = random_dataset(5, 20, 3, 4);
        let split = ClassSplitDataset::new(ds, None, vec![vec![0, 1], vec![2, 3]]).unwrap();
        let tasks = make_class_split_tasks(&split).unwrap();
        let theta: Vec<f64> = (0..tasks[0].dim()).map(|j| (j as f64).sin()).collect();
        let a = tasks[0].loss_grad(&theta);
        let _ = tasks[1].loss_grad(&theta);
        assert_eq!(tasks[0].loss_grad(&theta), a);
        let acc = split.union_accuracy().evaluate(&theta);
        assert!((0.0..=1.0).contains(&acc));
    }
}
