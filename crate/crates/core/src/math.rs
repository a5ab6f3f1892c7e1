//! Small numeric helpers shared across modules.

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log Σ exp(x_i)` with the max shifted out. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = xs.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(s)
}

/// Normalizes log-weights in place into probabilities.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = libm::exp(*x - lse);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| libm::fabs(x - y))
        .fold(0.0, f64::max)
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Kahan-compensated accumulator used for long diagonal merges.
#[derive(Clone, Copy, Default)]
pub(crate) struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub(crate) fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum
    }
}
