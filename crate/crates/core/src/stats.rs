//! Point estimates with batch-means standard errors.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate<T> {
    pub value: T,
    /// Zero for deterministic evaluation routes; NaN when too few samples.
    pub std_error: T,
}

impl<T: Real> Estimate<T> {
    pub fn exact(value: T) -> Self {
        Estimate {
            value,
            std_error: T::zero(),
        }
    }
}

/// Ratio estimator `Σ num / Σ den` over a known number of pairs.
///
/// Consecutive pairs are correlated (each wait depends on its predecessor),
/// so the standard error comes from non-overlapping batch totals of the
/// linearised residual `num − R·den`.
#[derive(Debug, Clone)]
pub struct RatioAccumulator<T> {
    batch_len: usize,
    batches: Vec<(T, T)>,
    filled: usize,
}

pub const DEFAULT_BATCHES: usize = 50;

impl<T: Real> RatioAccumulator<T> {
    pub fn new(total: usize) -> Self {
        let count = (total / 20).clamp(1, DEFAULT_BATCHES);
        RatioAccumulator {
            batch_len: (total / count).max(1),
            batches: vec![(T::zero(), T::zero()); count],
            filled: 0,
        }
    }

    pub fn push(&mut self, num: T, den: T) {
        let b = (self.filled / self.batch_len).min(self.batches.len() - 1);
        let slot = &mut self.batches[b];
        slot.0 = slot.0 + num;
        slot.1 = slot.1 + den;
        self.filled += 1;
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn finish(&self) -> Estimate<T> {
        let (num, den) = self
            .batches
            .iter()
            .fold((T::zero(), T::zero()), |(n, d), &(a, b)| (n + a, d + b));
        let value = num / den;
        let count = self.batches.len();
        let std_error = if count < 2 || self.filled < 2 * count {
            T::nan()
        } else {
            let ss: T = self
                .batches
                .iter()
                .map(|&(a, b)| {
                    let z = a - value * b;
                    z * z
                })
                .sum();
            let b = T::lit(count as f64);
            (ss * b / (b - T::one())).sqrt() / den
        };
        Estimate { value, std_error }
    }
}

/// Mean and standard error of i.i.d. samples.
pub fn mean_se<T: Real>(xs: impl Iterator<Item = T>) -> Estimate<T> {
    let (mut n, mut s, mut s2) = (0usize, T::zero(), T::zero());
    for x in xs {
        n += 1;
        s = s + x;
        s2 = s2 + x * x;
    }
    let nn = T::lit(n as f64);
    let m = s / nn;
    let var = (s2 / nn - m * m).max(T::zero()) * nn / (nn - T::one());
    Estimate {
        value: m,
        std_error: (var / nn).sqrt(),
    }
}
