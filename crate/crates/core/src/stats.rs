//! Monte-Carlo summary statistics.

use serde::{Deserialize, Serialize};

/// Mean of a Monte-Carlo quantity with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(trials)`.
    pub std_err: f64,
    pub trials: u64,
    pub seed: u64,
}

impl McEstimate {
    /// An exactly known quantity (closed form or deterministic protocol).
    pub fn exact(value: f64) -> Self {
        Self {
            mean: value,
            std_err: 0.0,
            trials: 0,
            seed: 0,
        }
    }

    pub fn from_stats(stats: &RunningStats, seed: u64) -> Self {
        Self {
            mean: stats.mean(),
            std_err: stats.std_err(),
            trials: stats.count(),
            seed,
        }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    ///
    /// A zero standard error degenerates to an exact comparison with a
    /// 1e-9 slack.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_err + 1e-9
    }
}

/// Welford accumulator with Chan's pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Self) -> Self {
        if self.count == 0 {
            return other;
        }
        if other.count == 0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Self { count, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl Extend<f64> for RunningStats {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_two_pass_formulas() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        let mut s = RunningStats::new();
        s.extend(xs);
        let mean = xs.iter().sum::<f64>() / 8.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 7.0;
        assert_relative_eq!(s.mean(), mean);
        assert_relative_eq!(s.variance(), var, epsilon = 1e-12);
        assert_relative_eq!(s.std_err(), (var / 8.0).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn merge_equals_sequential() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.5).collect();
        let mut whole = RunningStats::new();
        whole.extend(xs.iter().copied());
        let mut a = RunningStats::new();
        a.extend(xs[..33].iter().copied());
        let mut b = RunningStats::new();
        b.extend(xs[33..].iter().copied());
        let merged = a.merge(b);
        assert_eq!(merged.count(), 100);
        assert_relative_eq!(merged.mean(), whole.mean(), epsilon = 1e-12);
        assert_relative_eq!(merged.variance(), whole.variance(), epsilon = 1e-12);
        assert_eq!(RunningStats::new().merge(whole), whole);
    }

    #[test]
    fn constant_samples_have_zero_error() {
        let mut s = RunningStats::new();
        s.extend(std::iter::repeat_n(3.0, 50));
        assert_eq!(s.std_err(), 0.0);
        let est = McEstimate::from_stats(&s, 1);
        assert!(est.covers(3.0, 3.0));
        assert!(!est.covers(3.1, 3.0));
    }
}
