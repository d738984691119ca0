//! Goodness-of-fit helpers shared by the sampler and protocol audits.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    /// Upper-tail probability of the statistic under the null.
    pub p_value: f64,
}

impl ChiSquareOutcome {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Pearson chi-square test of observed counts against expected probabilities.
///
/// Bins with zero expected probability must have zero observations, otherwise
/// the statistic is infinite and the test fails.
pub fn chi_square(observed: &[u64], expected_probs: &[f64]) -> ChiSquareOutcome {
    assert_eq!(observed.len(), expected_probs.len());
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&o, &p) in observed.iter().zip(expected_probs) {
        let e = p * n as f64;
        if e > 0.0 {
            let d = o as f64 - e;
            stat += d * d / e;
            bins += 1;
        } else if o > 0 {
            stat = f64::INFINITY;
        }
    }
    let dof = bins.saturating_sub(1).max(1);
    let p_value = if stat.is_finite() {
        let dist = ChiSquared::new(dof as f64).expect("positive dof");
        1.0 - dist.cdf(stat)
    } else {
        0.0
    };
    ChiSquareOutcome { statistic: stat, dof, p_value }
}

/// Chi-square test of observed counts against the uniform distribution.
pub fn chi_square_uniform(observed: &[u64]) -> ChiSquareOutcome {
    let k = observed.len();
    let probs = vec![1.0 / k as f64; k];
    chi_square(observed, &probs)
}
