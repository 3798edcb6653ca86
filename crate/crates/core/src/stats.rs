//! Bootstrap confidence intervals and the paired t-test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::metrics::percentile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub seed: u64,
}

/// Percentile-method CI of the mean from `b` resamples with replacement.
pub fn bootstrap_ci(values: &[f64], b: usize, level: f64, seed: u64) -> Result<SummaryStats> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Contract(format!("bootstrap needs at least 2 values, got {n}")));
    }
    if b == 0 || !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::Config("bootstrap needs B ≥ 1 and a level in (0, 1)".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("bootstrap values must be finite".into()));
    }
    // means are accumulated relative to the first value so that constant
    // inputs reproduce that value exactly
    let origin = values[0];
    let mean_of = |it: &mut dyn Iterator<Item = f64>| origin + it.map(|v| v - origin).sum::<f64>() / n as f64;
    let mean = mean_of(&mut values.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> =
        (0..b).map(|_| mean_of(&mut (0..n).map(|_| values[rng.random_range(0..n)]))).collect();
    let tail = 100.0 * (1.0 - level) / 2.0;
    let ci_low = percentile(&mut means, tail);
    let ci_high = percentile(&mut means, 100.0 - tail);
    Ok(SummaryStats { mean, ci_low, ci_high, n, seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TTest {
    Statistic { t: f64, p: f64, dof: usize },
    /// Differences have zero variance.
    Degenerate { mean_difference: f64 },
}

/// Two-tailed Student's paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return Ok(TTest::Degenerate { mean_difference: mean });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dof = n - 1;
    let dist = StudentsT::new(0.0, 1.0, dof as f64).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest::Statistic { t, p, dof })
}
