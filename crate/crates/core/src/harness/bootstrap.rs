//! Percentile bootstrap intervals for the mean.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::SimRng;

/// A fixed set of resamples of `n` items, stored as multiplicities so many
/// series of the same length can share one draw.
#[derive(Debug, Clone)]
pub struct Resampler {
    n: usize,
    counts: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(n: usize, resamples: usize, rng: &mut SimRng) -> Result<Self> {
        if n == 0 {
            return Err(invalid("cannot bootstrap an empty sample"));
        }
        if resamples == 0 {
            return Err(invalid("at least one resample is required"));
        }
        let counts = (0..resamples)
            .map(|_| {
                let mut c = vec![0.0; n];
                for _ in 0..n {
                    c[rng.random_range(0..n)] += 1.0;
                }
                c
            })
            .collect();
        Ok(Self { n, counts })
    }

    /// `(lo, hi)` percentile interval of the resampled means.
    ///
    /// The interval is widened if needed so it always contains the mean of
    /// `samples` itself.
    pub fn interval(&self, samples: &[f64], level: f64) -> Result<(f64, f64)> {
        if samples.len() != self.n {
            return Err(invalid(format!(
                "resampler was built for {} items, got {}",
                self.n,
                samples.len()
            )));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(invalid(format!("confidence level must lie in (0, 1), got {level}")));
        }
        let n = self.n as f64;
        let mut means: Vec<f64> = self
            .counts
            .iter()
            .map(|c| c.iter().zip(samples).map(|(k, x)| k * x).sum::<f64>() / n)
            .collect();
        means.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        let mean = mean(samples);
        let lo = quantile(&means, tail).min(mean);
        let hi = quantile(&means, 1.0 - tail).max(mean);
        Ok((lo, hi))
    }
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    match sorted.get(i + 1) {
        Some(&next) if frac > 0.0 => sorted[i] + frac * (next - sorted[i]),
        _ => sorted[i],
    }
}

/// Percentile bootstrap interval of the mean of `samples`.
pub fn bootstrap_ci(samples: &[f64], level: f64, resamples: usize, rng: &mut SimRng) -> Result<(f64, f64)> {
    Resampler::new(samples.len(), resamples, rng)?.interval(samples, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_samples() {
        let (lo, hi) = bootstrap_ci(&[2.5; 40], 0.95, 200, &mut seeded(0)).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
    }

    #[test]
    fn bounded_statistic() {
        let (lo, hi) = bootstrap_ci(&[0.0, 1.0], 0.95, 5000, &mut seeded(1)).unwrap();
        assert!(lo >= 0.0 && hi <= 1.0 && lo <= 0.5 && hi >= 0.5);
    }

    #[test]
    fn normal_width_matches_clt() {
        let mut rng = seeded(2);
        let xs: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (lo, hi) = bootstrap_ci(&xs, 0.95, 2000, &mut rng).unwrap();
        let expected = 2.0 * 1.96 / 1000f64.sqrt();
        assert!(((hi - lo) / expected - 1.0).abs() < 0.2, "width {}", hi - lo);
    }

    #[test]
    fn input_errors() {
        assert!(bootstrap_ci(&[], 0.95, 10, &mut seeded(0)).is_err());
        assert!(bootstrap_ci(&[1.0], 1.0, 10, &mut seeded(0)).is_err());
        let r = Resampler::new(3, 10, &mut seeded(0)).unwrap();
        assert!(r.interval(&[1.0, 2.0], 0.9).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 1.0), 3.0);
    }
}
