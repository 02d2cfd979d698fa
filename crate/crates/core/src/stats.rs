//! Sample statistics shared by the Monte Carlo checks.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return MeanSe {
                mean: f64::NAN,
                se: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, se, n }
    }

    /// Mean and SE of `a - b` for paired samples.
    pub fn paired_difference(a: &[f64], b: &[f64]) -> Self {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::of(&diff)
    }
}

/// `sqrt(Σ se_i²)` for independent estimates.
pub fn combined_se(ses: &[f64]) -> f64 {
    ses.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// Empirical quantile by linear interpolation on a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Result of comparing two 1-D samples through a shared histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTv {
    /// `Σ |p_i - q_i|` over bins (variation norm, in `[0, 2]`).
    pub tv: f64,
    pub se: f64,
    pub bin_width: f64,
    pub bins: usize,
    pub lower: f64,
}

/// Variation distance between the empirical laws of `a` and `b` on a common
/// grid whose width follows the Freedman–Diaconis rule for the pooled sample.
pub fn histogram_tv(a: &[f64], b: &[f64]) -> Result<HistogramTv> {
    if a.is_empty() || b.is_empty() {
        return invalid("histogram TV needs two non-empty samples");
    }
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return invalid("histogram TV needs finite samples");
    }
    pooled.sort_by(f64::total_cmp);
    let lo = pooled[0];
    let hi = pooled[pooled.len() - 1];
    let iqr = quantile_sorted(&pooled, 0.75) - quantile_sorted(&pooled, 0.25);
    let n = pooled.len() as f64;
    let mut width = 2.0 * iqr / n.cbrt();
    if !(width > 0.0) {
        width = ((hi - lo) / n.sqrt()).max(1e-12);
    }
    let bins = (((hi - lo) / width).floor() as usize + 1).min(1 << 22);
    let mut ca = vec![0u64; bins];
    let mut cb = vec![0u64; bins];
    let index = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    for &v in a {
        ca[index(v)] += 1;
    }
    for &v in b {
        cb[index(v)] += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut tv = 0.0;
    let mut var = 0.0;
    for (x, y) in ca.iter().zip(&cb) {
        let p = *x as f64 / na;
        let q = *y as f64 / nb;
        tv += (p - q).abs();
        var += p * (1.0 - p) / na + q * (1.0 - q) / nb;
    }
    Ok(HistogramTv {
        tv,
        se: var.sqrt(),
        bin_width: width,
        bins,
        lower: lo,
    })
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt()) / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanSe::of(&[2.0]).se, 0.0);
    }

    #[test]
    fn identical_samples_have_zero_tv() {
        let a: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let h = histogram_tv(&a, &a).unwrap();
        assert_eq!(h.tv, 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let h = histogram_tv(&a, &b).unwrap();
        assert!((h.tv - 2.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_a_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        let (s, c) = linear_fit(&x, &y);
        assert!((s + 0.5).abs() < 1e-15 && (c - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wilson_contains_the_proportion() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 100, 1.96).0, 0.0);
    }
}
