//! Small numerical helpers shared across modules: compensated summation,
//! sample moments, least squares and the quantile convention.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Unbiased sample variance (n - 1 denominator). Zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    compensated_sum(values.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64
}

/// Standard error of the mean.
pub fn standard_error(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (sample_variance(values) / values.len() as f64).sqrt()
}

/// Mean and standard error in one pass over the slice.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    (mean(values), standard_error(values))
}

/// Empirical quantile with linear interpolation between closest ranks:
/// position `h = (n - 1) p` over the ascending sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Ordinary least-squares fit `y = slope * x + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination; NaN when `y` has zero variance.
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx = compensated_sum(x.iter().map(|v| (v - mx) * (v - mx)));
    if sxx == 0.0 {
        return None;
    }
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| b - (slope * a + intercept))
        .collect();
    let ss_res = compensated_sum(residuals.iter().map(|r| r * r));
    let ss_tot = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        f64::NAN
    };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
        residuals,
    })
}

/// Batch-means standard error of the mean of a (possibly autocorrelated)
/// series, using `batches` contiguous blocks. Falls back to the naive
/// estimate when the series is too short to form two blocks.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let batches = batches.max(2);
    let len = values.len() / batches;
    if len == 0 {
        return standard_error(values);
    }
    let means: Vec<f64> = values
        .chunks_exact(len)
        .take(batches)
        .map(mean)
        .collect();
    standard_error(&means)
}

/// Standard error of the mean of a correlated series, `√(C₀ τ/n)` with the
/// integrated autocorrelation time `τ` from Geyer's initial monotone
/// sequence of paired autocovariances.
pub fn autocorrelated_se(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return standard_error(values);
    }
    let m = mean(values);
    let centered: Vec<f64> = values.iter().map(|x| x - m).collect();
    let acov = |k: usize| compensated_sum(centered.iter().zip(&centered[k..]).map(|(a, b)| a * b)) / n as f64;
    let c0 = acov(0);
    if c0 == 0.0 {
        return 0.0;
    }
    // τ = −1 + 2 Σ_k Γ_k with Γ_k = ρ(2k) + ρ(2k+1), truncated at the first
    // non-positive pair and forced non-increasing.
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (acov(2 * k) + acov(2 * k + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    let tau = (2.0 * sum - 1.0).max(1.0);
    (c0 * tau / n as f64).sqrt()
}

pub fn norm(v: &[f64]) -> f64 {
    compensated_sum(v.iter().map(|x| x * x)).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    compensated_sum(a.iter().zip(b).map(|(x, y)| x * y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn autocorrelated_se_tracks_window_spread() {
        use crate::stochastics::StreamKey;
        // Spread of window means of an AR(1) series against the estimate.
        let rho = 0.95;
        let (n, reps) = (2000, 400);
        let mut means = Vec::new();
        let mut estimates = Vec::new();
        for r in 0..reps {
            let mut s = StreamKey::new(11).child_stream("rep", r);
            let mut x = s.normal() / (1.0f64 - rho * rho).sqrt();
            let series: Vec<f64> = (0..n)
                .map(|_| {
                    x = rho * x + s.normal();
                    x
                })
                .collect();
            means.push(mean(&series));
            estimates.push(autocorrelated_se(&series));
        }
        let spread = sample_variance(&means).sqrt();
        assert!((mean(&estimates) / spread - 1.0).abs() < 0.12, "{} vs {spread}", mean(&estimates));
        assert_eq!(autocorrelated_se(&[2.0; 10]), 0.0);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut values = vec![1e16];
        values.extend(std::iter::repeat_n(1.0, 1000));
        values.push(-1e16);
        assert_eq!(compensated_sum(values), 1000.0);
    }

    #[test]
    fn quantile_convention_is_pinned() {
        let pool: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&pool, 0.95) - 95.05).abs() < 1e-12);
        assert_eq!(quantile(&pool, 0.0), 1.0);
        assert_eq!(quantile(&pool, 1.0), 100.0);
        assert_eq!(quantile(&[3.0], 0.3), 3.0);
    }

    #[test]
    fn exact_line_has_unit_r_squared() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let fit = linear_fit(&x, &y).unwrap();
        assert!((fit.slope - 2.5).abs() < 1e-14);
        assert!((fit.intercept + 1.0).abs() < 1e-14);
        assert!((fit.r_squared - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_response_has_undefined_r_squared() {
        let fit = linear_fit(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert!(fit.r_squared.is_nan());
    }
}
