//! Closed-form linear-Gaussian theory of ES on a concave quadratic.
//!
//! In the curvature eigenbasis each mode follows the AR(1) recursion
//! `x_{t+1} = a x_t + b ξ_t` with `a = 1 − αλ` and `b = ασ/√N`, so its mean
//! and variance are explicit and the expected reward is a finite mixture of
//! exponentials around the terminal plateau `J_∞`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::landscape::Spectrum;
use crate::stats::{compensated_sum, CompensatedSum};

/// Step-size stability on the positive modes: `|1 − αλ| < 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub stable: bool,
    pub max_abs_contraction: f64,
    /// Indices (descending-spectrum order) of modes with `αλ ≥ 2`.
    pub offending: Vec<usize>,
}

pub fn stability(spectrum: &Spectrum, alpha: f64) -> StabilityReport {
    let mut offending = Vec::new();
    let mut max_abs = 0.0f64;
    for (i, &l) in spectrum.values().iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let a = (1.0 - alpha * l).abs();
        max_abs = max_abs.max(a);
        if alpha * l >= 2.0 {
            offending.push(i);
        }
    }
    StabilityReport {
        stable: offending.is_empty(),
        max_abs_contraction: max_abs,
        offending,
    }
}

fn check_params(alpha: f64, sigma: f64, population: usize) -> Result<()> {
    ensure(alpha > 0.0 && alpha.is_finite(), || format!("alpha must be > 0, got {alpha}"))?;
    ensure(sigma >= 0.0 && sigma.is_finite(), || format!("sigma must be >= 0, got {sigma}"))?;
    ensure(population >= 1, || "population must be >= 1".into())
}

fn require_stable(spectrum: &Spectrum, alpha: f64) -> Result<()> {
    let report = stability(spectrum, alpha);
    if report.stable {
        Ok(())
    } else {
        Err(Error::Unstable { alpha, report })
    }
}

/// Stationary variance `ασ²/(Nλ(2 − αλ))` of a stable positive mode.
pub fn stationary_variance(lambda: f64, alpha: f64, sigma: f64, population: usize) -> f64 {
    alpha * sigma * sigma / (population as f64 * lambda * (2.0 - alpha * lambda))
}

/// Per-mode closed-form prediction over `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuPrediction {
    pub alpha: f64,
    pub sigma: f64,
    pub population: usize,
    pub stability: StabilityReport,
    pub eigenvalues: Vec<f64>,
    /// `a_i = 1 − αλ_i`.
    pub contraction: Vec<f64>,
    /// `γ_i = −2 ln|a_i|`; zero for null modes, infinite when `a_i = 0`.
    pub rates: Vec<f64>,
    /// `A_i = −½λ_i(x_{i,0}² + v_{i,0} − v_{i,∞})`; zero for null modes.
    pub amplitudes: Vec<f64>,
    /// Infinite for null or unstable modes.
    pub stationary_variances: Vec<f64>,
    /// `μ_{i,t}` indexed `[mode][t]`.
    pub means: Vec<Vec<f64>>,
    /// `v_{i,t}` indexed `[mode][t]`.
    pub variances: Vec<Vec<f64>>,
    pub expected_reward: Vec<f64>,
    /// `None` when unstable.
    pub terminal_plateau: Option<f64>,
    /// Last finite iteration when the recursion diverges.
    pub diverged_at: Option<usize>,
}

impl OuPrediction {
    pub fn horizon(&self) -> usize {
        self.expected_reward.len().saturating_sub(1)
    }

    /// `J_∞ + Σ A_i e^{−γ_i t}`, valid for continuous `t ≥ 0` on stable configs.
    pub fn mixture(&self, t: f64) -> f64 {
        let plateau = self.terminal_plateau.unwrap_or(f64::NAN);
        plateau + mixture_excess(&self.amplitudes, &self.rates, t)
    }

    /// Whether the non-zero amplitudes carry both signs.
    pub fn mixed_signs(&self) -> bool {
        mixed_signs(&self.amplitudes)
    }

    /// CSV in the trajectory schema plus a `source` column. `scale`
    /// rescales the iteration axis (e.g. to evaluations, `N·G`).
    pub fn to_csv(&self, scale: f64) -> String {
        let mut out = String::from("iteration,reward,grad_norm,source\n");
        for (t, r) in self.expected_reward.iter().enumerate() {
            out.push_str(&format!("{},{r},,analytic\n", t as f64 * scale));
        }
        out
    }
}

fn mixture_excess(amplitudes: &[f64], rates: &[f64], t: f64) -> f64 {
    compensated_sum(amplitudes.iter().zip(rates).map(|(a, g)| {
        if *a == 0.0 {
            0.0
        } else if g.is_infinite() {
            if t == 0.0 {
                *a
            } else {
                0.0
            }
        } else {
            a * (-g * t).exp()
        }
    }))
}

fn mixed_signs(amplitudes: &[f64]) -> bool {
    amplitudes.iter().any(|a| *a > 0.0) && amplitudes.iter().any(|a| *a < 0.0)
}

/// Closed-form mean, variance and expected reward with deterministic
/// initialization (`v_{i,0} = 0`). `x0` is in the eigenbasis, ordered like
/// the spectrum.
pub fn ou_trajectory(
    spectrum: &Spectrum,
    x0: &[f64],
    alpha: f64,
    sigma: f64,
    population: usize,
    horizon: usize,
) -> Result<OuPrediction> {
    ou_trajectory_with_variance(spectrum, x0, None, alpha, sigma, population, horizon)
}

/// As [`ou_trajectory`] with an optional initial per-mode variance `v0`.
pub fn ou_trajectory_with_variance(
    spectrum: &Spectrum,
    x0: &[f64],
    v0: Option<&[f64]>,
    alpha: f64,
    sigma: f64,
    population: usize,
    horizon: usize,
) -> Result<OuPrediction> {
    check_params(alpha, sigma, population)?;
    let d = spectrum.len();
    if x0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: x0.len(),
        });
    }
    let zeros = vec![0.0; d];
    let v0 = v0.unwrap_or(&zeros);
    if v0.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: v0.len(),
        });
    }
    ensure(v0.iter().all(|v| *v >= 0.0), || "initial variances must be >= 0".into())?;

    let report = stability(spectrum, alpha);
    let lambdas = spectrum.values();
    let b2 = alpha * alpha * sigma * sigma / population as f64;

    let mut contraction = Vec::with_capacity(d);
    let mut rates = Vec::with_capacity(d);
    let mut amplitudes = Vec::with_capacity(d);
    let mut vinf = Vec::with_capacity(d);
    for (i, &l) in lambdas.iter().enumerate() {
        let a = 1.0 - alpha * l;
        contraction.push(a);
        rates.push(if l == 0.0 { 0.0 } else { -2.0 * a.abs().ln() });
        let stable = l > 0.0 && alpha * l < 2.0;
        let v = if stable {
            stationary_variance(l, alpha, sigma, population)
        } else {
            f64::INFINITY
        };
        vinf.push(v);
        amplitudes.push(if l == 0.0 {
            0.0
        } else if stable {
            -0.5 * l * (x0[i] * x0[i] + v0[i] - v)
        } else {
            f64::NAN
        });
    }

    let mut means = vec![Vec::with_capacity(horizon + 1); d];
    let mut variances = vec![Vec::with_capacity(horizon + 1); d];
    let mut expected = Vec::with_capacity(horizon + 1);
    let mut diverged_at = None;
    for t in 0..=horizon {
        let mut loss = CompensatedSum::new();
        for i in 0..d {
            let a = contraction[i];
            let a2t = (a * a).powi(t as i32);
            let mu = a.powi(t as i32) * x0[i];
            // Σ_{s<t} a^{2s} = (1 − a^{2t})/(1 − a²), or t when a² = 1.
            let geometric = if a * a == 1.0 {
                t as f64
            } else {
                (1.0 - a2t) / (1.0 - a * a)
            };
            let v = a2t * v0[i] + b2 * geometric;
            means[i].push(mu);
            variances[i].push(v);
            loss.add(lambdas[i] * (mu * mu + v));
        }
        let j = 1.0 - 0.5 * loss.value();
        if !j.is_finite() {
            for i in 0..d {
                means[i].pop();
                variances[i].pop();
            }
            diverged_at = Some(t.saturating_sub(1));
            break;
        }
        expected.push(j);
    }

    let terminal_plateau = report.stable.then(|| plateau_unchecked(lambdas, alpha, sigma, population));
    Ok(OuPrediction {
        alpha,
        sigma,
        population,
        stability: report,
        eigenvalues: lambdas.to_vec(),
        contraction,
        rates,
        amplitudes,
        stationary_variances: vinf,
        means,
        variances,
        expected_reward: expected,
        terminal_plateau,
        diverged_at,
    })
}

fn plateau_unchecked(lambdas: &[f64], alpha: f64, sigma: f64, population: usize) -> f64 {
    let s = compensated_sum(
        lambdas
            .iter()
            .filter(|l| **l > 0.0)
            .map(|l| 1.0 / (2.0 - alpha * l)),
    );
    1.0 - alpha * sigma * sigma / (2.0 * population as f64) * s
}

/// `J_∞ = 1 − (ασ²/2N) Σ_{λ>0} 1/(2 − αλ)`. Null modes random-walk and have
/// no stationary state; they contribute nothing to the sum.
pub fn terminal_plateau(spectrum: &Spectrum, alpha: f64, sigma: f64, population: usize) -> Result<f64> {
    check_params(alpha, sigma, population)?;
    require_stable(spectrum, alpha)?;
    Ok(plateau_unchecked(spectrum.values(), alpha, sigma, population))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAmplitudes {
    pub amplitudes: Vec<f64>,
    pub rates: Vec<f64>,
    pub mixed_signs: bool,
}

pub fn amplitudes(
    spectrum: &Spectrum,
    x0: &[f64],
    alpha: f64,
    sigma: f64,
    population: usize,
) -> Result<ModeAmplitudes> {
    check_params(alpha, sigma, population)?;
    require_stable(spectrum, alpha)?;
    let p = ou_trajectory(spectrum, x0, alpha, sigma, population, 0)?;
    Ok(ModeAmplitudes {
        mixed_signs: p.mixed_signs(),
        amplitudes: p.amplitudes,
        rates: p.rates,
    })
}

fn rate(lambda: f64, alpha: f64) -> f64 {
    -2.0 * (1.0 - alpha * lambda).abs().ln()
}

/// Interior peak of the two-mode mixture, or `None` when there is none.
pub fn peak_time_two_mode(
    lambda_hi: f64,
    lambda_lo: f64,
    a_hi: f64,
    a_lo: f64,
    alpha: f64,
) -> Option<f64> {
    if !(lambda_hi > lambda_lo && lambda_lo > 0.0) || !(a_hi < 0.0 && a_lo > 0.0) {
        return None;
    }
    let g_hi = rate(lambda_hi, alpha);
    let g_lo = rate(lambda_lo, alpha);
    if !(g_hi > g_lo) || !g_hi.is_finite() {
        return None;
    }
    let ratio = g_hi * a_hi.abs() / (g_lo * a_lo);
    (ratio > 1.0).then(|| ratio.ln() / (g_hi - g_lo))
}

/// Interior maxima of the expected reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakTimes {
    /// All interior maxima in increasing order.
    pub maxima: Vec<f64>,
}

impl PeakTimes {
    pub fn earliest(&self) -> Option<f64> {
        self.maxima.first().copied()
    }
}

/// Interior maxima of `Σ A_i e^{−γ_i t}` on `(0, t_search]`, found by
/// bracketing sign changes of the derivative on a grid and bisecting.
/// `t_search` defaults to `10/γ_min` over contributing modes.
pub fn peak_time_mixture(amplitudes: &[f64], rates: &[f64], t_search: Option<f64>) -> PeakTimes {
    let terms: Vec<(f64, f64)> = amplitudes
        .iter()
        .zip(rates)
        .filter(|(a, g)| **a != 0.0 && a.is_finite() && **g > 0.0 && g.is_finite())
        .map(|(a, g)| (*a, *g))
        .collect();
    if !mixed_signs(&terms.iter().map(|t| t.0).collect::<Vec<_>>()) {
        return PeakTimes { maxima: Vec::new() };
    }
    let g_min = terms.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let g_max = terms.iter().map(|t| t.1).fold(0.0, f64::max);
    let t_end = t_search.unwrap_or(10.0 / g_min);

    // Derivative of the reward: −Σ γ A e^{−γt}.
    let slope = |t: f64| -compensated_sum(terms.iter().map(|(a, g)| g * a * (-g * t).exp()));

    // A log-spaced grid resolves both the fastest and slowest scales.
    let t_min = (0.01 / g_max).min(t_end * 1e-6);
    let steps = 20_000usize;
    let ratio = (t_end / t_min).ln() / steps as f64;
    let mut grid = vec![0.0];
    grid.extend((0..=steps).map(|k| t_min * (ratio * k as f64).exp()));

    let mut maxima = Vec::new();
    let mut prev_t = grid[0];
    let mut prev_s = slope(prev_t);
    for &t in &grid[1..] {
        let s = slope(t);
        if prev_s > 0.0 && s <= 0.0 {
            let (mut lo, mut hi) = (prev_t, t);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-13 * hi.max(1.0) {
                    break;
                }
            }
            let root = 0.5 * (lo + hi);
            if root > 0.0 {
                maxima.push(root);
            }
        }
        prev_t = t;
        prev_s = s;
    }
    PeakTimes { maxima }
}

/// Earliest interior maximum of a prediction's expected reward, with all
/// maxima reported.
pub fn peak_time_general(prediction: &OuPrediction) -> PeakTimes {
    peak_time_mixture(&prediction.amplitudes, &prediction.rates, None)
}

/// `d_eff(α) = 2 Σ_{λ>0} 1/(2 − αλ)`.
pub fn effective_dimension(spectrum: &Spectrum, alpha: f64) -> Result<f64> {
    ensure(alpha > 0.0, || format!("alpha must be > 0, got {alpha}"))?;
    require_stable(spectrum, alpha)?;
    Ok(2.0
        * compensated_sum(
            spectrum
                .positive()
                .map(|l| 1.0 / (2.0 - alpha * l)),
        ))
}

/// Points `(κ, 1 − J_∞)` for each population size.
pub fn plateau_slope_curve(
    spectrum: &Spectrum,
    alpha: f64,
    sigma: f64,
    populations: &[usize],
) -> Result<Vec<(f64, f64)>> {
    populations
        .iter()
        .map(|&n| {
            let j = terminal_plateau(spectrum, alpha, sigma, n)?;
            Ok((sigma * sigma / n as f64, 1.0 - j))
        })
        .collect()
}
