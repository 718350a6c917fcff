//! Noisy ascent on the quartic double well: Eyring–Kramers escape-time
//! predictions, regime classification and replicated Langevin simulation
//! with hysteresis hop detection.
//!
//! The well coordinate follows `x ← x − αL'(x) + αξ`, `ξ ~ N(0, σ²/N)`,
//! whose effective temperature is `ε = ασ²/(2N)`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::landscape::DoubleWellLandscape;
use crate::stochastics::StreamKey;

#[derive(Debug, Clone)]
pub struct KramersSetup {
    pub landscape: DoubleWellLandscape,
    pub alpha: f64,
    pub sigma: f64,
    pub population: usize,
    pub horizon: usize,
    pub replicates: usize,
    /// Start in the `+a` well instead of `−a`.
    pub start_positive: bool,
    /// Hop thresholds at `±hysteresis·a`.
    pub hysteresis: f64,
}

impl KramersSetup {
    pub fn new(landscape: DoubleWellLandscape, alpha: f64, sigma: f64, population: usize) -> Self {
        Self {
            landscape,
            alpha,
            sigma,
            population,
            horizon: 10_000,
            replicates: 100,
            start_positive: false,
            hysteresis: 0.5,
        }
    }

    /// Setup whose noise gives the requested barrier-to-noise ratio `ΔL/ε`
    /// with `N = 1`.
    pub fn with_barrier_ratio(landscape: DoubleWellLandscape, alpha: f64, ratio: f64) -> Result<Self> {
        ensure(ratio > 0.0 && ratio.is_finite(), || "barrier ratio must be > 0".into())?;
        let eps = landscape.barrier() / ratio;
        let sigma = (2.0 * eps / alpha).sqrt();
        Ok(Self::new(landscape, alpha, sigma, 1))
    }

    pub fn horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn start_positive(mut self, positive: bool) -> Self {
        self.start_positive = positive;
        self
    }

    /// Per-step noise variance `σ²/N`.
    pub fn kappa(&self) -> f64 {
        self.sigma * self.sigma / self.population as f64
    }

    /// `ε = ασ²/(2N)`.
    pub fn temperature(&self) -> f64 {
        0.5 * self.alpha * self.kappa()
    }

    /// `ΔL/ε`.
    pub fn barrier_ratio(&self) -> f64 {
        self.landscape.barrier() / self.temperature()
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.alpha > 0.0 && self.alpha.is_finite(), || "alpha must be > 0".into())?;
        ensure(self.sigma >= 0.0 && self.sigma.is_finite(), || "sigma must be >= 0".into())?;
        ensure(self.population >= 1, || "population must be >= 1".into())?;
        ensure(self.hysteresis > 0.0 && self.hysteresis < 1.0, || {
            "hysteresis fraction must lie in (0, 1)".into()
        })?;
        ensure(self.alpha * self.landscape.well_curvature() < 2.0, || {
            "step size unstable at the well bottom (alpha L''(a) >= 2)".into()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KramersPrediction {
    /// `2π / (α √(L''(x₋) |L''(z)|))`.
    pub prefactor: f64,
    /// `ΔL/ε`.
    pub exponent: f64,
    pub expected_iterations: f64,
    /// Whether `ΔL/ε > 1`, where the asymptotic formula applies.
    pub valid: bool,
}

pub fn kramers_escape_iters(setup: &KramersSetup) -> Result<KramersPrediction> {
    let eps = setup.temperature();
    ensure(eps > 0.0, || "Kramers prediction needs noise (epsilon > 0)".into())?;
    let l = &setup.landscape;
    let prefactor =
        2.0 * PI / (setup.alpha * (l.well_curvature() * l.saddle_curvature().abs()).sqrt());
    let exponent = l.barrier() / eps;
    Ok(KramersPrediction {
        prefactor,
        exponent,
        expected_iterations: prefactor * exponent.exp(),
        valid: exponent > 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopPrediction {
    /// `1 − exp(−T/E[K])`.
    pub probability: f64,
    /// `T/E[K]`, the small-`T` form.
    pub linearized: f64,
}

pub fn hop_probability(setup: &KramersSetup, horizon: f64) -> Result<HopPrediction> {
    let k = kramers_escape_iters(setup)?.expected_iterations;
    let x = horizon / k;
    Ok(HopPrediction {
        probability: -(-x).exp_m1(),
        linearized: x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Metastable,
    Hopping,
    Delocalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeBands {
    pub c_lo: f64,
    pub c_hi: f64,
}

impl Default for RegimeBands {
    fn default() -> Self {
        Self { c_lo: 0.5, c_hi: 2.0 }
    }
}

/// Barrier-to-noise regime over a horizon `T`.
pub fn classify_regime(setup: &KramersSetup, horizon: f64, bands: RegimeBands) -> Result<Regime> {
    ensure(horizon >= 1.0, || "horizon must be >= 1".into())?;
    let ratio = setup.barrier_ratio();
    let log_t = horizon.ln();
    if ratio <= 1.0 {
        return Ok(Regime::Delocalized);
    }
    if ratio > bands.c_hi * log_t {
        return Ok(Regime::Metastable);
    }
    if ratio >= bands.c_lo * log_t {
        return Ok(Regime::Hopping);
    }
    let p = hop_probability(setup, horizon)?.probability;
    Ok(if p >= 0.99 {
        Regime::Delocalized
    } else if p <= 0.01 {
        Regime::Metastable
    } else {
        Regime::Hopping
    })
}

/// Closed-form within-well variance: the continuous small-step value
/// `ε/L''(a)` and the exact discrete AR(1) value `α(σ²/N)/(k(2 − αk))`.
pub fn within_well_variance(setup: &KramersSetup) -> (f64, f64) {
    let k = setup.landscape.well_curvature();
    let continuous = setup.temperature() / k;
    let discrete = setup.alpha * setup.kappa() / (k * (2.0 - setup.alpha * k));
    (continuous, discrete)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateHops {
    pub first_hop: Option<usize>,
    pub hops: usize,
    pub final_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub replicates: Vec<ReplicateHops>,
    /// Fraction of replicates with at least one hop.
    pub hop_fraction: f64,
    /// Mean first-hop iteration among hoppers.
    pub mean_first_passage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `(#{x > 0} − #{x < 0}) / n`.
    pub imbalance: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let i = ((v - lo) / width).floor();
            let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
            counts[i] += 1;
        }
        let pos = values.iter().filter(|v| **v > 0.0).count() as f64;
        let neg = values.iter().filter(|v| **v < 0.0).count() as f64;
        Self {
            edges,
            counts,
            imbalance: (pos - neg) / values.len().max(1) as f64,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub hops: HopRecord,
    pub histogram: Histogram,
    /// `(replicate, samples)`, each sampled every `stride` iterations.
    pub trajectories: Vec<(usize, Vec<f64>)>,
    pub stride: usize,
    /// Variance of `x` over the second half of the horizon, pooled over
    /// replicates that never hopped.
    pub tail_variance: Option<f64>,
}

impl SimulationOutput {
    /// `replicate,iteration,x`.
    pub fn trajectories_csv(&self) -> String {
        let mut out = String::from("replicate,iteration,x\n");
        for (r, xs) in &self.trajectories {
            for (k, x) in xs.iter().enumerate() {
                out.push_str(&format!("{r},{},{x}\n", k * self.stride));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub recorded_trajectories: usize,
    pub stride: usize,
    pub bins: usize,
    /// Stop each replicate at its first hop (first-passage mode).
    pub stop_at_first_hop: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            recorded_trajectories: 3,
            stride: 10,
            bins: 40,
            stop_at_first_hop: false,
        }
    }
}

struct ReplicateRun {
    hops: ReplicateHops,
    samples: Vec<f64>,
    tail: Option<(usize, f64, f64)>,
}

fn run_replicate(
    setup: &KramersSetup,
    options: &SimulationOptions,
    key: &StreamKey,
    r: usize,
) -> Result<ReplicateRun> {
    let a = setup.landscape.half_separation();
    let threshold = setup.hysteresis * a;
    let noise = setup.alpha * setup.kappa().sqrt();
    let mut stream = key.child_stream("rep", r as u64);
    let mut x = if setup.start_positive { a } else { -a };
    let mut side: f64 = x.signum();
    let record = r < options.recorded_trajectories;
    let stride = options.stride.max(1);
    let mut samples = Vec::new();
    if record {
        samples.push(x);
    }
    let mut first_hop = None;
    let mut hops = 0;
    let tail_start = setup.horizon / 2;
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);

    for k in 1..=setup.horizon {
        x = x - setup.alpha * setup.landscape.well_slope(x) + noise * stream.normal();
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: format!("double-well state (replicate {r})"),
                iteration: Some(k),
            });
        }
        if side * x < -threshold {
            side = -side;
            hops += 1;
            if first_hop.is_none() {
                first_hop = Some(k);
                if options.stop_at_first_hop {
                    break;
                }
            }
        }
        if record && k % stride == 0 {
            samples.push(x);
        }
        if k > tail_start {
            n += 1;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
    }
    Ok(ReplicateRun {
        hops: ReplicateHops {
            first_hop,
            hops,
            final_x: x,
        },
        samples,
        tail: (hops == 0 && n > 1).then_some((n, mean, m2)),
    })
}

/// Replicated discrete Langevin runs from one well. Replicate `r` draws from
/// `key/rep:r`.
pub fn simulate_double_well(
    setup: &KramersSetup,
    options: &SimulationOptions,
    key: &StreamKey,
) -> Result<SimulationOutput> {
    setup.validate()?;
    ensure(setup.replicates >= 1, || "replicates must be >= 1".into())?;
    let runs: Vec<Result<ReplicateRun>> = (0..setup.replicates)
        .into_par_iter()
        .map(|r| run_replicate(setup, options, key, r))
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let hoppers: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.hops.first_hop.map(|k| k as f64))
        .collect();
    let hop_fraction = hoppers.len() as f64 / runs.len() as f64;
    let mean_first_passage = (!hoppers.is_empty()).then(|| crate::stats::mean(&hoppers));

    // Pool tail moments (Chan et al. parallel combination) in replicate order.
    let mut pooled: Option<(usize, f64, f64)> = None;
    for t in runs.iter().filter_map(|r| r.tail) {
        pooled = Some(match pooled {
            None => t,
            Some((n, m, s)) => {
                let total = n + t.0;
                let delta = t.1 - m;
                (
                    total,
                    m + delta * t.0 as f64 / total as f64,
                    s + t.2 + delta * delta * (n as f64 * t.0 as f64) / total as f64,
                )
            }
        });
    }
    let tail_variance = pooled.map(|(n, _, s)| s / (n - 1) as f64);

    let a = setup.landscape.half_separation();
    let finals: Vec<f64> = runs.iter().map(|r| r.hops.final_x).collect();
    let histogram = Histogram::from_values(&finals, -2.0 * a, 2.0 * a, options.bins);
    let trajectories = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.samples.is_empty())
        .map(|(i, r)| (i, r.samples.clone()))
        .collect();
    Ok(SimulationOutput {
        hops: HopRecord {
            replicates: runs.into_iter().map(|r| r.hops).collect(),
            hop_fraction,
            mean_first_passage,
        },
        histogram,
        trajectories,
        stride: options.stride.max(1),
        tail_variance,
    })
}

/// First-passage iterations, each replicate stopped at its first hop;
/// `None` entries never hopped within the horizon.
pub fn first_passage_times(setup: &KramersSetup, key: &StreamKey) -> Result<Vec<Option<usize>>> {
    let options = SimulationOptions {
        recorded_trajectories: 0,
        stop_at_first_hop: true,
        ..SimulationOptions::default()
    };
    let out = simulate_double_well(setup, &options, key)?;
    Ok(out.hops.replicates.into_iter().map(|r| r.first_hop).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_well() -> DoubleWellLandscape {
        DoubleWellLandscape::new(1.0, 1.0).unwrap()
    }

    #[test]
    fn prefactor_and_expectation() {
        let s = KramersSetup::with_barrier_ratio(unit_well(), 0.05, 5.0).unwrap();
        assert!((s.temperature() - 0.05).abs() < 1e-15);
        let p = kramers_escape_iters(&s).unwrap();
        assert!((p.prefactor - 2.0 * PI / (0.05 * 2f64.sqrt())).abs() < 1e-12);
        assert!((p.prefactor - 88.86).abs() < 0.01);
        assert!((p.expected_iterations / 1.32e4 - 1.0).abs() < 0.01);
        assert!(p.valid);
    }

    #[test]
    fn prefactor_matches_landscape_curvatures() {
        let l = DoubleWellLandscape::new(2.5, 0.7).unwrap();
        let s = KramersSetup::new(l.clone(), 0.03, 1.0, 4);
        let p = kramers_escape_iters(&s).unwrap();
        let direct = 2.0 * PI
            / (0.03 * (l.well_second_derivative(-0.7) * l.well_second_derivative(0.0).abs()).sqrt());
        assert!((p.prefactor - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn zero_barrier_ratio_collapses_to_prefactor() {
        let s = KramersSetup::new(unit_well(), 0.05, 1e150, 1);
        let p = kramers_escape_iters(&s).unwrap();
        assert!((p.expected_iterations - p.prefactor).abs() < 1e-9 * p.prefactor);
        assert!(!p.valid);
        assert_eq!(classify_regime(&s, 1e4, RegimeBands::default()).unwrap(), Regime::Delocalized);
    }

    #[test]
    fn doubling_population_doubles_exponent() {
        let a = KramersSetup::new(unit_well(), 0.05, 1.0, 8);
        let b = KramersSetup::new(unit_well(), 0.05, 1.0, 16);
        let pa = kramers_escape_iters(&a).unwrap();
        let pb = kramers_escape_iters(&b).unwrap();
        assert!((pb.exponent - 2.0 * pa.exponent).abs() < 1e-12);
        let ratio = pb.expected_iterations / pb.prefactor;
        let sq = (pa.expected_iterations / pa.prefactor).powi(2);
        assert!((ratio / sq - 1.0).abs() < 1e-10);
    }

    #[test]
    fn hop_probability_examples() {
        let s = KramersSetup::with_barrier_ratio(unit_well(), 0.05, 5.0).unwrap();
        let k = kramers_escape_iters(&s).unwrap().expected_iterations;
        let p = hop_probability(&s, k).unwrap();
        assert!((p.probability - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let p = hop_probability(&s, 1e4).unwrap();
        assert!((p.probability - 0.53).abs() < 0.01);
        let m = KramersSetup::with_barrier_ratio(unit_well(), 0.05, 50.0).unwrap();
        assert!(hop_probability(&m, 1e5).unwrap().probability < 1e-15);
    }

    #[test]
    fn regime_examples() {
        let b = RegimeBands::default();
        let at = |r| KramersSetup::with_barrier_ratio(unit_well(), 0.05, r).unwrap();
        assert_eq!(classify_regime(&at(50.0), 1e5, b).unwrap(), Regime::Metastable);
        assert_eq!(classify_regime(&at(0.5), 1e5, b).unwrap(), Regime::Delocalized);
        assert_eq!(classify_regime(&at(11.0), 1e5, b).unwrap(), Regime::Hopping);
        // Below c_lo ln T the hop probability decides.
        assert_eq!(classify_regime(&at(2.0), 1e5, b).unwrap(), Regime::Delocalized);
        assert!(classify_regime(&at(2.0), 0.5, b).is_err());
    }

    #[test]
    fn noiseless_run_stays_put() {
        let s = KramersSetup::new(unit_well(), 0.05, 0.0, 1).horizon(2000).replicates(4);
        let out = simulate_double_well(&s, &SimulationOptions::default(), &StreamKey::new(1)).unwrap();
        assert_eq!(out.hops.hop_fraction, 0.0);
        for r in &out.hops.replicates {
            assert!((r.final_x + 1.0).abs() < 1e-12);
        }
        assert_eq!(out.tail_variance, Some(0.0));
    }

    #[test]
    fn hysteresis_counts_full_crossings_only() {
        let s = KramersSetup::with_barrier_ratio(unit_well(), 0.05, 1.5)
            .unwrap()
            .horizon(20_000)
            .replicates(4);
        let out = simulate_double_well(&s, &SimulationOptions::default(), &StreamKey::new(2)).unwrap();
        for r in &out.hops.replicates {
            if let Some(k) = r.first_hop {
                assert!(k <= s.horizon);
                assert!(r.hops >= 1);
            }
        }
        assert!(out.hops.hop_fraction >= 0.0 && out.hops.hop_fraction <= 1.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let s = KramersSetup::with_barrier_ratio(unit_well(), 0.05, 4.0)
            .unwrap()
            .horizon(3000)
            .replicates(6);
        let a = simulate_double_well(&s, &SimulationOptions::default(), &StreamKey::new(3)).unwrap();
        let b = simulate_double_well(&s, &SimulationOptions::default(), &StreamKey::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectories.len(), 3);
        assert_eq!(a.trajectories[0].1.len(), 301);
    }

    #[test]
    fn unstable_step_rejected() {
        let s = KramersSetup::new(unit_well(), 1.5, 1.0, 1);
        assert!(simulate_double_well(&s, &SimulationOptions::default(), &StreamKey::new(0)).is_err());
    }
}
