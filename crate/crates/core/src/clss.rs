//! Checkpointed local slope spectroscopy.
//!
//! Short ES probes from a checkpoint `θ*` at several population sizes give
//! plateau estimates `Ĵ_∞(N)`. In the small-noise regime the gap to the
//! largest-N reference is linear in `κ = σ²/N` with slope `(α/4)·d_eff`, so a
//! least-squares fit recovers the effective dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::es::{run_es, EsConfig, Estimator};
use crate::landscape::Objective;
use crate::ou::stationary_variance;
use crate::stats;
use crate::stochastics::StreamKey;

/// Standard error used for the default settling tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettlingEstimator {
    /// SE from the window's integrated autocorrelation time.
    #[default]
    Autocorrelation,
    BatchMeans,
    /// Within-window SE ignoring autocorrelation.
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClssConfig {
    pub sigma: f64,
    pub alphas: Vec<f64>,
    pub populations: Vec<usize>,
    pub horizon: usize,
    pub window: usize,
    pub seeds: usize,
    pub min_valid: usize,
    /// Fixed locality radius; `None` uses `5·√(Σ v_∞)` from the curvature hint.
    pub tau_loc: Option<f64>,
    /// Fixed settling tolerance; `None` uses `stat_factor` times the
    /// batch-means standard error of each seed's last window mean.
    pub tau_stat: Option<f64>,
    pub loc_factor: f64,
    pub stat_factor: f64,
    pub stat_estimator: SettlingEstimator,
    /// Batch count for the batch-means estimator.
    pub stat_batches: usize,
    pub fit_points: usize,
    pub min_r_squared: f64,
    pub min_acceptance: f64,
    pub estimator: Estimator,
}

impl Default for ClssConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            alphas: vec![0.1],
            populations: vec![8, 16, 32, 64, 128],
            horizon: 6000,
            window: 2000,
            seeds: 32,
            min_valid: 8,
            tau_loc: None,
            tau_stat: None,
            loc_factor: 5.0,
            stat_factor: 2.0,
            stat_estimator: SettlingEstimator::Autocorrelation,
            stat_batches: 10,
            fit_points: 4,
            min_r_squared: 0.9,
            min_acceptance: 0.5,
            estimator: Estimator::NoisyAscent,
        }
    }
}

impl ClssConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.sigma >= 0.0 && self.sigma.is_finite(), || "clss.sigma must be >= 0".into())?;
        ensure(self.window >= 1 && 2 * self.window <= self.horizon, || {
            format!(
                "clss.window must satisfy 1 <= 2*window <= horizon (window {}, horizon {})",
                self.window, self.horizon
            )
        })?;
        ensure(self.seeds >= 1, || "clss.seeds must be >= 1".into())?;
        ensure(self.min_valid >= 1 && self.min_valid <= self.seeds, || {
            format!("clss.min_valid must lie in 1..=seeds ({})", self.seeds)
        })?;
        ensure(self.populations.len() >= 3, || {
            "clss.populations needs at least 3 entries".into()
        })?;
        ensure(self.populations.iter().all(|n| *n >= 1), || {
            "clss.populations entries must be >= 1".into()
        })?;
        ensure(self.alphas.iter().all(|a| *a > 0.0 && a.is_finite()), || {
            "clss.alphas entries must be > 0".into()
        })?;
        ensure(self.fit_points >= 2, || "clss.fit_points must be >= 2".into())?;
        ensure(self.stat_batches >= 2, || "clss.stat_batches must be >= 2".into())
    }
}

/// Gate inputs and outcomes for one probe seed, replayable from the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: usize,
    pub max_locality: f64,
    pub tau_loc: f64,
    /// Last window mean `J̄₁`.
    pub last_window: f64,
    /// Second-to-last window mean `J̄₀`.
    pub previous_window: f64,
    pub tau_stat: f64,
    pub local: bool,
    pub settled: bool,
    pub valid: bool,
    /// Set when the probe itself failed (e.g. diverged).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauProbe {
    pub alpha: f64,
    pub population: usize,
    pub kappa: f64,
    /// Mean of valid seeds' `J̄₁`, or `None` when fewer than `min_valid` pass.
    pub plateau: Option<f64>,
    pub standard_error: Option<f64>,
    pub acceptance_rate: f64,
    pub seeds: Vec<SeedDiagnostics>,
}

fn default_tau_loc<O: Objective + ?Sized>(objective: &O, alpha: f64, sigma: f64, population: usize) -> f64 {
    let variance: f64 = match objective.curvature_hint() {
        Some(spectrum) => stats::compensated_sum(
            spectrum
                .positive()
                .map(|l| stationary_variance(l, alpha, sigma, population)),
        ),
        None => objective.dimension() as f64 * stationary_variance(1.0, alpha, sigma, population),
    };
    variance.max(0.0).sqrt()
}

fn probe_seed<O: Objective + ?Sized>(
    objective: &O,
    theta_star: &[f64],
    es: &EsConfig,
    cfg: &ClssConfig,
    tau_loc: f64,
    key: &StreamKey,
    seed: usize,
) -> SeedDiagnostics {
    let invalid = |error: String| SeedDiagnostics {
        seed,
        max_locality: f64::NAN,
        tau_loc,
        last_window: f64::NAN,
        previous_window: f64::NAN,
        tau_stat: f64::NAN,
        local: false,
        settled: false,
        valid: false,
        error: Some(error),
    };
    let traj = match run_es(objective, theta_star, es, key) {
        Ok(t) => t,
        Err(e) => return invalid(e.to_string()),
    };
    let max_locality = traj
        .states
        .iter()
        .map(|(_, th)| {
            stats::compensated_sum(th.iter().zip(theta_star).map(|(a, b)| (a - b) * (a - b))).sqrt()
        })
        .fold(0.0, f64::max);
    let r = &traj.rewards;
    let w = cfg.window;
    let last = &r[r.len() - w..];
    let prev = &r[r.len() - 2 * w..r.len() - w];
    let last_window = stats::mean(last);
    let previous_window = stats::mean(prev);
    let tau_stat = cfg
        .tau_stat
        .unwrap_or_else(|| {
            cfg.stat_factor
                * match cfg.stat_estimator {
                    SettlingEstimator::Autocorrelation => stats::autocorrelated_se(last),
                    SettlingEstimator::BatchMeans => stats::batch_means_se(last, cfg.stat_batches),
                    SettlingEstimator::Naive => stats::standard_error(last),
                }
        });
    let local = max_locality <= tau_loc;
    let settled = (last_window - previous_window).abs() <= tau_stat;
    SeedDiagnostics {
        seed,
        max_locality,
        tau_loc,
        last_window,
        previous_window,
        tau_stat,
        local,
        settled,
        valid: local && settled,
        error: None,
    }
}

/// Plateau estimate at one `(α, N)`. Seed `r` runs on `key/seed:r`.
pub fn probe_plateau<O: Objective + ?Sized>(
    objective: &O,
    theta_star: &[f64],
    alpha: f64,
    population: usize,
    cfg: &ClssConfig,
    key: &StreamKey,
) -> Result<PlateauProbe> {
    cfg.validate()?;
    let es = EsConfig {
        alpha,
        sigma: cfg.sigma,
        population,
        horizon: cfg.horizon,
        estimator: cfg.estimator,
        state_stride: 1,
        ..EsConfig::default()
    };
    es.validate()?;
    let tau_loc = cfg
        .tau_loc
        .unwrap_or_else(|| cfg.loc_factor * default_tau_loc(objective, alpha, cfg.sigma, population));
    let seeds: Vec<SeedDiagnostics> = (0..cfg.seeds)
        .into_par_iter()
        .map(|r| probe_seed(objective, theta_star, &es, cfg, tau_loc, &key.child("seed", r as u64), r))
        .collect();
    let valid: Vec<f64> = seeds.iter().filter(|s| s.valid).map(|s| s.last_window).collect();
    let acceptance_rate = valid.len() as f64 / seeds.len() as f64;
    let (plateau, standard_error) = if valid.len() >= cfg.min_valid {
        let (m, se) = stats::mean_se(&valid);
        (Some(m), Some(se))
    } else {
        (None, None)
    };
    Ok(PlateauProbe {
        alpha,
        population,
        kappa: cfg.sigma * cfg.sigma / population as f64,
        plateau,
        standard_error,
        acceptance_rate,
        seeds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FitStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub population: usize,
    pub kappa: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub alpha: f64,
    pub status: FitStatus,
    pub reasons: Vec<String>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub points: Vec<FitPoint>,
    /// `(4/α)·S`, present only when the fit passes its gates.
    pub d_eff: Option<f64>,
    /// `(4/α)·S` regardless of gates.
    pub d_eff_raw: f64,
    /// Set when the gaps carry no signal (all equal).
    pub suspicious: bool,
    pub acceptance: Vec<(usize, f64)>,
}

impl SlopeFit {
    fn failed(alpha: f64, reason: String, acceptance: Vec<(usize, f64)>) -> Self {
        Self {
            alpha,
            status: FitStatus::Fail,
            reasons: vec![reason],
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: f64::NAN,
            residuals: Vec::new(),
            points: Vec::new(),
            d_eff: None,
            d_eff_raw: f64::NAN,
            suspicious: false,
            acceptance,
        }
    }

    /// `kappa,gap,population` rows of the fitted points.
    pub fn points_csv(&self) -> String {
        let mut out = String::from("kappa,gap,population\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.kappa, p.gap, p.population));
        }
        out
    }
}

/// Fits `g(N) = Ĵ_ref − Ĵ_∞(N)` against `κ` over the largest `fit_points`
/// valid populations, the reference being the largest valid one.
/// `acceptance` lists per-N acceptance rates for the final gate.
pub fn fit_slope(
    points: &[(usize, Option<f64>)],
    acceptance: &[(usize, f64)],
    sigma: f64,
    alpha: f64,
    cfg: &ClssConfig,
) -> SlopeFit {
    let acceptance = acceptance.to_vec();
    let mut valid: Vec<(usize, f64)> = points
        .iter()
        .filter_map(|(n, p)| p.map(|p| (*n, p)))
        .collect();
    valid.sort_by_key(|(n, _)| std::cmp::Reverse(*n));
    valid.truncate(cfg.fit_points);
    if valid.len() < 3 {
        return SlopeFit::failed(
            alpha,
            format!("need the reference plus >= 2 valid plateaus, have {}", valid.len()),
            acceptance,
        );
    }
    let reference = valid[0].1;
    let fit_points: Vec<FitPoint> = valid
        .iter()
        .rev()
        .map(|(n, p)| FitPoint {
            population: *n,
            kappa: sigma * sigma / *n as f64,
            gap: reference - p,
        })
        .collect();
    let x: Vec<f64> = fit_points.iter().map(|p| p.kappa).collect();
    let y: Vec<f64> = fit_points.iter().map(|p| p.gap).collect();
    let Some(fit) = stats::linear_fit(&x, &y) else {
        return SlopeFit::failed(alpha, "populations give identical kappa".into(), acceptance);
    };
    let d_eff_raw = 4.0 / alpha * fit.slope;
    let suspicious = fit.r_squared.is_nan();
    let mut reasons = Vec::new();
    if suspicious {
        reasons.push("all gaps equal: fit carries no signal".into());
    } else if fit.r_squared < cfg.min_r_squared {
        reasons.push(format!("R^2 {} below {}", fit.r_squared, cfg.min_r_squared));
    }
    for (n, rate) in &acceptance {
        if *rate < cfg.min_acceptance {
            reasons.push(format!("acceptance {rate} at N={n} below {}", cfg.min_acceptance));
        }
    }
    let status = if reasons.is_empty() { FitStatus::Pass } else { FitStatus::Fail };
    SlopeFit {
        alpha,
        status,
        reasons,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        residuals: fit.residuals,
        points: fit_points,
        d_eff: (status == FitStatus::Pass).then_some(d_eff_raw),
        d_eff_raw,
        suspicious,
        acceptance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub probes: Vec<PlateauProbe>,
    pub fit: SlopeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClssReport {
    pub config: ClssConfig,
    pub results: Vec<AlphaResult>,
}

impl ClssReport {
    /// Whether any step size produced a passing fit.
    pub fn passed(&self) -> bool {
        self.results.iter().any(|r| r.fit.status == FitStatus::Pass)
    }
}

/// Full spectroscopy over every configured step size. Probes at step size
/// index `i` and population `N` use `key/alpha:i/pop:N`.
pub fn clss_run<O: Objective + ?Sized>(
    objective: &O,
    theta_star: &[f64],
    cfg: &ClssConfig,
    key: &StreamKey,
) -> Result<ClssReport> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(cfg.alphas.len());
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let akey = key.child("alpha", i as u64);
        let probes = cfg
            .populations
            .iter()
            .map(|&n| probe_plateau(objective, theta_star, alpha, n, cfg, &akey.child("pop", n as u64)))
            .collect::<Result<Vec<_>>>()?;
        let points: Vec<(usize, Option<f64>)> = probes.iter().map(|p| (p.population, p.plateau)).collect();
        let acceptance: Vec<(usize, f64)> = probes.iter().map(|p| (p.population, p.acceptance_rate)).collect();
        let fit = fit_slope(&points, &acceptance, cfg.sigma, alpha, cfg);
        results.push(AlphaResult { alpha, probes, fit });
    }
    Ok(ClssReport {
        config: cfg.clone(),
        results,
    })
}
