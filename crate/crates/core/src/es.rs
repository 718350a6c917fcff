//! Weight-perturbation evolution strategies.
//!
//! The default [`Estimator::Perturbation`] is the plain ES estimator
//! `ĝ = (1/(Nσ)) Σ r_k ε_k` with `r_k = J(θ + σ ε_k)`, followed by the
//! constant-step update `θ ← θ + α ĝ`. [`Estimator::NoisyAscent`] replaces the
//! Monte Carlo estimate by the local model the closed-form analytics describe:
//! the exact gradient plus isotropic noise of variance `κ = σ²/N` per
//! coordinate. It needs an objective with a gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::landscape::{check_dimension, Objective};
use crate::stats::{self, CompensatedSum};
use crate::stochastics::{Stream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Perturbation,
    NoisyAscent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub population: usize,
    pub horizon: usize,
    /// Evaluations averaged per candidate.
    pub group: usize,
    pub antithetic: bool,
    /// Subtract the population-mean reward before weighting.
    pub baseline: bool,
    pub estimator: Estimator,
    /// Record θ every `state_stride` iterations (0 disables state recording).
    pub state_stride: usize,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 1.0,
            population: 32,
            horizon: 100,
            group: 1,
            antithetic: false,
            baseline: false,
            estimator: Estimator::Perturbation,
            state_stride: 0,
        }
    }
}

impl EsConfig {
    /// Effective diffusion scale `σ²/N`.
    pub fn kappa(&self) -> f64 {
        self.sigma * self.sigma / self.population as f64
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.alpha > 0.0 && self.alpha.is_finite(), || {
            format!("alpha must be > 0, got {}", self.alpha)
        })?;
        // The noisy-ascent model is well defined without noise.
        let sigma_ok = match self.estimator {
            Estimator::Perturbation => self.sigma > 0.0,
            Estimator::NoisyAscent => self.sigma >= 0.0,
        };
        ensure(sigma_ok && self.sigma.is_finite(), || {
            format!("sigma must be > 0, got {}", self.sigma)
        })?;
        ensure(self.population >= 1, || "population must be >= 1".into())?;
        ensure(self.group >= 1, || "group must be >= 1".into())?;
        ensure(!self.antithetic || self.population % 2 == 0, || {
            format!(
                "antithetic sampling needs an even population, got {}",
                self.population
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec<f64>,
    /// Candidate rewards in candidate order; empty for the noisy-ascent model.
    pub rewards: Vec<f64>,
}

fn check_finite(values: &[f64], context: &str, iteration: Option<usize>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
            iteration,
        })
    }
}

/// One gradient estimate at `theta`. Candidate `k` draws from its own stream
/// `key/cand:k` (or `key/pair:k` under antithetic sampling), so the result
/// does not depend on evaluation order.
pub fn es_gradient_estimate<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    cfg: &EsConfig,
    key: &StreamKey,
) -> Result<GradientEstimate> {
    cfg.validate()?;
    check_dimension(objective.dimension(), theta)?;
    match cfg.estimator {
        Estimator::Perturbation => perturbation_estimate(objective, theta, cfg, key),
        Estimator::NoisyAscent => noisy_ascent_estimate(objective, theta, cfg, key),
    }
}

fn perturbation_estimate<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    cfg: &EsConfig,
    key: &StreamKey,
) -> Result<GradientEstimate> {
    let d = theta.len();
    let n = cfg.population;

    // Each job yields one or two (reward, direction sign) contributions along
    // a shared perturbation direction.
    let job = |k: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let label = if cfg.antithetic { "pair" } else { "cand" };
        let mut stream = key.child_stream(label, k as u64);
        let eps = stream.gaussian_vector(d)?;
        let mut rewards = Vec::with_capacity(2);
        let probe: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + cfg.sigma * e).collect();
        rewards.push(objective.sample(&probe, cfg.group, &mut stream)?);
        if cfg.antithetic {
            let probe: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t - cfg.sigma * e).collect();
            rewards.push(objective.sample(&probe, cfg.group, &mut stream)?);
        }
        Ok((eps, rewards))
    };

    let jobs = if cfg.antithetic { n / 2 } else { n };
    let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = if jobs * d >= 1 << 14 {
        (0..jobs).into_par_iter().map(job).collect()
    } else {
        (0..jobs).map(job).collect()
    };

    let mut directions = Vec::with_capacity(jobs);
    let mut rewards = Vec::with_capacity(n);
    for r in results {
        let (eps, rs) = r?;
        rewards.extend_from_slice(&rs);
        directions.push(eps);
    }
    check_finite(&rewards, "candidate reward", None)?;

    let shift = if cfg.baseline { stats::mean(&rewards) } else { 0.0 };
    let scale = 1.0 / (n as f64 * cfg.sigma);
    let mut acc = vec![CompensatedSum::new(); d];
    for (j, eps) in directions.iter().enumerate() {
        let weight = if cfg.antithetic {
            // r₊ε + r₋(−ε): the baseline shift cancels inside each pair.
            rewards[2 * j] - rewards[2 * j + 1]
        } else {
            rewards[j] - shift
        };
        for (a, e) in acc.iter_mut().zip(eps) {
            a.add(weight * e);
        }
    }
    let gradient = acc.iter().map(|a| a.value() * scale).collect();
    Ok(GradientEstimate { gradient, rewards })
}

fn noisy_ascent_estimate<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    cfg: &EsConfig,
    key: &StreamKey,
) -> Result<GradientEstimate> {
    let mut stream = key.child_stream("noise", 0);
    let mut gradient = objective.gradient(theta)?;
    let scale = cfg.kappa().sqrt();
    for g in &mut gradient {
        *g += scale * stream.normal();
    }
    Ok(GradientEstimate {
        gradient,
        rewards: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: EsConfig,
    pub landscape: String,
    pub key: StreamKey,
    /// `J(θ_t)` for `t = 0..=T`.
    pub rewards: Vec<f64>,
    /// `‖ĝ_t‖` for the step leaving iteration `t`, `t = 0..T`.
    pub grad_norms: Vec<f64>,
    /// `(t, θ_t)` every `state_stride` iterations, plus the final state.
    pub states: Vec<(usize, Vec<f64>)>,
    pub final_theta: Vec<f64>,
    /// Whether recorded rewards are noiseless re-evaluations.
    pub rewards_clean: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Columnar CSV `iteration,reward,grad_norm`; the final row has no
    /// gradient norm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,reward,grad_norm\n");
        for (t, r) in self.rewards.iter().enumerate() {
            match self.grad_norms.get(t) {
                Some(g) => out.push_str(&format!("{t},{r},{g}\n")),
                None => out.push_str(&format!("{t},{r},\n")),
            }
        }
        out
    }
}

/// Runs `T` ES iterations from `theta0`. Iteration `t` draws from
/// `key/iter:t`, so the trajectory is a pure function of
/// `(objective, theta0, cfg, key)`.
pub fn run_es<O: Objective + ?Sized>(
    objective: &O,
    theta0: &[f64],
    cfg: &EsConfig,
    key: &StreamKey,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dimension(objective.dimension(), theta0)?;
    let mut theta = theta0.to_vec();
    let mut rewards = Vec::with_capacity(cfg.horizon + 1);
    let mut grad_norms = Vec::with_capacity(cfg.horizon);
    let mut states = Vec::new();

    let record = |t: usize, theta: &[f64], states: &mut Vec<(usize, Vec<f64>)>| {
        if cfg.state_stride > 0 && t % cfg.state_stride == 0 {
            states.push((t, theta.to_vec()));
        }
    };

    let r0 = objective.value(&theta)?;
    check_finite(&[r0], "reward", Some(0))?;
    rewards.push(r0);
    record(0, &theta, &mut states);

    for t in 0..cfg.horizon {
        let est = es_gradient_estimate(objective, &theta, cfg, &key.child("iter", t as u64))
            .map_err(|e| with_iteration(e, t))?;
        grad_norms.push(stats::norm(&est.gradient));
        for (th, g) in theta.iter_mut().zip(&est.gradient) {
            *th += cfg.alpha * g;
        }
        check_finite(&theta, "parameter", Some(t + 1))?;
        let r = objective.value(&theta)?;
        check_finite(&[r], "reward", Some(t + 1))?;
        rewards.push(r);
        record(t + 1, &theta, &mut states);
    }
    if cfg.state_stride > 0 && states.last().map(|s| s.0) != Some(cfg.horizon) {
        states.push((cfg.horizon, theta.clone()));
    }

    Ok(Trajectory {
        config: cfg.clone(),
        landscape: objective.describe(),
        key: key.clone(),
        rewards,
        grad_norms,
        states,
        final_theta: theta,
        rewards_clean: true,
    })
}

fn with_iteration(e: Error, t: usize) -> Error {
    match e {
        Error::NonFinite { context, .. } => Error::NonFinite {
            context,
            iteration: Some(t),
        },
        other => other,
    }
}

/// Per-iteration mean and standard error over an ensemble of replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCurve {
    pub replicates: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Order-fixed Welford accumulator over curves of equal length.
#[derive(Debug, Clone)]
pub struct CurveAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CurveAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, curve: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), x) in self.mean.iter_mut().zip(&mut self.m2).zip(curve) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn finish(self) -> EnsembleCurve {
        let n = self.count as f64;
        let se = if self.count > 1 {
            self.m2.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect()
        } else {
            vec![0.0; self.mean.len()]
        };
        EnsembleCurve {
            replicates: self.count,
            mean: self.mean,
            se,
        }
    }
}

/// Runs `replicates` independent trajectories (`key/rep:r`) and returns the
/// mean reward curve. Replicates run in parallel in fixed-size chunks and are
/// folded in replicate order.
pub fn run_es_ensemble<O: Objective + ?Sized>(
    objective: &O,
    theta0: &[f64],
    cfg: &EsConfig,
    key: &StreamKey,
    replicates: usize,
) -> Result<EnsembleCurve> {
    ensure(replicates >= 1, || "replicates must be >= 1".into())?;
    let mut cfg = cfg.clone();
    cfg.state_stride = 0;
    let mut acc = CurveAccumulator::new(cfg.horizon + 1);
    const CHUNK: usize = 256;
    for start in (0..replicates).step_by(CHUNK) {
        let end = (start + CHUNK).min(replicates);
        let curves: Vec<Result<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|r| {
                run_es(objective, theta0, &cfg, &key.child("rep", r as u64)).map(|t| t.rewards)
            })
            .collect();
        for c in curves {
            acc.push(&c?);
        }
    }
    Ok(acc.finish())
}

/// Monte Carlo estimate of the Gaussian-smoothed reward
/// `J_σ(θ) = E[J(θ + σε)]` with its standard error.
pub fn smoothed_reward<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    sigma: f64,
    samples: usize,
    stream: &mut Stream,
) -> Result<(f64, f64)> {
    ensure(samples >= 2, || format!("smoothed_reward needs >= 2 samples, got {samples}"))?;
    ensure(sigma > 0.0, || "sigma must be > 0".into())?;
    check_dimension(objective.dimension(), theta)?;
    let d = theta.len();
    let mut eps = vec![0.0; d];
    let mut probe = vec![0.0; d];
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        stream.fill_gaussian(&mut eps);
        for ((p, t), e) in probe.iter_mut().zip(theta).zip(&eps) {
            *p = t + sigma * e;
        }
        values.push(objective.sample(&probe, 1, stream)?);
    }
    check_finite(&values, "smoothed reward sample", None)?;
    Ok(stats::mean_se(&values))
}
