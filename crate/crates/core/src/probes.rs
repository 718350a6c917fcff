//! Random-perturbation probes: candidate batches, best-of-N improvement,
//! headroom normalization, saturation population, tail quantiles and the
//! probability that a random perturbation improves the reward.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::landscape::{check_dimension, Objective};
use crate::stats;
use crate::stochastics::{Stream, StreamKey};

/// Reward deltas of `M` random candidates `θ + σu`, `u ~ N(0, I)` (not
/// normalized), relative to one baseline evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBatch {
    pub baseline: f64,
    pub deltas: Vec<f64>,
    pub sigma: f64,
    pub index: usize,
    pub key: StreamKey,
    /// Candidates dropped for non-finite rewards.
    pub excluded: usize,
}

impl PerturbationBatch {
    /// Batch from precomputed deltas.
    pub fn from_deltas(baseline: f64, deltas: Vec<f64>) -> Result<Self> {
        ensure(!deltas.is_empty(), || "batch needs at least one candidate".into())?;
        ensure(deltas.iter().all(|d| d.is_finite()), || "batch deltas must be finite".into())?;
        Ok(Self {
            baseline,
            deltas,
            sigma: f64::NAN,
            index: 0,
            key: StreamKey::new(0),
            excluded: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// `candidate,delta` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("candidate,delta\n");
        for (j, d) in self.deltas.iter().enumerate() {
            out.push_str(&format!("{j},{d}\n"));
        }
        out
    }
}

/// Evaluates one batch. The baseline draws from `key/baseline:0`, candidate
/// `j` from `key/cand:j`.
pub fn generate_batch<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    sigma: f64,
    candidates: usize,
    group: usize,
    key: &StreamKey,
) -> Result<PerturbationBatch> {
    ensure(candidates >= 1, || "candidate count M must be >= 1".into())?;
    ensure(sigma >= 0.0 && sigma.is_finite(), || "sigma must be >= 0".into())?;
    check_dimension(objective.dimension(), theta)?;
    let baseline = objective.sample(theta, group, &mut key.child_stream("baseline", 0))?;
    if !baseline.is_finite() {
        return Err(Error::NonFinite {
            context: "baseline reward".into(),
            iteration: None,
        });
    }
    let d = theta.len();
    let rewards: Vec<Result<f64>> = (0..candidates)
        .into_par_iter()
        .map(|j| {
            let mut stream = key.child_stream("cand", j as u64);
            let u = stream.gaussian_vector(d)?;
            let probe: Vec<f64> = theta.iter().zip(&u).map(|(t, e)| t + sigma * e).collect();
            objective.sample(&probe, group, &mut stream)
        })
        .collect();
    let mut deltas = Vec::with_capacity(candidates);
    let mut excluded = 0;
    for r in rewards {
        let r = r?;
        if r.is_finite() {
            deltas.push(r - baseline);
        } else {
            excluded += 1;
        }
    }
    ensure(!deltas.is_empty(), || "every candidate reward was non-finite".into())?;
    Ok(PerturbationBatch {
        baseline,
        deltas,
        sigma,
        index: key.path().last().map_or(0, |p| p.1 as usize),
        key: key.clone(),
        excluded,
    })
}

/// `E[max of a uniformly random N-subset]` from order statistics:
/// `Σ_{j≥N} Δ_(j) C(j−1, N−1)/C(M, N)`.
pub fn exact_best_of_n(deltas: &[f64], n: usize) -> Result<f64> {
    let m = deltas.len();
    ensure(n >= 1 && n <= m, || format!("best-of-N needs 1 <= N <= M ({m}), got {n}"))?;
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    // w_M = N/M and w_{j−1} = w_j (j − N)/(j − 1).
    let mut acc = stats::CompensatedSum::new();
    let mut w = n as f64 / m as f64;
    for j in (n..=m).rev() {
        acc.add(w * sorted[j - 1]);
        if j > 1 {
            w *= (j - n) as f64 / (j - 1) as f64;
        }
    }
    Ok(acc.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub value: f64,
    /// Monte Carlo standard error; zero in exact mode.
    pub standard_error: f64,
}

/// Best-of-N improvement of one batch. `subset_samples = 0` selects the
/// exact order-statistics value; otherwise subsets are drawn without
/// replacement.
pub fn best_of_n(batch: &PerturbationBatch, n: usize, subset_samples: usize, stream: &mut Stream) -> Result<BestOfN> {
    let m = batch.len();
    ensure(n >= 1 && n <= m, || format!("best-of-N needs 1 <= N <= M ({m}), got {n}"))?;
    if subset_samples == 0 {
        return Ok(BestOfN {
            value: exact_best_of_n(&batch.deltas, n)?,
            standard_error: 0.0,
        });
    }
    let maxima: Vec<f64> = (0..subset_samples)
        .map(|_| {
            sample_indices(stream.rng(), m, n)
                .iter()
                .map(|i| batch.deltas[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (value, standard_error) = stats::mean_se(&maxima);
    Ok(BestOfN { value, standard_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNPoint {
    pub n: usize,
    pub mean: f64,
    pub standard_error: f64,
    /// `1.96·SE`.
    pub half_width: f64,
    /// `Δ*_N / (1 − R₀)`, absent when headroom is not positive.
    pub normalized: Option<f64>,
    pub normalized_half_width: Option<f64>,
    pub per_batch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfNEstimate {
    pub baseline: f64,
    pub subset_samples: usize,
    pub points: Vec<BestOfNPoint>,
    pub headroom_refused: bool,
}

pub const DEFAULT_N_LIST: [usize; 5] = [5, 10, 20, 30, 50];

/// Per-N mean and spread across batches. Batch `s` subsamples from
/// `key/batch:s/n:N` in Monte Carlo mode.
pub fn summarize_best_of_n(
    batches: &[PerturbationBatch],
    n_list: &[usize],
    baseline: f64,
    subset_samples: usize,
    key: &StreamKey,
) -> Result<BestOfNEstimate> {
    ensure(batches.len() >= 2, || "best-of-N summary needs at least 2 batches".into())?;
    ensure(!n_list.is_empty(), || "N list must not be empty".into())?;
    let headroom = 1.0 - baseline;
    let headroom_refused = !(headroom > 0.0);
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let per_batch = batches
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let mut stream = key.child("batch", s as u64).child_stream("n", n as u64);
                best_of_n(b, n, subset_samples, &mut stream).map(|e| e.value)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, se) = stats::mean_se(&per_batch);
        points.push(BestOfNPoint {
            n,
            mean,
            standard_error: se,
            half_width: 1.96 * se,
            normalized: (!headroom_refused).then(|| mean / headroom),
            normalized_half_width: (!headroom_refused).then(|| 1.96 * se / headroom),
            per_batch,
        });
    }
    Ok(BestOfNEstimate {
        baseline,
        subset_samples,
        points,
        headroom_refused,
    })
}

/// Headroom error for callers that require normalization.
pub fn require_headroom(baseline: f64) -> Result<f64> {
    if baseline < 1.0 {
        Ok(1.0 - baseline)
    } else {
        Err(Error::Headroom { baseline })
    }
}

/// `N₉₀ = min{N : Δ*_N ≥ 0.9·Δ*_{N_max}}` over the listed N.
pub fn saturation_population(estimate: &BestOfNEstimate) -> Result<usize> {
    let last = estimate
        .points
        .iter()
        .max_by_key(|p| p.n)
        .ok_or_else(|| Error::Parameter("empty best-of-N estimate".into()))?;
    if !(last.mean > 0.0) {
        return Err(Error::Undefined(format!(
            "N90 presumes positive improvement at N_max, got {}",
            last.mean
        )));
    }
    let mut sorted: Vec<&BestOfNPoint> = estimate.points.iter().collect();
    sorted.sort_by_key(|p| p.n);
    Ok(sorted
        .into_iter()
        .find(|p| p.mean >= 0.9 * last.mean)
        .map_or(last.n, |p| p.n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailStatistics {
    pub level: f64,
    /// Quantile of `ΔR/(1 − R₀)`.
    pub quantile: f64,
    /// `Pr(ΔR > 0)`.
    pub p_improve: f64,
}

pub fn tail_statistics(batch: &PerturbationBatch, level: f64) -> Result<TailStatistics> {
    ensure(level > 0.0 && level < 1.0, || format!("level must lie in (0, 1), got {level}"))?;
    let headroom = require_headroom(batch.baseline)?;
    let normalized: Vec<f64> = batch.deltas.iter().map(|d| d / headroom).collect();
    Ok(TailStatistics {
        level,
        quantile: stats::quantile(&normalized, level),
        p_improve: p_improve(&batch.deltas),
    })
}

/// Fraction of strictly positive deltas.
pub fn p_improve(deltas: &[f64]) -> f64 {
    deltas.iter().filter(|d| **d > 0.0).count() as f64 / deltas.len() as f64
}

/// Standard error of `statistic` over candidate-resampled pools.
pub fn bootstrap_se(
    deltas: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    replicates: usize,
    stream: &mut Stream,
) -> Result<f64> {
    ensure(replicates >= 100, || format!("bootstrap needs >= 100 replicates, got {replicates}"))?;
    ensure(!deltas.is_empty(), || "bootstrap pool is empty".into())?;
    let m = deltas.len();
    let mut pool = vec![0.0; m];
    let values: Vec<f64> = (0..replicates)
        .map(|_| {
            for p in pool.iter_mut() {
                *p = deltas[stream.below(m)];
            }
            statistic(&pool)
        })
        .collect();
    Ok(stats::sample_variance(&values).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImproveEstimate {
    pub p_improve: f64,
    pub standard_error: f64,
    pub samples: usize,
}

/// Monte Carlo `Pr(J(θ + σu) − J(θ) > 0)` with its binomial standard error.
pub fn estimate_p_improve<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    sigma: f64,
    samples: usize,
    key: &StreamKey,
) -> Result<ImproveEstimate> {
    ensure(samples >= 100, || format!("p_improve needs >= 100 samples, got {samples}"))?;
    let batch = generate_batch(objective, theta, sigma, samples, 1, key)?;
    let p = p_improve(&batch.deltas);
    let n = batch.len();
    Ok(ImproveEstimate {
        p_improve: p,
        standard_error: (p * (1.0 - p) / n as f64).sqrt(),
        samples: n,
    })
}
