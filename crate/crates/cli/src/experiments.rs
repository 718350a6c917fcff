//! One function per experiment kind, each turning a validated config into
//! in-memory artifacts. Nothing here touches the filesystem.

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use varcurv::clss::{clss_run, FitStatus};
use varcurv::es::{run_es, run_es_ensemble, CurveAccumulator, EsConfig};
use varcurv::landscape::{
    make_two_block, random_orthogonal, DoubleWellLandscape, QuadraticLandscape, TwoBlockSpec,
};
use varcurv::metastability::{
    classify_regime, hop_probability, kramers_escape_iters, simulate_double_well, within_well_variance,
    KramersSetup, RegimeBands, SimulationOptions,
};
use varcurv::ou::{effective_dimension, ou_trajectory, peak_time_general, terminal_plateau};
use varcurv::probes::{
    bootstrap_se, generate_batch, p_improve, saturation_population, summarize_best_of_n, tail_statistics,
    PerturbationBatch,
};
use varcurv::slq::{
    exact_metrics, hvp_from_objective, slq_quadrature, spectral_metrics, symmetrize, DenseOperator, FnOperator,
    GradientSource, MatVec, SlqOptions,
};
use varcurv::{stats, Objective, Spectrum, StreamKey};

use crate::config::{
    BasisKind, ExperimentConfig, ExperimentKind, HvpGradient, LandscapeKind, SlqOperator, SlqPoint,
};
use crate::error::{CliError, CliResult, Context};
use crate::output::{Artifact, RESOLVED_CONFIG};

pub const SUMMARY: &str = "summary.json";

pub enum Landscape {
    Quadratic(QuadraticLandscape),
    DoubleWell(DoubleWellLandscape),
}

impl Landscape {
    pub fn objective(&self) -> &dyn Objective {
        match self {
            Self::Quadratic(q) => q,
            Self::DoubleWell(w) => w,
        }
    }

    pub fn quadratic(&self) -> CliResult<&QuadraticLandscape> {
        match self {
            Self::Quadratic(q) => Ok(q),
            Self::DoubleWell(_) => Err(CliError::Config(
                "invalid value for `landscape.kind`: this experiment needs a quadratic landscape".into(),
            )),
        }
    }

    pub fn double_well(&self) -> CliResult<&DoubleWellLandscape> {
        match self {
            Self::DoubleWell(w) => Ok(w),
            Self::Quadratic(_) => Err(CliError::Config(
                "invalid value for `landscape.kind`: this experiment needs a double well".into(),
            )),
        }
    }
}

pub fn build_landscape(cfg: &ExperimentConfig) -> CliResult<Landscape> {
    let l = &cfg.landscape;
    let root = StreamKey::new(cfg.seed);
    if l.kind == LandscapeKind::DoubleWell {
        let mut w = DoubleWellLandscape::new(l.lambda, l.half_separation).module("landscape")?;
        if !l.block.is_empty() {
            w = w.with_block(Spectrum::new(l.block.clone()).module("landscape")?);
        }
        return Ok(Landscape::DoubleWell(w.with_noise(l.noise).module("landscape")?));
    }
    let mut q = match l.kind {
        LandscapeKind::TwoBlock => make_two_block(TwoBlockSpec {
            dimension: l.dimension,
            stiff: l.stiff,
            lambda_hi: l.lambda_hi,
            lambda_lo: l.lambda_lo,
        })
        .module("landscape")?,
        _ => QuadraticLandscape::new(Spectrum::new(l.eigenvalues.clone()).module("landscape")?),
    };
    let d = q.dimension();
    if l.basis == BasisKind::Random {
        let basis = random_orthogonal(d, &mut root.child_stream("basis", 0));
        q = q.with_basis(basis).module("landscape")?;
    }
    if !l.offset.is_empty() {
        if l.offset.len() != d {
            return Err(CliError::Config(format!(
                "invalid value for `landscape.offset`: expected {d} entries, got {}",
                l.offset.len()
            )));
        }
        q = q.with_offset(l.offset.clone()).module("landscape")?;
    }
    Ok(Landscape::Quadratic(
        q.with_peak(l.peak).with_noise(l.noise).module("landscape")?,
    ))
}

/// Initial point per the `[start]` rules.
pub fn start_point(cfg: &ExperimentConfig, landscape: &Landscape) -> CliResult<Vec<f64>> {
    let d = landscape.objective().dimension();
    if !cfg.start.theta0.is_empty() {
        if cfg.start.theta0.len() != d {
            return Err(CliError::Config(format!(
                "invalid value for `start.theta0`: expected {d} entries, got {}",
                cfg.start.theta0.len()
            )));
        }
        return Ok(cfg.start.theta0.clone());
    }
    match landscape {
        Landscape::Quadratic(q) => {
            let top = q.spectrum().max();
            let x: Vec<f64> = q
                .spectrum()
                .values()
                .iter()
                .map(|&l| if top > 0.0 && l == top { cfg.start.stiff } else { cfg.start.flat })
                .collect();
            q.from_eigenbasis(&x).module("landscape")
        }
        Landscape::DoubleWell(w) => {
            let mut theta = vec![0.0; d];
            let a = w.half_separation();
            theta[0] = if cfg.double_well.start_positive { a } else { -a };
            Ok(theta)
        }
    }
}

pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// Set when a gated analysis returned FAIL as a value.
    pub fail_by_design: bool,
}

/// Runs the configured experiment. Artifacts come back in a fixed order
/// with the resolved config first.
pub fn produce(cfg: &ExperimentConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let landscape = build_landscape(cfg)?;
    let key = StreamKey::new(cfg.seed).child(cfg.experiment.name(), 0);
    let mut out = match cfg.experiment {
        ExperimentKind::EsRun => es_run(cfg, &landscape, &key)?,
        ExperimentKind::OuCompare => ou_compare(cfg, &landscape, &key)?,
        ExperimentKind::Spectroscopy => spectroscopy(cfg, &landscape)?,
        ExperimentKind::Clss => clss(cfg, &landscape, &key)?,
        ExperimentKind::SlqMetrics => slq_metrics(cfg, &landscape, &key)?,
        ExperimentKind::DoubleWell => double_well(cfg, &landscape, &key)?,
        ExperimentKind::BestOfN => best_of_n(cfg, &landscape, &key)?,
    };
    out.artifacts
        .insert(0, Artifact::new(RESOLVED_CONFIG, "cli", cfg.resolved_toml()));
    Ok(out)
}

fn done(artifacts: Vec<Artifact>) -> CliResult<RunOutput> {
    Ok(RunOutput {
        artifacts,
        fail_by_design: false,
    })
}

fn es_run(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let s = &cfg.es;
    let obj = landscape.objective();
    let theta0 = start_point(cfg, landscape)?;
    let es = EsConfig {
        alpha: s.alpha,
        sigma: s.sigma,
        population: s.population,
        horizon: s.horizon,
        group: s.group,
        antithetic: s.antithetic,
        baseline: s.baseline,
        estimator: s.estimator,
        state_stride: 0,
    };
    if s.replicates == 1 {
        let traj = run_es(obj, &theta0, &es, key).module("es_core")?;
        let (argmax, max) = argmax(&traj.rewards);
        let summary = json!({
            "experiment": "es_run",
            "landscape": obj.describe(),
            "initial_reward": traj.rewards[0],
            "final_reward": traj.rewards[traj.rewards.len() - 1],
            "max_reward": max,
            "argmax_iteration": argmax,
            "final_distance_from_start": stats::norm(
                &traj.final_theta.iter().zip(&theta0).map(|(a, b)| a - b).collect::<Vec<_>>()
            ),
            "rewards_clean": traj.rewards_clean,
        });
        return done(vec![
            Artifact::new("trajectory.csv", "es_core", traj.to_csv()),
            Artifact::json(SUMMARY, "es_core", &summary),
        ]);
    }
    let curve = run_es_ensemble(obj, &theta0, &es, key, s.replicates).module("es_core")?;
    let (argmax, max) = argmax(&curve.mean);
    let summary = json!({
        "experiment": "es_run",
        "landscape": obj.describe(),
        "replicates": s.replicates,
        "initial_reward": curve.mean[0],
        "final_reward": curve.mean[curve.mean.len() - 1],
        "max_mean_reward": max,
        "argmax_iteration": argmax,
    });
    done(vec![
        Artifact::new("ensemble.csv", "es_core", ensemble_csv(&curve.mean, &curve.se)),
        Artifact::json(SUMMARY, "es_core", &summary),
    ])
}

fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

fn ensemble_csv(mean: &[f64], se: &[f64]) -> String {
    let mut out = String::from("iteration,mean,se\n");
    for (t, (m, s)) in mean.iter().zip(se).enumerate() {
        out.push_str(&format!("{t},{m},{s}\n"));
    }
    out
}

/// Ensemble mean curve plus each replicate's tail-window mean.
pub struct TailedEnsemble {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub tail_means: Vec<f64>,
}

pub fn tailed_ensemble(
    obj: &dyn Objective,
    theta0: &[f64],
    es: &EsConfig,
    key: &StreamKey,
    replicates: usize,
    tail_window: usize,
) -> CliResult<TailedEnsemble> {
    let mut acc = CurveAccumulator::new(es.horizon + 1);
    let mut tail_means = Vec::with_capacity(replicates);
    const CHUNK: usize = 64;
    for start in (0..replicates).step_by(CHUNK) {
        let end = (start + CHUNK).min(replicates);
        let curves: Vec<varcurv::Result<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|r| run_es(obj, theta0, es, &key.child("rep", r as u64)).map(|t| t.rewards))
            .collect();
        for c in curves {
            let c = c.module("es_core")?;
            tail_means.push(stats::mean(&c[c.len() - tail_window..]));
            acc.push(&c);
        }
    }
    let curve = acc.finish();
    Ok(TailedEnsemble {
        mean: curve.mean,
        se: curve.se,
        tail_means,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OuPopulationSummary {
    pub population: usize,
    pub kappa: f64,
    pub fraction_within: f64,
    pub passed: bool,
    pub max_abs_z: f64,
    pub tail_mean: f64,
    pub tail_se: f64,
    pub predicted_plateau: f64,
    pub predicted_peaks: Vec<f64>,
    pub simulated_argmax: usize,
}

fn ou_compare(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let s = &cfg.ou_compare;
    let q = landscape.quadratic()?;
    let theta0 = start_point(cfg, landscape)?;
    let x0 = q.to_eigenbasis(&theta0).module("landscape")?;
    let mut simulated = String::from("population,iteration,mean,se\n");
    let mut analytic = String::from("population,iteration,reward\n");
    let mut summaries = Vec::new();
    for &n in &s.populations {
        let pred = ou_trajectory(q.spectrum(), &x0, s.alpha, s.sigma, n, s.horizon).module("ou_analytics")?;
        let es = EsConfig {
            alpha: s.alpha,
            sigma: s.sigma,
            population: n,
            horizon: s.horizon,
            estimator: s.estimator,
            ..EsConfig::default()
        };
        let ens = tailed_ensemble(q, &theta0, &es, &key.child("pop", n as u64), s.replicates, s.tail_window)?;
        let peak = q.peak();
        let mut within = 0usize;
        let mut max_z = 0.0f64;
        for t in 0..=s.horizon {
            let predicted = peak - 1.0 + pred.expected_reward[t];
            let gap = (ens.mean[t] - predicted).abs();
            if gap <= (s.tolerance_se * ens.se[t]).max(1e-12) {
                within += 1;
            }
            if ens.se[t] > 0.0 {
                max_z = max_z.max(gap / ens.se[t]);
            }
            simulated.push_str(&format!("{n},{t},{},{}\n", ens.mean[t], ens.se[t]));
            analytic.push_str(&format!("{n},{t},{predicted}\n"));
        }
        let fraction = within as f64 / (s.horizon + 1) as f64;
        let (tail_mean, tail_se) = stats::mean_se(&ens.tail_means);
        summaries.push(OuPopulationSummary {
            population: n,
            kappa: s.sigma * s.sigma / n as f64,
            fraction_within: fraction,
            passed: fraction >= s.min_fraction,
            max_abs_z: max_z,
            tail_mean,
            tail_se,
            predicted_plateau: pred.terminal_plateau.map_or(f64::NAN, |j| peak - 1.0 + j),
            predicted_peaks: peak_time_general(&pred).maxima,
            simulated_argmax: argmax(&ens.mean).0,
        });
    }
    let summary = json!({
        "experiment": "ou_compare",
        "landscape": q.describe(),
        "tolerance_se": s.tolerance_se,
        "min_fraction": s.min_fraction,
        "populations": summaries,
    });
    done(vec![
        Artifact::new("simulated.csv", "es_core", simulated),
        Artifact::new("analytic.csv", "ou_analytics", analytic),
        Artifact::json(SUMMARY, "ou_analytics", &summary),
    ])
}

fn spectroscopy(cfg: &ExperimentConfig, landscape: &Landscape) -> CliResult<RunOutput> {
    let s = &cfg.spectroscopy;
    let q = landscape.quadratic()?;
    let mut csv = String::from("alpha,population,kappa,gap\n");
    let mut rows = Vec::new();
    for &alpha in &s.alphas {
        let curve = varcurv::ou::plateau_slope_curve(q.spectrum(), alpha, s.sigma, &s.populations)
            .module("ou_analytics")?;
        for (&n, (k, g)) in s.populations.iter().zip(&curve) {
            csv.push_str(&format!("{alpha},{n},{k},{g}\n"));
        }
        let xs: Vec<f64> = curve.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = curve.iter().map(|p| p.1).collect();
        let fit = stats::linear_fit(&xs, &ys);
        let d_eff = effective_dimension(q.spectrum(), alpha).module("ou_analytics")?;
        rows.push(json!({
            "alpha": alpha,
            "slope": fit.as_ref().map(|f| f.slope),
            "intercept": fit.as_ref().map(|f| f.intercept),
            "r_squared": fit.as_ref().map(|f| f.r_squared),
            "d_eff": d_eff,
            "predicted_slope": alpha / 4.0 * d_eff,
            "d_eff_from_slope": fit.as_ref().map(|f| 4.0 * f.slope / alpha),
        }));
    }
    let summary = json!({
        "experiment": "spectroscopy",
        "landscape": q.describe(),
        "rank": q.spectrum().rank(),
        "alphas": rows,
    });
    done(vec![
        Artifact::new("curve.csv", "ou_analytics", csv),
        Artifact::json(SUMMARY, "ou_analytics", &summary),
    ])
}

fn clss(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let obj = landscape.objective();
    let theta_star = match landscape {
        Landscape::Quadratic(q) => q.maximizer().to_vec(),
        Landscape::DoubleWell(_) => start_point(cfg, landscape)?,
    };
    let report = clss_run(obj, &theta_star, &cfg.clss, key).module("clss")?;
    let mut csv = String::from("alpha,population,kappa,gap\n");
    let mut fits = Vec::new();
    for r in &report.results {
        for p in &r.fit.points {
            csv.push_str(&format!("{},{},{},{}\n", r.alpha, p.population, p.kappa, p.gap));
        }
        let closed_form = match landscape {
            Landscape::Quadratic(q) => Some(effective_dimension(q.spectrum(), r.alpha).module("ou_analytics")?),
            Landscape::DoubleWell(_) => None,
        };
        fits.push(json!({
            "alpha": r.alpha,
            "status": r.fit.status,
            "reasons": r.fit.reasons,
            "d_eff_hat": r.fit.d_eff,
            "d_eff_raw": r.fit.d_eff_raw,
            "d_eff_closed_form": closed_form,
            "slope": r.fit.slope,
            "intercept": r.fit.intercept,
            "r_squared": r.fit.r_squared,
            "acceptance": r.fit.acceptance,
        }));
    }
    let fail = report.results.iter().any(|r| r.fit.status == FitStatus::Fail);
    let summary = json!({
        "experiment": "clss",
        "landscape": obj.describe(),
        "status": if fail { "FAIL" } else { "PASS" },
        "artifact_defaults": {
            "tau_loc": cfg.clss.tau_loc.is_none(),
            "tau_stat": cfg.clss.tau_stat.is_none(),
        },
        "fits": fits,
    });
    Ok(RunOutput {
        artifacts: vec![
            Artifact::json("report.json", "clss", &report),
            Artifact::new("points.csv", "clss", csv),
            Artifact::json(SUMMARY, "clss", &summary),
        ],
        fail_by_design: fail,
    })
}

fn dense_from(op: &dyn MatVec) -> CliResult<DenseOperator> {
    symmetrize(op).module("slq")
}

fn slq_metrics(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let s = &cfg.slq;
    let opts = SlqOptions::new(s.probes, s.steps).with_probe_kind(s.probe_kind);
    let op: Box<dyn MatVec + '_> = match s.operator {
        SlqOperator::RandomSymmetric => {
            let d = s.dimension;
            let mut stream = StreamKey::new(cfg.seed).child_stream("operator", 0);
            let g = nalgebra::DMatrix::from_fn(d, d, |_, _| stream.normal());
            let a = (&g + g.transpose()) / (2.0 * d as f64).sqrt();
            Box::new(DenseOperator(a))
        }
        SlqOperator::Hessian => {
            let obj = landscape.objective();
            let theta = match (s.at, landscape) {
                (SlqPoint::Start, _) => start_point(cfg, landscape)?,
                (SlqPoint::Reference, Landscape::Quadratic(q)) => q.maximizer().to_vec(),
                (SlqPoint::Reference, Landscape::DoubleWell(_)) => vec![0.0; obj.dimension()],
            };
            let source = match s.gradient {
                HvpGradient::Exact => GradientSource::Exact,
                HvpGradient::Smoothed => GradientSource::Smoothed {
                    sigma: s.smoothing_sigma,
                    population: s.smoothing_population,
                    key: key.child("hvp", 0),
                },
            };
            let hvp = hvp_from_objective(obj, &theta, s.fd_step, source).module("slq")?;
            // Loss curvature −∇²J, symmetrized so smoothed estimates pass the guard.
            let loss = FnOperator::new(obj.dimension(), move |v: &[f64]| {
                hvp.apply(v)
                    .map(|w| w.into_iter().map(|x| -x).collect())
                    .unwrap_or_else(|_| vec![f64::NAN; v.len()])
            });
            Box::new(dense_from(&loss)?)
        }
    };
    let metrics = spectral_metrics(op.as_ref(), &opts, key, s.seeds).module("slq")?;
    let quad = slq_quadrature(op.as_ref(), &opts, &key.child("seed", 0)).module("slq")?;
    let d = op.dimension();
    let exact = if d <= 512 {
        let dense = dense_from(op.as_ref())?;
        let eig = nalgebra::SymmetricEigen::new(dense.0).eigenvalues;
        let mut eigs: Vec<f64> = eig.iter().copied().collect();
        eigs.sort_by(|a, b| b.total_cmp(a));
        exact_metrics(&eigs).ok()
    } else {
        None
    };
    let summary = json!({
        "experiment": "slq_metrics",
        "operator": s.operator,
        "dimension": d,
        "probes": s.probes,
        "steps": s.steps,
        "seeds": s.seeds,
        "slq": metrics,
        "exact": exact,
    });
    done(vec![
        Artifact::new("ritz.csv", "slq", quad.to_csv()),
        Artifact::json(SUMMARY, "slq", &summary),
    ])
}

pub fn kramers_setup(cfg: &ExperimentConfig, w: &DoubleWellLandscape) -> CliResult<KramersSetup> {
    let s = &cfg.double_well;
    let sigma = match (s.sigma, s.barrier_ratio) {
        (Some(sigma), _) => sigma,
        (None, Some(ratio)) => (2.0 * w.barrier() / ratio * s.population as f64 / s.alpha).sqrt(),
        (None, None) => return Err(CliError::Config("invalid value for `double_well.sigma`: unset".into())),
    };
    let mut setup = KramersSetup::new(w.clone(), s.alpha, sigma, s.population)
        .horizon(s.horizon)
        .replicates(s.replicates)
        .start_positive(s.start_positive);
    setup.hysteresis = s.hysteresis;
    setup.validate().module("metastability")?;
    Ok(setup)
}

fn double_well(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let s = &cfg.double_well;
    let w = landscape.double_well()?;
    let setup = kramers_setup(cfg, w)?;
    let opts = SimulationOptions {
        recorded_trajectories: s.recorded_trajectories,
        stride: s.stride,
        bins: s.bins,
        stop_at_first_hop: false,
    };
    let out = simulate_double_well(&setup, &opts, key).module("metastability")?;
    let horizon = s.horizon as f64;
    let bands = RegimeBands {
        c_lo: s.c_lo,
        c_hi: s.c_hi,
    };
    let kramers = kramers_escape_iters(&setup).module("metastability")?;
    let hop = hop_probability(&setup, horizon).module("metastability")?;
    let regime = classify_regime(&setup, horizon, bands).module("metastability")?;
    let (var_cont, var_disc) = within_well_variance(&setup);
    let summary = json!({
        "experiment": "double_well",
        "sigma": setup.sigma,
        "temperature": setup.temperature(),
        "barrier_ratio": setup.barrier_ratio(),
        "barrier": {
            "loss": w.barrier(),
            "reward": -w.barrier(),
        },
        "hop_fraction": out.hops.hop_fraction,
        "mean_first_passage": out.hops.mean_first_passage,
        "imbalance": out.histogram.imbalance,
        "tail_variance": out.tail_variance,
        "predicted": {
            "kramers": kramers,
            "hop_probability": hop,
            "regime": regime,
            "within_well_variance": { "continuous": var_cont, "discrete": var_disc },
        },
    });
    done(vec![
        Artifact::new("trajectories.csv", "metastability", out.trajectories_csv()),
        Artifact::new("histogram.csv", "metastability", out.histogram.to_csv()),
        Artifact::json(SUMMARY, "metastability", &summary),
    ])
}

fn best_of_n(cfg: &ExperimentConfig, landscape: &Landscape, key: &StreamKey) -> CliResult<RunOutput> {
    let s = &cfg.best_of_n;
    let obj = landscape.objective();
    let theta0 = start_point(cfg, landscape)?;
    let batches = (0..s.batches)
        .map(|b| generate_batch(obj, &theta0, s.sigma, s.candidates, s.group, &key.child("batch", b as u64)))
        .collect::<varcurv::Result<Vec<_>>>()
        .module("probes")?;
    let baseline = stats::mean(&batches.iter().map(|b| b.baseline).collect::<Vec<_>>());
    let estimate = summarize_best_of_n(&batches, &s.n_list, baseline, s.subset_samples, &key.child("subsets", 0))
        .module("probes")?;
    let n90 = saturation_population(&estimate);
    let pooled: Vec<f64> = batches.iter().flat_map(|b| b.deltas.iter().copied()).collect();
    let pool = PerturbationBatch::from_deltas(baseline, pooled.clone()).module("probes")?;
    let tail = tail_statistics(&pool, s.tail_level).ok();
    let headroom = 1.0 - baseline;
    let level = s.tail_level;
    let mut boot = key.child_stream("bootstrap", 0);
    let quantile_se = if headroom > 0.0 {
        Some(
            bootstrap_se(&pooled, |v| stats::quantile(v, level) / headroom, s.bootstrap, &mut boot)
                .module("probes")?,
        )
    } else {
        None
    };
    let p = p_improve(&pooled);
    let mut batch_csv = String::from("batch,candidate,delta\n");
    for (b, batch) in batches.iter().enumerate() {
        for (j, d) in batch.deltas.iter().enumerate() {
            batch_csv.push_str(&format!("{b},{j},{d}\n"));
        }
    }
    let mut curve = String::from("n,mean,se,half_width,normalized,normalized_half_width\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for pt in &estimate.points {
        curve.push_str(&format!(
            "{},{},{},{},{},{}\n",
            pt.n,
            pt.mean,
            pt.standard_error,
            pt.half_width,
            opt(pt.normalized),
            opt(pt.normalized_half_width)
        ));
    }
    let summary = json!({
        "experiment": "best_of_n",
        "landscape": obj.describe(),
        "baseline": baseline,
        "headroom_refused": estimate.headroom_refused,
        "subset_samples": s.subset_samples,
        "excluded_candidates": batches.iter().map(|b| b.excluded).sum::<usize>(),
        "n90": n90.as_ref().ok(),
        "n90_error": n90.as_ref().err().map(|e| e.to_string()),
        "tail": tail,
        "tail_quantile_bootstrap_se": quantile_se,
        "p_improve": p,
        "p_improve_se": (p * (1.0 - p) / pooled.len() as f64).sqrt(),
        "points": estimate.points.iter().map(|pt| json!({
            "n": pt.n,
            "mean": pt.mean,
            "se": pt.standard_error,
            "normalized": pt.normalized,
        })).collect::<Vec<_>>(),
    });
    done(vec![
        Artifact::new("batches.csv", "probes", batch_csv),
        Artifact::new("best_of_n.csv", "probes", curve),
        Artifact::json(SUMMARY, "probes", &summary),
    ])
}

/// Closed-form reward plateau for a quadratic landscape, used by verify.
pub fn plateau_for(q: &QuadraticLandscape, alpha: f64, sigma: f64, n: usize) -> CliResult<f64> {
    Ok(q.peak() - 1.0 + terminal_plateau(q.spectrum(), alpha, sigma, n).module("ou_analytics")?)
}
