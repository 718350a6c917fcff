//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! Runs without the libtest harness so the lines always print.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::Value;
use varcurv::clss::{clss_run, fit_slope, ClssConfig, FitStatus};
use varcurv::es::{run_es, run_es_ensemble, EsConfig, Estimator};
use varcurv::landscape::{make_two_block, DoubleWellLandscape, QuadraticLandscape, TwoBlockSpec};
use varcurv::lyapunov::{covariance_recursion, solve_continuous_lyapunov, solve_discrete_lyapunov, LinearizedSystem};
use varcurv::metastability::{first_passage_times, kramers_escape_iters, KramersSetup};
use varcurv::ou::{
    amplitudes, effective_dimension, peak_time_two_mode, plateau_slope_curve, stationary_variance,
    terminal_plateau,
};
use varcurv::probes::{best_of_n, exact_best_of_n, generate_batch, summarize_best_of_n, PerturbationBatch};
use varcurv::slq::{lanczos, slq_quadrature, slq_trace, DenseOperator, SlqOptions};
use varcurv::{stats, Spectrum, StreamKey};
use varcurv_cli::experiments::produce;
use varcurv_cli::{run_experiment, ExperimentConfig};

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&configs().join(name), &o).expect("shipped config loads")
}

fn summary_of(cfg: &ExperimentConfig) -> Result<Value, String> {
    let out = produce(cfg).map_err(|e| e.to_string())?;
    let a = out
        .artifacts
        .iter()
        .find(|a| a.file == "summary.json")
        .ok_or("no summary")?;
    serde_json::from_str(&a.contents).map_err(|e| e.to_string())
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn two_block() -> QuadraticLandscape {
    make_two_block(TwoBlockSpec {
        dimension: 128,
        stiff: 16,
        lambda_hi: 1.0,
        lambda_lo: 0.05,
    })
    .unwrap()
}

/// Mean ensemble within 3 pooled SE of the closed form at >= 95% of iterations.
fn c01_ou_agreement() -> Outcome {
    let s = summary_of(&shipped("ou_compare.toml", &[]))?;
    let pops = s["populations"].as_array().ok_or("missing populations")?;
    let fr: Vec<(u64, f64)> = pops
        .iter()
        .map(|p| (p["population"].as_u64().unwrap(), p["fraction_within"].as_f64().unwrap()))
        .collect();
    verdict(
        pops.len() == 3 && fr.iter().all(|(_, f)| *f >= 0.95),
        format!("fraction within 3 SE per N: {fr:?} (need >= 0.95)"),
    )
}

fn c02_stationary_variance() -> Outcome {
    let sets = [
        (0.1, 1.0, 1.0, 1usize),
        (0.05, 2.0, 0.5, 4),
        (0.2, 1.0, 1.0, 8),
        (0.1, 5.0, 2.0, 16),
        (0.5, 2.0, 1.0, 2),
    ];
    let steps = 1_000_000;
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (i, &(alpha, lambda, sigma, n)) in sets.iter().enumerate() {
        let l = QuadraticLandscape::new(Spectrum::new(vec![lambda]).unwrap());
        let cfg = EsConfig {
            alpha,
            sigma,
            population: n,
            horizon: steps,
            estimator: Estimator::NoisyAscent,
            ..EsConfig::default()
        };
        let traj = run_es(&l, &[0.0], &cfg, &StreamKey::new(20).child("set", i as u64)).map_err(|e| e.to_string())?;
        // x² recovered from the reward, burn-in discarded.
        let burn = 1000;
        let x2: Vec<f64> = traj.rewards[burn..].iter().map(|j| 2.0 * (1.0 - j) / lambda).collect();
        let empirical = stats::mean(&x2);
        let v = alpha * sigma * sigma / (n as f64 * lambda * (2.0 - alpha * lambda));
        assert!((stationary_variance(lambda, alpha, sigma, n) - v).abs() <= 1e-15 * v);
        let rel = (empirical / v - 1.0).abs();
        worst = worst.max(rel);
        lines.push(format!("{rel:.4}"));
    }
    verdict(worst < 0.02, format!("relative errors [{}] (need < 0.02)", lines.join(", ")))
}

fn c03_plateau_ordering() -> Outcome {
    let s = summary_of(&shipped("ou_compare.toml", &[]))?;
    let pops = s["populations"].as_array().ok_or("missing populations")?;
    let t: Vec<(u64, f64, f64)> = pops
        .iter()
        .map(|p| {
            (
                p["population"].as_u64().unwrap(),
                p["tail_mean"].as_f64().unwrap(),
                p["tail_se"].as_f64().unwrap(),
            )
        })
        .collect();
    let z: Vec<f64> = t
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[0].2.powi(2) + w[1].2.powi(2)).sqrt())
        .collect();
    verdict(
        t.iter().map(|x| x.0).collect::<Vec<_>>() == [8, 32, 128] && z.iter().all(|z| *z > 2.0),
        format!(
            "tail means {:?}, gaps in pooled SE {z:?} (need > 2)",
            t.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>()
        ),
    )
}

fn c04_peak_time() -> Outcome {
    let spec = Spectrum::new(vec![1.0, 0.05]).unwrap();
    let (alpha, sigma, n) = (0.1, 1.0, 10);
    let amps = amplitudes(&spec, &[1.0, 0.0], alpha, sigma, n).map_err(|e| e.to_string())?;
    let closed = peak_time_two_mode(1.0, 0.05, amps.amplitudes[0], amps.amplitudes[1], alpha).ok_or("no interior peak")?;
    // Dense evaluation of the mixture on a 1e-3 grid.
    let mix = |t: f64| {
        amps.amplitudes
            .iter()
            .zip(&amps.rates)
            .map(|(a, g)| a * (-g * t).exp())
            .sum::<f64>()
    };
    let dense = (0..=100_000)
        .map(|k| k as f64 * 1e-3)
        .max_by(|a, b| mix(*a).total_cmp(&mix(*b)))
        .unwrap();
    let l = QuadraticLandscape::new(spec);
    let cfg = EsConfig {
        alpha,
        sigma,
        population: n,
        horizon: 100,
        estimator: Estimator::NoisyAscent,
        ..EsConfig::default()
    };
    let curve = run_es_ensemble(&l, &[1.0, 0.0], &cfg, &StreamKey::new(4), 100_000).map_err(|e| e.to_string())?;
    let sim = (0..curve.mean.len())
        .max_by(|a, b| curve.mean[*a].total_cmp(&curve.mean[*b]))
        .unwrap() as f64;
    verdict(
        (dense - closed).abs() <= 0.5 && (sim - closed).abs() <= 0.15 * closed,
        format!("closed form {closed:.3}, dense argmax {dense:.3}, simulated argmax {sim} (need within 15%)"),
    )
}

fn c05_spectroscopy_slope() -> Outcome {
    let pops = [8, 16, 32, 64, 128];
    let alpha = 0.1;
    let mut slopes = Vec::new();
    let mut worst_r2 = 1.0f64;
    let mut worst_slope = 0.0f64;
    for d in [4usize, 16, 64] {
        let spec = Spectrum::from_blocks(&[(1.0, d), (0.0, 128 - d)]).unwrap();
        let curve = plateau_slope_curve(&spec, alpha, 1.0, &pops).map_err(|e| e.to_string())?;
        let xs: Vec<f64> = curve.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = curve.iter().map(|p| p.1).collect();
        let fit = stats::linear_fit(&xs, &ys).ok_or("degenerate fit")?;
        let d_eff = effective_dimension(&spec, alpha).map_err(|e| e.to_string())?;
        worst_r2 = worst_r2.min(fit.r_squared);
        worst_slope = worst_slope.max((fit.slope - alpha / 4.0 * d_eff).abs() / (alpha / 4.0 * d_eff));
        slopes.push(fit.slope);
    }
    let ordered = slopes.windows(2).all(|w| w[1] > w[0]);
    verdict(
        worst_r2 >= 1.0 - 1e-12 && worst_slope <= 1e-10 && ordered,
        format!("min R^2 {worst_r2}, max slope rel error {worst_slope:e}, slopes d=4,16,64: {slopes:?}"),
    )
}

fn c06_clss_recovery() -> Outcome {
    let spec = Spectrum::from_blocks(&[(1.0, 16), (0.0, 112)]).unwrap();
    let cfg = ClssConfig::default();
    let mut exact_err = 0.0f64;
    for alpha in [0.1, 0.01] {
        let pts: Vec<(usize, Option<f64>)> = cfg
            .populations
            .iter()
            .map(|&n| (n, terminal_plateau(&spec, alpha, 1.0, n).ok()))
            .collect();
        let acc: Vec<(usize, f64)> = cfg.populations.iter().map(|&n| (n, 1.0)).collect();
        let fit = fit_slope(&pts, &acc, 1.0, alpha, &cfg);
        let d = effective_dimension(&spec, alpha).unwrap();
        exact_err = exact_err.max((fit.d_eff.unwrap_or(f64::NAN) - d).abs());
    }
    let l = two_block();
    let report = clss_run(&l, &vec![0.0; 128], &cfg, &StreamKey::new(11)).map_err(|e| e.to_string())?;
    let fit = &report.results[0].fit;
    let d = effective_dimension(l.spectrum(), cfg.alphas[0]).unwrap();
    let d_hat = fit.d_eff.unwrap_or(f64::NAN);
    let rel = (d_hat - d).abs() / d;
    verdict(
        exact_err <= 1e-10 && fit.status == FitStatus::Pass && rel <= 0.15,
        format!("exact-plateau error {exact_err:e}; Monte Carlo d_eff_hat {d_hat:.3} vs {d:.3} ({:.2}%, need <= 15%)", 100.0 * rel),
    )
}

fn random_symmetric(d: usize, seed: u64) -> DMatrix<f64> {
    let mut s = StreamKey::new(seed).stream();
    let g = DMatrix::from_fn(d, d, |_, _| s.normal());
    (&g + g.transpose()) / (2.0 * d as f64).sqrt()
}

fn c07_slq() -> Outcome {
    let d = 50;
    let a = random_symmetric(d, 70);
    let op = DenseOperator(a.clone());
    let eig = SymmetricEigen::new(a.clone());
    // Per-probe forms zᵀ f(A) z with f = x², exp, computed densely.
    let mut worst_form = 0.0f64;
    let mut s = StreamKey::new(71).stream();
    for _ in 0..10 {
        let z: Vec<f64> = (0..d).map(|_| s.rademacher()).collect();
        let tri = lanczos(&op, &z, d).map_err(|e| e.to_string())?;
        let (nodes, weights) = tri.quadrature();
        let nz = stats::dot(&z, &z);
        let zq = eig.eigenvectors.transpose() * nalgebra::DVector::from_column_slice(&z);
        for f in [|x: f64| x * x, |x: f64| x.exp()] {
            let quad = nz * nodes.iter().zip(&weights).map(|(t, w)| w * f(*t)).sum::<f64>();
            let dense: f64 = zq.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c * c * f(*l)).sum();
            worst_form = worst_form.max((quad - dense).abs() / dense.abs().max(1.0));
        }
    }
    let opts = SlqOptions::new(200, 30);
    let tr = slq_trace(&op, |x| x * x, &opts, &StreamKey::new(72)).map_err(|e| e.to_string())?;
    let oracle: f64 = eig.eigenvalues.iter().map(|l| l * l).sum();
    let rel = (tr.estimate - oracle).abs() / oracle;
    let quad = slq_quadrature(&op, &opts, &StreamKey::new(73)).map_err(|e| e.to_string())?;
    let norm_err = quad
        .probes
        .iter()
        .map(|p| (p.weights.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    verdict(
        worst_form <= 1e-8 && rel <= 0.05 && norm_err <= 1e-12,
        format!("m=D form error {worst_form:e}; tr(A^2) {:.3} vs {oracle:.3} ({:.2}%); weight sum error {norm_err:e}", tr.estimate, 100.0 * rel),
    )
}

fn c08_lyapunov() -> Outcome {
    let alpha = 0.1;
    let mut worst = 0.0f64;
    for k in 0..10u64 {
        let d = 6 + k as usize;
        let mut s = StreamKey::new(80).child_stream("system", k);
        let g = DMatrix::from_fn(d, d, |_, _| s.normal());
        let q = g.qr().q();
        let lambdas: Vec<f64> = (0..d).map(|_| 0.5 + 14.0 * s.uniform()).collect();
        let h = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas)) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let b = DMatrix::from_fn(d, d, |_, _| s.normal());
        let sigma = &b * b.transpose() / d as f64;
        let sys = LinearizedSystem::new(h, sigma, alpha).map_err(|e| e.to_string())?;
        let v = solve_discrete_lyapunov(&sys).map_err(|e| e.to_string())?;
        let rho = sys.spectral_radius();
        let steps = ((40.0f64).ln() / -rho.ln() * 20.0).ceil() as usize;
        let it = covariance_recursion(&sys, &DMatrix::zeros(d, d), steps.max(100));
        worst = worst.max((it - &v).norm());
    }
    let mut gaps = Vec::new();
    let mut ok_gap = true;
    for (lambda, a) in [(1.0, 0.05), (2.0, 0.05), (1.0, 0.1)] {
        let sys = LinearizedSystem::isotropic(&[lambda], 1.0, a).map_err(|e| e.to_string())?;
        let vd = solve_discrete_lyapunov(&sys).map_err(|e| e.to_string())?[(0, 0)];
        let vc = solve_continuous_lyapunov(&sys).map_err(|e| e.to_string())?[(0, 0)];
        let rel = (vd - vc) / vc;
        let target = a * lambda / 2.0;
        ok_gap &= ((rel - target) / target).abs() <= 0.1;
        gaps.push((rel, target));
    }
    verdict(
        worst <= 1e-8 && ok_gap,
        format!("max Frobenius gap {worst:e} over 10 systems; scalar relative gaps (value, alpha*lambda/2) {gaps:?}"),
    )
}

fn c09_kramers() -> Outcome {
    let dw = DoubleWellLandscape::new(1.0, 1.0).unwrap();
    let alpha = 0.05;
    let mfpt = |ratio: f64, reps: usize, label: u64| -> Result<(f64, f64), String> {
        let s = KramersSetup::with_barrier_ratio(dw.clone(), alpha, ratio).map_err(|e| e.to_string())?;
        let pred = kramers_escape_iters(&s).map_err(|e| e.to_string())?;
        let s = s.horizon((20.0 * pred.expected_iterations) as usize).replicates(reps);
        let times = first_passage_times(&s, &StreamKey::new(90).child("ratio", label)).map_err(|e| e.to_string())?;
        if times.iter().any(|t| t.is_none()) {
            return Err(format!("censored first passages at ratio {ratio}"));
        }
        let t: Vec<f64> = times.iter().map(|t| t.unwrap() as f64).collect();
        Ok((stats::mean(&t), pred.expected_iterations))
    };
    let ratios = [4.0, 6.0, 8.0];
    let mut logs = Vec::new();
    for (i, r) in ratios.iter().enumerate() {
        logs.push(mfpt(*r, 200, i as u64)?.0.ln());
    }
    let fit = stats::linear_fit(&ratios, &logs).ok_or("degenerate fit")?;
    let (emp5, pred5) = mfpt(5.0, 500, 9)?;
    let factor = (emp5 / pred5).max(pred5 / emp5);
    verdict(
        (fit.slope - 1.0).abs() <= 0.25 && factor <= 2.0,
        format!("slope {:.3} (need 1 +/- 0.25); ratio 5 empirical {emp5:.0} vs predicted {pred5:.0} (factor {factor:.3})", fit.slope),
    )
}

fn c10_regimes() -> Outcome {
    let m = summary_of(&shipped("double_well_metastable.toml", &[]))?;
    let h = summary_of(&shipped("double_well_hopping.toml", &[]))?;
    let d = summary_of(&shipped("double_well_delocalized.toml", &[]))?;
    let f = |v: &Value| v["hop_fraction"].as_f64().unwrap_or(f64::NAN);
    let imb = d["imbalance"].as_f64().unwrap_or(f64::NAN);
    verdict(
        f(&m) == 0.0 && f(&h) > 0.1 && f(&h) < 0.9 && f(&d) >= 0.9 && imb.abs() < 0.1,
        format!("hop fractions {} / {} / {}, delocalized imbalance {imb}", f(&m), f(&h), f(&d)),
    )
}

fn c11_best_of_n() -> Outcome {
    let mut s = StreamKey::new(110).stream();
    let mut worst_z = 0.0f64;
    for p in 0..20u64 {
        let m = 20 + s.below(60);
        let n = 2 + s.below(m - 2);
        let pool: Vec<f64> = (0..m).map(|_| s.normal()).collect();
        let batch = PerturbationBatch::from_deltas(0.0, pool.clone()).unwrap();
        let exact = exact_best_of_n(&pool, n).unwrap();
        let mc = best_of_n(&batch, n, 4000, &mut StreamKey::new(111).child_stream("pool", p)).unwrap();
        worst_z = worst_z.max((mc.value - exact).abs() / mc.standard_error);
    }
    // Exhaustive enumeration for every M <= 12 and every N.
    let mut worst_enum = 0.0f64;
    for m in 1..=12usize {
        let pool: Vec<f64> = (0..m).map(|_| s.normal()).collect();
        for n in 1..=m {
            let (mut total, mut count) = (0.0, 0u64);
            for mask in 0u32..(1 << m) {
                if mask.count_ones() as usize == n {
                    total += (0..m).filter(|i| mask >> i & 1 == 1).map(|i| pool[i]).fold(f64::NEG_INFINITY, f64::max);
                    count += 1;
                }
            }
            let e = exact_best_of_n(&pool, n).unwrap();
            worst_enum = worst_enum.max((e - total / count as f64).abs());
        }
    }
    verdict(
        worst_z <= 3.0 && worst_enum <= 1e-12,
        format!("max |MC - exact| {worst_z:.2} SE over 20 pools; enumeration max gap {worst_enum:e}"),
    )
}

fn c12_degeneracy() -> Outcome {
    let k = 8;
    let stats_for = |dim: usize, seed: u64| -> Result<(f64, f64, f64, f64), String> {
        let spec = Spectrum::from_blocks(&[(1.0, k), (0.0, dim - k)]).unwrap();
        let l = QuadraticLandscape::new(spec);
        let mut theta = vec![0.0; dim];
        theta[..k].iter_mut().for_each(|t| *t = 0.5);
        let key = StreamKey::new(seed);
        let batches: Vec<PerturbationBatch> = (0..40)
            .map(|b| generate_batch(&l, &theta, 0.1, 240, 1, &key.child("batch", b)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let est = summarize_best_of_n(&batches, &[30], 0.0, 0, &key).map_err(|e| e.to_string())?;
        let pooled: Vec<f64> = batches.iter().flat_map(|b| b.deltas.iter().copied()).collect();
        let p = varcurv::probes::p_improve(&pooled);
        let p_se = (p * (1.0 - p) / pooled.len() as f64).sqrt();
        Ok((p, p_se, est.points[0].mean, est.points[0].standard_error))
    };
    let (p1, ps1, b1, bs1) = stats_for(32, 120)?;
    let (p2, ps2, b2, bs2) = stats_for(128, 121)?;
    let zp = (p1 - p2).abs() / (ps1 * ps1 + ps2 * ps2).sqrt();
    let zb = (b1 - b2).abs() / (bs1 * bs1 + bs2 * bs2).sqrt();
    verdict(
        zp <= 3.0 && zb <= 3.0,
        format!("p_imp {p1:.4} vs {p2:.4} ({zp:.2} SE); best-of-30 {b1:.5} vs {b2:.5} ({zb:.2} SE)"),
    )
}

fn c13_determinism() -> Outcome {
    let runs: [(&str, &[&str]); 8] = [
        ("smoke.toml", &[]),
        ("ou_compare.toml", &["ou_compare.replicates=8", "ou_compare.horizon=200"]),
        ("spectroscopy.toml", &[]),
        ("clss.toml", &["clss.seeds=8", "clss.horizon=600", "clss.window=200", "clss.min_valid=2"]),
        ("slq_metrics.toml", &[]),
        ("double_well_hopping.toml", &["double_well.replicates=64", "double_well.horizon=2000"]),
        ("best_of_n.toml", &[]),
        ("clss_double_well.toml", &["clss.seeds=4", "clss.horizon=600", "clss.window=200", "clss.min_valid=2"]),
    ];
    let mut mismatches = Vec::new();
    for (name, o) in runs {
        let cfg = shipped(name, o);
        let mut manifests = Vec::new();
        for threads in [1, 3] {
            let root = tempfile::tempdir().map_err(|e| e.to_string())?;
            run_experiment(&cfg, Some(root.path()), threads).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(cfg.output_path(Some(root.path())).join("manifest.json")).map_err(|e| e.to_string())?;
            manifests.push(bytes);
        }
        if manifests[0] != manifests[1] {
            mismatches.push(name);
        }
    }
    verdict(
        mismatches.is_empty(),
        format!("8 experiments at 1 and 3 threads; manifest mismatches {mismatches:?}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("C01 OU agreement", c01_ou_agreement),
        ("C02 stationary variance", c02_stationary_variance),
        ("C03 plateau ordering", c03_plateau_ordering),
        ("C04 peak time", c04_peak_time),
        ("C05 spectroscopy slope", c05_spectroscopy_slope),
        ("C06 CLSS recovery", c06_clss_recovery),
        ("C07 SLQ exactness and accuracy", c07_slq),
        ("C08 Lyapunov duality", c08_lyapunov),
        ("C09 Kramers exponent", c09_kramers),
        ("C10 regimes", c10_regimes),
        ("C11 best-of-N oracle equivalence", c11_best_of_n),
        ("C12 degeneracy and accessibility", c12_degeneracy),
        ("C13 determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
