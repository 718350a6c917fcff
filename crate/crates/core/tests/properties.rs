use nalgebra::DMatrix;
use proptest::prelude::*;
use varcurv::es::{es_gradient_estimate, run_es, run_es_ensemble, EsConfig, Estimator};
use varcurv::landscape::{random_orthogonal, DoubleWellLandscape, QuadraticLandscape};
use varcurv::lyapunov::{solve_discrete_lyapunov, LinearizedSystem};
use varcurv::ou::{effective_dimension, ou_trajectory, stationary_variance, terminal_plateau};
use varcurv::probes::exact_best_of_n;
use varcurv::slq::{slq_trace, DiagonalOperator, SlqOptions};
use varcurv::{stats, Objective, Spectrum, StreamKey};

fn spectrum_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..3.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rotated_quadratic_matches_diagonal_in_eigen_coordinates(
        lambdas in spectrum_strategy(8),
        seed in any::<u64>(),
        coords in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let d = lambdas.len();
        let spec = Spectrum::new(lambdas).unwrap();
        let diag = QuadraticLandscape::new(spec.clone());
        let basis = random_orthogonal(d, &mut StreamKey::new(seed).stream());
        let rotated = QuadraticLandscape::new(spec).with_basis(basis).unwrap();
        let x = &coords[..d];
        let theta = rotated.from_eigenbasis(x).unwrap();
        let a = rotated.value(&theta).unwrap();
        let b = diag.value(x).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        let back = rotated.to_eigenbasis(&theta).unwrap();
        for (u, v) in back.iter().zip(x) {
            prop_assert!((u - v).abs() <= 1e-10);
        }
    }

    #[test]
    fn double_well_is_even(
        lambda in 0.1f64..4.0,
        a in 0.2f64..3.0,
        theta in prop::collection::vec(-4.0f64..4.0, 1..6),
    ) {
        let mut dw = DoubleWellLandscape::new(lambda, a).unwrap();
        if theta.len() > 1 {
            dw = dw.with_block(Spectrum::new(vec![1.0; theta.len() - 1]).unwrap());
        }
        let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
        let (p, n) = (dw.value(&theta).unwrap(), dw.value(&neg).unwrap());
        prop_assert!((p - n).abs() <= 1e-12 * (1.0 + p.abs()));
    }

    #[test]
    fn effective_dimension_lies_between_rank_and_twice_rank(
        lambdas in spectrum_strategy(32),
        alpha in 0.001f64..0.3,
    ) {
        let spec = Spectrum::new(lambdas).unwrap();
        prop_assume!(alpha * spec.max() < 1.0);
        let d = effective_dimension(&spec, alpha).unwrap();
        let r = spec.rank() as f64;
        prop_assert!(d >= r - 1e-9 && d <= 2.0 * r + 1e-9);
    }

    #[test]
    fn stationary_variance_grows_with_step_and_shrinks_with_population(
        lambda in 0.01f64..5.0,
        alpha in 0.001f64..0.3,
        sigma in 0.01f64..3.0,
        n in 1usize..256,
    ) {
        prop_assume!(alpha * lambda < 1.5);
        let v = stationary_variance(lambda, alpha, sigma, n);
        prop_assert!(v > 0.0);
        prop_assert!(stationary_variance(lambda, alpha * 1.1, sigma, n) > v);
        prop_assert!(stationary_variance(lambda, alpha, sigma, n + 1) < v);
    }

    #[test]
    fn plateau_rises_with_population(
        lambdas in spectrum_strategy(16),
        alpha in 0.01f64..0.5,
        n in 1usize..128,
    ) {
        let spec = Spectrum::new(lambdas).unwrap();
        prop_assume!(alpha * spec.max() < 1.9 && spec.rank() > 0);
        let lo = terminal_plateau(&spec, alpha, 1.0, n).unwrap();
        let hi = terminal_plateau(&spec, alpha, 1.0, 2 * n).unwrap();
        prop_assert!(hi > lo && hi <= 1.0);
    }

    #[test]
    fn best_of_n_is_monotone_and_bounded(pool in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let m = pool.len();
        let max = pool.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut prev = f64::NEG_INFINITY;
        for n in 1..=m {
            let v = exact_best_of_n(&pool, n).unwrap();
            prop_assert!(v >= prev - 1e-12 && v <= max + 1e-12);
            prev = v;
        }
        prop_assert!((exact_best_of_n(&pool, 1).unwrap() - stats::mean(&pool)).abs() <= 1e-10);
        prop_assert!((exact_best_of_n(&pool, m).unwrap() - max).abs() <= 1e-12);
    }

    #[test]
    fn discrete_lyapunov_is_a_fixed_point(
        lambdas in prop::collection::vec(0.1f64..5.0, 1..6),
        alpha in 0.01f64..0.3,
        kappa in 0.01f64..2.0,
    ) {
        let sys = LinearizedSystem::isotropic(&lambdas, kappa, alpha).unwrap();
        let v = solve_discrete_lyapunov(&sys).unwrap();
        let next = sys.step_covariance(&v);
        prop_assert!((&next - &v).norm() <= 1e-10 * (1.0 + v.norm()));
        prop_assert!((&v - v.transpose()).amax() <= 1e-12 * (1.0 + v.amax()));
        prop_assert!(v.clone().symmetric_eigen().eigenvalues.iter().all(|l| *l > 0.0));
    }

    #[test]
    fn slq_is_exact_for_diagonal_trace_with_full_steps(
        diag in prop::collection::vec(-3.0f64..3.0, 2..12),
        seed in any::<u64>(),
    ) {
        let d = diag.len();
        let op = DiagonalOperator(diag.clone());
        let est = slq_trace(&op, |x| x, &SlqOptions::new(3, d), &StreamKey::new(seed)).unwrap();
        // Each Rademacher probe gives zᵀAz = tr(A) exactly for diagonal A.
        let tr: f64 = diag.iter().sum();
        prop_assert!((est.estimate - tr).abs() <= 1e-8 * (1.0 + tr.abs()));
    }
}

#[test]
fn es_gradient_is_unbiased_on_a_quadratic() {
    let spec = Spectrum::new(vec![2.0, 1.0, 0.5]).unwrap();
    let l = QuadraticLandscape::new(spec);
    let theta = [0.5, -1.0, 2.0];
    let truth = l.gradient(&theta).unwrap();
    for antithetic in [false, true] {
        let cfg = EsConfig {
            sigma: 0.3,
            population: 16,
            antithetic,
            ..EsConfig::default()
        };
        let key = StreamKey::new(1).child("antithetic", antithetic as u64);
        let reps = 4000;
        let samples: Vec<Vec<f64>> = (0..reps)
            .map(|r| es_gradient_estimate(&l, &theta, &cfg, &key.child("rep", r)).unwrap().gradient)
            .collect();
        for i in 0..3 {
            let col: Vec<f64> = samples.iter().map(|g| g[i]).collect();
            let (m, se) = stats::mean_se(&col);
            assert!((m - truth[i]).abs() <= 4.0 * se, "coord {i}: {m} vs {} (se {se})", truth[i]);
        }
    }
}

#[test]
fn trajectories_are_reproducible_and_thread_independent() {
    let l = QuadraticLandscape::new(Spectrum::new(vec![1.0, 0.05]).unwrap());
    let cfg = EsConfig {
        alpha: 0.1,
        horizon: 50,
        population: 8,
        ..EsConfig::default()
    };
    let key = StreamKey::new(5);
    let a = run_es(&l, &[1.0, 0.0], &cfg, &key).unwrap();
    let b = run_es(&l, &[1.0, 0.0], &cfg, &key).unwrap();
    assert_eq!(a, b);
    let ens = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_es_ensemble(&l, &[1.0, 0.0], &cfg, &key, 300).unwrap())
    };
    let one = ens(1);
    let four = ens(4);
    assert_eq!(one.mean.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), four.mean.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn simulated_mean_reward_tracks_the_closed_form() {
    let spec = Spectrum::new(vec![1.0, 0.2, 0.05]).unwrap();
    let l = QuadraticLandscape::new(spec.clone());
    let x0 = [1.0, -1.0, 0.5];
    let cfg = EsConfig {
        alpha: 0.1,
        sigma: 1.0,
        population: 8,
        horizon: 150,
        estimator: Estimator::NoisyAscent,
        ..EsConfig::default()
    };
    let ens = run_es_ensemble(&l, &x0, &cfg, &StreamKey::new(6), 2000).unwrap();
    let pred = ou_trajectory(&spec, &x0, cfg.alpha, cfg.sigma, cfg.population, cfg.horizon).unwrap();
    let within = (0..=cfg.horizon)
        .filter(|&t| (ens.mean[t] - pred.expected_reward[t]).abs() <= 3.0 * ens.se[t].max(1e-12))
        .count();
    assert!(within as f64 >= 0.95 * (cfg.horizon + 1) as f64, "{within} of {}", cfg.horizon + 1);
}

#[test]
fn lyapunov_matches_per_mode_stationary_variance() {
    let lambdas = [1.5, 0.4, 0.05];
    let (alpha, sigma, n) = (0.2, 0.7, 4);
    let kappa = sigma * sigma / n as f64;
    let sys = LinearizedSystem::isotropic(&lambdas, kappa, alpha).unwrap();
    let v = solve_discrete_lyapunov(&sys).unwrap();
    let expect = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        3,
        lambdas.iter().map(|&l| stationary_variance(l, alpha, sigma, n)),
    ));
    assert!((v - expect).amax() <= 1e-12);
}
