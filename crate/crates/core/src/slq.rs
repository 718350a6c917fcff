//! Matrix-free stochastic Lanczos quadrature.
//!
//! For a symmetric operator `A` seen only through `v ↦ Av`, each probe `z`
//! starts an m-step Lanczos run from `z/‖z‖`. The Ritz values `θ_k` and
//! squared first eigenvector components `w_k` of the resulting tridiagonal
//! form a Gauss quadrature with `zᵀ f(A) z ≈ ‖z‖² Σ_k w_k f(θ_k)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::es::{es_gradient_estimate, EsConfig};
use crate::landscape::Objective;
use crate::stats::{self, CompensatedSum};
use crate::stochastics::{Stream, StreamKey};

/// A symmetric linear operator accessed only through products.
pub trait MatVec: Send + Sync {
    fn dimension(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl<T: MatVec + ?Sized> MatVec for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (**self).apply(v)
    }
}

#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl MatVec for DenseOperator {
    fn dimension(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.0.ncols() {
            return Err(Error::Dimension {
                expected: self.0.ncols(),
                actual: v.len(),
            });
        }
        Ok((&self.0 * DVector::from_column_slice(v)).iter().copied().collect())
    }
}

#[derive(Debug, Clone)]
pub struct DiagonalOperator(pub Vec<f64>);

impl MatVec for DiagonalOperator {
    fn dimension(&self) -> usize {
        self.0.len()
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.0.len() {
            return Err(Error::Dimension {
                expected: self.0.len(),
                actual: v.len(),
            });
        }
        Ok(self.0.iter().zip(v).map(|(d, x)| d * x).collect())
    }
}

/// Operator from a closure.
pub struct FnOperator<F> {
    dimension: usize,
    f: F,
}

impl<F> FnOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(dimension: usize, f: F) -> Self {
        Self { dimension, f }
    }
}

impl<F> MatVec for FnOperator<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dimension
    }
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(v))
    }
}

/// Dense `½(A + Aᵀ)` assembled from `D` products with unit vectors.
pub fn symmetrize<O: MatVec + ?Sized>(op: &O) -> Result<DenseOperator> {
    let d = op.dimension();
    let mut m = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        e[j] = 0.0;
        for (i, v) in col.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(DenseOperator((&m + m.transpose()) * 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// Largest `|uᵀAv − vᵀAu| / (‖u‖‖v‖‖A‖_est)` over the trials.
    pub max_violation: f64,
    pub norm_estimate: f64,
    pub passed: bool,
}

/// Randomized test of `uᵀ(Av) = vᵀ(Au)`.
pub fn symmetry_check<O: MatVec + ?Sized>(
    op: &O,
    trials: usize,
    tolerance: f64,
    stream: &mut Stream,
) -> Result<SymmetryReport> {
    let d = op.dimension();
    let mut pairs = Vec::with_capacity(trials);
    let mut norm_est = 0.0f64;
    for _ in 0..trials.max(1) {
        let u = stream.gaussian_vector(d)?;
        let v = stream.gaussian_vector(d)?;
        let au = checked_apply(op, &u)?;
        let av = checked_apply(op, &v)?;
        norm_est = norm_est
            .max(stats::norm(&au) / stats::norm(&u))
            .max(stats::norm(&av) / stats::norm(&v));
        pairs.push((stats::dot(&u, &av) - stats::dot(&v, &au), stats::norm(&u) * stats::norm(&v)));
    }
    let max_violation = pairs
        .iter()
        .map(|(diff, scale)| {
            if norm_est == 0.0 {
                diff.abs()
            } else {
                diff.abs() / (scale * norm_est)
            }
        })
        .fold(0.0, f64::max);
    Ok(SymmetryReport {
        max_violation,
        norm_estimate: norm_est,
        passed: max_violation <= tolerance,
    })
}

fn checked_apply<O: MatVec + ?Sized>(op: &O, v: &[f64]) -> Result<Vec<f64>> {
    let out = op.apply(v)?;
    if out.len() != v.len() {
        return Err(Error::Dimension {
            expected: v.len(),
            actual: out.len(),
        });
    }
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite {
            context: "operator product".into(),
            iteration: None,
        })
    }
}

/// Tridiagonal Lanczos coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tridiagonal {
    pub diagonal: Vec<f64>,
    pub off_diagonal: Vec<f64>,
    /// Step count at which the recurrence broke down, if before `m`.
    pub breakdown: Option<usize>,
    /// `max |Qᵀ Q − I|` of the Lanczos basis.
    pub orthogonality_loss: f64,
}

impl Tridiagonal {
    pub fn steps(&self) -> usize {
        self.diagonal.len()
    }

    /// Ritz values (ascending) and quadrature weights `(V)_{1k}²`.
    pub fn quadrature(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.steps();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = self.diagonal[i];
            if i + 1 < k {
                t[(i, i + 1)] = self.off_diagonal[i];
                t[(i + 1, i)] = self.off_diagonal[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut pairs: Vec<(f64, f64)> = (0..k)
            .map(|j| (eig.eigenvalues[j], eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.into_iter().unzip()
    }
}

const BREAKDOWN_TOL: f64 = 1e-12;

/// m-step Lanczos with full reorthogonalization from `start`.
pub fn lanczos<O: MatVec + ?Sized>(op: &O, start: &[f64], m: usize) -> Result<Tridiagonal> {
    let d = op.dimension();
    if start.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: start.len(),
        });
    }
    ensure(m >= 1 && m <= d, || format!("Lanczos steps must lie in 1..={d}, got {m}"))?;
    let n0 = stats::norm(start);
    ensure(n0 > 0.0 && n0.is_finite(), || "start vector must be non-zero".into())?;

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    basis.push(start.iter().map(|x| x / n0).collect());
    let mut diagonal = Vec::with_capacity(m);
    let mut off_diagonal = Vec::with_capacity(m);
    let mut breakdown = None;
    let mut scale = 0.0f64;

    for k in 0..m {
        let q = &basis[k];
        let mut w = checked_apply(op, q)?;
        scale = scale.max(stats::norm(&w));
        let a = stats::dot(q, &w);
        diagonal.push(a);
        // Two passes of classical Gram-Schmidt against the whole basis also
        // remove the α q_k and β q_{k−1} terms of the three-term recurrence.
        for _ in 0..2 {
            for b in &basis {
                let c = stats::dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        if k + 1 == m {
            break;
        }
        let beta = stats::norm(&w);
        if beta < BREAKDOWN_TOL * scale.max(1.0) {
            breakdown = Some(k + 1);
            break;
        }
        off_diagonal.push(beta);
        basis.push(w.into_iter().map(|x| x / beta).collect());
    }

    let mut loss = 0.0f64;
    for i in 0..basis.len() {
        for j in 0..=i {
            let target = if i == j { 1.0 } else { 0.0 };
            loss = loss.max((stats::dot(&basis[i], &basis[j]) - target).abs());
        }
    }
    Ok(Tridiagonal {
        diagonal,
        off_diagonal,
        breakdown,
        orthogonality_loss: loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    #[default]
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlqOptions {
    pub probes: usize,
    pub steps: usize,
    pub probe_kind: ProbeKind,
    /// Relative tolerance of the symmetry guard run before quadrature.
    pub symmetry_tolerance: f64,
}

impl SlqOptions {
    pub fn new(probes: usize, steps: usize) -> Self {
        Self {
            probes,
            steps,
            probe_kind: ProbeKind::Rademacher,
            symmetry_tolerance: 1e-8,
        }
    }

    pub fn with_probe_kind(mut self, kind: ProbeKind) -> Self {
        self.probe_kind = kind;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeQuadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub norm_sq: f64,
    pub breakdown: Option<usize>,
    pub orthogonality_loss: f64,
}

impl ProbeQuadrature {
    /// `‖z‖² Σ_k w_k f(θ_k)`.
    pub fn estimate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.norm_sq
            * stats::compensated_sum(self.nodes.iter().zip(&self.weights).map(|(t, w)| w * f(*t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RitzQuadrature {
    pub dimension: usize,
    pub steps: usize,
    pub probes: Vec<ProbeQuadrature>,
}

impl RitzQuadrature {
    /// Node/weight cloud as CSV `probe,node,weight`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe,node,weight\n");
        for (j, p) in self.probes.iter().enumerate() {
            for (t, w) in p.nodes.iter().zip(&p.weights) {
                out.push_str(&format!("{j},{t},{w}\n"));
            }
        }
        out
    }

    /// Pooled spectral density: `(node, mass)` with masses summing to one,
    /// each probe weighted by `‖z‖²`.
    pub fn density(&self) -> Vec<(f64, f64)> {
        let total: f64 = stats::compensated_sum(self.probes.iter().map(|p| p.norm_sq));
        self.probes
            .iter()
            .flat_map(|p| {
                let share = p.norm_sq / total;
                p.nodes.iter().zip(&p.weights).map(move |(t, w)| (*t, share * w))
            })
            .collect()
    }
}

fn draw_probe(kind: ProbeKind, d: usize, stream: &mut Stream) -> Vec<f64> {
    match kind {
        ProbeKind::Rademacher => (0..d).map(|_| stream.rademacher()).collect(),
        ProbeKind::Gaussian => (0..d).map(|_| stream.normal()).collect(),
    }
}

/// Runs the symmetry guard and one Lanczos quadrature per probe. Probe `j`
/// draws from `key/probe:j`.
pub fn slq_quadrature<O: MatVec + ?Sized>(
    op: &O,
    options: &SlqOptions,
    key: &StreamKey,
) -> Result<RitzQuadrature> {
    let d = op.dimension();
    ensure(options.probes >= 1, || "need at least one probe".into())?;
    ensure(options.steps >= 1 && options.steps <= d, || {
        format!("Lanczos steps must lie in 1..={d}, got {}", options.steps)
    })?;
    let report = symmetry_check(op, 3, options.symmetry_tolerance, &mut key.child_stream("symmetry", 0))?;
    if !report.passed {
        return Err(Error::Parameter(format!(
            "operator failed the symmetry check (relative violation {:e})",
            report.max_violation
        )));
    }
    let probes: Vec<Result<ProbeQuadrature>> = (0..options.probes)
        .into_par_iter()
        .map(|j| {
            let mut stream = key.child_stream("probe", j as u64);
            let z = draw_probe(options.probe_kind, d, &mut stream);
            let tri = lanczos(op, &z, options.steps)?;
            let (nodes, weights) = tri.quadrature();
            Ok(ProbeQuadrature {
                nodes,
                weights,
                norm_sq: stats::dot(&z, &z),
                breakdown: tri.breakdown,
                orthogonality_loss: tri.orthogonality_loss,
            })
        })
        .collect();
    Ok(RitzQuadrature {
        dimension: d,
        steps: options.steps,
        probes: probes.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub per_probe: Vec<f64>,
}

/// `tr f(A)` as the mean of per-probe quadratures, with its standard error.
pub fn slq_trace<O: MatVec + ?Sized>(
    op: &O,
    f: impl Fn(f64) -> f64,
    options: &SlqOptions,
    key: &StreamKey,
) -> Result<TraceEstimate> {
    ensure(options.probes >= 2, || {
        format!("slq_trace needs at least 2 probes, got {}", options.probes)
    })?;
    let quad = slq_quadrature(op, options, key)?;
    let per_probe: Vec<f64> = quad.probes.iter().map(|p| p.estimate(&f)).collect();
    let (estimate, standard_error) = stats::mean_se(&per_probe);
    Ok(TraceEstimate {
        estimate,
        standard_error,
        per_probe,
    })
}

/// Mean and standard error across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    fn of(values: &[f64]) -> Self {
        let (mean, se) = stats::mean_se(values);
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub lambda_min: f64,
    pub negative_mass: f64,
    pub participation_ratio: f64,
    pub effective_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    pub lambda_min: MeanSe,
    pub negative_mass: MeanSe,
    pub participation_ratio: MeanSe,
    pub effective_rank: MeanSe,
    pub per_seed: Vec<SeedMetrics>,
}

/// Concentration metrics of one pooled quadrature. The density is read as
/// a per-eigenvalue distribution, so `D·mass` counts eigenvalues.
pub fn metrics_from_quadrature(quad: &RitzQuadrature) -> Result<SeedMetrics> {
    let density = quad.density();
    let d = quad.dimension as f64;
    let scale = density.iter().fold(0.0f64, |m, (t, _)| m.max(t.abs()));
    if scale == 0.0 {
        return Err(Error::Undefined("spectral metrics of the zero operator".into()));
    }
    let neg_tol = 1e-10 * scale;
    let mut m1 = CompensatedSum::new();
    let mut m2 = CompensatedSum::new();
    let mut ent = CompensatedSum::new();
    let mut neg = CompensatedSum::new();
    let mut lambda_min = f64::INFINITY;
    for &(t, w) in &density {
        let a = t.abs();
        m1.add(w * a);
        m2.add(w * t * t);
        if a > 0.0 {
            ent.add(w * a * a.ln());
        }
        if t < -neg_tol {
            neg.add(w);
        }
        lambda_min = lambda_min.min(t);
    }
    let (m1, m2) = (m1.value(), m2.value());
    let pr = d * m1 * m1 / m2;
    let erank = d * m1 * (-ent.value() / m1).exp();
    Ok(SeedMetrics {
        lambda_min,
        negative_mass: neg.value().clamp(0.0, 1.0),
        participation_ratio: pr.clamp(1.0, d),
        effective_rank: erank.clamp(1.0, d),
    })
}

/// Spectral summary repeated over `seeds` independent probe sets
/// (`key/seed:i`).
pub fn spectral_metrics<O: MatVec + ?Sized>(
    op: &O,
    options: &SlqOptions,
    key: &StreamKey,
    seeds: usize,
) -> Result<SpectralMetrics> {
    ensure(seeds >= 1, || "need at least one seed".into())?;
    let per_seed = (0..seeds)
        .map(|i| slq_quadrature(op, options, &key.child("seed", i as u64)).and_then(|q| metrics_from_quadrature(&q)))
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&SeedMetrics) -> f64| MeanSe::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    Ok(SpectralMetrics {
        lambda_min: pick(|m| m.lambda_min),
        negative_mass: pick(|m| m.negative_mass),
        participation_ratio: pick(|m| m.participation_ratio),
        effective_rank: pick(|m| m.effective_rank),
        per_seed,
    })
}

/// Exact versions of the metrics for a known spectrum.
pub fn exact_metrics(eigenvalues: &[f64]) -> Result<SeedMetrics> {
    let quad = RitzQuadrature {
        dimension: eigenvalues.len(),
        steps: eigenvalues.len(),
        probes: vec![ProbeQuadrature {
            nodes: eigenvalues.to_vec(),
            weights: vec![1.0 / eigenvalues.len() as f64; eigenvalues.len()],
            norm_sq: eigenvalues.len() as f64,
            breakdown: None,
            orthogonality_loss: 0.0,
        }],
    };
    metrics_from_quadrature(&quad)
}

/// How the Hessian-vector product differentiates the reward.
#[derive(Debug, Clone)]
pub enum GradientSource {
    /// The objective's own gradient.
    Exact,
    /// Antithetic ES estimate with a fixed key, so the `±` evaluations share
    /// perturbations.
    Smoothed { sigma: f64, population: usize, key: StreamKey },
}

/// Central finite-difference Hessian-vector product of `J` at `θ`.
pub struct HvpOperator<'a, O: ?Sized> {
    objective: &'a O,
    theta: Vec<f64>,
    step: f64,
    source: GradientSource,
}

pub fn hvp_from_objective<'a, O: Objective + ?Sized>(
    objective: &'a O,
    theta: &[f64],
    step: f64,
    source: GradientSource,
) -> Result<HvpOperator<'a, O>> {
    ensure(step > 0.0 && step.is_finite(), || format!("finite-difference step must be > 0, got {step}"))?;
    crate::landscape::check_dimension(objective.dimension(), theta)?;
    if let GradientSource::Smoothed { sigma, population, .. } = &source {
        ensure(*sigma > 0.0 && *population >= 2 && population % 2 == 0, || {
            "smoothed gradient needs sigma > 0 and an even population".into()
        })?;
    }
    Ok(HvpOperator {
        objective,
        theta: theta.to_vec(),
        step,
        source,
    })
}

impl<O: Objective + ?Sized> HvpOperator<'_, O> {
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match &self.source {
            GradientSource::Exact => self.objective.gradient(theta),
            GradientSource::Smoothed { sigma, population, key } => {
                let cfg = EsConfig {
                    sigma: *sigma,
                    population: *population,
                    antithetic: true,
                    ..EsConfig::default()
                };
                Ok(es_gradient_estimate(self.objective, theta, &cfg, key)?.gradient)
            }
        }
    }
}

impl<O: Objective + ?Sized> MatVec for HvpOperator<'_, O> {
    fn dimension(&self) -> usize {
        self.theta.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        crate::landscape::check_dimension(self.theta.len(), v)?;
        let h = self.step;
        let plus: Vec<f64> = self.theta.iter().zip(v).map(|(t, x)| t + h * x).collect();
        let minus: Vec<f64> = self.theta.iter().zip(v).map(|(t, x)| t - h * x).collect();
        let gp = self.gradient(&plus)?;
        let gm = self.gradient(&minus)?;
        let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite {
                context: "Hessian-vector product".into(),
                iteration: None,
            })
        }
    }
}
