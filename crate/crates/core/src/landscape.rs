//! Objective abstraction and the synthetic landscapes used throughout:
//! general quadratics, the two-block spectrum, and the quartic double-well.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::stats::compensated_sum;
use crate::stochastics::Stream;

/// A reward landscape `θ ↦ J(θ)` on a fixed dimension.
///
/// `value` is always the noiseless reward. Evaluation noise, when a landscape
/// carries it, is additive zero-mean Gaussian with standard deviation
/// [`noise_scale`](Objective::noise_scale) and is applied by
/// [`sample`](Objective::sample) from a caller-owned stream, so objectives hold
/// no mutable state and can be shared across workers.
pub trait Objective: Send + Sync {
    fn dimension(&self) -> usize;

    fn value(&self, theta: &[f64]) -> Result<f64>;

    fn gradient(&self, _theta: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported(format!("gradient of {}", self.describe())))
    }

    fn noise_scale(&self) -> f64 {
        0.0
    }

    /// Curvature spectrum of `-∇²J` near the reference point, when known.
    /// Used only to derive natural units (e.g. locality thresholds).
    fn curvature_hint(&self) -> Option<Spectrum> {
        None
    }

    fn describe(&self) -> String;

    /// One noisy reward observation, averaged over `group` evaluations
    /// (noise variance divided by `group`).
    fn sample(&self, theta: &[f64], group: usize, stream: &mut Stream) -> Result<f64> {
        let v = self.value(theta)?;
        let s = self.noise_scale();
        if s > 0.0 {
            Ok(v + s / (group.max(1) as f64).sqrt() * stream.normal())
        } else {
            Ok(v)
        }
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn value(&self, theta: &[f64]) -> Result<f64> {
        (**self).value(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(theta)
    }
    fn noise_scale(&self) -> f64 {
        (**self).noise_scale()
    }
    fn curvature_hint(&self) -> Option<Spectrum> {
        (**self).curvature_hint()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<T: Objective + ?Sized> Objective for Box<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn value(&self, theta: &[f64]) -> Result<f64> {
        (**self).value(theta)
    }
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (**self).gradient(theta)
    }
    fn noise_scale(&self) -> f64 {
        (**self).noise_scale()
    }
    fn curvature_hint(&self) -> Option<Spectrum> {
        (**self).curvature_hint()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

pub(crate) fn check_dimension(expected: usize, theta: &[f64]) -> Result<()> {
    if theta.len() == expected {
        Ok(())
    } else {
        Err(Error::Dimension {
            expected,
            actual: theta.len(),
        })
    }
}

/// Curvature eigenvalues, stored non-increasing, all `>= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(mut eigenvalues: Vec<f64>) -> Result<Self> {
        ensure(!eigenvalues.is_empty(), || "spectrum must be non-empty".into())?;
        if let Some(bad) = eigenvalues.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(Error::Parameter(format!(
                "curvature eigenvalues must be finite and >= 0, got {bad}"
            )));
        }
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Ok(Self(eigenvalues))
    }

    /// `count` copies of each `(value, count)` block.
    pub fn from_blocks(blocks: &[(f64, usize)]) -> Result<Self> {
        Self::new(
            blocks
                .iter()
                .flat_map(|&(v, n)| std::iter::repeat_n(v, n))
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0[0]
    }

    pub fn rank(&self) -> usize {
        self.0.iter().filter(|l| **l > 0.0).count()
    }

    pub fn positive(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().copied().filter(|l| *l > 0.0)
    }

    pub fn trace(&self) -> f64 {
        compensated_sum(self.0.iter().copied())
    }
}

impl TryFrom<Vec<f64>> for Spectrum {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Spectrum::new(v)
    }
}

impl From<Spectrum> for Vec<f64> {
    fn from(s: Spectrum) -> Self {
        s.0
    }
}

/// `J(θ) = peak − ½ (θ−θ*)ᵀ Q Λ Qᵀ (θ−θ*)`.
#[derive(Debug, Clone)]
pub struct QuadraticLandscape {
    spectrum: Spectrum,
    basis: Option<DMatrix<f64>>,
    peak: f64,
    offset: Vec<f64>,
    noise: f64,
}

impl QuadraticLandscape {
    /// Identity basis, peak 1, maximizer at the origin.
    pub fn new(spectrum: Spectrum) -> Self {
        let d = spectrum.len();
        Self {
            spectrum,
            basis: None,
            peak: 1.0,
            offset: vec![0.0; d],
            noise: 0.0,
        }
    }

    /// Rotates the eigenbasis; `basis` columns are the eigenvectors.
    pub fn with_basis(mut self, basis: DMatrix<f64>) -> Result<Self> {
        let d = self.dimension();
        ensure(basis.nrows() == d && basis.ncols() == d, || {
            format!("basis must be {d}x{d}")
        })?;
        let gram = basis.transpose() * &basis;
        let dev = (gram - DMatrix::<f64>::identity(d, d)).amax();
        ensure(dev < 1e-10, || {
            format!("basis is not orthogonal (max |QᵀQ - I| = {dev:e})")
        })?;
        self.basis = Some(basis);
        Ok(self)
    }

    pub fn with_peak(mut self, peak: f64) -> Self {
        self.peak = peak;
        self
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        check_dimension(self.dimension(), &offset)?;
        self.offset = offset;
        Ok(self)
    }

    pub fn with_noise(mut self, scale: f64) -> Result<Self> {
        ensure(scale >= 0.0 && scale.is_finite(), || {
            "evaluation noise scale must be finite and >= 0".into()
        })?;
        self.noise = scale;
        Ok(self)
    }

    pub fn spectrum(&self) -> &Spectrum {
        &self.spectrum
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn maximizer(&self) -> &[f64] {
        &self.offset
    }

    /// Coordinates of `θ − θ*` in the eigenbasis.
    pub fn to_eigenbasis(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dimension(self.dimension(), theta)?;
        let x: Vec<f64> = theta.iter().zip(&self.offset).map(|(t, o)| t - o).collect();
        Ok(match &self.basis {
            None => x,
            Some(q) => (q.transpose() * nalgebra::DVector::from_vec(x))
                .iter()
                .copied()
                .collect(),
        })
    }

    /// Parameter vector whose eigenbasis coordinates are `x`.
    pub fn from_eigenbasis(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dimension(self.dimension(), x)?;
        let rotated: Vec<f64> = match &self.basis {
            None => x.to_vec(),
            Some(q) => (q * nalgebra::DVector::from_column_slice(x))
                .iter()
                .copied()
                .collect(),
        };
        Ok(rotated.iter().zip(&self.offset).map(|(r, o)| r + o).collect())
    }

    /// Dense `C = Q Λ Qᵀ`.
    pub fn curvature_matrix(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
            self.spectrum.values(),
        ));
        match &self.basis {
            None => lambda,
            Some(q) => q * lambda * q.transpose(),
        }
    }
}

impl Objective for QuadraticLandscape {
    fn dimension(&self) -> usize {
        self.spectrum.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let y = self.to_eigenbasis(theta)?;
        let quad = compensated_sum(self.spectrum.values().iter().zip(&y).map(|(l, v)| l * v * v));
        Ok(self.peak - 0.5 * quad)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let y = self.to_eigenbasis(theta)?;
        let scaled: Vec<f64> = self
            .spectrum
            .values()
            .iter()
            .zip(&y)
            .map(|(l, v)| -l * v)
            .collect();
        Ok(match &self.basis {
            None => scaled,
            Some(q) => (q * nalgebra::DVector::from_vec(scaled)).iter().copied().collect(),
        })
    }

    fn noise_scale(&self) -> f64 {
        self.noise
    }

    fn curvature_hint(&self) -> Option<Spectrum> {
        Some(self.spectrum.clone())
    }

    fn describe(&self) -> String {
        format!(
            "quadratic(D={}, rank={}, trace={}, rotated={})",
            self.dimension(),
            self.spectrum.rank(),
            self.spectrum.trace(),
            self.basis.is_some()
        )
    }
}

/// Stiff/flat two-block spectrum parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBlockSpec {
    pub dimension: usize,
    pub stiff: usize,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
}

impl TwoBlockSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.stiff >= 1 && self.stiff <= self.dimension, || {
            format!(
                "two-block needs 1 <= d <= D (d = {}, D = {})",
                self.stiff, self.dimension
            )
        })?;
        ensure(self.lambda_hi > self.lambda_lo && self.lambda_lo > 0.0, || {
            format!(
                "two-block needs lambda_hi > lambda_lo > 0 (got {} and {})",
                self.lambda_hi, self.lambda_lo
            )
        })
    }

    pub fn spectrum(&self) -> Result<Spectrum> {
        self.validate()?;
        Spectrum::from_blocks(&[
            (self.lambda_hi, self.stiff),
            (self.lambda_lo, self.dimension - self.stiff),
        ])
    }
}

pub fn make_two_block(spec: TwoBlockSpec) -> Result<QuadraticLandscape> {
    Ok(QuadraticLandscape::new(spec.spectrum()?))
}

/// Quartic double-well on coordinate 0, optionally embedded with a quadratic
/// block on coordinates `1..D`.
///
/// Natively in loss convention `L(x) = (λ/4)(x²−a²)² + ½ Σ λ_i θ_i²`; as an
/// [`Objective`] it reports reward `−L`.
#[derive(Debug, Clone)]
pub struct DoubleWellLandscape {
    lambda: f64,
    half_separation: f64,
    block: Option<Spectrum>,
    noise: f64,
}

impl DoubleWellLandscape {
    pub fn new(lambda: f64, half_separation: f64) -> Result<Self> {
        ensure(lambda > 0.0 && lambda.is_finite(), || {
            "double-well quartic coefficient must be > 0".into()
        })?;
        ensure(half_separation > 0.0 && half_separation.is_finite(), || {
            "double-well half-separation must be > 0".into()
        })?;
        Ok(Self {
            lambda,
            half_separation,
            block: None,
            noise: 0.0,
        })
    }

    /// Adds quadratic coordinates `1..=block.len()`.
    pub fn with_block(mut self, block: Spectrum) -> Self {
        self.block = Some(block);
        self
    }

    pub fn with_noise(mut self, scale: f64) -> Result<Self> {
        ensure(scale >= 0.0 && scale.is_finite(), || {
            "evaluation noise scale must be finite and >= 0".into()
        })?;
        self.noise = scale;
        Ok(self)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn half_separation(&self) -> f64 {
        self.half_separation
    }

    pub fn block(&self) -> Option<&Spectrum> {
        self.block.as_ref()
    }

    /// Barrier height `λ a⁴ / 4`.
    pub fn barrier(&self) -> f64 {
        self.lambda * self.half_separation.powi(4) / 4.0
    }

    /// `L''(±a) = 2 λ a²`.
    pub fn well_curvature(&self) -> f64 {
        2.0 * self.lambda * self.half_separation.powi(2)
    }

    /// `L''(0) = −λ a²`.
    pub fn saddle_curvature(&self) -> f64 {
        -self.lambda * self.half_separation.powi(2)
    }

    /// One-dimensional quartic loss.
    pub fn well_loss(&self, x: f64) -> f64 {
        let s = x * x - self.half_separation * self.half_separation;
        0.25 * self.lambda * s * s
    }

    /// `L'(x) = λ x (x² − a²)`.
    pub fn well_slope(&self, x: f64) -> f64 {
        self.lambda * x * (x * x - self.half_separation * self.half_separation)
    }

    /// `L''(x) = λ (3x² − a²)`.
    pub fn well_second_derivative(&self, x: f64) -> f64 {
        self.lambda * (3.0 * x * x - self.half_separation * self.half_separation)
    }

    /// Full loss over all `D` coordinates.
    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        check_dimension(self.dimension(), theta)?;
        let mut total = self.well_loss(theta[0]);
        if let Some(block) = &self.block {
            total += 0.5
                * compensated_sum(block.values().iter().zip(&theta[1..]).map(|(l, x)| l * x * x));
        }
        Ok(total)
    }

    pub fn loss_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dimension(self.dimension(), theta)?;
        let mut g = Vec::with_capacity(theta.len());
        g.push(self.well_slope(theta[0]));
        if let Some(block) = &self.block {
            g.extend(block.values().iter().zip(&theta[1..]).map(|(l, x)| l * x));
        }
        Ok(g)
    }
}

/// Loss-convention evaluation `L(θ)`.
pub fn evaluate_double_well(landscape: &DoubleWellLandscape, theta: &[f64]) -> Result<f64> {
    landscape.loss(theta)
}

/// Noiseless quadratic reward.
pub fn evaluate_quadratic(landscape: &QuadraticLandscape, theta: &[f64]) -> Result<f64> {
    landscape.value(theta)
}

impl Objective for DoubleWellLandscape {
    fn dimension(&self) -> usize {
        1 + self.block.as_ref().map_or(0, Spectrum::len)
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(-self.loss(theta)?)
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loss_gradient(theta)?.into_iter().map(|g| -g).collect())
    }

    fn noise_scale(&self) -> f64 {
        self.noise
    }

    fn curvature_hint(&self) -> Option<Spectrum> {
        let mut values = vec![self.well_curvature()];
        if let Some(block) = &self.block {
            values.extend_from_slice(block.values());
        }
        Spectrum::new(values).ok()
    }

    fn describe(&self) -> String {
        format!(
            "double_well(lambda={}, a={}, D={})",
            self.lambda,
            self.half_separation,
            self.dimension()
        )
    }
}

/// Wraps a closure as a black-box objective.
pub struct FnObjective<F> {
    dimension: usize,
    f: F,
    noise: f64,
    name: String,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(dimension: usize, name: impl Into<String>, f: F) -> Self {
        Self {
            dimension,
            f,
            noise: 0.0,
            name: name.into(),
        }
    }

    pub fn with_noise(mut self, scale: f64) -> Self {
        self.noise = scale;
        self
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dimension(self.dimension, theta)?;
        Ok((self.f)(theta))
    }

    fn noise_scale(&self) -> f64 {
        self.noise
    }

    fn describe(&self) -> String {
        format!("{}(D={})", self.name, self.dimension)
    }
}

/// `J(θ) = v·θ + c`, with gradient `v` everywhere.
#[derive(Debug, Clone)]
pub struct LinearObjective {
    pub direction: Vec<f64>,
    pub constant: f64,
}

impl Objective for LinearObjective {
    fn dimension(&self) -> usize {
        self.direction.len()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        check_dimension(self.direction.len(), theta)?;
        Ok(self.constant + crate::stats::dot(&self.direction, theta))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dimension(self.direction.len(), theta)?;
        Ok(self.direction.clone())
    }

    fn describe(&self) -> String {
        format!("linear(D={})", self.direction.len())
    }
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal(d: usize, stream: &mut Stream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| stream.normal());
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
