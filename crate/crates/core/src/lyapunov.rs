//! Stationary covariance of the linearized update `x ← (I − αH)x + αη`,
//! `Cov(η) = Σ`, and the resulting expected reward gap.
//!
//! Both solvers work in the eigenbasis of `H`: with `H = QΛQᵀ` and
//! `S = QᵀΣQ`, the discrete solution is `Ṽ_ij = α² S_ij / (1 − a_i a_j)` and
//! the continuous one `Ṽ_ij = α S_ij / (λ_i + λ_j)`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, Error, Result};

/// Largest dimension handled by the dense solvers.
pub const MAX_DIMENSION: usize = 512;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    h: DMatrix<f64>,
    sigma: DMatrix<f64>,
    alpha: f64,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

fn symmetrized(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    ensure(m.is_square(), || format!("{name} must be square"))?;
    ensure(m.iter().all(|v| v.is_finite()), || format!("{name} has non-finite entries"))?;
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    ensure(asym <= SYMMETRY_TOL * scale, || {
        format!("{name} is not symmetric (max asymmetry {asym:e})")
    })?;
    Ok((m + m.transpose()) * 0.5)
}

impl LinearizedSystem {
    pub fn new(h: DMatrix<f64>, sigma: DMatrix<f64>, alpha: f64) -> Result<Self> {
        ensure(alpha > 0.0 && alpha.is_finite(), || format!("alpha must be > 0, got {alpha}"))?;
        let d = h.nrows();
        ensure(d >= 1 && d <= MAX_DIMENSION, || {
            format!("dimension {d} outside 1..={MAX_DIMENSION}")
        })?;
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: sigma.nrows(),
            });
        }
        let h = symmetrized(&h, "curvature")?;
        let sigma = symmetrized(&sigma, "noise covariance")?;

        let eig = SymmetricEigen::new(h.clone());
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        ensure(eig.eigenvalues.iter().all(|l| *l >= -1e-12 * scale), || {
            "curvature must be positive semidefinite".into()
        })?;
        let s_min = SymmetricEigen::new(sigma.clone()).eigenvalues.min();
        ensure(s_min >= -1e-12 * sigma.amax().max(f64::MIN_POSITIVE), || {
            "noise covariance must be positive semidefinite".into()
        })?;

        Ok(Self {
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
            h,
            sigma,
            alpha,
        })
    }

    /// Diagonal curvature with isotropic noise `κ I`.
    pub fn isotropic(eigenvalues: &[f64], kappa: f64, alpha: f64) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues)),
            DMatrix::identity(d, d) * kappa,
            alpha,
        )
    }

    pub fn dimension(&self) -> usize {
        self.h.nrows()
    }

    pub fn curvature(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Spectral radius of `I − αH`.
    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| (1.0 - self.alpha * l).abs())
            .fold(0.0, f64::max)
    }

    fn rotated_noise(&self) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        q.transpose() * &self.sigma * q
    }

    fn rotate_back(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let out = q * v * q.transpose();
        (&out + out.transpose()) * 0.5
    }

    /// One step of `V ← (I − αH)V(I − αH)ᵀ + α²Σ`.
    pub fn step_covariance(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dimension();
        let a = DMatrix::identity(d, d) - &self.h * self.alpha;
        &a * v * a.transpose() + &self.sigma * (self.alpha * self.alpha)
    }
}

/// Iterates the covariance recursion `steps` times from `v0`.
pub fn covariance_recursion(sys: &LinearizedSystem, v0: &DMatrix<f64>, steps: usize) -> DMatrix<f64> {
    let mut v = v0.clone();
    for _ in 0..steps {
        v = sys.step_covariance(&v);
    }
    v
}

fn check_psd(v: &DMatrix<f64>) -> Result<()> {
    let d = v.nrows();
    let tol = 1e-12 * v.trace().abs().max(f64::MIN_POSITIVE) + f64::MIN_POSITIVE;
    let shifted = v + DMatrix::identity(d, d) * tol;
    match shifted.cholesky() {
        Some(_) => Ok(()),
        None => Err(Error::Convergence("solution is not positive semidefinite".into())),
    }
}

fn check_residual(residual: f64, scale: f64) -> Result<()> {
    if residual <= 1e-10 * scale || residual == 0.0 {
        Ok(())
    } else {
        Err(Error::Convergence(format!(
            "Lyapunov residual {residual:e} exceeds tolerance (scale {scale:e})"
        )))
    }
}

/// Solves `V = (I − αH)V(I − αH)ᵀ + α²Σ`.
pub fn solve_discrete_lyapunov(sys: &LinearizedSystem) -> Result<DMatrix<f64>> {
    let rho = sys.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::UnstableSystem { spectral_radius: rho });
    }
    let alpha = sys.alpha;
    let s = sys.rotated_noise();
    let d = sys.dimension();
    let vt = DMatrix::from_fn(d, d, |i, j| {
        // 1 − a_i a_j written to avoid cancellation when both are near 1.
        let denom = alpha * (sys.eigenvalues[i] + sys.eigenvalues[j])
            - alpha * alpha * sys.eigenvalues[i] * sys.eigenvalues[j];
        alpha * alpha * s[(i, j)] / denom
    });
    let v = sys.rotate_back(&vt);
    let target = &sys.sigma * (alpha * alpha);
    let residual = (&v - sys.step_covariance(&v)).norm();
    check_residual(residual, target.norm())?;
    check_psd(&v)?;
    Ok(v)
}

/// Solves `HV + VH = αΣ`.
pub fn solve_continuous_lyapunov(sys: &LinearizedSystem) -> Result<DMatrix<f64>> {
    let scale = sys.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let null: Vec<usize> = sys
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| **l <= 1e-12 * scale.max(f64::MIN_POSITIVE))
        .map(|(i, _)| i)
        .collect();
    if !null.is_empty() {
        return Err(Error::NullModes { modes: null });
    }
    let s = sys.rotated_noise();
    let d = sys.dimension();
    let vt = DMatrix::from_fn(d, d, |i, j| {
        sys.alpha * s[(i, j)] / (sys.eigenvalues[i] + sys.eigenvalues[j])
    });
    let v = sys.rotate_back(&vt);
    let target = &sys.sigma * sys.alpha;
    let residual = (&sys.h * &v + &v * &sys.h - &target).norm();
    check_residual(residual, target.norm())?;
    check_psd(&v)?;
    Ok(v)
}

/// `½ tr(HV)`.
pub fn stationary_gap(sys: &LinearizedSystem, v: &DMatrix<f64>) -> f64 {
    0.5 * (&sys.h * v).trace()
}

/// Dense CSV with a `# dimension=D symmetric=B` header line.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let symmetric = m.is_square() && (m - m.transpose()).amax() == 0.0;
    let mut out = format!("# dimension={} symmetric={symmetric}\n", m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parameter("empty matrix file".into()))?;
    let d: usize = header
        .trim_start_matches('#')
        .split_whitespace()
        .find_map(|f| f.strip_prefix("dimension="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parameter(format!("bad matrix header: {header}")))?;
    let mut data = Vec::with_capacity(d * d);
    let mut rows = 0;
    for line in lines {
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Parameter(format!("bad matrix entry: {e}")))?;
        if row.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: row.len(),
            });
        }
        data.extend(row);
        rows += 1;
    }
    if rows != d {
        return Err(Error::Dimension {
            expected: d,
            actual: rows,
        });
    }
    Ok(DMatrix::from_row_slice(d, d, &data))
}
