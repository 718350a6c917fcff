//! Experiment configuration: one TOML file with a section per module, every
//! key defaulted, unknown keys rejected, dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use varcurv::clss::ClssConfig;
use varcurv::es::Estimator;
use varcurv::slq::ProbeKind;

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "VARCURV_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    EsRun,
    OuCompare,
    Spectroscopy,
    Clss,
    SlqMetrics,
    DoubleWell,
    BestOfN,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::EsRun,
        Self::OuCompare,
        Self::Spectroscopy,
        Self::Clss,
        Self::SlqMetrics,
        Self::DoubleWell,
        Self::BestOfN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::EsRun => "es_run",
            Self::OuCompare => "ou_compare",
            Self::Spectroscopy => "spectroscopy",
            Self::Clss => "clss",
            Self::SlqMetrics => "slq_metrics",
            Self::DoubleWell => "double_well",
            Self::BestOfN => "best_of_n",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::EsRun => "single ES trajectory (or replicate ensemble) on a landscape; smoke default",
            Self::OuCompare => "simulated ES ensembles against the closed-form OU reward curve for several N",
            Self::Spectroscopy => "exact plateau gap against kappa and the implied effective dimension",
            Self::Clss => "Monte Carlo local slope spectroscopy with locality and settling gates",
            Self::SlqMetrics => "stochastic Lanczos spectral metrics of a curvature operator",
            Self::DoubleWell => "Langevin hopping on the quartic double well with Kramers predictions",
            Self::BestOfN => "best-of-N improvement, saturation population and tail statistics",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeKind {
    #[default]
    TwoBlock,
    Quadratic,
    DoubleWell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[default]
    Identity,
    /// Haar-random orthogonal basis drawn from `seed/basis:0`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub kind: LandscapeKind,
    pub dimension: usize,
    pub stiff: usize,
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    /// Quadratic spectrum (`kind = "quadratic"`).
    pub eigenvalues: Vec<f64>,
    pub basis: BasisKind,
    pub peak: f64,
    /// Maximizer offset; empty means zero.
    pub offset: Vec<f64>,
    /// Additive Gaussian evaluation noise.
    pub noise: f64,
    /// Quartic coefficient of the double well.
    pub lambda: f64,
    pub half_separation: f64,
    /// Quadratic spectrum of the extra double-well coordinates.
    pub block: Vec<f64>,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            kind: LandscapeKind::TwoBlock,
            dimension: 128,
            stiff: 16,
            lambda_hi: 1.0,
            lambda_lo: 0.05,
            eigenvalues: vec![1.0, 0.05],
            basis: BasisKind::Identity,
            peak: 1.0,
            offset: Vec::new(),
            noise: 0.0,
            lambda: 1.0,
            half_separation: 1.0,
            block: Vec::new(),
        }
    }
}

/// Initial point. Quadratic landscapes place `stiff` on eigen-coordinates
/// carrying the largest eigenvalue and `flat` elsewhere, relative to the
/// maximizer; the double well starts in one well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    /// Explicit `θ₀`; overrides the rule above when non-empty.
    pub theta0: Vec<f64>,
    pub stiff: f64,
    pub flat: f64,
}

impl Default for StartConfig {
    fn default() -> Self {
        Self {
            theta0: Vec::new(),
            stiff: 1.0,
            flat: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsSection {
    pub alpha: f64,
    pub sigma: f64,
    pub population: usize,
    pub horizon: usize,
    pub group: usize,
    pub antithetic: bool,
    pub baseline: bool,
    pub estimator: Estimator,
    pub replicates: usize,
}

impl Default for EsSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            sigma: 0.1,
            population: 32,
            horizon: 100,
            group: 1,
            antithetic: true,
            baseline: true,
            estimator: Estimator::Perturbation,
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuCompareSection {
    pub alpha: f64,
    pub sigma: f64,
    pub populations: Vec<usize>,
    pub horizon: usize,
    pub replicates: usize,
    pub estimator: Estimator,
    /// Pointwise agreement band in pooled standard errors.
    pub tolerance_se: f64,
    /// Required fraction of iterations inside the band.
    pub min_fraction: f64,
    /// Trailing iterations averaged into the plateau estimate.
    pub tail_window: usize,
}

impl Default for OuCompareSection {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 1.0,
            populations: vec![8, 32, 128],
            horizon: 1000,
            replicates: 64,
            estimator: Estimator::NoisyAscent,
            tolerance_se: 3.0,
            min_fraction: 0.95,
            tail_window: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectroscopySection {
    pub sigma: f64,
    pub alphas: Vec<f64>,
    pub populations: Vec<usize>,
}

impl Default for SpectroscopySection {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            alphas: vec![0.01, 0.1, 0.5],
            populations: vec![8, 16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlqOperator {
    /// Loss Hessian `−∇²J` of the landscape at the reference point, by
    /// finite differences of the gradient.
    #[default]
    Hessian,
    /// Dense `(G + Gᵀ)/√(2D)` with Gaussian `G` drawn from `seed/operator:0`.
    RandomSymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlqPoint {
    /// Maximizer of a quadratic, saddle of the double well.
    #[default]
    Reference,
    Start,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpGradient {
    #[default]
    Exact,
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlqSection {
    pub operator: SlqOperator,
    pub at: SlqPoint,
    pub gradient: HvpGradient,
    pub fd_step: f64,
    pub smoothing_sigma: f64,
    pub smoothing_population: usize,
    /// Dimension of the random symmetric operator.
    pub dimension: usize,
    pub probes: usize,
    pub steps: usize,
    pub seeds: usize,
    pub probe_kind: ProbeKind,
}

impl Default for SlqSection {
    fn default() -> Self {
        Self {
            operator: SlqOperator::Hessian,
            at: SlqPoint::Reference,
            gradient: HvpGradient::Exact,
            fd_step: 1e-4,
            smoothing_sigma: 0.01,
            smoothing_population: 512,
            dimension: 50,
            probes: 20,
            steps: 30,
            seeds: 3,
            probe_kind: ProbeKind::Rademacher,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleWellSection {
    pub alpha: f64,
    /// Perturbation scale; derived from `barrier_ratio` when absent.
    pub sigma: Option<f64>,
    pub population: usize,
    /// Target `ΔL/ε`, used with `N = population` when `sigma` is absent.
    pub barrier_ratio: Option<f64>,
    pub horizon: usize,
    pub replicates: usize,
    pub hysteresis: f64,
    pub start_positive: bool,
    pub stride: usize,
    pub recorded_trajectories: usize,
    pub bins: usize,
    pub c_lo: f64,
    pub c_hi: f64,
}

impl Default for DoubleWellSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            sigma: None,
            population: 1,
            barrier_ratio: Some(5.5),
            horizon: 10_000,
            replicates: 400,
            hysteresis: 0.5,
            start_positive: false,
            stride: 10,
            recorded_trajectories: 3,
            bins: 40,
            c_lo: 0.5,
            c_hi: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestOfNSection {
    pub sigma: f64,
    pub candidates: usize,
    pub batches: usize,
    pub n_list: Vec<usize>,
    /// Subsets per (batch, N); 0 selects the exact order-statistics mode.
    pub subset_samples: usize,
    pub group: usize,
    pub tail_level: f64,
    pub bootstrap: usize,
}

impl Default for BestOfNSection {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            candidates: 240,
            batches: 8,
            n_list: vec![5, 10, 20, 30, 50],
            subset_samples: 0,
            group: 1,
            tail_level: 0.95,
            bootstrap: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: Option<String>,
    pub landscape: LandscapeConfig,
    pub start: StartConfig,
    pub es: EsSection,
    pub ou_compare: OuCompareSection,
    pub spectroscopy: SpectroscopySection,
    pub clss: ClssConfig,
    pub slq: SlqSection,
    pub double_well: DoubleWellSection,
    pub best_of_n: BestOfNSection,
}

fn key_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("invalid value for `{key}`: {msg}"))
}

fn check(cond: bool, key: &str, msg: &str) -> CliResult<()> {
    if cond {
        Ok(())
    } else {
        Err(key_error(key, msg))
    }
}

fn positive_list<T: PartialOrd + Default + Copy>(values: &[T], key: &str) -> CliResult<()> {
    check(!values.is_empty(), key, "must not be empty")?;
    check(values.iter().all(|v| *v > T::default()), key, "entries must be > 0")
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("parse error: {e}")))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Echo with every default filled in.
    pub fn resolved_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.output_dir = Some(self.output_dir_name());
        toml::to_string(&resolved).expect("config serializes")
    }

    pub fn output_dir_name(&self) -> String {
        self.output_dir
            .clone()
            .unwrap_or_else(|| format!("runs/{}", self.experiment.name()))
    }

    /// Output directory, relative to `root` (or the working directory).
    pub fn output_path(&self, root: Option<&Path>) -> PathBuf {
        let dir = PathBuf::from(self.output_dir_name());
        match root {
            Some(r) if dir.is_relative() => r.join(dir),
            _ => dir,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let l = &self.landscape;
        match l.kind {
            LandscapeKind::TwoBlock => {
                check(l.dimension >= 1, "landscape.dimension", "must be >= 1")?;
                check(l.stiff >= 1 && l.stiff <= l.dimension, "landscape.stiff", "must lie in 1..=dimension")?;
                check(l.lambda_lo > 0.0, "landscape.lambda_lo", "must be > 0")?;
                check(l.lambda_hi > l.lambda_lo, "landscape.lambda_hi", "must exceed lambda_lo")?;
            }
            LandscapeKind::Quadratic => {
                check(!l.eigenvalues.is_empty(), "landscape.eigenvalues", "must not be empty")?;
                check(
                    l.eigenvalues.iter().all(|v| *v >= 0.0 && v.is_finite()),
                    "landscape.eigenvalues",
                    "entries must be finite and >= 0",
                )?;
            }
            LandscapeKind::DoubleWell => {
                check(l.lambda > 0.0, "landscape.lambda", "must be > 0")?;
                check(l.half_separation > 0.0, "landscape.half_separation", "must be > 0")?;
                check(l.block.iter().all(|v| *v >= 0.0), "landscape.block", "entries must be >= 0")?;
            }
        }
        check(l.noise >= 0.0, "landscape.noise", "must be >= 0")?;
        check(l.peak.is_finite(), "landscape.peak", "must be finite")?;

        match self.experiment {
            ExperimentKind::EsRun => {
                let s = &self.es;
                check(s.alpha > 0.0, "es.alpha", "must be > 0")?;
                check(s.sigma >= 0.0, "es.sigma", "must be >= 0")?;
                check(s.population >= 1, "es.population", "must be >= 1")?;
                check(s.group >= 1, "es.group", "must be >= 1")?;
                check(s.replicates >= 1, "es.replicates", "must be >= 1")?;
                check(
                    !(s.antithetic && s.population % 2 == 1),
                    "es.population",
                    "must be even with antithetic sampling",
                )?;
            }
            ExperimentKind::OuCompare => {
                let s = &self.ou_compare;
                check(l.kind != LandscapeKind::DoubleWell, "landscape.kind", "ou_compare needs a quadratic landscape")?;
                check(s.alpha > 0.0, "ou_compare.alpha", "must be > 0")?;
                check(s.sigma >= 0.0, "ou_compare.sigma", "must be >= 0")?;
                positive_list(&s.populations, "ou_compare.populations")?;
                check(s.replicates >= 2, "ou_compare.replicates", "must be >= 2")?;
                check(
                    s.tail_window >= 1 && s.tail_window <= s.horizon,
                    "ou_compare.tail_window",
                    "must lie in 1..=horizon",
                )?;
                check(s.min_fraction > 0.0 && s.min_fraction <= 1.0, "ou_compare.min_fraction", "must lie in (0, 1]")?;
            }
            ExperimentKind::Spectroscopy => {
                let s = &self.spectroscopy;
                check(l.kind != LandscapeKind::DoubleWell, "landscape.kind", "spectroscopy needs a quadratic landscape")?;
                check(s.sigma > 0.0, "spectroscopy.sigma", "must be > 0")?;
                positive_list(&s.alphas, "spectroscopy.alphas")?;
                positive_list(&s.populations, "spectroscopy.populations")?;
                check(s.populations.len() >= 2, "spectroscopy.populations", "needs at least 2 entries")?;
            }
            ExperimentKind::Clss => {
                positive_list(&self.clss.populations, "clss.populations")?;
                self.clss.validate().map_err(|e| CliError::Config(format!("invalid `clss` section: {e}")))?;
            }
            ExperimentKind::SlqMetrics => {
                let s = &self.slq;
                check(s.probes >= 2, "slq.probes", "must be >= 2")?;
                check(s.steps >= 1, "slq.steps", "must be >= 1")?;
                check(s.seeds >= 1, "slq.seeds", "must be >= 1")?;
                check(s.fd_step > 0.0, "slq.fd_step", "must be > 0")?;
                check(s.dimension >= 1, "slq.dimension", "must be >= 1")?;
                if s.gradient == HvpGradient::Smoothed {
                    check(s.smoothing_sigma > 0.0, "slq.smoothing_sigma", "must be > 0")?;
                    check(
                        s.smoothing_population >= 2 && s.smoothing_population % 2 == 0,
                        "slq.smoothing_population",
                        "must be even and >= 2",
                    )?;
                }
            }
            ExperimentKind::DoubleWell => {
                let s = &self.double_well;
                check(l.kind == LandscapeKind::DoubleWell, "landscape.kind", "double_well needs kind = \"double_well\"")?;
                check(s.alpha > 0.0, "double_well.alpha", "must be > 0")?;
                check(s.population >= 1, "double_well.population", "must be >= 1")?;
                check(s.replicates >= 1, "double_well.replicates", "must be >= 1")?;
                check(s.horizon >= 1, "double_well.horizon", "must be >= 1")?;
                check(s.stride >= 1, "double_well.stride", "must be >= 1")?;
                check(s.bins >= 2, "double_well.bins", "must be >= 2")?;
                check(s.hysteresis > 0.0 && s.hysteresis < 1.0, "double_well.hysteresis", "must lie in (0, 1)")?;
                match (s.sigma, s.barrier_ratio) {
                    (Some(_), Some(_)) => {
                        return Err(key_error("double_well.sigma", "set either sigma or barrier_ratio, not both"))
                    }
                    (None, None) => return Err(key_error("double_well.sigma", "set sigma or barrier_ratio")),
                    (Some(sigma), None) => check(sigma >= 0.0, "double_well.sigma", "must be >= 0")?,
                    (None, Some(r)) => check(r > 0.0, "double_well.barrier_ratio", "must be > 0")?,
                }
                check(s.c_lo > 0.0 && s.c_hi > s.c_lo, "double_well.c_hi", "bands need 0 < c_lo < c_hi")?;
            }
            ExperimentKind::BestOfN => {
                let s = &self.best_of_n;
                check(s.sigma >= 0.0, "best_of_n.sigma", "must be >= 0")?;
                check(s.candidates >= 1, "best_of_n.candidates", "must be >= 1")?;
                check(s.batches >= 2, "best_of_n.batches", "must be >= 2")?;
                positive_list(&s.n_list, "best_of_n.n_list")?;
                check(
                    s.n_list.iter().all(|n| *n <= s.candidates),
                    "best_of_n.n_list",
                    "entries must not exceed candidates",
                )?;
                check(s.group >= 1, "best_of_n.group", "must be >= 1")?;
                check(s.tail_level > 0.0 && s.tail_level < 1.0, "best_of_n.tail_level", "must lie in (0, 1)")?;
                check(s.bootstrap >= 100, "best_of_n.bootstrap", "must be >= 100")?;
            }
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` must look like key.path=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{path}` is malformed")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
