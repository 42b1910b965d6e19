//! Error norms and effective dimension.
//!
//! For a Mercer model the estimator `f_α = (1/n) Σ_i α_i k(X_i, ·)` has
//! spectral coefficients `ĉ_j = ξ_j (1/n) Σ_i α_i φ_j(X_i)`, and the
//! interpolating error norms are exact finite sums:
//!
//! ```text
//! ‖K^{-θ}(f_α - f*)‖²_{2,ν} = Σ_j ξ_j^{-2θ} (ĉ_j - c*_j)²
//! ```
//!
//! `θ = 0` is the `L²(ν)` error and `θ = 1/2` the RKHS norm of the error.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cg::predict;
use crate::error::{Error, Result};
use crate::kernel::{basis_function, KernelSpec};
use crate::numeric::KahanSum;
use crate::stopping::Regime;
use crate::synth::{MercerModel, SourceProfile};

/// Smallest error value used when a logarithm of an error is needed.
pub const ERROR_FLOOR: f64 = 1e-300;

/// Monte-Carlo draws used when no spectral route is available.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorMethod {
    Spectral,
    /// `std_err` is the standard error of the mean-square estimate
    /// `error_value²`.
    MonteCarlo { samples: usize, std_err: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub theta: f64,
    pub error_value: f64,
    pub method: ErrorMethod,
    /// Weighted mass `Σ_{j>J} ξ_j^{-2θ} c*_j²` of the untruncated target
    /// profile beyond the model's truncation.
    pub truncation_note: f64,
}

impl ErrorReport {
    pub fn squared(&self) -> f64 {
        self.error_value * self.error_value
    }
}

/// Spectral coefficients of `f_α`, one per kernel mode.
pub fn estimator_spectrum(alpha: &DVector<f64>, train_points: &[f64], kernel: &KernelSpec) -> Result<Vec<f64>> {
    let modes = kernel.modes().ok_or_else(|| {
        Error::Unsupported("kernel has no known eigen-expansion; use the Monte-Carlo norm".into())
    })?;
    if alpha.len() != train_points.len() || train_points.is_empty() {
        return Err(Error::invalid(format!(
            "{} coefficients for {} training points",
            alpha.len(),
            train_points.len()
        )));
    }
    let inv_n = 1.0 / train_points.len() as f64;
    Ok(modes
        .iter()
        .map(|mode| {
            let mut acc = KahanSum::new();
            for (a, &x) in alpha.iter().zip(train_points) {
                acc.add(a * basis_function(mode.frequency, x));
            }
            mode.eigenvalue * acc.value() * inv_n
        })
        .collect())
}

/// Spectral coefficients of several expansions over the same training
/// points, through one basis matrix product.
pub fn estimator_spectra(alphas: &[&DVector<f64>], train_points: &[f64], kernel: &KernelSpec) -> Result<Vec<Vec<f64>>> {
    let modes = kernel.modes().ok_or_else(|| {
        Error::Unsupported("kernel has no known eigen-expansion; use the Monte-Carlo norm".into())
    })?;
    let n = train_points.len();
    if n == 0 || alphas.iter().any(|a| a.len() != n) {
        return Err(Error::invalid(format!("coefficient vectors must have length {n}")));
    }
    if alphas.is_empty() {
        return Ok(Vec::new());
    }
    let inv_n = 1.0 / n as f64;
    let basis = DMatrix::from_fn(modes.len(), n, |k, i| {
        modes[k].eigenvalue * inv_n * basis_function(modes[k].frequency, train_points[i])
    });
    let coeffs = DMatrix::from_columns(&alphas.iter().map(|a| (*a).clone()).collect::<Vec<_>>());
    let spectra = basis * coeffs;
    Ok(spectra
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect())
}

/// `(Σ_j ξ_j^{-2θ} Δ_j²)^{1/2}` with compensated summation. Terms with
/// `Δ_j = 0` are skipped before weighting.
pub fn weighted_norm(diff: &[f64], eigenvalues: &[f64], theta: f64) -> f64 {
    let mut acc = KahanSum::new();
    for (d, xi) in diff.iter().zip(eigenvalues) {
        if *d == 0.0 {
            continue;
        }
        let w = if theta == 0.0 { 1.0 } else { xi.powf(-2.0 * theta) };
        acc.add(w * d * d);
    }
    acc.value().max(0.0).sqrt()
}

fn check_theta(model: &MercerModel, theta: f64) -> Result<()> {
    match Regime::for_source(model.r()) {
        Regime::Inner if (0.0..=0.5).contains(&theta) => Ok(()),
        Regime::Outer if theta >= 0.0 && theta < model.r() => Ok(()),
        Regime::Inner => Err(Error::invalid(format!(
            "theta = {theta} outside [0, 1/2] for an inner-regime model"
        ))),
        Regime::Outer => Err(Error::invalid(format!(
            "theta = {theta} outside [0, r) = [0, {}) for an outer-regime model",
            model.r()
        ))),
    }
}

/// Tail bound `Σ_{j>J} ξ_j^{-2θ} c*_j²` for the untruncated profile.
pub fn truncation_tail(model: &MercerModel, theta: f64) -> f64 {
    match model.params.profile {
        SourceProfile::OneHot { .. } => 0.0,
        SourceProfile::Harmonic => {
            let s = model.s();
            let j_last = model.params.truncation as f64;
            // u_j = scale / j, so ξ_j^{-2θ} c*_j² = scale² j^{-p}.
            let scale = model
                .frequencies
                .iter()
                .position(|&j| j == 1)
                .map(|i| model.source_coeffs[i])
                .unwrap_or(0.0);
            let p = 2.0 * (model.r() - theta) / s + 2.0;
            scale * scale * j_last.powf(1.0 - p) / (p - 1.0)
        }
    }
}

/// Spectral error norm from precomputed estimator coefficients.
pub fn error_norm_from_spectrum(spectrum: &[f64], model: &MercerModel, theta: f64) -> Result<ErrorReport> {
    check_theta(model, theta)?;
    if spectrum.len() != model.target_coeffs.len() {
        return Err(Error::invalid(format!(
            "spectrum has {} coefficients, model has {}",
            spectrum.len(),
            model.target_coeffs.len()
        )));
    }
    let diff: Vec<f64> = spectrum
        .iter()
        .zip(&model.target_coeffs)
        .map(|(c, t)| c - t)
        .collect();
    Ok(ErrorReport {
        theta,
        error_value: weighted_norm(&diff, &model.eigenvalues, theta),
        method: ErrorMethod::Spectral,
        truncation_note: truncation_tail(model, theta),
    })
}

/// `‖K^{-θ}(f_α - f*)‖_{2,ν}` by the spectral route.
pub fn error_norm(alpha: &DVector<f64>, train_points: &[f64], model: &MercerModel, theta: f64) -> Result<ErrorReport> {
    check_theta(model, theta)?;
    let spectrum = estimator_spectrum(alpha, train_points, &model.kernel)?;
    error_norm_from_spectrum(&spectrum, model, theta)
}

/// Monte-Carlo `L²(ν)` error with `ν = uniform[0, 1]`.
///
/// The estimator is evaluated through kernel evaluations; `target` maps a
/// batch of points to target values.
pub fn error_norm_monte_carlo<F>(
    alpha: &DVector<f64>,
    train_points: &[f64],
    kernel: &KernelSpec,
    target: F,
    samples: usize,
    seed: u64,
) -> Result<ErrorReport>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if samples < 2 {
        return Err(Error::invalid("Monte-Carlo norm needs at least 2 samples"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sum = KahanSum::new();
    let mut sum_sq = KahanSum::new();
    let chunk = 2048;
    let mut remaining = samples;
    while remaining > 0 {
        let m = remaining.min(chunk);
        let xs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let fhat = predict(alpha, train_points, kernel, &xs)?;
        let fstar = target(&xs);
        for (a, b) in fhat.iter().zip(&fstar) {
            let e2 = (a - b) * (a - b);
            sum.add(e2);
            sum_sq.add(e2 * e2);
        }
        remaining -= m;
    }
    let n = samples as f64;
    let mean = sum.value() / n;
    let var = ((sum_sq.value() / n - mean * mean) * n / (n - 1.0)).max(0.0);
    Ok(ErrorReport {
        theta: 0.0,
        error_value: mean.max(0.0).sqrt(),
        method: ErrorMethod::MonteCarlo {
            samples,
            std_err: (var / n).sqrt(),
        },
        truncation_note: 0.0,
    })
}

/// Batched `f*(x)` for a Mercer model.
pub fn target_values(model: &MercerModel, xs: &[f64]) -> Vec<f64> {
    let active: Vec<usize> = (0..model.target_coeffs.len())
        .filter(|&k| model.target_coeffs[k] != 0.0)
        .collect();
    let basis = DMatrix::from_fn(xs.len(), active.len(), |i, k| {
        basis_function(model.frequencies[active[k]], xs[i])
    });
    let coeffs = DVector::from_iterator(active.len(), active.iter().map(|&k| model.target_coeffs[k]));
    (basis * coeffs).iter().copied().collect()
}

/// Power-law continuation `ξ_j = j^{-1/s}` of a spectrum truncated at
/// frequency `last_frequency`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTail {
    pub s: f64,
    pub last_frequency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveDimension {
    pub lambda: f64,
    /// `Σ_j ξ_j / (ξ_j + λ)` over the given eigenvalues.
    pub truncated: f64,
    /// Midpoint-integral estimate of the tail beyond the truncation.
    pub tail_estimate: f64,
    /// Upper bound `(1/λ) ∫_J^∞ t^{-1/s} dt` on the tail.
    pub tail_bound: f64,
}

impl EffectiveDimension {
    pub fn value(&self) -> f64 {
        self.truncated + self.tail_estimate
    }
}

/// `N(λ) = Tr(K (K + λI)^{-1}) = Σ_j ξ_j / (ξ_j + λ)`.
pub fn effective_dimension(eigenvalues: &[f64], tail: Option<PowerTail>, lambda: f64) -> Result<EffectiveDimension> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let mut acc = KahanSum::new();
    for xi in eigenvalues {
        acc.add(xi / (xi + lambda));
    }
    let (tail_estimate, tail_bound) = match tail {
        None => (0.0, 0.0),
        Some(PowerTail { s, last_frequency }) => {
            let q = 1.0 / s - 1.0;
            let j = last_frequency as f64;
            ((j + 0.5).powf(-q) / (q * lambda), j.powf(-q) / (q * lambda))
        }
    };
    Ok(EffectiveDimension {
        lambda,
        truncated: acc.value(),
        tail_estimate,
        tail_bound,
    })
}
