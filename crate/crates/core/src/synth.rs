//! Synthetic Mercer models and seeded samplers.
//!
//! A model fixes the cosine-series kernel with eigenvalues `ξ_j = j^{-1/s}`
//! and a target `f* = Σ_j c*_j φ_j` with `c*_j = ξ_j^r u_j`, where the
//! source vector `u` is rescaled so that `‖u‖ = κ^{-r} ρ`. The target then
//! meets the source condition with radius exactly `ρ` and the kernel meets
//! the effective-dimension condition with a constant fitted at construction.
//!
//! Samples draw `X ~ uniform[0,1]` i.i.d. and `Y = f*(X) + ε`. Randomness
//! comes from `ChaCha20Rng::seed_from_u64(seed)`; the draw order is all
//! labeled design points, then all noise values, then the unlabeled points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::effective_dimension;
use crate::kernel::{basis_function, KernelSpec, DEFAULT_TRUNCATION};
use crate::numeric::{kahan_sum, KahanSum};

/// Identifier of the random generator recorded with every sample.
pub const RNG_ALGORITHM: &str = "ChaCha20Rng::seed_from_u64";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// `ε ~ uniform[-a, a]` with `a = M - sup|f*|`, so that `|Y| ≤ M`.
    UniformBounded { m: f64 },
    /// `ε ~ N(0, M²/2)`.
    GaussianBernstein { m: f64 },
}

impl NoiseSpec {
    pub fn m_bound(&self) -> f64 {
        match *self {
            NoiseSpec::UniformBounded { m } | NoiseSpec::GaussianBernstein { m } => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceProfile {
    /// `u_j ∝ 1/j` on the cosine modes, no mass on the constant mode.
    Harmonic,
    /// All mass on a single frequency.
    OneHot { frequency: usize },
}

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

fn default_true() -> bool {
    true
}

fn default_profile() -> SourceProfile {
    SourceProfile::Harmonic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub s: f64,
    pub r: f64,
    pub rho: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_true")]
    pub include_constant: bool,
    pub noise: NoiseSpec,
    #[serde(default = "default_profile")]
    pub profile: SourceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MercerModel {
    pub id: String,
    pub params: ModelParams,
    pub kernel: KernelSpec,
    pub kappa: f64,
    /// `2 ∫_J^∞ t^{-1/s} dt`, bounding the κ mass dropped by truncation.
    pub kappa_tail_bound: f64,
    pub frequencies: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    pub source_coeffs: Vec<f64>,
    pub target_coeffs: Vec<f64>,
    /// `Σ_j |c*_j| sup|φ_j|`.
    pub sup_norm_bound: f64,
    /// Bound on `Σ_{j>J} |c*_j| √2` for the untruncated source profile.
    pub target_tail_bound: f64,
    /// Half-width `a` (uniform) or standard deviation (Gaussian) of ε.
    pub noise_scale: f64,
    /// Fitted effective-dimension constant `D`.
    pub ed_constant: f64,
}

/// Grid `κ·10^{-k}`, `k = 0..=6`, on which `D` is fitted.
pub fn ed_lambda_grid(kappa: f64) -> Vec<f64> {
    (0..=6).map(|k| kappa * 10f64.powi(-k)).collect()
}

/// Smallest `D ≥ 1` with `N(λ) ≤ D² (λ/κ)^{-s}` on [`ed_lambda_grid`].
pub fn fit_ed_constant(eigenvalues: &[f64], kappa: f64, s: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for lambda in ed_lambda_grid(kappa) {
        let n_lambda = effective_dimension(eigenvalues, None, lambda)?.truncated;
        worst = worst.max(n_lambda * (lambda / kappa).powf(s));
    }
    Ok(worst.sqrt().max(1.0))
}

fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn make_model(params: &ModelParams) -> Result<MercerModel> {
    let ModelParams { s, r, rho, truncation, .. } = *params;
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("s must lie in (0, 1), got {s}")));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid(format!("r must be positive, got {r}")));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {rho}")));
    }
    if truncation < 10 {
        return Err(Error::invalid(format!("truncation must be at least 10, got {truncation}")));
    }
    let m = params.noise.m_bound();
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::invalid(format!("noise M must be positive, got {m}")));
    }

    let kernel = KernelSpec::mercer_series(s, truncation, params.include_constant)?;
    let kappa = kernel.kappa();
    let modes = kernel.modes().expect("mercer kernel has modes");
    let frequencies: Vec<usize> = modes.iter().map(|m| m.frequency).collect();
    let eigenvalues: Vec<f64> = modes.iter().map(|m| m.eigenvalue).collect();

    let raw: Vec<f64> = match params.profile {
        SourceProfile::Harmonic => frequencies
            .iter()
            .map(|&j| if j == 0 { 0.0 } else { 1.0 / j as f64 })
            .collect(),
        SourceProfile::OneHot { frequency } => {
            if !frequencies.contains(&frequency) {
                return Err(Error::invalid(format!(
                    "one-hot frequency {frequency} is not among the model's modes"
                )));
            }
            frequencies
                .iter()
                .map(|&j| if j == frequency { 1.0 } else { 0.0 })
                .collect()
        }
    };
    let raw_norm = kahan_sum(raw.iter().map(|u| u * u)).sqrt();
    let radius = kappa.powf(-r) * rho;
    let scale = radius / raw_norm;
    let source_coeffs: Vec<f64> = raw.iter().map(|u| u * scale).collect();
    let target_coeffs: Vec<f64> = source_coeffs
        .iter()
        .zip(&eigenvalues)
        .map(|(u, xi)| xi.powf(r) * u)
        .collect();

    let sup_norm_bound = kahan_sum(
        target_coeffs
            .iter()
            .zip(&frequencies)
            .map(|(c, &j)| c.abs() * if j == 0 { 1.0 } else { std::f64::consts::SQRT_2 }),
    );
    let target_tail_bound = match params.profile {
        // Σ_{j>J} j^{-r/s-1} ≤ J^{-r/s} / (r/s).
        SourceProfile::Harmonic => {
            std::f64::consts::SQRT_2 * scale * (truncation as f64).powf(-r / s) / (r / s)
        }
        SourceProfile::OneHot { .. } => 0.0,
    };
    let noise_scale = match params.noise {
        NoiseSpec::UniformBounded { m } => {
            let a = m - sup_norm_bound;
            if a < 0.0 {
                return Err(Error::invalid(format!(
                    "noise M = {m} is below the target sup-norm bound {sup_norm_bound}"
                )));
            }
            a
        }
        NoiseSpec::GaussianBernstein { m } => m / std::f64::consts::SQRT_2,
    };
    let ed_constant = fit_ed_constant(&eigenvalues, kappa, s)?;
    let kappa_tail_bound = 2.0 * (truncation as f64).powf(1.0 - 1.0 / s) / (1.0 / s - 1.0);
    let id = short_hash(
        serde_json::to_string(params)
            .expect("model parameters serialize")
            .as_bytes(),
    );

    Ok(MercerModel {
        id,
        params: params.clone(),
        kernel,
        kappa,
        kappa_tail_bound,
        frequencies,
        eigenvalues,
        source_coeffs,
        target_coeffs,
        sup_norm_bound,
        target_tail_bound,
        noise_scale,
        ed_constant,
    })
}

impl MercerModel {
    pub fn s(&self) -> f64 {
        self.params.s
    }

    pub fn r(&self) -> f64 {
        self.params.r
    }

    pub fn rho(&self) -> f64 {
        self.params.rho
    }

    pub fn m_bound(&self) -> f64 {
        self.params.noise.m_bound()
    }

    pub fn source_norm(&self) -> f64 {
        kahan_sum(self.source_coeffs.iter().map(|u| u * u)).sqrt()
    }

    /// `f*(x)` by truncated series summation.
    pub fn target_at(&self, x: f64) -> f64 {
        let mut acc = KahanSum::new();
        for (c, &j) in self.target_coeffs.iter().zip(&self.frequencies) {
            if *c != 0.0 {
                acc.add(c * basis_function(j, x));
            }
        }
        acc.value()
    }

    /// `ñ = max(n, ⌈n^{(1+s)/(2r+s)}⌉)`, the design size with unlabeled
    /// padding.
    pub fn padded_size(&self, n: usize) -> usize {
        padded_size(n, self.r(), self.s())
    }

    fn noise_draws(&self, rng: &mut ChaCha20Rng, count: usize) -> Vec<f64> {
        match self.params.noise {
            NoiseSpec::UniformBounded { .. } => {
                let a = self.noise_scale;
                if a == 0.0 {
                    return vec![0.0; count];
                }
                let dist = Uniform::new_inclusive(-a, a).expect("valid uniform range");
                (0..count).map(|_| dist.sample(rng)).collect()
            }
            NoiseSpec::GaussianBernstein { .. } => {
                let dist = Normal::new(0.0, self.noise_scale).expect("valid normal scale");
                (0..count).map(|_| dist.sample(rng)).collect()
            }
        }
    }
}

/// Ceiling of `n^{(1+s)/(2r+s)}`, robust to the power landing a hair above
/// an integer.
pub fn padded_size(n: usize, r: f64, s: f64) -> usize {
    let v = (n as f64).powf((1.0 + s) / (2.0 * r + s));
    let nearest = v.round();
    let size = if (v - nearest).abs() <= 1e-9 * v.max(1.0) {
        nearest
    } else {
        v.ceil()
    };
    (size as usize).max(n)
}

/// `f*(x)` for `x ∈ [0, 1]`.
pub fn eval_target(model: &MercerModel, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!("point {x} lies outside [0, 1]")));
    }
    Ok(model.target_at(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x_labeled: Vec<f64>,
    pub y: Vec<f64>,
    pub x_unlabeled: Option<Vec<f64>>,
    /// `(ñ/n)(Y_1, …, Y_n, 0, …, 0)`.
    pub y_padded: Option<Vec<f64>>,
    pub seed: u64,
    pub model_id: String,
    pub rng_algorithm: String,
}

impl Sample {
    pub fn n(&self) -> usize {
        self.x_labeled.len()
    }

    /// Labeled then unlabeled design points.
    pub fn design(&self) -> Vec<f64> {
        let mut pts = self.x_labeled.clone();
        if let Some(extra) = &self.x_unlabeled {
            pts.extend_from_slice(extra);
        }
        pts
    }

    /// Response the CG fit runs on: the padded vector when present.
    pub fn response(&self) -> Vec<f64> {
        self.y_padded.clone().unwrap_or_else(|| self.y.clone())
    }
}

pub fn draw_sample(model: &MercerModel, n: usize, unlabeled: bool, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x_labeled: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let noise = model.noise_draws(&mut rng, n);
    let y: Vec<f64> = x_labeled
        .iter()
        .zip(&noise)
        .map(|(&x, e)| model.target_at(x) + e)
        .collect();

    let (x_unlabeled, y_padded) = if unlabeled {
        let total = model.padded_size(n);
        let extra: Vec<f64> = (n..total).map(|_| rng.random::<f64>()).collect();
        let factor = total as f64 / n as f64;
        let mut padded: Vec<f64> = y.iter().map(|v| v * factor).collect();
        padded.resize(total, 0.0);
        (Some(extra), Some(padded))
    } else {
        (None, None)
    };

    Ok(Sample {
        x_labeled,
        y,
        x_unlabeled,
        y_padded,
        seed,
        model_id: model.id.clone(),
        rng_algorithm: RNG_ALGORITHM.to_string(),
    })
}

/// Draws `count` noise values from the model's noise law.
pub fn draw_noise(model: &MercerModel, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    model.noise_draws(&mut rng, count)
}
