//! Kernels on the unit interval, the normalized kernel matrix and the
//! `K_n`-weighted inner product.
//!
//! The Mercer series kernel uses the cosine basis, which is orthonormal in
//! `L²(uniform[0,1])`:
//!
//! ```text
//! φ_0(x) = 1,   φ_j(x) = √2·cos(jπx),   ξ_j = j^{-1/s}
//! k(x, y) = ξ_0·φ_0(x)φ_0(y) + Σ_{j=1}^{J} ξ_j φ_j(x) φ_j(y)
//! ```
//!
//! with `ξ_0 = 1` present only when the constant mode is included.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kahan_sum;

/// Default number of cosine modes in a Mercer series kernel.
pub const DEFAULT_TRUNCATION: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelVariant {
    /// `exp(-(x - y)² / (2 h²))`.
    Gaussian { bandwidth: f64 },
    /// Truncated cosine series with eigenvalues `j^{-1/s}`.
    MercerSeries {
        s: f64,
        truncation: usize,
        include_constant: bool,
    },
}

/// A bounded positive semi-definite kernel together with `κ ≥ sup k(x, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub variant: KernelVariant,
    pub kappa: f64,
}

/// One eigen-pair of a Mercer series kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// Cosine frequency `j` (0 is the constant function).
    pub frequency: usize,
    pub eigenvalue: f64,
}

/// `φ_j(x)` of the cosine basis.
#[inline]
pub fn basis_function(frequency: usize, x: f64) -> f64 {
    if frequency == 0 {
        1.0
    } else {
        std::f64::consts::SQRT_2 * (frequency as f64 * std::f64::consts::PI * x).cos()
    }
}

/// `j^{-1/s}` for `j ≥ 1`.
#[inline]
pub fn power_eigenvalue(frequency: usize, s: f64) -> f64 {
    (frequency as f64).powf(-1.0 / s)
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(Error::invalid(format!(
                "gaussian bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            variant: KernelVariant::Gaussian { bandwidth },
            kappa: 1.0,
        })
    }

    pub fn mercer_series(s: f64, truncation: usize, include_constant: bool) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid(format!("decay parameter s must be positive, got {s}")));
        }
        if truncation == 0 {
            return Err(Error::invalid("truncation must be at least 1"));
        }
        let constant = if include_constant { 1.0 } else { 0.0 };
        let kappa = constant + 2.0 * kahan_sum((1..=truncation).map(|j| power_eigenvalue(j, s)));
        Ok(Self {
            variant: KernelVariant::MercerSeries {
                s,
                truncation,
                include_constant,
            },
            kappa,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Eigen-pairs in decreasing eigenvalue order, `None` for kernels without
    /// a known expansion.
    pub fn modes(&self) -> Option<Vec<Mode>> {
        match self.variant {
            KernelVariant::Gaussian { .. } => None,
            KernelVariant::MercerSeries {
                s,
                truncation,
                include_constant,
            } => {
                let mut modes = Vec::with_capacity(truncation + 1);
                if include_constant {
                    modes.push(Mode {
                        frequency: 0,
                        eigenvalue: 1.0,
                    });
                }
                modes.extend((1..=truncation).map(|j| Mode {
                    frequency: j,
                    eigenvalue: power_eigenvalue(j, s),
                }));
                Some(modes)
            }
        }
    }

    pub fn eigenvalues(&self) -> Option<Vec<f64>> {
        self.modes()
            .map(|m| m.into_iter().map(|mode| mode.eigenvalue).collect())
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self.variant {
            KernelVariant::Gaussian { bandwidth } => {
                let d = x - y;
                (-d * d / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelVariant::MercerSeries {
                s,
                truncation,
                include_constant,
            } => {
                let mut acc = if include_constant { 1.0 } else { 0.0 };
                for j in 1..=truncation {
                    acc += power_eigenvalue(j, s) * basis_function(j, x) * basis_function(j, y);
                }
                acc
            }
        }
    }

    /// Feature matrix with rows `(√ξ_j φ_j(x_i))_j`, so that `Φ Φᵀ` is the
    /// raw kernel matrix.
    fn feature_matrix(&self, points: &[f64], modes: &[Mode]) -> DMatrix<f64> {
        let mut features = DMatrix::zeros(points.len(), modes.len());
        for (k, mode) in modes.iter().enumerate() {
            let scale = mode.eigenvalue.sqrt();
            for (i, &x) in points.iter().enumerate() {
                features[(i, k)] = scale * basis_function(mode.frequency, x);
            }
        }
        features
    }

    /// Raw cross-kernel matrix `(k(a_i, b_j))_{ij}` (no normalization).
    pub fn cross_matrix(&self, rows: &[f64], cols: &[f64]) -> DMatrix<f64> {
        match self.modes() {
            Some(modes) => {
                let a = self.feature_matrix(rows, &modes);
                let b = self.feature_matrix(cols, &modes);
                a * b.transpose()
            }
            None => DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.eval(rows[i], cols[j])),
        }
    }
}

/// The normalized kernel matrix `K_n = (1/n)(k(X_i, X_j))_{ij}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: DMatrix<f64>,
}

impl KernelMatrix {
    /// Wraps an already normalized matrix. It must be square, non-empty,
    /// finite and exactly symmetric.
    pub fn from_entries(entries: DMatrix<f64>) -> Result<Self> {
        let n = entries.nrows();
        if n == 0 || entries.ncols() != n {
            return Err(Error::invalid(format!(
                "kernel matrix must be square and non-empty, got {}x{}",
                n,
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel matrix has non-finite entries"));
        }
        for j in 0..n {
            for i in (j + 1)..n {
                if entries[(i, j)] != entries[(j, i)] {
                    return Err(Error::invalid(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }

    /// `K_n v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.entries * v
    }
}

/// Builds `K_n` for the given design points.
///
/// Mercer series kernels go through the feature factorisation `Φ Φᵀ / n`;
/// only the upper triangle of the product is kept and mirrored so symmetry
/// is exact.
pub fn build_kernel_matrix(points: &[f64], kernel: &KernelSpec) -> Result<KernelMatrix> {
    if points.is_empty() {
        return Err(Error::invalid("point list is empty"));
    }
    if let Some(bad) = points.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite design point {bad}")));
    }
    let n = points.len();
    let scale = 1.0 / n as f64;
    let mut entries = match kernel.modes() {
        Some(modes) => {
            let features = kernel.feature_matrix(points, &modes);
            let mut gram = &features * features.transpose();
            gram *= scale;
            gram
        }
        None => {
            let mut gram = DMatrix::zeros(n, n);
            for j in 0..n {
                for i in 0..=j {
                    gram[(i, j)] = kernel.eval(points[i], points[j]) * scale;
                }
            }
            gram
        }
    };
    for j in 0..n {
        for i in (j + 1)..n {
            entries[(i, j)] = entries[(j, i)];
        }
    }
    Ok(KernelMatrix { entries })
}

/// `⟨u, v⟩_{K_n} = (1/n) uᵀ K_n v`.
pub fn kn_inner(u: &DVector<f64>, v: &DVector<f64>, k: &KernelMatrix) -> Result<f64> {
    let n = k.n();
    if u.len() != n || v.len() != n {
        return Err(Error::invalid(format!(
            "dimension mismatch: vectors of length {} and {} against a {n}x{n} kernel matrix",
            u.len(),
            v.len()
        )));
    }
    Ok(u.dot(&k.apply(v)) / n as f64)
}
