//! Kernel conjugate gradient and its baselines.
//!
//! [`cg_fit`] runs the CG recursion on `K_n α = Υ` and records every iterate
//! `α_m`, the minimiser of the residual norm over the Krylov space
//! `span{Υ, K_nΥ, …, K_n^{m-1}Υ}`. The residual is measured either in the
//! `K_n` seminorm ([`CgMode::KnNorm`], CG on the normal equations) or in
//! the rescaled Euclidean norm ([`CgMode::Euclidean`], the kernel PLS
//! variant). Both modes share one recursion and differ only in the weighting
//! matrix `W ∈ {K_n, I}` of the inner product `⟨a, b⟩_W = (1/n) aᵀ W b`.
//!
//! [`krylov_oracle`] computes the same minimiser by brute force and exists to
//! check the recursion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelMatrix, KernelSpec};

/// Relative size of `‖t_i‖_W` (against `‖t_1‖_W`) at which the basis is
/// declared exhausted.
pub const BREAKDOWN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgMode {
    /// Minimise `‖Υ - K_n α‖_{K_n}`.
    #[default]
    KnNorm,
    /// Minimise `‖Υ - K_n α‖` in the rescaled Euclidean norm.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    pub max_iter: usize,
    pub mode: CgMode,
    /// Re-orthogonalise every new basis vector against all previous ones.
    /// Costs `O(m n²)`; off by default.
    pub reorthogonalize: bool,
    /// Stop as soon as `‖Υ - K_n α_m‖_{K_n}` drops below this value. The
    /// recorded prefix is identical to an uncapped run.
    pub residual_target: Option<f64>,
}

impl CgOptions {
    pub fn new(max_iter: usize, mode: CgMode) -> Self {
        Self {
            max_iter,
            mode,
            reorthogonalize: false,
            residual_target: None,
        }
    }
}

/// Per-iteration record of a CG run. Index `m` of every list refers to the
/// iterate `α_m`; `alphas[0]` is the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CgTrace {
    pub mode: CgMode,
    pub alphas: Vec<DVector<f64>>,
    /// `‖Υ - K_n α_m‖_{K_n}` for `m = 0..=m_last`.
    pub residual_kn_norms: Vec<f64>,
    /// Residual in the norm the mode minimises. Identical to
    /// `residual_kn_norms` in [`CgMode::KnNorm`].
    pub criterion_norms: Vec<f64>,
    /// `‖t_i‖_W` before normalisation, `i = 1, 2, …`. Includes the norm that
    /// triggered a breakdown, if any.
    pub basis_norms: Vec<f64>,
    /// Iteration whose basis vector vanished; `m_last = breakdown_at - 1`.
    pub breakdown_at: Option<usize>,
    pub m_last: usize,
}

impl CgTrace {
    pub fn n(&self) -> usize {
        self.alphas[0].len()
    }

    pub fn alpha(&self, m: usize) -> &DVector<f64> {
        &self.alphas[m]
    }

    /// True when the Krylov space was exhausted, in which case the last
    /// residual is zero in exact arithmetic.
    pub fn exhausted(&self) -> bool {
        self.breakdown_at.is_some() || self.m_last == self.n()
    }

    pub fn last_residual(&self) -> f64 {
        self.residual_kn_norms[self.m_last]
    }
}

fn weighted(mode: CgMode, k: &KernelMatrix, v: &DVector<f64>) -> DVector<f64> {
    match mode {
        CgMode::KnNorm => k.apply(v),
        CgMode::Euclidean => v.clone(),
    }
}

fn check_dims(k: &KernelMatrix, y: &DVector<f64>) -> Result<()> {
    if y.len() != k.n() {
        return Err(Error::invalid(format!(
            "dimension mismatch: response of length {} against a {}x{} kernel matrix",
            y.len(),
            k.n(),
            k.n()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("response vector has non-finite entries"));
    }
    Ok(())
}

/// Runs kernel CG for at most `max_iter` iterations (capped at `n`).
pub fn cg_fit(k: &KernelMatrix, y: &DVector<f64>, max_iter: usize, mode: CgMode) -> Result<CgTrace> {
    cg_fit_with(k, y, &CgOptions::new(max_iter, mode))
}

pub fn cg_fit_with(k: &KernelMatrix, y: &DVector<f64>, opts: &CgOptions) -> Result<CgTrace> {
    check_dims(k, y)?;
    let n = k.n();
    let inv_n = 1.0 / n as f64;
    let max_iter = opts.max_iter.min(n);
    let mode = opts.mode;

    let mut alpha = DVector::zeros(n);
    let mut r = y.clone();
    let mut d = y.clone();
    let mut kr = k.apply(&r);
    let mut t = kr.clone();

    let kn_norm = |r: &DVector<f64>, kr: &DVector<f64>| (r.dot(kr) * inv_n).max(0.0).sqrt();
    let crit_norm = |r: &DVector<f64>, kr: &DVector<f64>| match mode {
        CgMode::KnNorm => kn_norm(r, kr),
        CgMode::Euclidean => (r.norm_squared() * inv_n).sqrt(),
    };

    let mut trace = CgTrace {
        mode,
        alphas: vec![alpha.clone()],
        residual_kn_norms: vec![kn_norm(&r, &kr)],
        criterion_norms: vec![crit_norm(&r, &kr)],
        basis_norms: Vec::new(),
        breakdown_at: None,
        m_last: 0,
    };

    // Absolute floor for the very first basis vector, used when Υ is zero or
    // lies in the null space of K_n.
    let k_scale = k
        .matrix()
        .row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let y_rms = (y.norm_squared() * inv_n).sqrt();
    let first_floor = match mode {
        CgMode::KnNorm => 1e-14 * k_scale.powf(1.5) * y_rms,
        CgMode::Euclidean => 1e-14 * k_scale * y_rms,
    };

    // Normalised basis vectors with their W-images and update directions,
    // kept only when re-orthogonalising.
    let mut history: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> = Vec::new();
    let mut first_norm = 0.0;
    let reached = |res: f64| opts.residual_target.is_some_and(|target| res < target);
    if reached(trace.residual_kn_norms[0]) {
        return Ok(trace);
    }

    for i in 1..=max_iter {
        if opts.reorthogonalize {
            for _ in 0..2 {
                for (tk, wtk, dk) in &history {
                    let c = t.dot(wtk) * inv_n;
                    t.axpy(-c, tk, 1.0);
                    d.axpy(-c, dk, 1.0);
                }
            }
        }

        let mut wt = weighted(mode, k, &t);
        let t_norm = (t.dot(&wt) * inv_n).max(0.0).sqrt();
        if !t_norm.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: i,
                message: "basis norm is not finite".into(),
            });
        }
        trace.basis_norms.push(t_norm);
        let exhausted = if i == 1 {
            first_norm = t_norm;
            t_norm <= first_floor
        } else {
            t_norm <= BREAKDOWN_TOLERANCE * first_norm
        };
        if exhausted {
            trace.breakdown_at = Some(i);
            break;
        }

        t /= t_norm;
        wt /= t_norm;
        d /= t_norm;

        // ⟨r_i, t_i⟩_W equals ⟨Υ, t_i⟩_W in exact arithmetic; the residual
        // form keeps the recorded residuals monotone under rounding.
        let gamma = r.dot(&wt) * inv_n;
        alpha.axpy(gamma, &d, 1.0);
        r.axpy(-gamma, &t, 1.0);
        kr = k.apply(&r);

        let res_kn = kn_norm(&r, &kr);
        let res_crit = crit_norm(&r, &kr);
        if !(gamma.is_finite() && res_kn.is_finite() && res_crit.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: i,
                message: "non-finite iterate".into(),
            });
        }
        trace.alphas.push(alpha.clone());
        trace.residual_kn_norms.push(res_kn);
        trace.criterion_norms.push(res_crit);
        trace.m_last = i;

        if i == max_iter || reached(res_kn) {
            break;
        }

        let beta = wt.dot(&kr) * inv_n;
        if opts.reorthogonalize {
            history.push((t.clone(), wt, d.clone()));
        }
        // d_{i+1} = r_{i+1} - β d_i, t_{i+1} = K_n d_{i+1}.
        d = &r - &d * beta;
        t = &kr - &t * beta;
    }

    Ok(trace)
}

/// Exact minimiser of the mode's residual norm over the `m`-dimensional
/// Krylov space, by explicit orthonormal basis and normal equations.
///
/// If `m` exceeds the numerical Krylov dimension the minimiser over the
/// whole Krylov space is returned.
pub fn krylov_oracle(k: &KernelMatrix, y: &DVector<f64>, m: usize, mode: CgMode) -> Result<DVector<f64>> {
    check_dims(k, y)?;
    let n = k.n();
    if m == 0 || y.norm() == 0.0 {
        return Ok(DVector::zeros(n));
    }

    // Orthonormal basis of span{Υ, KΥ, …, K^{m-1}Υ}, two passes of modified
    // Gram-Schmidt per new vector.
    let mut basis: Vec<DVector<f64>> = vec![y / y.norm()];
    while basis.len() < m.min(n) {
        let mut v = k.apply(basis.last().unwrap());
        let scale = v.norm();
        if scale == 0.0 {
            break;
        }
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-10 * scale {
            break;
        }
        basis.push(v / norm);
    }
    let q = DMatrix::from_columns(&basis);
    let b = k.matrix() * &q;
    let wb = match mode {
        CgMode::KnNorm => k.matrix() * &b,
        CgMode::Euclidean => b.clone(),
    };
    let gram = b.transpose() * &wb;
    let rhs = wb.transpose() * y;

    // Pseudo-inverse solve; directions of the basis that K_n annihilates do
    // not affect the criterion.
    let eig = gram.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let proj = eig.eigenvectors.transpose() * rhs;
    let mut coeffs = DVector::zeros(proj.len());
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-14 * top {
            coeffs[i] = proj[i] / lam;
        }
    }
    let c = &eig.eigenvectors * coeffs;
    Ok(q * c)
}

/// Kernel ridge regression coefficients `(K_n + λI)^{-1} Υ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub alpha: DVector<f64>,
    pub lambda: f64,
}

pub fn ridge_fit(k: &KernelMatrix, y: &DVector<f64>, lambda: f64) -> Result<RidgeSolution> {
    check_dims(k, y)?;
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    let n = k.n();
    let system = k.matrix() + DMatrix::identity(n, n) * lambda;
    let chol = system.cholesky().ok_or_else(|| Error::NumericalFailure {
        iteration: 0,
        message: format!("K_n + {lambda:e} I is not positive definite"),
    })?;
    Ok(RidgeSolution {
        alpha: chol.solve(y),
        lambda,
    })
}

/// Evaluates `f_α(x) = (1/n) Σ_i α_i k(X_i, x)` at each query point.
pub fn predict(
    alpha: &DVector<f64>,
    train_points: &[f64],
    kernel: &KernelSpec,
    query_points: &[f64],
) -> Result<Vec<f64>> {
    if alpha.len() != train_points.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} coefficients for {} training points",
            alpha.len(),
            train_points.len()
        )));
    }
    if train_points.is_empty() || query_points.is_empty() {
        return Ok(vec![0.0; query_points.len()]);
    }
    let cross = kernel.cross_matrix(query_points, train_points);
    let values = cross * alpha / train_points.len() as f64;
    Ok(values.iter().copied().collect())
}
