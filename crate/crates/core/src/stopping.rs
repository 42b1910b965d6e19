//! Early stopping: discrepancy thresholds and hold-out selection.
//!
//! The discrepancy rule stops at the first iteration `m ≥ 0` whose residual
//! satisfies `‖Υ - K_n α_m‖_{K_n} < Ω`. For a target inside the RKHS
//! (`r ≥ 1/2`) the threshold is
//!
//! ```text
//! Ω = τ'·M·√κ·((4D/√n)·log(6/γ))^{(2r+1)/(2r+s)}
//! ```
//!
//! and for the outer case (`r < 1/2`, run on the padded semi-supervised
//! response) `M` is replaced by `max(ρ, M)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cg::CgTrace;
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `r ≥ 1/2`: the target lies in the RKHS.
    Inner,
    /// `r < 1/2`: the target lies outside the RKHS; unlabeled padding is used.
    Outer,
}

impl Regime {
    pub fn for_source(r: f64) -> Self {
        if r >= 0.5 {
            Regime::Inner
        } else {
            Regime::Outer
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Inner => f.write_str("inner"),
            Regime::Outer => f.write_str("outer"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    /// Response / noise scale `M`.
    pub m_bound: f64,
    pub kappa: f64,
    /// Effective-dimension constant `D ≥ 1`.
    pub d: f64,
    pub n: usize,
    pub gamma: f64,
    pub r: f64,
    pub s: f64,
    pub tau_prime: f64,
    /// Source-condition radius; required by the outer threshold only.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub omega: f64,
    /// Whether `n` meets the sample-size condition of the regime. Reported,
    /// never enforced.
    pub admissible: bool,
    /// Smallest `n` meeting that condition.
    pub min_admissible_n: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_common(p: &ThresholdParams) -> Result<()> {
    positive("M", p.m_bound)?;
    positive("kappa", p.kappa)?;
    positive("r", p.r)?;
    positive("tau_prime", p.tau_prime)?;
    if !(p.d.is_finite() && p.d >= 1.0) {
        return Err(Error::invalid(format!("D must be at least 1, got {}", p.d)));
    }
    if p.n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if !(p.gamma > 0.0 && p.gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", p.gamma)));
    }
    // s = 1 is the trivially satisfied effective-dimension bound and is
    // accepted alongside the open interval.
    if !(p.s > 0.0 && p.s <= 1.0) {
        return Err(Error::invalid(format!("s must lie in (0, 1], got {}", p.s)));
    }
    Ok(())
}

fn rate_base(p: &ThresholdParams) -> f64 {
    4.0 * p.d / (p.n as f64).sqrt() * (6.0 / p.gamma).ln()
}

fn admissibility(p: &ThresholdParams, log_arg: f64) -> (bool, f64) {
    let l = (log_arg / p.gamma).ln();
    let min_n = 16.0 * p.d * p.d * l * l;
    (p.n as f64 >= min_n, min_n)
}

/// Threshold for the inner case. Requires `τ' > 3/2` and `r ≥ 1/2`.
pub fn threshold_inner(p: &ThresholdParams) -> Result<Threshold> {
    check_common(p)?;
    if p.tau_prime <= 1.5 {
        return Err(Error::invalid(format!(
            "inner threshold requires tau_prime > 3/2, got {}",
            p.tau_prime
        )));
    }
    if p.r < 0.5 {
        return Err(Error::invalid(format!("inner threshold requires r >= 1/2, got {}", p.r)));
    }
    let exponent = (2.0 * p.r + 1.0) / (2.0 * p.r + p.s);
    let omega = p.tau_prime * p.m_bound * p.kappa.sqrt() * rate_base(p).powf(exponent);
    let (admissible, min_admissible_n) = admissibility(p, 6.0);
    Ok(Threshold {
        omega,
        admissible,
        min_admissible_n,
    })
}

/// Threshold for the outer case. Requires `τ' > 6`, `r < 1/2`,
/// `r + s ≥ 1/2` and a radius `ρ`.
pub fn threshold_outer(p: &ThresholdParams) -> Result<Threshold> {
    check_common(p)?;
    let rho = p
        .rho
        .ok_or_else(|| Error::invalid("outer threshold requires rho"))?;
    positive("rho", rho)?;
    if p.tau_prime <= 6.0 {
        return Err(Error::invalid(format!(
            "outer threshold requires tau_prime > 6, got {}",
            p.tau_prime
        )));
    }
    if p.r >= 0.5 {
        return Err(Error::invalid(format!("outer threshold requires r < 1/2, got {}", p.r)));
    }
    if p.r + p.s < 0.5 {
        return Err(Error::invalid(format!(
            "outer threshold requires r + s >= 1/2, got r + s = {}",
            p.r + p.s
        )));
    }
    let exponent = (2.0 * p.r + 1.0) / (2.0 * p.r + p.s);
    let omega = p.tau_prime * rho.max(p.m_bound) * p.kappa.sqrt() * rate_base(p).powf(exponent);
    let (admissible, min_admissible_n) = admissibility(p, 4.0);
    Ok(Threshold {
        omega,
        admissible,
        min_admissible_n,
    })
}

pub fn threshold(regime: Regime, p: &ThresholdParams) -> Result<Threshold> {
    match regime {
        Regime::Inner => threshold_inner(p),
        Regime::Outer => threshold_outer(p),
    }
}

/// First `m` with `residual_kn_norms[m] < omega`.
///
/// When the trace exhausted its Krylov space the final residual is zero in
/// exact arithmetic, so the last index is returned even if rounding left it
/// above a vanishing threshold. A trace cut short by `max_iter` yields
/// [`Error::NotReached`].
pub fn discrepancy_stop(trace: &CgTrace, omega: f64) -> Result<usize> {
    positive("omega", omega)?;
    if let Some(m) = trace.residual_kn_norms.iter().position(|&r| r < omega) {
        return Ok(m);
    }
    if trace.exhausted() {
        Ok(trace.m_last)
    } else {
        Err(Error::NotReached {
            m_last: trace.m_last,
            last_residual: trace.last_residual(),
        })
    }
}

/// Index of the smallest loss; ties go to the lowest index. `None` for an
/// empty slice or when every loss is NaN.
pub fn argmin_first(losses: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if l >= b => {}
            _ => best = Some((i, l)),
        }
    }
    best.map(|(i, _)| i)
}

/// Validation mean squared error of every iterate clipped to `[-M, M]`.
pub fn holdout_losses(
    trace: &CgTrace,
    kernel: &KernelSpec,
    train_points: &[f64],
    val_points: &[f64],
    val_labels: &[f64],
    m_clip: f64,
) -> Result<Vec<f64>> {
    if val_points.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    if val_points.len() != val_labels.len() {
        return Err(Error::invalid(format!(
            "{} validation points but {} labels",
            val_points.len(),
            val_labels.len()
        )));
    }
    if train_points.len() != trace.n() {
        return Err(Error::invalid(format!(
            "trace has {} coefficients but {} training points were given",
            trace.n(),
            train_points.len()
        )));
    }
    positive("M_clip", m_clip)?;
    let cross = kernel.cross_matrix(val_points, train_points) / train_points.len() as f64;
    let labels = DVector::from_column_slice(val_labels);
    let losses = trace
        .alphas
        .iter()
        .map(|alpha| {
            let pred = &cross * alpha;
            pred.iter()
                .zip(labels.iter())
                .map(|(p, y)| {
                    let e = p.clamp(-m_clip, m_clip) - y;
                    e * e
                })
                .sum::<f64>()
                / val_points.len() as f64
        })
        .collect();
    Ok(losses)
}

/// Hold-out choice of the stopping index among all iterates of `trace`.
pub fn holdout_select(
    trace: &CgTrace,
    kernel: &KernelSpec,
    train_points: &[f64],
    val_points: &[f64],
    val_labels: &[f64],
    m_clip: f64,
) -> Result<usize> {
    let losses = holdout_losses(trace, kernel, train_points, val_points, val_labels, m_clip)?;
    argmin_first(&losses).ok_or_else(|| Error::NumericalFailure {
        iteration: 0,
        message: "all validation losses are NaN".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cg::{cg_fit, predict, CgMode};
    use crate::kernel::{build_kernel_matrix, KernelMatrix};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn inner_example() -> ThresholdParams {
        ThresholdParams {
            m_bound: 1.0,
            kappa: 1.0,
            d: 1.0,
            n: 10_000,
            gamma: 0.05,
            r: 1.0,
            s: 0.5,
            tau_prime: 2.0,
            rho: None,
        }
    }

    fn outer_example() -> ThresholdParams {
        ThresholdParams {
            m_bound: 1.0,
            kappa: 1.0,
            d: 1.0,
            n: 4096,
            gamma: 0.05,
            r: 0.25,
            s: 0.5,
            tau_prime: 7.0,
            rho: Some(1.0),
        }
    }

    fn trace_with_residuals(res: &[f64], exhausted: bool) -> CgTrace {
        let n = res.len();
        CgTrace {
            mode: CgMode::KnNorm,
            alphas: vec![DVector::zeros(n + 2); n],
            residual_kn_norms: res.to_vec(),
            criterion_norms: res.to_vec(),
            basis_norms: vec![1.0; n - 1],
            breakdown_at: exhausted.then_some(n),
            m_last: n - 1,
        }
    }

    #[test]
    fn inner_threshold_value() {
        // 2·(0.04·ln 120)^{1.2}, evaluated independently.
        let t = threshold_inner(&inner_example()).unwrap();
        assert!((t.omega - 0.275_205).abs() < 1e-4, "omega = {}", t.omega);
        let expected = 2.0 * (0.04f64 * 120f64.ln()).powf(1.2);
        assert!((t.omega - expected).abs() < 1e-15);
    }

    #[test]
    fn inner_threshold_linear_in_tau() {
        let p = inner_example();
        let a = threshold_inner(&p).unwrap().omega;
        let b = threshold_inner(&ThresholdParams { tau_prime: 4.0, ..p }).unwrap().omega;
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn inner_threshold_exponent_degenerates_at_s_one() {
        let p = ThresholdParams { s: 1.0, ..inner_example() };
        let t = threshold_inner(&p).unwrap();
        let expected = 2.0 * 4.0 / 100.0 * 120f64.ln();
        assert!((t.omega - expected).abs() < 1e-15);
    }

    #[test]
    fn outer_threshold_value() {
        let t = threshold_outer(&outer_example()).unwrap();
        assert!((t.omega - 1.1456).abs() < 1e-3, "omega = {}", t.omega);
        let expected = 7.0 * (0.0625f64 * 120f64.ln()).powf(1.5);
        assert!((t.omega - expected).abs() < 1e-14);
    }

    #[test]
    fn outer_threshold_uses_max_of_rho_and_m() {
        let p = outer_example();
        let base = threshold_outer(&p).unwrap().omega;
        let small_rho = threshold_outer(&ThresholdParams { rho: Some(0.3), ..p }).unwrap().omega;
        assert_eq!(base, small_rho);
        let double = threshold_outer(&ThresholdParams { rho: Some(2.0), ..p }).unwrap().omega;
        assert!((double - 2.0 * base).abs() < 1e-14);

        // With ρ ≤ M the outer formula has the inner formula's shape.
        let shape = p.tau_prime * p.m_bound * p.kappa.sqrt()
            * (4.0 * p.d / (p.n as f64).sqrt() * (6.0 / p.gamma).ln())
                .powf((2.0 * p.r + 1.0) / (2.0 * p.r + p.s));
        assert!((small_rho - shape).abs() < 1e-14);
    }

    #[test]
    fn regime_conditions_are_enforced() {
        let p = inner_example();
        assert!(threshold_inner(&ThresholdParams { tau_prime: 1.5, ..p }).is_err());
        assert!(threshold_inner(&ThresholdParams { r: 0.4, ..p }).is_err());
        assert!(threshold_inner(&ThresholdParams { gamma: 1.0, ..p }).is_err());
        assert!(threshold_inner(&ThresholdParams { d: 0.5, ..p }).is_err());
        let q = outer_example();
        assert!(threshold_outer(&ThresholdParams { tau_prime: 6.0, ..q }).is_err());
        assert!(threshold_outer(&ThresholdParams { r: 0.5, ..q }).is_err());
        assert!(threshold_outer(&ThresholdParams { s: 0.2, ..q }).is_err());
        assert!(threshold_outer(&ThresholdParams { rho: None, ..q }).is_err());
        let msg = threshold_outer(&ThresholdParams { tau_prime: 3.0, ..q })
            .unwrap_err()
            .to_string();
        assert!(msg.contains("tau_prime"));
    }

    #[test]
    fn admissibility_flags() {
        let p = inner_example();
        let t = threshold_inner(&p).unwrap();
        let bound = 16.0 * (120f64).ln().powi(2);
        assert!((t.min_admissible_n - bound).abs() < 1e-9);
        assert!(t.admissible);
        let small = threshold_inner(&ThresholdParams { n: 64, ..p }).unwrap();
        assert!(!small.admissible);
        let outer = threshold_outer(&outer_example()).unwrap();
        assert!((outer.min_admissible_n - 16.0 * (80f64).ln().powi(2)).abs() < 1e-9);
    }

    #[test]
    fn stop_before_first_iteration() {
        let trace = trace_with_residuals(&[0.5, 0.1], false);
        assert_eq!(discrepancy_stop(&trace, 1.0).unwrap(), 0);
    }

    #[test]
    fn stop_at_first_crossing() {
        let trace = trace_with_residuals(&[5.0, 3.0, 1.0, 0.0], true);
        assert_eq!(discrepancy_stop(&trace, 2.0).unwrap(), 2);
        // Strict inequality.
        assert_eq!(discrepancy_stop(&trace, 1.0).unwrap(), 3);
    }

    #[test]
    fn not_reached_when_cut_short() {
        let trace = trace_with_residuals(&[5.0, 3.0, 2.5], false);
        match discrepancy_stop(&trace, 1.0) {
            Err(Error::NotReached { m_last, last_residual }) => {
                assert_eq!(m_last, 2);
                assert_eq!(last_residual, 2.5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(discrepancy_stop(&trace, 0.0).is_err());
    }

    #[test]
    fn vanishing_threshold_exhausts_krylov_space() {
        let k = KernelMatrix::from_entries(DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0, 0.5, 0.25, 0.125,
        ])))
        .unwrap();
        let y = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        let trace = cg_fit(&k, &y, 4, CgMode::KnNorm).unwrap();
        let m = discrepancy_stop(&trace, 1e-300).unwrap();
        assert_eq!(m, 4);
        let oracle = crate::cg::krylov_oracle(&k, &y, 4, CgMode::KnNorm).unwrap();
        let resid = &y - k.apply(&oracle);
        assert!(crate::kernel::kn_inner(&resid, &resid, &k).unwrap().sqrt() < 1e-12);
    }

    #[test]
    fn argmin_ties_go_low() {
        assert_eq!(argmin_first(&[4.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(argmin_first(&[3.0]), Some(0));
        assert_eq!(argmin_first(&[]), None);
        assert_eq!(argmin_first(&[f64::NAN, 2.0]), Some(1));
    }

    #[test]
    fn holdout_single_candidate_and_zero_loss_witness() {
        let kernel = KernelSpec::mercer_series(0.5, 100, true).unwrap();
        let train = vec![0.1, 0.35, 0.6, 0.8, 0.95];
        let k = build_kernel_matrix(&train, &kernel).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, -0.4]);
        let val = vec![0.2, 0.5, 0.7];

        let single = cg_fit(&k, &y, 0, CgMode::KnNorm).unwrap();
        assert_eq!(holdout_select(&single, &kernel, &train, &val, &[0.0; 3], 1.0).unwrap(), 0);

        let trace = cg_fit(&k, &y, 5, CgMode::KnNorm).unwrap();
        let star = 2;
        let labels = predict(&trace.alphas[star], &train, &kernel, &val).unwrap();
        let chosen = holdout_select(&trace, &kernel, &train, &val, &labels, 10.0).unwrap();
        assert!(chosen <= star);
        let losses = holdout_losses(&trace, &kernel, &train, &val, &labels, 10.0).unwrap();
        assert!(losses[chosen] <= 1e-24);
    }

    #[test]
    fn holdout_rejects_empty_validation() {
        let kernel = KernelSpec::gaussian(0.3).unwrap();
        let train = vec![0.1, 0.2];
        let k = build_kernel_matrix(&train, &kernel).unwrap();
        let trace = cg_fit(&k, &DVector::from_vec(vec![1.0, 0.0]), 2, CgMode::KnNorm).unwrap();
        assert!(matches!(
            holdout_select(&trace, &kernel, &train, &[], &[], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    proptest! {
        #[test]
        fn threshold_monotone_in_n_and_gamma(n in 1usize..100_000, g1 in 0.001f64..0.5, dg in 0.01f64..0.4) {
            let p = ThresholdParams { n, ..inner_example() };
            let a = threshold_inner(&p).unwrap().omega;
            let b = threshold_inner(&ThresholdParams { n: n + 1, ..p }).unwrap().omega;
            prop_assert!(b < a);
            let g2 = (g1 + dg).min(0.99);
            let lo = threshold_inner(&ThresholdParams { gamma: g1, ..p }).unwrap().omega;
            let hi = threshold_inner(&ThresholdParams { gamma: g2, ..p }).unwrap().omega;
            prop_assert!(lo > hi);
            let q = ThresholdParams { n, ..outer_example() };
            let c = threshold_outer(&q).unwrap().omega;
            let d = threshold_outer(&ThresholdParams { n: n + 1, ..q }).unwrap().omega;
            prop_assert!(d < c);
        }

        #[test]
        fn larger_threshold_never_stops_later(res in proptest::collection::vec(0.0f64..10.0, 2..20), o1 in 0.01f64..10.0, o2 in 0.01f64..10.0) {
            let mut sorted = res.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let trace = trace_with_residuals(&sorted, true);
            let (lo, hi) = if o1 < o2 { (o1, o2) } else { (o2, o1) };
            prop_assert!(discrepancy_stop(&trace, hi).unwrap() <= discrepancy_stop(&trace, lo).unwrap());
        }

        #[test]
        fn argmin_invariant_under_increasing_maps(losses in proptest::collection::vec(0.0f64..5.0, 1..30)) {
            let mapped: Vec<f64> = losses.iter().map(|l| (1.0 + l).ln() * 3.0 + l.powi(3)).collect();
            prop_assert_eq!(argmin_first(&losses), argmin_first(&mapped));
        }
    }
}
