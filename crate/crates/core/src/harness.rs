//! Rate-sweep experiments.
//!
//! For every sample size `n` of the grid and every replicate, a sample is
//! drawn from the configured Mercer model (with unlabeled padding in the
//! outer regime), CG is run on the normalized kernel matrix and stopped by
//! the configured rule, and the squared error `‖K^{-θ}(f̂ - f*)‖²_{2,ν}` is
//! computed for each requested θ. Medians across replicates are fitted in
//! log-log coordinates and compared with the exponent `-2(r-θ)/(2r+s)`.
//!
//! Replicate seeds are `u64::from_le_bytes(SHA-256("kcg/replicate" ‖ master
//! ‖ n ‖ rep)[..8])` with all integers little-endian `u64`.

use log::warn;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cg::{cg_fit_with, ridge_fit, CgMode, CgOptions, CgTrace};
use crate::error::{Error, Result};
use crate::eval::{error_norm_from_spectrum, estimator_spectra, ERROR_FLOOR};
use crate::kernel::build_kernel_matrix;
use crate::numeric::{median, quantile};
use crate::stopping::{discrepancy_stop, holdout_select, threshold, Regime, Threshold, ThresholdParams};
use crate::synth::{draw_sample, make_model, MercerModel, ModelParams, Sample, RNG_ALGORITHM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoppingRule {
    #[default]
    Discrepancy,
    /// Hold out the last `fraction` of the labeled points for validation.
    HoldoutFraction { fraction: f64 },
}

fn default_replicates() -> usize {
    20
}

fn default_gamma() -> f64 {
    0.05
}

fn default_theta_list() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    pub regime: Regime,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub tau_prime: f64,
    #[serde(default = "default_theta_list")]
    pub theta_list: Vec<f64>,
    pub master_seed: u64,
    #[serde(default)]
    pub stopping: StoppingRule,
    /// Cap on CG iterations; defaults to the design size under the
    /// discrepancy rule and to `min(n_train, 100)` under hold-out.
    #[serde(default)]
    pub max_iter: Option<usize>,
    /// Also run CG along the whole capped path and record the iterate with
    /// the smallest `θ = 0` error (a diagnostic that uses the unknown target).
    #[serde(default)]
    pub track_oracle: bool,
}

/// Default inner scenario: `s = 1/2`, `r = 1`, `ρ = 1`, bounded noise.
pub fn default_inner_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelParams {
            s: 0.5,
            r: 1.0,
            rho: 1.0,
            truncation: crate::kernel::DEFAULT_TRUNCATION,
            include_constant: true,
            noise: crate::synth::NoiseSpec::UniformBounded { m: 1.0 },
            profile: crate::synth::SourceProfile::Harmonic,
        },
        regime: Regime::Inner,
        n_grid: vec![64, 128, 256, 512, 1024, 2048],
        replicates: 20,
        gamma: 0.05,
        tau_prime: 2.0,
        theta_list: vec![0.0, 0.5],
        master_seed: 20240601,
        stopping: StoppingRule::Discrepancy,
        max_iter: None,
        track_oracle: false,
    }
}

/// Default outer scenario: `s = 1/2`, `r = 1/4`, `ρ = 1`, padded design.
pub fn default_outer_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelParams {
            s: 0.5,
            r: 0.25,
            rho: 1.0,
            truncation: crate::kernel::DEFAULT_TRUNCATION,
            include_constant: true,
            noise: crate::synth::NoiseSpec::UniformBounded { m: 2.5 },
            profile: crate::synth::SourceProfile::Harmonic,
        },
        regime: Regime::Outer,
        n_grid: vec![32, 64, 128, 256],
        replicates: 20,
        gamma: 0.05,
        tau_prime: 7.0,
        theta_list: vec![0.0],
        master_seed: 20240602,
        stopping: StoppingRule::Discrepancy,
        max_iter: None,
        track_oracle: false,
    }
}

impl ExperimentConfig {
    /// Checks the config and builds its model. `min_grid` is the number of
    /// grid points the caller needs (2 for slope fits).
    pub fn validate(&self, min_grid: usize) -> Result<MercerModel> {
        let model = make_model(&self.model)?;
        if self.n_grid.len() < min_grid {
            return Err(Error::invalid(format!(
                "n_grid needs at least {min_grid} points, got {}",
                self.n_grid.len()
            )));
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("n_grid must be strictly increasing"));
        }
        if self.n_grid.first().is_some_and(|&n| n < 2) {
            return Err(Error::invalid("n_grid entries must be at least 2"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if self.theta_list.is_empty() {
            return Err(Error::invalid("theta_list is empty"));
        }
        let expected = Regime::for_source(self.model.r);
        if expected != self.regime {
            return Err(Error::invalid(format!(
                "regime {} is inconsistent with r = {} (expected {expected})",
                self.regime, self.model.r
            )));
        }
        for &theta in &self.theta_list {
            let ok = match self.regime {
                Regime::Inner => (0.0..=0.5).contains(&theta),
                Regime::Outer => theta >= 0.0 && theta < self.model.r,
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "theta_list entry {theta} is outside the valid range for the {} regime",
                    self.regime
                )));
            }
        }
        if let StoppingRule::HoldoutFraction { fraction } = self.stopping {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::invalid(format!(
                    "stopping.fraction must lie in (0, 1), got {fraction}"
                )));
            }
        }
        if self.max_iter == Some(0) {
            return Err(Error::invalid("max_iter must be positive"));
        }
        for &n in &self.n_grid {
            threshold(self.regime, &self.threshold_params(&model, n))?;
        }
        Ok(model)
    }

    pub fn threshold_params(&self, model: &MercerModel, n: usize) -> ThresholdParams {
        ThresholdParams {
            m_bound: model.m_bound(),
            kappa: model.kappa,
            d: model.ed_constant,
            n,
            gamma: self.gamma,
            r: model.r(),
            s: model.s(),
            tau_prime: self.tau_prime,
            rho: Some(model.rho()),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn derive_seed(master: u64, n: usize, rep: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"kcg/replicate");
    h.update(master.to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((rep as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn default_tau_prime() -> f64 {
    2.0
}

/// A single fit: one sample of size `n`, drawn with the replicate-0 seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelParams,
    pub regime: Regime,
    pub n: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau_prime")]
    pub tau_prime: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub mode: CgMode,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl FitConfig {
    fn as_experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            regime: self.regime,
            n_grid: vec![self.n],
            replicates: 1,
            gamma: self.gamma,
            tau_prime: self.tau_prime,
            theta_list: vec![0.0],
            master_seed: self.master_seed,
            stopping: StoppingRule::Discrepancy,
            max_iter: self.max_iter,
            track_oracle: false,
        }
    }

    pub fn validate(&self) -> Result<MercerModel> {
        self.as_experiment().validate(1)
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn seed(&self) -> u64 {
        derive_seed(self.master_seed, self.n, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub seed: u64,
    pub rng_algorithm: String,
    pub regime: Regime,
    pub mode: CgMode,
    pub n: usize,
    pub design_size: usize,
    pub omega: f64,
    pub admissible: bool,
    pub m_hat: usize,
    pub m_last: usize,
    pub breakdown_at: Option<usize>,
    pub residual_kn_norms: Vec<f64>,
    /// Squared `L²(ν)` error of the stopped estimator.
    pub error: f64,
    /// Coefficients of the stopped estimator on the design points.
    pub alpha: Vec<f64>,
}

/// Runs CG along the whole path (up to `max_iter`) and stops it by the
/// discrepancy rule.
pub fn run_fit(cfg: &FitConfig) -> Result<FitReport> {
    let model = cfg.validate()?;
    let seed = cfg.seed();
    let sample = draw_sample(&model, cfg.n, cfg.regime == Regime::Outer, seed)?;
    let points = sample.design();
    let k = build_kernel_matrix(&points, &model.kernel)?;
    let y = DVector::from_vec(sample.response());
    let th = threshold(cfg.regime, &cfg.as_experiment().threshold_params(&model, cfg.n))?;
    let cap = cfg.max_iter.unwrap_or(points.len());
    let trace = cg_fit_with(&k, &y, &CgOptions::new(cap, cfg.mode))
        .map_err(|e| e.with_context(&format!("seed = {seed}")))?;
    let m_hat = discrepancy_stop(&trace, th.omega)?;
    let error = squared_errors(&trace, &[m_hat], &points, &model, &[0.0])?[0][0];
    Ok(FitReport {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        regime: cfg.regime,
        mode: cfg.mode,
        n: cfg.n,
        design_size: points.len(),
        omega: th.omega,
        admissible: th.admissible,
        m_hat,
        m_last: trace.m_last,
        breakdown_at: trace.breakdown_at,
        residual_kn_norms: trace.residual_kn_norms.clone(),
        error,
        alpha: trace.alphas[m_hat].iter().copied().collect(),
    })
}

/// Draws the sample a [`FitConfig`] would fit.
pub fn simulate(cfg: &FitConfig) -> Result<Sample> {
    let model = cfg.validate()?;
    draw_sample(&model, cfg.n, cfg.regime == Regime::Outer, cfg.seed())
}

/// Outcome of one (n, replicate) task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub omega: f64,
    pub admissible: bool,
    pub m_hat: usize,
    /// Squared errors, aligned with the config's `theta_list`.
    pub errors: Vec<f64>,
    /// Squared `θ = 0` error of the zero estimator.
    pub zero_error: f64,
    /// Best iterate on the capped path by `θ = 0` error, when tracked.
    pub best_m: Option<usize>,
    pub best_error: Option<f64>,
    /// Set when the stopping rule could not select an index; `errors` is
    /// empty in that case.
    pub failure: Option<String>,
}

struct Split {
    train_points: Vec<f64>,
    train_labels: Vec<f64>,
    val_points: Vec<f64>,
    val_labels: Vec<f64>,
}

fn holdout_split(sample: &Sample, fraction: f64) -> Split {
    let n = sample.n();
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;
    Split {
        train_points: sample.x_labeled[..n_train].to_vec(),
        train_labels: sample.y[..n_train].to_vec(),
        val_points: sample.x_labeled[n_train..].to_vec(),
        val_labels: sample.y[n_train..].to_vec(),
    }
}

/// Squared errors of selected iterates, one row per requested index.
fn squared_errors(
    trace: &CgTrace,
    indices: &[usize],
    points: &[f64],
    model: &MercerModel,
    thetas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let alphas: Vec<&DVector<f64>> = indices.iter().map(|&m| &trace.alphas[m]).collect();
    let spectra = estimator_spectra(&alphas, points, &model.kernel)?;
    spectra
        .iter()
        .map(|spec| {
            thetas
                .iter()
                .map(|&theta| error_norm_from_spectrum(spec, model, theta).map(|r| r.squared()))
                .collect()
        })
        .collect()
}

fn best_on_path(trace: &CgTrace, points: &[f64], model: &MercerModel) -> Result<(usize, f64)> {
    let indices: Vec<usize> = (0..=trace.m_last).collect();
    let errs = squared_errors(trace, &indices, points, model, &[0.0])?;
    let (m, e) = errs
        .iter()
        .enumerate()
        .map(|(m, row)| (m, row[0]))
        .fold((0, f64::INFINITY), |acc, (m, e)| if e < acc.1 { (m, e) } else { acc });
    Ok((m, e))
}

/// Runs one (n, rep) task of the experiment.
pub fn run_replicate(cfg: &ExperimentConfig, model: &MercerModel, n: usize, rep: usize) -> Result<ReplicateOutcome> {
    let seed = derive_seed(cfg.master_seed, n, rep);
    let sample = draw_sample(model, n, cfg.regime == Regime::Outer, seed)?;
    let Threshold { omega, admissible, .. } = threshold(cfg.regime, &cfg.threshold_params(model, n))?;

    let (points, response) = match cfg.stopping {
        StoppingRule::Discrepancy => (sample.design(), sample.response()),
        StoppingRule::HoldoutFraction { fraction } => {
            let split = holdout_split(&sample, fraction);
            (split.train_points, split.train_labels)
        }
    };
    let k = build_kernel_matrix(&points, &model.kernel)?;
    let y = DVector::from_vec(response);
    let zero_error = crate::eval::weighted_norm(&model.target_coeffs, &model.eigenvalues, 0.0).powi(2);

    let (trace, stop) = match cfg.stopping {
        StoppingRule::Discrepancy => {
            let cap = cfg.max_iter.unwrap_or(points.len());
            let opts = CgOptions {
                residual_target: (!cfg.track_oracle).then_some(omega),
                ..CgOptions::new(cap, CgMode::KnNorm)
            };
            let trace = cg_fit_with(&k, &y, &opts)?;
            let stop = discrepancy_stop(&trace, omega);
            (trace, stop)
        }
        StoppingRule::HoldoutFraction { fraction } => {
            let split = holdout_split(&sample, fraction);
            let cap = cfg.max_iter.unwrap_or(points.len().min(100));
            let trace = cg_fit_with(&k, &y, &CgOptions::new(cap, CgMode::KnNorm))?;
            let stop = holdout_select(
                &trace,
                &model.kernel,
                &points,
                &split.val_points,
                &split.val_labels,
                model.m_bound(),
            );
            (trace, stop)
        }
    };

    let (best_m, best_error) = if cfg.track_oracle || matches!(cfg.stopping, StoppingRule::HoldoutFraction { .. }) {
        let (m, e) = best_on_path(&trace, &points, model)?;
        (Some(m), Some(e))
    } else {
        (None, None)
    };

    let mut outcome = ReplicateOutcome {
        n,
        rep,
        seed,
        omega,
        admissible,
        m_hat: trace.m_last,
        errors: Vec::new(),
        zero_error,
        best_m,
        best_error,
        failure: None,
    };
    match stop {
        Ok(m_hat) => {
            outcome.m_hat = m_hat;
            outcome.errors = squared_errors(&trace, &[m_hat], &points, model, &cfg.theta_list)?
                .pop()
                .unwrap_or_default();
        }
        Err(err @ Error::NotReached { .. }) => {
            warn!("n = {n}, rep = {rep}, seed = {seed}: {err}");
            outcome.failure = Some(err.to_string());
        }
        Err(err) => return Err(err),
    }
    Ok(outcome)
}

/// Runs every (n, rep) task; outcomes are sorted by (n, rep).
pub fn run_replicates(cfg: &ExperimentConfig, model: &MercerModel) -> Result<Vec<ReplicateOutcome>> {
    let tasks: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |rep| (n, rep)))
        .collect();
    let mut outcomes = tasks
        .par_iter()
        .map(|&(n, rep)| {
            run_replicate(cfg, model, n, rep).map_err(|e| {
                e.with_context(&format!("n = {n}, rep = {rep}, seed = {}", derive_seed(cfg.master_seed, n, rep)))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    outcomes.sort_by_key(|o| (o.n, o.rep));
    Ok(outcomes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
    /// Number of non-positive errors replaced by [`ERROR_FLOOR`].
    pub floored: usize,
}

/// Ordinary least squares of `log error` on `log n`.
pub fn fit_loglog_slope(ns: &[usize], errors: &[f64]) -> Result<LogLogFit> {
    if ns.len() != errors.len() {
        return Err(Error::invalid(format!(
            "{} sample sizes but {} errors",
            ns.len(),
            errors.len()
        )));
    }
    if ns.len() < 2 {
        return Err(Error::invalid("slope fit needs at least 2 points"));
    }
    if ns.contains(&0) {
        return Err(Error::invalid("sample sizes must be positive"));
    }
    let mut floored = 0;
    let ys: Vec<f64> = errors
        .iter()
        .map(|&e| {
            if e > 0.0 && e.is_finite() {
                e.ln()
            } else {
                warn!("non-positive error {e} replaced by {ERROR_FLOOR:e}");
                floored += 1;
                ERROR_FLOOR.ln()
            }
        })
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("sample sizes must not all be equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    Ok(LogLogFit {
        slope,
        intercept,
        residual: (ss / k).sqrt(),
        floored,
    })
}

/// `-2(r - θ)/(2r + s)`, the exponent of the squared error.
pub fn theoretical_exponent(r: f64, s: f64, theta: f64) -> f64 {
    -2.0 * (r - theta) / (2.0 * r + s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub n: usize,
    pub theta: f64,
    pub median_error: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub median_m_hat: f64,
    pub max_m_hat: usize,
    pub omega: f64,
    pub admissible: bool,
    pub replicates_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub theta: f64,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub theoretical_exponent: f64,
    pub slope_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub regime: Regime,
    pub config_hash: String,
    pub master_seed: u64,
    pub rng_algorithm: String,
    pub model_id: String,
    pub kappa: f64,
    pub ed_constant: f64,
    pub m_bound: f64,
    /// Errors are squared `K^{-θ}` norms.
    pub error_kind: String,
    pub cells: Vec<RateCell>,
    pub slopes: Vec<SlopeSummary>,
    /// Slope of the median best-on-path `θ = 0` error, when tracked.
    pub oracle_slope: Option<SlopeSummary>,
    /// Set when some replicate could not be stopped; those replicates are
    /// left out of the medians.
    pub partial: bool,
    pub failed_replicates: usize,
}

/// One CSV row of the per-replicate output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub regime: Regime,
    pub n: usize,
    pub rep: usize,
    pub theta: f64,
    pub error: f64,
    pub m_hat: usize,
    pub omega: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: RateReport,
    pub records: Vec<RateRecord>,
    pub outcomes: Vec<ReplicateOutcome>,
}

fn slope_summary(ns: &[usize], medians: &[f64], r: f64, s: f64, theta: f64) -> Result<SlopeSummary> {
    let fit = fit_loglog_slope(ns, medians)?;
    let theory = theoretical_exponent(r, s, theta);
    Ok(SlopeSummary {
        theta,
        slope: fit.slope,
        intercept: fit.intercept,
        residual: fit.residual,
        theoretical_exponent: theory,
        slope_gap: fit.slope - theory,
    })
}

/// Aggregates replicate outcomes into a report.
pub fn aggregate(cfg: &ExperimentConfig, model: &MercerModel, outcomes: &[ReplicateOutcome]) -> Result<ExperimentOutput> {
    let mut cells = Vec::new();
    let mut records = Vec::new();
    let failed = outcomes.iter().filter(|o| o.failure.is_some()).count();

    for o in outcomes.iter().filter(|o| o.failure.is_none()) {
        for (theta, err) in cfg.theta_list.iter().zip(&o.errors) {
            records.push(RateRecord {
                regime: cfg.regime,
                n: o.n,
                rep: o.rep,
                theta: *theta,
                error: *err,
                m_hat: o.m_hat,
                omega: o.omega,
                seed: o.seed,
            });
        }
    }

    let mut slopes = Vec::new();
    for (t_idx, &theta) in cfg.theta_list.iter().enumerate() {
        let mut ns = Vec::new();
        let mut medians = Vec::new();
        for &n in &cfg.n_grid {
            let ok: Vec<&ReplicateOutcome> = outcomes
                .iter()
                .filter(|o| o.n == n && o.failure.is_none())
                .collect();
            let all_n: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.n == n).collect();
            let errs: Vec<f64> = ok.iter().map(|o| o.errors[t_idx]).collect();
            let m_hats: Vec<f64> = ok.iter().map(|o| o.m_hat as f64).collect();
            let (q1, med, q3) = (quantile(&errs, 0.25), median(&errs), quantile(&errs, 0.75));
            let (omega, admissible) = all_n.first().map(|o| (o.omega, o.admissible)).unwrap_or((f64::NAN, false));
            cells.push(RateCell {
                n,
                theta,
                median_error: med,
                q1,
                q3,
                iqr: q3 - q1,
                median_m_hat: median(&m_hats),
                max_m_hat: ok.iter().map(|o| o.m_hat).max().unwrap_or(0),
                omega,
                admissible,
                replicates_used: ok.len(),
            });
            if !errs.is_empty() {
                ns.push(n);
                medians.push(med);
            }
        }
        if ns.len() >= 2 {
            slopes.push(slope_summary(&ns, &medians, model.r(), model.s(), theta)?);
        }
    }

    let oracle_slope = if outcomes.iter().all(|o| o.best_error.is_some()) && !outcomes.is_empty() {
        let medians: Vec<f64> = cfg
            .n_grid
            .iter()
            .map(|&n| {
                let v: Vec<f64> = outcomes.iter().filter(|o| o.n == n).filter_map(|o| o.best_error).collect();
                median(&v)
            })
            .collect();
        Some(slope_summary(&cfg.n_grid, &medians, model.r(), model.s(), 0.0)?)
    } else {
        None
    };

    let report = RateReport {
        regime: cfg.regime,
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        model_id: model.id.clone(),
        kappa: model.kappa,
        ed_constant: model.ed_constant,
        m_bound: model.m_bound(),
        error_kind: "squared_k_theta_norm".to_string(),
        cells,
        slopes,
        oracle_slope,
        partial: failed > 0,
        failed_replicates: failed,
    };
    Ok(ExperimentOutput {
        report,
        records,
        outcomes: outcomes.to_vec(),
    })
}

/// Full rate sweep: replicates over the grid, medians and slopes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let model = cfg.validate(2)?;
    let outcomes = run_replicates(cfg, &model)?;
    aggregate(cfg, &model, &outcomes)
}

impl RateReport {
    pub fn slope_for(&self, theta: f64) -> Option<&SlopeSummary> {
        self.slopes.iter().find(|s| s.theta == theta)
    }
}

/// Plot-ready rows `(log n, log median error, theoretical line)` for one θ.
/// The theoretical line has the theory exponent and passes through the
/// centroid of the empirical points.
pub fn plot_rows(report: &RateReport, theta: f64) -> Vec<(f64, f64, f64)> {
    let pts: Vec<(f64, f64)> = report
        .cells
        .iter()
        .filter(|c| c.theta == theta && c.median_error > 0.0)
        .map(|c| ((c.n as f64).ln(), c.median_error.ln()))
        .collect();
    if pts.is_empty() {
        return Vec::new();
    }
    let (_, s) = report
        .slopes
        .iter()
        .find(|s| s.theta == theta)
        .map(|s| (s.slope, s.theoretical_exponent))
        .unwrap_or((0.0, 0.0));
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    pts.iter().map(|&(x, y)| (x, y, my + s * (x - mx))).collect()
}

/// Hold-out study outcome for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutOutcome {
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub selected_m: usize,
    pub selected_error: f64,
    pub best_m: usize,
    pub best_error: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub fraction: f64,
    pub outcomes: Vec<HoldoutOutcome>,
    /// Share of replicates whose selected error is within twice the best.
    pub within_factor_two: f64,
}

/// Hold-out selection on every grid size and replicate, comparing the
/// selected iterate's `L²(ν)` error to the best iterate on the path.
pub fn holdout_study(cfg: &ExperimentConfig) -> Result<HoldoutReport> {
    let fraction = match cfg.stopping {
        StoppingRule::HoldoutFraction { fraction } => fraction,
        StoppingRule::Discrepancy => {
            return Err(Error::invalid("holdout study needs stopping = holdout_fraction"))
        }
    };
    let mut cfg0 = cfg.clone();
    cfg0.theta_list = vec![0.0];
    let model = cfg0.validate(1)?;
    let outcomes = run_replicates(&cfg0, &model)?;
    let mut rows = Vec::new();
    for o in outcomes {
        let best_error = o.best_error.expect("hold-out tracks the path");
        let selected_error = o.errors[0];
        rows.push(HoldoutOutcome {
            n: o.n,
            rep: o.rep,
            seed: o.seed,
            selected_m: o.m_hat,
            selected_error,
            best_m: o.best_m.unwrap_or(0),
            best_error,
            ratio: if best_error > 0.0 { selected_error / best_error } else { 1.0 },
        });
    }
    let within = rows.iter().filter(|r| r.selected_error <= 2.0 * r.best_error).count() as f64 / rows.len() as f64;
    Ok(HoldoutReport {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        fraction,
        outcomes: rows,
        within_factor_two: within,
    })
}

/// Per-n medians of the solver comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub n: usize,
    /// Discrepancy-stopped CG: iterations and squared `L²(ν)` error.
    pub cg_m_hat: f64,
    pub cg_error: f64,
    /// Best iterate of CG along the capped path.
    pub cg_best_m: f64,
    pub cg_best_error: f64,
    /// Error of the last CG iterate on the path.
    pub cg_final_error: f64,
    /// Best Tikhonov solution over the λ grid.
    pub ridge_best_lambda: f64,
    pub ridge_best_error: f64,
    pub ridge_solves: usize,
    /// Best iterate of the Euclidean-norm (kernel PLS) variant.
    pub pls_best_m: f64,
    pub pls_best_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config_hash: String,
    pub master_seed: u64,
    pub lambda_grid: Vec<f64>,
    pub rows: Vec<ComparisonRow>,
}

/// `κ·10^{-8k/19}`, `k = 0..20`.
pub fn ridge_lambda_grid(kappa: f64) -> Vec<f64> {
    (0..20).map(|k| kappa * 10f64.powf(-8.0 * k as f64 / 19.0)).collect()
}

struct SolverRun {
    cg_m_hat: usize,
    cg_error: f64,
    cg_best_m: usize,
    cg_best_error: f64,
    cg_final_error: f64,
    ridge_best_lambda: f64,
    ridge_best_error: f64,
    pls_best_m: usize,
    pls_best_error: f64,
}

fn compare_one(cfg: &ExperimentConfig, model: &MercerModel, n: usize, rep: usize, lambdas: &[f64]) -> Result<SolverRun> {
    let seed = derive_seed(cfg.master_seed, n, rep);
    let sample = draw_sample(model, n, cfg.regime == Regime::Outer, seed)?;
    let points = sample.design();
    let k = build_kernel_matrix(&points, &model.kernel)?;
    let y = DVector::from_vec(sample.response());
    let omega = threshold(cfg.regime, &cfg.threshold_params(model, n))?.omega;
    let cap = cfg.max_iter.unwrap_or(points.len().min(100));

    let cg = cg_fit_with(&k, &y, &CgOptions::new(cap, CgMode::KnNorm))?;
    let cg_errs = squared_errors(&cg, &(0..=cg.m_last).collect::<Vec<_>>(), &points, model, &[0.0])?;
    let cg_path: Vec<f64> = cg_errs.iter().map(|r| r[0]).collect();
    let cg_m_hat = match discrepancy_stop(&cg, omega) {
        Ok(m) => m,
        Err(Error::NotReached { .. }) => {
            warn!("n = {n}, rep = {rep}: discrepancy not reached within {cap} iterations");
            cg.m_last
        }
        Err(e) => return Err(e),
    };
    let cg_best_m = crate::stopping::argmin_first(&cg_path).unwrap_or(0);

    let pls = cg_fit_with(&k, &y, &CgOptions::new(cap, CgMode::Euclidean))?;
    let pls_errs = squared_errors(&pls, &(0..=pls.m_last).collect::<Vec<_>>(), &points, model, &[0.0])?;
    let pls_path: Vec<f64> = pls_errs.iter().map(|r| r[0]).collect();
    let pls_best_m = crate::stopping::argmin_first(&pls_path).unwrap_or(0);

    let mut ridge_best = (f64::NAN, f64::INFINITY);
    let ridge_alphas = lambdas
        .iter()
        .map(|&l| ridge_fit(&k, &y, l).map(|s| s.alpha))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DVector<f64>> = ridge_alphas.iter().collect();
    for (spec, &lambda) in estimator_spectra(&refs, &points, &model.kernel)?.iter().zip(lambdas) {
        let e = error_norm_from_spectrum(spec, model, 0.0)?.squared();
        if e < ridge_best.1 {
            ridge_best = (lambda, e);
        }
    }

    Ok(SolverRun {
        cg_m_hat,
        cg_error: cg_path[cg_m_hat],
        cg_best_m,
        cg_best_error: cg_path[cg_best_m],
        cg_final_error: cg_path[cg.m_last],
        ridge_best_lambda: ridge_best.0,
        ridge_best_error: ridge_best.1,
        pls_best_m,
        pls_best_error: pls_path[pls_best_m],
    })
}

/// Runs discrepancy-stopped CG, Tikhonov over a 20-point λ grid and the
/// Euclidean-norm variant on identical samples.
pub fn compare_solvers(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    let model = cfg.validate(1)?;
    let lambdas = ridge_lambda_grid(model.kappa);
    let tasks: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |rep| (n, rep)))
        .collect();
    let runs = tasks
        .par_iter()
        .map(|&(n, rep)| {
            compare_one(cfg, &model, n, rep, &lambdas)
                .map(|r| (n, rep, r))
                .map_err(|e| {
                    e.with_context(&format!("n = {n}, rep = {rep}, seed = {}", derive_seed(cfg.master_seed, n, rep)))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &n in &cfg.n_grid {
        let mut mine: Vec<&(usize, usize, SolverRun)> = runs.iter().filter(|r| r.0 == n).collect();
        mine.sort_by_key(|r| r.1);
        let med = |f: &dyn Fn(&SolverRun) -> f64| median(&mine.iter().map(|r| f(&r.2)).collect::<Vec<_>>());
        rows.push(ComparisonRow {
            n,
            cg_m_hat: med(&|r| r.cg_m_hat as f64),
            cg_error: med(&|r| r.cg_error),
            cg_best_m: med(&|r| r.cg_best_m as f64),
            cg_best_error: med(&|r| r.cg_best_error),
            cg_final_error: med(&|r| r.cg_final_error),
            ridge_best_lambda: med(&|r| r.ridge_best_lambda),
            ridge_best_error: med(&|r| r.ridge_best_error),
            ridge_solves: lambdas.len(),
            pls_best_m: med(&|r| r.pls_best_m as f64),
            pls_best_error: med(&|r| r.pls_best_error),
        });
    }
    Ok(ComparisonTable {
        config_hash: cfg.hash(),
        master_seed: cfg.master_seed,
        lambda_grid: lambdas,
        rows,
    })
}
