//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kcg_core::cg::{cg_fit, cg_fit_with, krylov_oracle, CgMode, CgOptions};
use kcg_core::eval::{effective_dimension, error_norm, error_norm_monte_carlo, target_values, PowerTail};
use kcg_core::harness::{
    default_inner_config, default_outer_config, holdout_study, run_experiment, ExperimentConfig, StoppingRule,
};
use kcg_core::kernel::{power_eigenvalue, KernelMatrix};
use kcg_core::synth::{draw_sample, ed_lambda_grid, make_model, ModelParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// `K = (AAᵀ + εI)/n` with `ε` either 0.05 or 0 (rank-deficient when `A`
/// has fewer columns than rows).
fn random_system(rng: &mut ChaCha20Rng, n: usize) -> (KernelMatrix, DVector<f64>) {
    let cols = if rng.random_bool(0.25) { rng.random_range(1..=n) } else { n };
    let a = DMatrix::from_fn(n, cols, |_, _| rng.random_range(-1.0..1.0));
    let shift = if cols < n { 0.0 } else { 0.05 };
    let k = symmetrize((&a * a.transpose() + DMatrix::identity(n, n) * shift) / n as f64);
    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    (k, y)
}

/// `√(vᵀK_n v / n)` through the eigendecomposition, with eigenvalues at
/// rounding level (`≤ n·ε·λ_max`) treated as zero. Computing `vᵀK_n v`
/// directly lets null-space components of `v` leak in through the rounding
/// of `K_n`'s entries.
fn kn_seminorm(v: &DVector<f64>, k: &KernelMatrix) -> f64 {
    let n = v.len();
    let eig = k.matrix().clone().symmetric_eigen();
    let top = eig.eigenvalues.max();
    let cut = n as f64 * f64::EPSILON * top;
    let mut acc = 0.0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cut {
            let c = eig.eigenvectors.column(i).dot(v);
            acc += lam * c * c;
        }
    }
    (acc / n as f64).sqrt()
}

fn symmetrize(m: DMatrix<f64>) -> KernelMatrix {
    let n = m.nrows();
    let mut m = m;
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
    KernelMatrix::from_entries(m).unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for _ in 0..50 {
        let n = rng.random_range(2..=8);
        let (k, y) = random_system(&mut rng, n);
        let tol = 1e-8 * (1.0 + y.norm());
        for mode in [CgMode::KnNorm, CgMode::Euclidean] {
            let trace = cg_fit(&k, &y, n, mode).unwrap();
            for m in 0..=n {
                let cg = trace.alpha(m.min(trace.m_last));
                let oracle = krylov_oracle(&k, &y, m, mode).unwrap();
                let diff = kn_seminorm(&(cg - &oracle), &k);
                worst = worst.max(diff / tol);
                pass &= diff <= tol;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        pass && secs < 5.0,
        format!("worst diff/tolerance {worst:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    // Plain recursion on well-conditioned systems: random orthogonal basis,
    // eigenvalues log-spaced in [0.1, 1].
    let mut worst_plain: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=16);
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let lam = DVector::from_fn(n, |i, _| 10f64.powf(-(i as f64) / (n - 1) as f64));
        let k = symmetrize(&q * DMatrix::from_diagonal(&lam) * q.transpose());
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let trace = cg_fit(&k, &y, n, CgMode::KnNorm).unwrap();
        worst_plain = worst_plain.max(trace.last_residual() / trace.residual_kn_norms[0]);
    }
    // Shifted Wishart systems (condition numbers in the hundreds) with full
    // re-orthogonalisation.
    let mut worst_reorth: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=16);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let k = symmetrize((&a * a.transpose() + DMatrix::identity(n, n) * 0.1) / n as f64);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let opts = CgOptions {
            reorthogonalize: true,
            ..CgOptions::new(n, CgMode::KnNorm)
        };
        let trace = cg_fit_with(&k, &y, &opts).unwrap();
        worst_reorth = worst_reorth.max(trace.last_residual() / trace.residual_kn_norms[0]);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst_plain <= 1e-8 && worst_reorth <= 1e-8 && secs < 1.0,
        format!(
            "worst final/initial residual {worst_plain:.2e} (plain, cond ≤ 10), \
             {worst_reorth:.2e} (re-orthogonalised, shifted Wishart), {secs:.3}s"
        ),
    )
}

/// Distance of `v` from the span of `Y, KY, …, K^{m-1}Y`, relative to `‖v‖`.
fn krylov_distance(k: &KernelMatrix, y: &DVector<f64>, m: usize, v: &DVector<f64>) -> f64 {
    let mut cols = Vec::with_capacity(m);
    let mut w = y.clone();
    for _ in 0..m {
        let scaled = &w / w.norm();
        cols.push(scaled.clone());
        w = k.matrix() * scaled;
    }
    let basis = DMatrix::from_columns(&cols);
    let svd = basis.svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let rank_cols: Vec<DVector<f64>> = (0..m)
        .filter(|&j| svd.singular_values[j] > 1e-10 * smax)
        .map(|j| u.column(j).into_owned())
        .collect();
    let q = DMatrix::from_columns(&rank_cols);
    let proj = &q * (q.transpose() * v);
    (v - proj).norm() / v.norm().max(f64::MIN_POSITIVE)
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut mono_fail = 0;
    let mut member_worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=10);
        let (k, y) = random_system(&mut rng, n);
        for mode in [CgMode::KnNorm, CgMode::Euclidean] {
            let trace = cg_fit_with(&k, &y, &CgOptions::new(n, mode)).unwrap();
            let slack = 1e-10 * trace.criterion_norms[0];
            if trace.criterion_norms.windows(2).any(|w| w[1] > w[0] + slack) {
                mono_fail += 1;
            }
            for m in 1..=trace.m_last.min(n - 1) {
                member_worst = member_worst.max(krylov_distance(&k, &y, m, trace.alpha(m)));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mono_fail == 0 && member_worst <= 1e-6 && secs < 10.0,
        format!("monotonicity violations {mono_fail}, worst Krylov distance {member_worst:.2e}, {secs:.2}s"),
    )
}

fn slope_line(cfg: &ExperimentConfig, targets: &[(f64, f64, f64)]) -> Verdict {
    let out = run_experiment(cfg).unwrap();
    let report = &out.report;
    let mut pass = true;
    let mut parts = Vec::new();
    for &(theta, expected, tol) in targets {
        let s = report.slope_for(theta).expect("slope fitted");
        let ok = (s.slope - expected).abs() <= tol;
        pass &= ok;
        parts.push(format!("theta={theta}: slope {:.3} vs {expected} ± {tol}", s.slope));
    }
    let m_hats: Vec<String> = report
        .cells
        .iter()
        .filter(|c| c.theta == targets[0].0)
        .map(|c| format!("{}", c.median_m_hat))
        .collect();
    parts.push(format!("median m_hat per n [{}]", m_hats.join(", ")));
    if report.partial {
        parts.push(format!("{} replicates not stopped", report.failed_replicates));
    }
    verdict(pass, parts.join("; "))
}

fn criterion_4() -> Verdict {
    slope_line(&default_inner_config(), &[(0.0, -0.8, 0.15), (0.5, -0.4, 0.20)])
}

fn criterion_5() -> Verdict {
    slope_line(&default_outer_config(), &[(0.0, -0.5, 0.20)])
}

fn criterion_6() -> Verdict {
    let j_max = 20_000;
    let eigs: Vec<f64> = (1..=j_max).map(|j| power_eigenvalue(j, 0.5)).collect();
    let tail = PowerTail {
        s: 0.5,
        last_frequency: j_max,
    };
    let n1 = effective_dimension(&eigs, Some(tail), 1.0).unwrap().value();
    let pi = std::f64::consts::PI;
    let exact = (pi / pi.tanh() - 1.0) / 2.0;
    let n1_ok = (n1 - exact).abs() <= 1e-4;

    let model = make_model(&default_inner_config().model).unwrap();
    let d = model.ed_constant;
    let mut ed_ok = true;
    let mut worst: f64 = 0.0;
    for lambda in ed_lambda_grid(model.kappa) {
        let n_l = effective_dimension(&model.eigenvalues, None, lambda).unwrap().truncated;
        let bound = d * d * (lambda / model.kappa).powf(-model.s());
        worst = worst.max(n_l / bound);
        ed_ok &= n_l <= bound * (1.0 + 1e-12);
    }
    verdict(
        n1_ok && ed_ok,
        format!(
            "N(1) = {n1:.8} vs {exact:.8} (diff {:.1e}); D = {d:.4}, max N(λ)/bound {worst:.4}",
            (n1 - exact).abs()
        ),
    )
}

fn criterion_7() -> Verdict {
    let cfg = ExperimentConfig {
        n_grid: vec![512],
        replicates: 50,
        theta_list: vec![0.0],
        stopping: StoppingRule::HoldoutFraction { fraction: 0.2 },
        max_iter: Some(100),
        ..default_inner_config()
    };
    let report = holdout_study(&cfg).unwrap();
    let share = report.within_factor_two;
    verdict(
        share >= 0.9,
        format!(
            "{:.0}% of {} replicates within 2x of the best iterate (n = 512)",
            100.0 * share,
            report.outcomes.len()
        ),
    )
}

fn criterion_8() -> Verdict {
    let params = ModelParams {
        truncation: 100,
        ..default_inner_config().model
    };
    let model = make_model(&params).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    for e in 0..20u64 {
        let n = rng.random_range(8..=24);
        let sample = draw_sample(&model, n, false, 9000 + e).unwrap();
        let alpha = if e % 2 == 0 {
            let k = kcg_core::kernel::build_kernel_matrix(&sample.x_labeled, &model.kernel).unwrap();
            let trace = cg_fit(&k, &DVector::from_vec(sample.y.clone()), n, CgMode::KnNorm).unwrap();
            let m = rng.random_range(0..=trace.m_last.min(6));
            trace.alpha(m).clone()
        } else {
            DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
        };
        let spectral = error_norm(&alpha, &sample.x_labeled, &model, 0.0).unwrap().squared();
        let mc = error_norm_monte_carlo(
            &alpha,
            &sample.x_labeled,
            &model.kernel,
            |xs| target_values(&model, xs),
            100_000,
            7000 + e,
        )
        .unwrap();
        let se = match mc.method {
            kcg_core::eval::ErrorMethod::MonteCarlo { std_err, .. } => std_err,
            _ => unreachable!(),
        };
        let z = (spectral - mc.squared()).abs() / se;
        worst = worst.max(z);
        if z > 3.0 {
            fails += 1;
        }
    }
    verdict(
        fails == 0,
        format!("{fails} of 20 outside 3 SE, worst |z| {worst:.2}"),
    )
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn criterion_9() -> Verdict {
    let config = workspace_root().join("configs/inner_r1_s05.json");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_kcg"))
            .args(["rates", "--quiet", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path())
            .status()
            .unwrap();
        if !status.success() {
            return verdict(false, format!("rates exited with {status}"));
        }
        outputs.push(std::fs::read(dir.path().join("rate_report.json")).unwrap());
    }
    verdict(
        outputs[0] == outputs[1],
        format!("rate_report.json sizes {} and {} bytes", outputs[0].len(), outputs[1].len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("oracle equivalence", criterion_1),
        ("exact solve at full dimension", criterion_2),
        ("residual monotonicity and Krylov membership", criterion_3),
        ("inner-regime rates", criterion_4),
        ("outer-regime rates", criterion_5),
        ("effective dimension", criterion_6),
        ("hold-out adaptivity", criterion_7),
        ("spectral vs Monte-Carlo norm", criterion_8),
        ("rates determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {id} {name}: {} [{:.1}s]",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
