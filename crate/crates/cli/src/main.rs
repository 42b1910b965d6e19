use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kcg_core::harness::{
    compare_solvers, holdout_study, plot_rows, run_experiment, run_fit, simulate, ExperimentConfig, FitConfig,
};
use kcg_core::stopping::Regime;
use kcg_core::Error;
use log::warn;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "kcg", version, about = "Kernel CG regression with early stopping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the per-cell summary lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one sample and stop by the discrepancy rule.
    Fit(Common),
    /// Draw one sample and write it out.
    Simulate(Common),
    /// Rate sweep over an n-grid with replicates.
    Rates(Common),
    /// Hold-out stopping study.
    Holdout(Common),
    /// CG vs Tikhonov vs the Euclidean-norm variant.
    Compare(Common),
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: String) -> Self {
        Failure { code: 1, message }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) | Error::Unsupported(_) => 1,
            Error::NumericalFailure { .. } | Error::NotReached { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Output { dir: dir.to_path_buf() })
    }

    /// Writes to a temporary file in the same directory, then renames.
    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let fail = |e: std::io::Error| Failure::config(format!("cannot write {}: {e}", target.display()));
        let mut f = fs::File::create(&tmp).map_err(fail)?;
        f.write_all(bytes).map_err(fail)?;
        f.sync_all().map_err(fail)?;
        fs::rename(&tmp, &target).map_err(fail)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).expect("row serializes");
        }
        let bytes = w.into_inner().expect("in-memory writer");
        self.write(name, &bytes)
    }
}

#[derive(Serialize)]
struct RateRow<'a> {
    regime: Regime,
    n: usize,
    rep: usize,
    theta: f64,
    error: f64,
    m_hat: usize,
    omega: f64,
    seed: u64,
    master_seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SampleRow<'a> {
    index: usize,
    x: f64,
    y: Option<f64>,
    labeled: bool,
    seed: u64,
    master_seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct HoldoutRow<'a> {
    n: usize,
    rep: usize,
    seed: u64,
    selected_m: usize,
    selected_error: f64,
    best_m: usize,
    best_error: f64,
    ratio: f64,
    master_seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct CompareRow<'a> {
    n: usize,
    cg_m_hat: f64,
    cg_error: f64,
    cg_best_m: f64,
    cg_best_error: f64,
    cg_final_error: f64,
    ridge_best_lambda: f64,
    ridge_best_error: f64,
    ridge_solves: usize,
    pls_best_m: f64,
    pls_best_error: f64,
    master_seed: u64,
    config_hash: &'a str,
}

fn experiment_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg: ExperimentConfig = load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn fit_config(common: &Common) -> CliResult<FitConfig> {
    let mut cfg: FitConfig = load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn cmd_fit(common: &Common) -> CliResult<()> {
    let cfg = fit_config(common)?;
    let report = run_fit(&cfg).map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == 2 {
            f.message = format!("{} (n = {}, seed = {})", f.message, cfg.n, cfg.seed());
        }
        f
    })?;
    Output::new(&common.out)?.json("fit.json", &report)?;
    if !common.quiet {
        println!(
            "n={} seed={} omega={:.6} m_hat={} error={:.6e}",
            report.n, report.seed, report.omega, report.m_hat, report.error
        );
        let res: Vec<String> = report.residual_kn_norms.iter().map(|r| format!("{r:.6e}")).collect();
        println!("residuals=[{}]", res.join(", "));
    }
    Ok(())
}

fn cmd_simulate(common: &Common) -> CliResult<()> {
    let cfg = fit_config(common)?;
    let sample = simulate(&cfg)?;
    let hash = cfg.hash();
    let mut rows: Vec<SampleRow> = sample
        .x_labeled
        .iter()
        .zip(&sample.y)
        .enumerate()
        .map(|(index, (&x, &y))| SampleRow {
            index,
            x,
            y: Some(y),
            labeled: true,
            seed: sample.seed,
            master_seed: cfg.master_seed,
            config_hash: &hash,
        })
        .collect();
    let offset = rows.len();
    for (i, &x) in sample.x_unlabeled.iter().flatten().enumerate() {
        rows.push(SampleRow {
            index: offset + i,
            x,
            y: None,
            labeled: false,
            seed: sample.seed,
            master_seed: cfg.master_seed,
            config_hash: &hash,
        });
    }
    let out = Output::new(&common.out)?;
    out.csv("sample.csv", &rows)?;
    out.json(
        "sample.json",
        &serde_json::json!({
            "config_hash": hash,
            "master_seed": cfg.master_seed,
            "seed": sample.seed,
            "rng_algorithm": sample.rng_algorithm,
            "model_id": sample.model_id,
            "n": sample.n(),
            "unlabeled": sample.x_unlabeled.as_ref().map_or(0, Vec::len),
        }),
    )?;
    if !common.quiet {
        println!("n={} seed={} rows={}", sample.n(), sample.seed, rows.len());
    }
    Ok(())
}

fn cmd_rates(common: &Common) -> CliResult<()> {
    let cfg = experiment_config(common)?;
    let output = run_experiment(&cfg)?;
    let report = &output.report;
    let rows: Vec<RateRow> = output
        .records
        .iter()
        .map(|r| RateRow {
            regime: r.regime,
            n: r.n,
            rep: r.rep,
            theta: r.theta,
            error: r.error,
            m_hat: r.m_hat,
            omega: r.omega,
            seed: r.seed,
            master_seed: report.master_seed,
            config_hash: &report.config_hash,
        })
        .collect();
    let out = Output::new(&common.out)?;
    out.csv("records.csv", &rows)?;
    for &theta in &cfg.theta_list {
        let mut tsv = String::from("log_n\tlog_median_error\ttheoretical_line\n");
        for (x, y, t) in plot_rows(report, theta) {
            tsv.push_str(&format!("{x}\t{y}\t{t}\n"));
        }
        out.write(&format!("plot_theta_{theta}.tsv"), tsv.as_bytes())?;
    }
    out.json("rate_report.json", report)?;
    if report.partial {
        warn!(
            "{} replicate(s) did not reach the threshold; report is partial",
            report.failed_replicates
        );
    }
    if !common.quiet {
        for c in &report.cells {
            println!(
                "n={} theta={} median_error={:.4e} iqr={:.3e} median_m_hat={} omega={:.4} admissible={}",
                c.n, c.theta, c.median_error, c.iqr, c.median_m_hat, c.omega, c.admissible
            );
        }
        for s in &report.slopes {
            println!(
                "theta={} slope={:.4} theory={:.4} gap={:.4}",
                s.theta, s.slope, s.theoretical_exponent, s.slope_gap
            );
        }
    }
    Ok(())
}

fn cmd_holdout(common: &Common) -> CliResult<()> {
    let cfg = experiment_config(common)?;
    let report = holdout_study(&cfg)?;
    let rows: Vec<HoldoutRow> = report
        .outcomes
        .iter()
        .map(|o| HoldoutRow {
            n: o.n,
            rep: o.rep,
            seed: o.seed,
            selected_m: o.selected_m,
            selected_error: o.selected_error,
            best_m: o.best_m,
            best_error: o.best_error,
            ratio: o.ratio,
            master_seed: report.master_seed,
            config_hash: &report.config_hash,
        })
        .collect();
    let out = Output::new(&common.out)?;
    out.csv("holdout.csv", &rows)?;
    out.json("holdout_report.json", &report)?;
    if !common.quiet {
        for &n in &cfg.n_grid {
            let mine: Vec<_> = report.outcomes.iter().filter(|o| o.n == n).collect();
            let ok = mine.iter().filter(|o| o.selected_error <= 2.0 * o.best_error).count();
            println!("n={n} theta=0 within_2x={ok}/{}", mine.len());
        }
        println!("within_2x_share={:.3}", report.within_factor_two);
    }
    Ok(())
}

fn cmd_compare(common: &Common) -> CliResult<()> {
    let cfg = experiment_config(common)?;
    let table = compare_solvers(&cfg)?;
    let rows: Vec<CompareRow> = table
        .rows
        .iter()
        .map(|r| CompareRow {
            n: r.n,
            cg_m_hat: r.cg_m_hat,
            cg_error: r.cg_error,
            cg_best_m: r.cg_best_m,
            cg_best_error: r.cg_best_error,
            cg_final_error: r.cg_final_error,
            ridge_best_lambda: r.ridge_best_lambda,
            ridge_best_error: r.ridge_best_error,
            ridge_solves: r.ridge_solves,
            pls_best_m: r.pls_best_m,
            pls_best_error: r.pls_best_error,
            master_seed: table.master_seed,
            config_hash: &table.config_hash,
        })
        .collect();
    let out = Output::new(&common.out)?;
    out.csv("compare.csv", &rows)?;
    out.json("compare.json", &table)?;
    if !common.quiet {
        for r in &table.rows {
            println!(
                "n={} theta=0 cg_m_hat={} cg_error={:.4e} cg_best={:.4e} ridge_best={:.4e} pls_best={:.4e}",
                r.n, r.cg_m_hat, r.cg_error, r.cg_best_error, r.ridge_best_error, r.pls_best_error
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (Command::Fit(common)
    | Command::Simulate(common)
    | Command::Rates(common)
    | Command::Holdout(common)
    | Command::Compare(common)) = &cli.command;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if common.quiet {
        "error"
    } else {
        "warn"
    }))
    .init();

    let result = match &cli.command {
        Command::Fit(c) => cmd_fit(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Rates(c) => cmd_rates(c),
        Command::Holdout(c) => cmd_holdout(c),
        Command::Compare(c) => cmd_compare(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
