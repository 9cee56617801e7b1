use std::path::Path;

use gee_core::diagnostics::{
    assess_trends, condition_trend_report, design_diagnostics, example1_closed_form,
    smoothness_maxima, DiagnosticsReport, Example1, TrendAssessment,
};
use gee_core::estimator::{
    estimate_correlation, gee_independence_fit, sandwich_covariance, two_step_fit, wald_intervals,
    CorrelationEstimate, FitResult, SolverOptions,
};
use gee_core::json::to_canonical_json;
use gee_core::matkernel::{pd_tolerance, sym_eigen, SymMatrix};
use gee_core::model::{LinkFamily, LongitudinalDataset};
use gee_core::simulator::{monte_carlo_run, MCReport, SimConfig};
use gee_core::GeeError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::parse_dataset_csv;
use crate::error::{CliError, CliResult};
use crate::{Command, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Warning,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Warning => 2,
        }
    }
}

pub fn execute(cmd: &Command) -> CliResult<Outcome> {
    match cmd {
        Command::Fit {
            data,
            link,
            method,
            out,
            ci_level,
            shuffle_subjects,
            max_iter,
        } => {
            let opts = SolverOptions {
                max_iter: *max_iter,
                ..SolverOptions::default()
            };
            opts.validate()?;
            cmd_fit(
                data,
                *link,
                *method,
                out,
                *ci_level,
                *shuffle_subjects,
                &opts,
            )
        }
        Command::Diagnose {
            data,
            link,
            beta,
            grid,
            det_floor,
            radius,
            out,
        } => cmd_diagnose(
            data,
            *link,
            beta.as_deref(),
            grid.as_deref(),
            *det_floor,
            *radius,
            out,
        ),
        Command::Simulate {
            config,
            out,
            workers,
            seed,
            csv,
        } => cmd_simulate(config, out, *workers, *seed, csv.as_deref()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = to_canonical_json(value)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn shuffled(data: LongitudinalDataset, seed: u64) -> CliResult<LongitudinalDataset> {
    let mut order: Vec<usize> = (0..data.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(data.permuted(&order)?)
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct FitOutput {
    beta_hat: Vec<f64>,
    cov_beta: Option<SymMatrix>,
    stderr: Vec<f64>,
    wald_ci: Vec<[f64; 2]>,
    converged: bool,
    iterations: usize,
    final_gnorm: f64,
    method: &'static str,
    R_tilde: Option<SymMatrix>,
    fallback_flag: bool,
}

pub fn cmd_fit(
    data_path: &Path,
    link: LinkFamily,
    method: Method,
    out: &Path,
    ci_level: f64,
    shuffle: Option<u64>,
    opts: &SolverOptions,
) -> CliResult<Outcome> {
    if !(ci_level > 0.0 && ci_level < 1.0) {
        return Err(CliError::Usage(format!(
            "--ci-level {ci_level} outside (0, 1)"
        )));
    }
    let mut data = parse_dataset_csv(data_path)?;
    if let Some(seed) = shuffle {
        data = shuffled(data, seed)?;
    }
    let (fit, name): (FitResult, &'static str) = match method {
        Method::Independence => {
            let mut fit = gee_independence_fit(&data, link, &vec![0.0; data.p()], opts)?;
            let identity = CorrelationEstimate::fixed(SymMatrix::identity(data.m()));
            fit.cov_beta =
                Some(sandwich_covariance(&data, link, &fit.beta_hat, &identity)?.cov_beta);
            (fit, "independence")
        }
        Method::TwoStep => (two_step_fit(&data, link, opts)?, "two-step"),
    };
    let ci = wald_intervals(&fit, ci_level)?;
    let cov = fit.cov_beta.clone();
    let stderr = (0..data.p())
        .map(|k| {
            cov.as_ref()
                .map_or(f64::NAN, |c| c.get(k, k).max(0.0).sqrt())
        })
        .collect();
    let r_tilde = match method {
        Method::Independence => None,
        Method::TwoStep => fit.correlation_used.as_ref().map(|c| c.r_tilde.clone()),
    };
    let output = FitOutput {
        beta_hat: fit.beta_hat.clone(),
        cov_beta: cov,
        stderr,
        wald_ci: ci.into_iter().map(|(a, b)| [a, b]).collect(),
        converged: fit.converged,
        iterations: fit.iterations,
        final_gnorm: fit.final_gnorm,
        method: name,
        R_tilde: r_tilde,
        fallback_flag: fit.fallback,
    };
    write_json(out, &output)?;
    Ok(if fit.converged {
        Outcome::Success
    } else {
        Outcome::Warning
    })
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct TrendRow {
    n: usize,
    lambda_min_H_indep: f64,
    lambda_min_H: f64,
    lambda_min_H_over_tau: f64,
    pi_n: f64,
    tau_tilde_n: f64,
    pi2_gamma_tilde: f64,
    sqrt_n_pi_gamma_tilde: f64,
    sqrt_n_times_gamma0_indep: f64,
    det_R: f64,
}

impl From<&DiagnosticsReport> for TrendRow {
    fn from(r: &DiagnosticsReport) -> Self {
        TrendRow {
            n: r.n,
            lambda_min_H_indep: r.lambda_min_H_indep,
            lambda_min_H: r.lambda_min_H,
            lambda_min_H_over_tau: r.lambda_min_H_over_tau,
            pi_n: r.pi_n,
            tau_tilde_n: r.tau_tilde_n,
            pi2_gamma_tilde: r.pi2_gamma_tilde,
            sqrt_n_pi_gamma_tilde: r.sqrt_n_pi_gamma_tilde,
            sqrt_n_times_gamma0_indep: r.sqrt_n_times_gamma0_indep,
            det_R: r.det_R,
        }
    }
}

#[derive(Serialize)]
struct Smoothness {
    k2: f64,
    k3: f64,
    radius: f64,
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct DiagnoseOutput {
    beta: Vec<f64>,
    beta_source: &'static str,
    R_tilde: SymMatrix,
    report: DiagnosticsReport,
    smoothness: Smoothness,
    trend: Vec<TrendRow>,
    trend_assessment: TrendAssessment,
    example1: Option<Example1>,
}

/// `{n/16, n/4, n}`, keeping only prefixes with at least `m + p` subjects.
pub fn default_grid(n: usize, m: usize, p: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [n / 16, n / 4, n]
        .into_iter()
        .filter(|&k| k >= m + p || k == n)
        .collect();
    grid.dedup();
    grid
}

pub fn cmd_diagnose(
    data_path: &Path,
    link: LinkFamily,
    beta: Option<&[f64]>,
    grid: Option<&[usize]>,
    det_floor: f64,
    radius: f64,
    out: &Path,
) -> CliResult<Outcome> {
    let data = parse_dataset_csv(data_path)?;
    let (beta, source) = match beta {
        Some(b) => {
            if b.len() != data.p() {
                return Err(CliError::Usage(format!(
                    "--beta has {} entries, dataset has p = {}",
                    b.len(),
                    data.p()
                )));
            }
            (b.to_vec(), "supplied")
        }
        None => {
            let fit =
                gee_independence_fit(&data, link, &vec![0.0; data.p()], &SolverOptions::default())?;
            if !fit.converged {
                return Err(GeeError::Precondition(format!(
                    "preliminary independence fit did not converge (|g| = {:e}); pass --beta",
                    fit.final_gnorm
                ))
                .into());
            }
            (fit.beta_hat, "independence_fit")
        }
    };
    let corr = estimate_correlation(&data, link, &beta)?;
    let m_hat = sandwich_covariance(&data, link, &beta, &corr)
        .ok()
        .map(|s| s.m_hat)
        .filter(|mh| {
            sym_eigen(mh)
                .map(|e| e.lambda_min() > pd_tolerance(mh))
                .unwrap_or(false)
        });
    let report = design_diagnostics(&data, link, &beta, &corr.r_tilde, m_hat.as_ref())?;
    let sm = smoothness_maxima(&data, link, &beta, radius, Some(&corr.r_tilde))?;
    let grid = grid
        .map(|g| g.to_vec())
        .unwrap_or_else(|| default_grid(data.n(), data.m(), data.p()));
    let trend_reports = condition_trend_report(&data, link, &beta, None, &grid)?;
    let example1 = if data.p() == 2 {
        Some(example1_closed_form(&data, link, &beta)?)
    } else {
        None
    };
    let output = DiagnoseOutput {
        beta,
        beta_source: source,
        R_tilde: corr.r_tilde,
        report,
        smoothness: Smoothness {
            k2: sm.k2,
            k3: sm.k3,
            radius,
        },
        trend: trend_reports.iter().map(TrendRow::from).collect(),
        trend_assessment: assess_trends(&trend_reports, det_floor),
        example1,
    };
    write_json(out, &output)?;
    Ok(Outcome::Success)
}

fn write_replicate_csv(path: &Path, report: &MCReport, p: usize) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut header = vec![
        "replicate".to_string(),
        "seed".into(),
        "success".into(),
        "fallback".into(),
    ];
    header.extend((1..=p).map(|k| format!("beta_hat_{k}")));
    header.extend((1..=p).map(|k| format!("z_{k}")));
    header.extend((1..=p).map(|k| format!("covered_{k}")));
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for r in &report.records {
        let mut row = vec![
            r.replicate.to_string(),
            r.seed.to_string(),
            r.success.to_string(),
            r.fallback.to_string(),
        ];
        row.extend(r.beta_hat.iter().map(|b| b.to_string()));
        match &r.z {
            Some(z) => row.extend(z.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        row.extend(r.covered.iter().map(|c| c.to_string()));
        w.write_record(&row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn cmd_simulate(
    config_path: &Path,
    out: &Path,
    workers: Option<usize>,
    seed: Option<u64>,
    csv_path: Option<&Path>,
) -> CliResult<Outcome> {
    let text = std::fs::read_to_string(config_path).map_err(|e| CliError::io(config_path, e))?;
    let mut config = SimConfig::from_json(&text)?;
    if let Some(w) = workers {
        config.workers = w;
    }
    if let Some(s) = seed {
        config.base_seed = s;
    }
    config.validate()?;
    let report = monte_carlo_run(&config)?;
    write_json(out, &report)?;
    if let Some(path) = csv_path {
        write_replicate_csv(path, &report, config.p)?;
    }
    Ok(if report.acceptable() {
        Outcome::Success
    } else {
        Outcome::Warning
    })
}
