//! Regularity quantities for a concrete dataset.
//!
//! The existence, consistency and normality results for the two-step estimator
//! are stated through limits of a handful of matrix functionals: the smallest
//! eigenvalue of the information matrices, the leverage-type maxima `γ`, the
//! eigenvalue spread `π_n` of the working correlation, and so on. None of these
//! conditions has a finite-n threshold, so this module reports the numbers and
//! their trends over growing subject prefixes and leaves judgment to the caller.
//!
//! Quantities are evaluated with a supplied correlation matrix `R`: normally the
//! data-driven `R̃`, or the true average correlation when it is known.

use serde::Serialize;

use crate::error::{GeeError, Result};
use crate::estimator::{
    correlation_inverse, estimate_correlation, information, pseudo_estimating_function,
    subject_information, CorrelationEstimate,
};
use crate::matkernel::{inverse_spd, matrix_stats, sym_eigen, sym_sqrt_pair, SymMatrix};
use crate::model::{eval_model, link_eval, LinkFamily, LongitudinalDataset, ModelEval};

/// Default floor for `det(R̃)` in the trend report.
pub const DEFAULT_DET_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct DiagnosticsReport {
    pub n: usize,
    pub H_indep: SymMatrix,
    pub H_general: SymMatrix,
    pub lambda_min_H_indep: f64,
    pub lambda_min_H: f64,
    pub gamma0_indep: f64,
    pub pi_n: f64,
    pub tau_tilde_n: f64,
    pub gamma0: f64,
    pub gamma_tilde: f64,
    pub gamma_D: f64,
    pub c_n: Option<f64>,
    pub k2: f64,
    pub k3: f64,
    /// `max_{i,j} σ²_ij`
    pub d_n: f64,
    pub lambda_min_H_over_tau: f64,
    pub sqrt_n_times_gamma0_indep: f64,
    pub pi2_gamma_tilde: f64,
    pub sqrt_n_pi_gamma_tilde: f64,
    pub det_R: f64,
    pub lambda_min_R: f64,
    /// `λ_max(R^{-1} R̄)`, only when the true correlation is supplied.
    pub tau_n_oracle: Option<f64>,
    /// `λ_min(R̄)`, only when the true correlation is supplied.
    pub lambda_min_Rbar: Option<f64>,
}

fn not_pd(e: GeeError) -> GeeError {
    match e {
        GeeError::SingularDesign { lambda_min } => GeeError::NotPositiveDefinite { lambda_min },
        other => other,
    }
}

fn max_leverage(data: &LongitudinalDataset, h_inv: &SymMatrix) -> f64 {
    data.subjects()
        .iter()
        .flat_map(|s| (0..s.x.rows()).map(move |j| h_inv.quad_form(s.x.row(j))))
        .fold(0.0, f64::max)
}

fn derivative_ratios(ev: &ModelEval, family: LinkFamily) -> Result<(f64, f64)> {
    let mut k2: f64 = 0.0;
    let mut k3: f64 = 0.0;
    for s in &ev.subjects {
        for &theta in &s.theta {
            let lv = link_eval(family, theta)?;
            k2 = k2.max((lv.d2 / lv.d1).abs());
            k3 = k3.max((lv.d3 / lv.d1).abs());
        }
    }
    Ok((k2, k3))
}

/// All regularity quantities at `beta` with correlation `r`.
///
/// `c_n` is filled only when `m_hat` (the sandwich meat) is supplied.
pub fn design_diagnostics(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
    r: &SymMatrix,
    m_hat: Option<&SymMatrix>,
) -> Result<DiagnosticsReport> {
    diagnostics_impl(data, family, beta, r, m_hat, None)
}

/// As [`design_diagnostics`], additionally reporting the oracle quantities
/// that need the true average correlation `r_bar`.
pub fn design_diagnostics_with_oracle(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
    r: &SymMatrix,
    m_hat: Option<&SymMatrix>,
    r_bar: &SymMatrix,
) -> Result<DiagnosticsReport> {
    diagnostics_impl(data, family, beta, r, m_hat, Some(r_bar))
}

fn diagnostics_impl(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
    r: &SymMatrix,
    m_hat: Option<&SymMatrix>,
    r_bar: Option<&SymMatrix>,
) -> Result<DiagnosticsReport> {
    let m = data.m();
    if r.dim() != m {
        return Err(GeeError::Shape(format!(
            "R is {0}x{0}, dataset has m = {m}",
            r.dim()
        )));
    }
    let ev = eval_model(data, family, beta)?;
    let rinv = correlation_inverse(r)?;

    let h_indep = information(data, &ev, None);
    let h = information(data, &ev, Some(&rinv));
    let h_indep_inv = inverse_spd(&h_indep).map_err(not_pd)?;
    let h_inv = inverse_spd(&h).map_err(not_pd)?;
    let lambda_min_h_indep = sym_eigen(&h_indep)?.lambda_min();
    let lambda_min_h = sym_eigen(&h)?.lambda_min();

    let rinv_eig = sym_eigen(&rinv)?;
    let pi_n = rinv_eig.lambda_max() / rinv_eig.lambda_min();
    let tau_tilde = m as f64 * rinv_eig.lambda_max();

    let gamma0_indep = max_leverage(data, &h_indep_inv);
    let gamma0 = max_leverage(data, &h_inv);
    let gamma_tilde = tau_tilde * gamma0;

    let (_, h_inv_half) = sym_sqrt_pair(&h)?;
    let mut gamma_d: f64 = 0.0;
    for (s, e) in data.subjects().iter().zip(&ev.subjects) {
        let k = subject_information(&s.x, &e.var, Some(&rinv));
        gamma_d = gamma_d.max(sym_eigen(&h_inv_half.sandwich(&k))?.lambda_max());
    }

    let c_n = match m_hat {
        Some(mh) => {
            let (_, mh_inv_half) = sym_sqrt_pair(mh)?;
            Some(sym_eigen(&mh_inv_half.sandwich(&h))?.lambda_max())
        }
        None => None,
    };

    let (k2, k3) = derivative_ratios(&ev, family)?;
    let d_n = ev
        .subjects
        .iter()
        .flat_map(|s| s.var.iter().copied())
        .fold(0.0, f64::max);
    let r_stats = matrix_stats(r)?;
    let sqrt_n = (data.n() as f64).sqrt();

    let (tau_n_oracle, lambda_min_rbar) = match r_bar {
        Some(rb) => {
            if rb.dim() != m {
                return Err(GeeError::Shape(
                    "true correlation has the wrong dimension".into(),
                ));
            }
            let (rb_half, _) = sym_sqrt_pair(rb)?;
            let tau = sym_eigen(&rb_half.sandwich(&rinv))?.lambda_max();
            (Some(tau), Some(sym_eigen(rb)?.lambda_min()))
        }
        None => (None, None),
    };

    Ok(DiagnosticsReport {
        n: data.n(),
        H_indep: h_indep,
        H_general: h,
        lambda_min_H_indep: lambda_min_h_indep,
        lambda_min_H: lambda_min_h,
        gamma0_indep,
        pi_n,
        tau_tilde_n: tau_tilde,
        gamma0,
        gamma_tilde,
        gamma_D: gamma_d,
        c_n,
        k2,
        k3,
        d_n,
        lambda_min_H_over_tau: lambda_min_h / tau_tilde,
        sqrt_n_times_gamma0_indep: sqrt_n * gamma0_indep,
        pi2_gamma_tilde: pi_n * pi_n * gamma_tilde,
        sqrt_n_pi_gamma_tilde: sqrt_n * pi_n * gamma_tilde,
        det_R: r_stats.det,
        lambda_min_R: r_stats.lambda_min,
        tau_n_oracle,
        lambda_min_Rbar: lambda_min_rbar,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessMaxima {
    pub k2: f64,
    pub k3: f64,
    pub probes: Vec<Vec<f64>>,
}

/// `k2 = max |μ̈/μ̇|`, `k3 = max |μ⁽³⁾/μ̇|` over all cells and over `2p + 1`
/// probe parameters: the center plus `±r·τ̃^{1/2}` along each `H^{-1/2}`
/// eigendirection. The probes are a finite stand-in for the supremum over the
/// local ball `{β : ‖H^{1/2}(β − β_c)‖ ≤ τ̃^{1/2} r}`.
///
/// With `r = None` the ball is the working-independence one (`H_indep`,
/// `τ̃ = m`); with `Some(R)` it uses `H` and `τ̃` built from `R`.
pub fn smoothness_maxima(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta_center: &[f64],
    radius: f64,
    r: Option<&SymMatrix>,
) -> Result<SmoothnessMaxima> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(GeeError::InvalidInput(format!(
            "radius {radius} must be finite and >= 0"
        )));
    }
    let ev = eval_model(data, family, beta_center)?;
    let mut probes = vec![beta_center.to_vec()];
    if radius > 0.0 {
        let (h, tau) = match r {
            None => (information(data, &ev, None), data.m() as f64),
            Some(r) => {
                let rinv = correlation_inverse(r)?;
                let tau = data.m() as f64 * sym_eigen(&rinv)?.lambda_max();
                (information(data, &ev, Some(&rinv)), tau)
            }
        };
        let eig = sym_eigen(&h)?;
        if eig.lambda_min() <= 0.0 {
            return Err(GeeError::NotPositiveDefinite {
                lambda_min: eig.lambda_min(),
            });
        }
        for (lambda, v) in eig.values.iter().zip(&eig.vectors) {
            let len = radius * tau.sqrt() / lambda.sqrt();
            for sign in [1.0, -1.0] {
                probes.push(
                    beta_center
                        .iter()
                        .zip(v)
                        .map(|(b, d)| b + sign * len * d)
                        .collect(),
                );
            }
        }
    }
    let mut k2: f64 = 0.0;
    let mut k3: f64 = 0.0;
    for probe in &probes {
        let ev = eval_model(data, family, probe).map_err(|e| match e {
            GeeError::Overflow { theta, .. } => GeeError::ProbeOverflow {
                theta,
                probe: probe.clone(),
            },
            other => other,
        })?;
        let (a, b) = derivative_ratios(&ev, family)?;
        k2 = k2.max(a);
        k3 = k3.max(b);
    }
    Ok(SmoothnessMaxima { k2, k3, probes })
}

/// Central finite-difference Jacobian of the pseudo-likelihood estimating
/// function, compared against the Fisher-scoring matrix `H̃` used for stepping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianCheck {
    /// `D = −∂g̃/∂β`, column `k` from a central difference in `β_k`.
    pub jacobian: Vec<Vec<f64>>,
    /// Extreme eigenvalues of the symmetric part of `H̃^{-1/2} D H̃^{-1/2}`.
    pub normalized_min: f64,
    pub normalized_max: f64,
}

pub fn jacobian_check(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
    corr: &CorrelationEstimate,
) -> Result<JacobianCheck> {
    let p = data.p();
    let mut cols = Vec::with_capacity(p);
    for k in 0..p {
        let h = 1e-5 * (1.0 + beta[k].abs());
        let mut up = beta.to_vec();
        let mut dn = beta.to_vec();
        up[k] += h;
        dn[k] -= h;
        let (gu, gd) = (
            pseudo_estimating_function(data, family, corr, &up)?,
            pseudo_estimating_function(data, family, corr, &dn)?,
        );
        cols.push(
            gu.iter()
                .zip(&gd)
                .map(|(a, b)| -(a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let jacobian: Vec<Vec<f64>> = (0..p)
        .map(|r| (0..p).map(|c| cols[c][r]).collect())
        .collect();
    let rinv = correlation_inverse(&corr.r_tilde)?;
    let h = information(data, &eval_model(data, family, beta)?, Some(&rinv));
    let (_, h_inv_half) = sym_sqrt_pair(&h)?;
    let d_sym = SymMatrix::from_fn(p, |r, c| 0.5 * (jacobian[r][c] + jacobian[c][r]))?;
    let eig = sym_eigen(&h_inv_half.sandwich(&d_sym))?;
    Ok(JacobianCheck {
        jacobian,
        normalized_min: eig.lambda_min(),
        normalized_max: eig.lambda_max(),
    })
}

/// Closed forms for a two-covariate design `x_ij = (a_ij, b_ij)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example1 {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub d: f64,
    pub det: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub sin2_theta: f64,
    pub gamma0_bound: f64,
}

pub fn example1_closed_form(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
) -> Result<Example1> {
    if data.p() != 2 {
        return Err(GeeError::Shape(format!(
            "two-covariate closed form needs p = 2, got {}",
            data.p()
        )));
    }
    let ev = eval_model(data, family, beta)?;
    let (mut u, mut v, mut w) = (0.0, 0.0, 0.0);
    for (s, e) in data.subjects().iter().zip(&ev.subjects) {
        for j in 0..data.m() {
            let (a, b, sig2) = (s.x.get(j, 0), s.x.get(j, 1), e.var[j]);
            u += sig2 * a * a;
            v += sig2 * b * b;
            w += sig2 * a * b;
        }
    }
    let d = ((u - v) * (u - v) + 4.0 * w * w).sqrt();
    let det = u * v - w * w;
    let (su, sv) = (u.sqrt(), v.sqrt());
    let gamma0_bound = data
        .subjects()
        .iter()
        .flat_map(|s| {
            (0..s.x.rows()).map(move |j| (s.x.get(j, 0) / su + s.x.get(j, 1) / sv).powi(2))
        })
        .fold(0.0, f64::max);
    Ok(Example1 {
        u,
        v,
        w,
        d,
        det,
        lambda_min: 0.5 * (u + v - d),
        lambda_max: 0.5 * (u + v + d),
        sin2_theta: det / (u * v),
        gamma0_bound,
    })
}

/// Closed form for a single categorical covariate coded as basis vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Example2 {
    /// `ν_k = Σ σ²_ij` over cells at level `k`.
    pub nu: Vec<f64>,
    pub nu_min: f64,
}

pub fn example2_closed_form(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
) -> Result<Example2> {
    let ev = eval_model(data, family, beta)?;
    let mut nu = vec![0.0; data.p()];
    for (i, (s, e)) in data.subjects().iter().zip(&ev.subjects).enumerate() {
        for j in 0..data.m() {
            let row = s.x.row(j);
            let level = basis_level(row).ok_or_else(|| {
                GeeError::Shape(format!(
                    "cell (subject {i}, time {j}) is not a basis vector: {row:?}"
                ))
            })?;
            nu[level] += e.var[j];
        }
    }
    let nu_min = nu.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Example2 { nu, nu_min })
}

fn basis_level(row: &[f64]) -> Option<usize> {
    let mut level = None;
    for (k, &v) in row.iter().enumerate() {
        if v == 1.0 && level.is_none() {
            level = Some(k);
        } else if v != 0.0 {
            return None;
        }
    }
    level
}

/// One report per subject prefix in `n_grid`.
///
/// With `r = None` the correlation is re-estimated on every prefix (`R̃` at
/// `beta`); with `Some(R)` the same matrix is used throughout.
pub fn condition_trend_report(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
    r: Option<&SymMatrix>,
    n_grid: &[usize],
) -> Result<Vec<DiagnosticsReport>> {
    if n_grid.is_empty() {
        return Err(GeeError::InvalidInput("empty prefix grid".into()));
    }
    if n_grid.windows(2).any(|w| w[0] >= w[1])
        || n_grid[0] == 0
        || *n_grid.last().unwrap() > data.n()
    {
        return Err(GeeError::InvalidInput(format!(
            "prefix grid {n_grid:?} must be strictly increasing within 1..={}",
            data.n()
        )));
    }
    n_grid
        .iter()
        .map(|&k| {
            let prefix = data.prefix(k)?;
            match r {
                Some(r) => design_diagnostics(&prefix, family, beta, r, None),
                None => {
                    let est = estimate_correlation(&prefix, family, beta)?;
                    design_diagnostics(&prefix, family, beta, &est.r_tilde, None)
                }
            }
        })
        .collect()
}

/// Finite-n trend observations over a prefix sequence. Each flag is `None`
/// when there is only one prefix and no trend can be read off.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct TrendAssessment {
    pub n_grid: Vec<usize>,
    /// `λ_min(H_indep)` strictly increasing; a stall signals that the
    /// working-independence information is not diverging.
    pub lambda_min_H_indep_increasing: Option<bool>,
    /// `λ_min(H)/τ̃` strictly increasing.
    pub info_over_tau_increasing: Option<bool>,
    /// `π²·γ̃` strictly decreasing.
    pub pi2_gamma_tilde_decreasing: Option<bool>,
    /// `√n·π·γ̃` strictly decreasing.
    pub sqrt_n_pi_gamma_tilde_decreasing: Option<bool>,
    /// `√n·γ0_indep` strictly decreasing.
    pub sqrt_n_gamma0_indep_decreasing: Option<bool>,
    pub det_floor: f64,
    /// `det(R) ≥ det_floor` on every prefix.
    pub det_R_above_floor: bool,
    /// Names of the trend checks that did not hold; empty when all held.
    pub flagged: Vec<String>,
}

fn monotone(values: &[f64], increasing: bool) -> Option<bool> {
    if values.len() < 2 {
        return None;
    }
    Some(
        values
            .windows(2)
            .all(|w| if increasing { w[1] > w[0] } else { w[1] < w[0] }),
    )
}

pub fn assess_trends(reports: &[DiagnosticsReport], det_floor: f64) -> TrendAssessment {
    let col = |f: fn(&DiagnosticsReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let checks = [
        (
            "lambda_min_H_indep_increasing",
            monotone(&col(|r| r.lambda_min_H_indep), true),
        ),
        (
            "info_over_tau_increasing",
            monotone(&col(|r| r.lambda_min_H_over_tau), true),
        ),
        (
            "pi2_gamma_tilde_decreasing",
            monotone(&col(|r| r.pi2_gamma_tilde), false),
        ),
        (
            "sqrt_n_pi_gamma_tilde_decreasing",
            monotone(&col(|r| r.sqrt_n_pi_gamma_tilde), false),
        ),
        (
            "sqrt_n_gamma0_indep_decreasing",
            monotone(&col(|r| r.sqrt_n_times_gamma0_indep), false),
        ),
    ];
    let det_ok = reports.iter().all(|r| r.det_R >= det_floor);
    let mut flagged: Vec<String> = checks
        .iter()
        .filter(|(_, v)| *v == Some(false))
        .map(|(name, _)| name.to_string())
        .collect();
    if !det_ok {
        flagged.push("det_R_above_floor".into());
    }
    TrendAssessment {
        n_grid: reports.iter().map(|r| r.n).collect(),
        lambda_min_H_indep_increasing: checks[0].1,
        info_over_tau_increasing: checks[1].1,
        pi2_gamma_tilde_decreasing: checks[2].1,
        sqrt_n_pi_gamma_tilde_decreasing: checks[3].1,
        sqrt_n_gamma0_indep_decreasing: checks[4].1,
        det_floor,
        det_R_above_floor: det_ok,
        flagged,
    }
}
