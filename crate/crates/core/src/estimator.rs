//! Two-step pseudo-likelihood estimation.
//!
//! 1. Solve the working-independence equation `Σ X_iᵀ ε_i(β) = 0` (exact Newton,
//!    since the links are canonical) to get a preliminary `β̃`.
//! 2. Estimate the average within-subject correlation at `β̃`:
//!    `R̃ = (1/n) Σ A_i^{-1/2} ε_i ε_iᵀ A_i^{-1/2}`.
//! 3. Solve `Σ X_iᵀ A_i^{1/2} R̃^{-1} A_i^{-1/2} ε_i(β) = 0` by Fisher scoring with
//!    `H̃(β) = Σ X_iᵀ A_i^{1/2} R̃^{-1} A_i^{1/2} X_i` as the step matrix.
//! 4. Attach the sandwich covariance `H̃^{-1} M̂ H̃^{-1}`.

use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::matkernel::{inverse_spd, norm2, pd_tolerance, solve_spd, sym_eigen, Mat, SymMatrix};
use crate::model::{eval_model, LinkFamily, LongitudinalDataset, ModelEval};
use crate::normal::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub step_halving_max: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 50,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            step_halving_max: 20,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0
            || self.step_halving_max == 0
            || !(self.grad_tol > 0.0 && self.grad_tol.is_finite())
            || !(self.step_tol > 0.0 && self.step_tol.is_finite())
        {
            return Err(GeeError::Config(format!(
                "solver options must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Independence,
    PseudoLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub beta: Vec<f64>,
    pub gnorm: f64,
}

/// The average-correlation estimate and the parameter it was computed at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationEstimate {
    pub r_tilde: SymMatrix,
    pub computed_at_beta: Vec<f64>,
    pub n_used: usize,
}

impl CorrelationEstimate {
    /// Wraps a known matrix (identity, or a true correlation in simulations).
    pub fn fixed(r: SymMatrix) -> Self {
        CorrelationEstimate {
            r_tilde: r,
            computed_at_beta: Vec::new(),
            n_used: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub beta_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gnorm: f64,
    /// `grad_tol · (1 + ‖Σ X_iᵀ y_i‖)`, the threshold `final_gnorm` is judged against.
    pub gnorm_tolerance: f64,
    pub trace: Vec<TraceEntry>,
    pub method: FitMethod,
    pub cov_beta: Option<SymMatrix>,
    pub correlation_used: Option<CorrelationEstimate>,
    /// Set when the pseudo-likelihood stage was skipped because `R̃` was singular.
    pub fallback: bool,
}

/// Convergence scale `1 + ‖Σ_i X_iᵀ y_i‖`.
pub fn gradient_scale(data: &LongitudinalDataset) -> f64 {
    let mut acc = vec![0.0; data.p()];
    for s in data.subjects() {
        for (a, v) in acc.iter_mut().zip(s.x.t_mul_vec(&s.y)) {
            *a += v;
        }
    }
    1.0 + norm2(&acc)
}

/// `R̃^{-1}`, rejecting matrices whose smallest eigenvalue is below the PD tolerance.
pub(crate) fn correlation_inverse(r: &SymMatrix) -> Result<SymMatrix> {
    let lambda_min = sym_eigen(r)?.lambda_min();
    if lambda_min <= pd_tolerance(r) {
        return Err(GeeError::NotPositiveDefinite { lambda_min });
    }
    inverse_spd(r)
}

/// Per-subject score `X_iᵀ A_i^{1/2} R^{-1} A_i^{-1/2} ε_i`; `rinv = None` is the identity.
fn subject_scores(
    data: &LongitudinalDataset,
    ev: &ModelEval,
    rinv: Option<&SymMatrix>,
) -> Vec<Vec<f64>> {
    data.subjects()
        .iter()
        .zip(&ev.subjects)
        .map(|(s, e)| match rinv {
            None => s.x.t_mul_vec(&e.eps),
            Some(ri) => {
                let m = e.eps.len();
                let sd: Vec<f64> = e.var.iter().map(|v| v.sqrt()).collect();
                let ystar: Vec<f64> = e.eps.iter().zip(&sd).map(|(eps, s)| eps / s).collect();
                let w: Vec<f64> = (0..m)
                    .map(|j| sd[j] * (0..m).map(|k| ri.get(j, k) * ystar[k]).sum::<f64>())
                    .collect();
                s.x.t_mul_vec(&w)
            }
        })
        .collect()
}

fn sum_scores(p: usize, scores: &[Vec<f64>]) -> Vec<f64> {
    let mut g = vec![0.0; p];
    for sc in scores {
        for (a, v) in g.iter_mut().zip(sc) {
            *a += v;
        }
    }
    g
}

/// One subject's contribution `X_iᵀ A_i^{1/2} R^{-1} A_i^{1/2} X_i` (or `X_iᵀ A_i X_i`).
pub(crate) fn subject_information(x: &Mat, var: &[f64], rinv: Option<&SymMatrix>) -> SymMatrix {
    let p = x.cols();
    let m = var.len();
    let mut k = SymMatrix::zeros(p);
    match rinv {
        None => {
            for (j, v) in var.iter().enumerate() {
                k.add_outer(x.row(j), *v);
            }
        }
        Some(ri) => {
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            // B = W X with W_jk = sd_j R^{-1}_jk sd_k, then K = Xᵀ B
            let b: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    (0..p)
                        .map(|c| {
                            sd[j]
                                * (0..m)
                                    .map(|l| ri.get(j, l) * sd[l] * x.get(l, c))
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect();
            k.add_from_fn(|a, c| (0..m).map(|j| x.get(j, a) * b[j][c]).sum());
        }
    }
    k
}

/// `Σ X_iᵀ A_i^{1/2} R^{-1} A_i^{1/2} X_i`; with `rinv = None` this is `Σ X_iᵀ A_i X_i`.
pub(crate) fn information(
    data: &LongitudinalDataset,
    ev: &ModelEval,
    rinv: Option<&SymMatrix>,
) -> SymMatrix {
    let mut h = SymMatrix::zeros(data.p());
    for (s, e) in data.subjects().iter().zip(&ev.subjects) {
        match rinv {
            None => {
                for j in 0..e.var.len() {
                    h.add_outer(s.x.row(j), e.var[j]);
                }
            }
            Some(_) => h = h.add(&subject_information(&s.x, &e.var, rinv)),
        }
    }
    h
}

/// Working-independence estimating function `Σ X_iᵀ ε_i(β)`.
pub fn independence_estimating_function(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
) -> Result<Vec<f64>> {
    let ev = eval_model(data, family, beta)?;
    Ok(sum_scores(data.p(), &subject_scores(data, &ev, None)))
}

/// Pseudo-likelihood estimating function `Σ X_iᵀ A_i^{1/2} R̃^{-1} A_i^{-1/2} ε_i(β)`.
pub fn pseudo_estimating_function(
    data: &LongitudinalDataset,
    family: LinkFamily,
    corr: &CorrelationEstimate,
    beta: &[f64],
) -> Result<Vec<f64>> {
    check_corr_dim(data, corr)?;
    let rinv = correlation_inverse(&corr.r_tilde)?;
    let ev = eval_model(data, family, beta)?;
    Ok(sum_scores(
        data.p(),
        &subject_scores(data, &ev, Some(&rinv)),
    ))
}

fn check_corr_dim(data: &LongitudinalDataset, corr: &CorrelationEstimate) -> Result<()> {
    if corr.r_tilde.dim() != data.m() {
        return Err(GeeError::Shape(format!(
            "correlation is {0}x{0}, dataset has m = {1}",
            corr.r_tilde.dim(),
            data.m()
        )));
    }
    Ok(())
}

fn check_start(data: &LongitudinalDataset, beta: &[f64]) -> Result<()> {
    if beta.len() != data.p() {
        return Err(GeeError::Shape(format!(
            "start has {} entries, p = {}",
            beta.len(),
            data.p()
        )));
    }
    Ok(())
}

fn newton_solve(
    data: &LongitudinalDataset,
    family: LinkFamily,
    rinv: Option<&SymMatrix>,
    beta_init: &[f64],
    opts: &SolverOptions,
    method: FitMethod,
) -> Result<FitResult> {
    opts.validate()?;
    check_start(data, beta_init)?;
    let p = data.p();
    let tol = opts.grad_tol * gradient_scale(data);

    let mut beta = beta_init.to_vec();
    let mut ev = eval_model(data, family, &beta)?;
    let mut g = sum_scores(p, &subject_scores(data, &ev, rinv));
    let mut gnorm = norm2(&g);
    let mut trace = vec![TraceEntry {
        beta: beta.clone(),
        gnorm,
    }];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        if gnorm <= tol {
            converged = true;
            break;
        }
        if iterations == opts.max_iter {
            break;
        }
        let h = information(data, &ev, rinv);
        let delta = solve_spd(&h, &g).map_err(|e| match e {
            GeeError::NotPositiveDefinite { lambda_min } => GeeError::SingularDesign { lambda_min },
            other => other,
        })?;
        iterations += 1;

        let mut step = 1.0;
        let mut halvings = 0;
        let (cand, cand_ev, cand_g, cand_norm) = loop {
            let cand: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
            match eval_model(data, family, &cand) {
                Ok(cev) => {
                    let cg = sum_scores(p, &subject_scores(data, &cev, rinv));
                    let cn = norm2(&cg);
                    if cn.is_finite() && (cn < gnorm || cn <= tol) {
                        break (cand, cev, cg, cn);
                    }
                }
                Err(GeeError::Overflow { .. }) => {}
                Err(other) => return Err(other),
            }
            halvings += 1;
            if halvings > opts.step_halving_max {
                return Err(GeeError::LineSearchFailure {
                    iteration: iterations,
                });
            }
            step *= 0.5;
        };

        let step_norm = step * norm2(&delta);
        beta = cand;
        ev = cand_ev;
        g = cand_g;
        gnorm = cand_norm;
        trace.push(TraceEntry {
            beta: beta.clone(),
            gnorm,
        });
        if gnorm > tol && step_norm <= opts.step_tol * (1.0 + norm2(&beta)) {
            // stalled short of the tolerance
            break;
        }
    }

    Ok(FitResult {
        beta_hat: beta,
        converged,
        iterations,
        final_gnorm: gnorm,
        gnorm_tolerance: tol,
        trace,
        method,
        cov_beta: None,
        correlation_used: None,
        fallback: false,
    })
}

/// Newton solve of the working-independence equation.
///
/// Non-convergence within `max_iter` is reported through `converged = false`.
pub fn gee_independence_fit(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta_init: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    newton_solve(data, family, None, beta_init, opts, FitMethod::Independence)
}

/// Fisher-scoring solve of the pseudo-likelihood equation built on `corr`.
pub fn pseudo_likelihood_fit(
    data: &LongitudinalDataset,
    family: LinkFamily,
    corr: &CorrelationEstimate,
    beta_init: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    check_corr_dim(data, corr)?;
    let rinv = correlation_inverse(&corr.r_tilde)?;
    let mut fit = newton_solve(
        data,
        family,
        Some(&rinv),
        beta_init,
        opts,
        FitMethod::PseudoLikelihood,
    )?;
    fit.correlation_used = Some(corr.clone());
    Ok(fit)
}

/// `R̃ = (1/n) Σ_i A_i^{-1/2} ε_i ε_iᵀ A_i^{-1/2}` at `beta`.
pub fn estimate_correlation(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
) -> Result<CorrelationEstimate> {
    let ev = eval_model(data, family, beta)?;
    let m = data.m();
    let mut r = SymMatrix::zeros(m);
    for (i, e) in ev.subjects.iter().enumerate() {
        let mut ystar = Vec::with_capacity(m);
        for j in 0..m {
            let v = e.var[j];
            let y = e.eps[j] / v.sqrt();
            if !(v > 0.0 && v.is_finite() && y.is_finite()) {
                return Err(GeeError::DegenerateVariance {
                    subject: i,
                    time: j,
                    value: v,
                });
            }
            ystar.push(y);
        }
        r.add_outer(&ystar, 1.0);
    }
    let r = r.scale(1.0 / data.n() as f64);
    if !r.is_finite() {
        let (subject, time, value) = smallest_variance(&ev);
        return Err(GeeError::DegenerateVariance {
            subject,
            time,
            value,
        });
    }
    Ok(CorrelationEstimate {
        r_tilde: r,
        computed_at_beta: beta.to_vec(),
        n_used: data.n(),
    })
}

fn smallest_variance(ev: &ModelEval) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::INFINITY);
    for (i, e) in ev.subjects.iter().enumerate() {
        for (j, &v) in e.var.iter().enumerate() {
            if v < best.2 {
                best = (i, j, v);
            }
        }
    }
    best
}

/// Result of [`two_step_fit_detailed`]: both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepFit {
    pub independence: FitResult,
    pub final_fit: FitResult,
}

/// Runs both stages and keeps the preliminary fit.
///
/// The independence stage carries its own sandwich covariance (with `R = I`).
/// If `R̃` is not invertible, `final_fit` is the independence fit with
/// `fallback = true`. If the independence stage does not converge, it is
/// returned as the final fit unchanged.
pub fn two_step_fit_detailed(
    data: &LongitudinalDataset,
    family: LinkFamily,
    opts: &SolverOptions,
) -> Result<TwoStepFit> {
    let start = vec![0.0; data.p()];
    let mut indep = gee_independence_fit(data, family, &start, opts)?;
    let identity = CorrelationEstimate::fixed(SymMatrix::identity(data.m()));
    indep.cov_beta = Some(sandwich_covariance(data, family, &indep.beta_hat, &identity)?.cov_beta);
    if !indep.converged {
        return Ok(TwoStepFit {
            final_fit: indep.clone(),
            independence: indep,
        });
    }

    let corr = estimate_correlation(data, family, &indep.beta_hat)?;
    let final_fit = match pseudo_likelihood_fit(data, family, &corr, &indep.beta_hat, opts) {
        Ok(mut fit) => {
            fit.cov_beta = Some(sandwich_covariance(data, family, &fit.beta_hat, &corr)?.cov_beta);
            fit
        }
        Err(GeeError::NotPositiveDefinite { .. }) => {
            let mut fb = indep.clone();
            fb.fallback = true;
            fb.correlation_used = Some(corr);
            fb
        }
        Err(other) => return Err(other),
    };
    Ok(TwoStepFit {
        independence: indep,
        final_fit,
    })
}

/// Independence fit from `β = 0`, correlation estimate at `β̃`, pseudo-likelihood
/// fit from `β̃`, sandwich covariance attached.
pub fn two_step_fit(
    data: &LongitudinalDataset,
    family: LinkFamily,
    opts: &SolverOptions,
) -> Result<FitResult> {
    two_step_fit_detailed(data, family, opts).map(|t| t.final_fit)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichParts {
    pub m_hat: SymMatrix,
    pub h_tilde: SymMatrix,
    pub cov_beta: SymMatrix,
}

/// Liang–Zeger robust covariance `H̃^{-1} M̂ H̃^{-1}` at `beta_hat`, with
/// `M̂ = Σ_i u_i u_iᵀ` over the per-subject scores `u_i`.
pub fn sandwich_covariance(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta_hat: &[f64],
    corr: &CorrelationEstimate,
) -> Result<SandwichParts> {
    check_corr_dim(data, corr)?;
    let rinv = correlation_inverse(&corr.r_tilde)?;
    let ev = eval_model(data, family, beta_hat)?;
    let h_tilde = information(data, &ev, Some(&rinv));
    let mut m_hat = SymMatrix::zeros(data.p());
    for u in subject_scores(data, &ev, Some(&rinv)) {
        m_hat.add_outer(&u, 1.0);
    }
    let h_inv = inverse_spd(&h_tilde)?;
    let cov_beta = h_inv.sandwich(&m_hat);
    Ok(SandwichParts {
        m_hat,
        h_tilde,
        cov_beta,
    })
}

/// Per-coordinate Wald intervals `β̂_k ± z · sqrt(cov_kk)`.
pub fn wald_intervals(fit: &FitResult, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(GeeError::InvalidInput(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let cov = fit
        .cov_beta
        .as_ref()
        .ok_or_else(|| GeeError::Precondition("fit has no covariance attached".into()))?;
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(fit
        .beta_hat
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let half = z * cov.get(k, k).max(0.0).sqrt();
            (b - half, b + half)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn design_rows(rng: &mut ChaCha8Rng, m: usize, p: usize) -> Mat {
        Mat::new(m, p, (0..m * p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn noisy_identity_data(seed: u64, n: usize, m: usize, beta: &[f64]) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|_| {
                let x = design_rows(&mut rng, m, beta.len());
                let shared: f64 = rng.gen_range(-1.0..1.0);
                let y = x
                    .mul_vec(beta)
                    .iter()
                    .map(|mu| mu + shared + rng.gen_range(-0.5..0.5))
                    .collect();
                Subject { x, y }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn exact_data(
        seed: u64,
        n: usize,
        m: usize,
        beta: &[f64],
        family: LinkFamily,
    ) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|_| {
                let x = design_rows(&mut rng, m, beta.len());
                let y = x
                    .mul_vec(beta)
                    .iter()
                    .map(|&t| crate::model::link_eval(family, t).unwrap().mu)
                    .collect();
                Subject { x, y }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn binary_data(seed: u64, n: usize, m: usize, p: usize) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|_| {
                let x = design_rows(&mut rng, m, p);
                let y = (0..m)
                    .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
                    .collect();
                Subject { x, y }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    // Normal equations solved by Gaussian elimination, independent of the solver path.
    fn ols_oracle(data: &LongitudinalDataset) -> Vec<f64> {
        let p = data.p();
        let mut a = vec![vec![0.0; p + 1]; p];
        for s in data.subjects() {
            for j in 0..data.m() {
                for r in 0..p {
                    for c in 0..p {
                        a[r][c] += s.x.get(j, r) * s.x.get(j, c);
                    }
                    a[r][p] += s.x.get(j, r) * s.y[j];
                }
            }
        }
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..p).map(|r| a[r][p] / a[r][r]).collect()
    }

    #[test]
    fn options_validation() {
        assert!(SolverOptions::default().validate().is_ok());
        let bad = SolverOptions {
            grad_tol: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(GeeError::Config(_))));
    }

    #[test]
    fn zero_residual_identity_converges_in_one_step() {
        let beta0 = [0.7, -1.3];
        let data = exact_data(1, 20, 3, &beta0, LinkFamily::Identity);
        let fit = gee_independence_fit(
            &data,
            LinkFamily::Identity,
            &[0.0, 0.0],
            &Default::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!(fit.final_gnorm < 1e-12);
        for (b, t) in fit.beta_hat.iter().zip(&beta0) {
            assert!((b - t).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_residual_started_at_truth_is_exact() {
        let beta0 = [0.4, -0.2];
        let data = exact_data(2, 15, 4, &beta0, LinkFamily::Logit);
        let fit =
            gee_independence_fit(&data, LinkFamily::Logit, &beta0, &Default::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 0);
        assert_eq!(fit.final_gnorm, 0.0);
        assert_eq!(fit.beta_hat, beta0.to_vec());
    }

    #[test]
    fn identity_link_matches_normal_equations() {
        let data = noisy_identity_data(3, 30, 3, &[1.0, -2.0]);
        let fit = gee_independence_fit(
            &data,
            LinkFamily::Identity,
            &[0.0, 0.0],
            &Default::default(),
        )
        .unwrap();
        let want = ols_oracle(&data);
        for (b, w) in fit.beta_hat.iter().zip(&want) {
            assert!((b - w).abs() < 1e-8);
        }
    }

    #[test]
    fn flipped_binary_responses_force_root_at_zero() {
        // every subject appears once with y and once with 1 - y on the same design
        let base = binary_data(4, 40, 3, 2);
        let mut subjects = Vec::new();
        for s in base.subjects() {
            subjects.push(s.clone());
            subjects.push(Subject {
                x: s.x.clone(),
                y: s.y.iter().map(|v| 1.0 - v).collect(),
            });
        }
        let data = LongitudinalDataset::new(subjects).unwrap();
        let fit = gee_independence_fit(&data, LinkFamily::Logit, &[0.3, -0.5], &Default::default())
            .unwrap();
        assert!(fit.converged);
        assert!(
            fit.beta_hat.iter().all(|b| b.abs() < 1e-8),
            "{:?}",
            fit.beta_hat
        );
    }

    #[test]
    fn rank_deficient_design_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let subjects = (0..10)
            .map(|_| {
                let col: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let rows: Vec<Vec<f64>> = col.iter().map(|c| vec![*c, 2.0 * c]).collect();
                Subject {
                    x: Mat::from_rows(&rows).unwrap(),
                    y: vec![1.0, 2.0, 3.0],
                }
            })
            .collect();
        let data = LongitudinalDataset::new(subjects).unwrap();
        let err = gee_independence_fit(
            &data,
            LinkFamily::Identity,
            &[0.0, 0.0],
            &Default::default(),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "singular-design");
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let data = binary_data(6, 50, 3, 2);
        let opts = SolverOptions {
            max_iter: 1,
            ..Default::default()
        };
        let fit = gee_independence_fit(&data, LinkFamily::Logit, &[0.0, 0.0], &opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 1);
        assert_eq!(fit.trace.len(), 2);
    }

    #[test]
    fn log_link_overshoot_is_halved() {
        // a start far from the root makes the first full Newton step overflow exp()
        let data = exact_data(7, 30, 2, &[0.5, 0.2], LinkFamily::Log);
        let fit = gee_independence_fit(&data, LinkFamily::Log, &[-8.0, 8.0], &Default::default())
            .unwrap();
        assert!(fit.converged);
        assert!((fit.beta_hat[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn correlation_cases() {
        let beta0 = [0.5, 0.5];
        let data = exact_data(8, 10, 3, &beta0, LinkFamily::Identity);
        let c = estimate_correlation(&data, LinkFamily::Identity, &beta0).unwrap();
        assert_eq!(c.r_tilde, SymMatrix::zeros(3));
        assert_eq!(c.n_used, 10);

        let one = LongitudinalDataset::new(vec![Subject {
            x: Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            y: vec![1.0, 2.0],
        }])
        .unwrap();
        let c = estimate_correlation(&one, LinkFamily::Identity, &[0.0]).unwrap();
        assert_eq!(c.r_tilde.to_rows(), vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn correlation_is_psd() {
        for seed in 0..20 {
            let data = binary_data(seed, 5 + seed as usize, 4, 2);
            let c = estimate_correlation(&data, LinkFamily::Logit, &[0.2, -0.1]).unwrap();
            let lmin = sym_eigen(&c.r_tilde).unwrap().lambda_min();
            assert!(lmin >= -1e-10 * c.r_tilde.trace());
            assert!(c.r_tilde.diagonal().iter().all(|d| *d >= 0.0));
        }
    }

    #[test]
    fn identity_correlation_collapses_to_independence() {
        let data = binary_data(9, 60, 3, 2);
        let opts = SolverOptions::default();
        let start = [0.8, -0.6];
        let a = gee_independence_fit(&data, LinkFamily::Logit, &start, &opts).unwrap();
        let eye = CorrelationEstimate::fixed(SymMatrix::identity(3));
        let b = pseudo_likelihood_fit(&data, LinkFamily::Logit, &eye, &start, &opts).unwrap();
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            for (u, v) in x.beta.iter().zip(&y.beta) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn singular_correlation_is_rejected() {
        let data = binary_data(10, 20, 2, 1);
        let corr = CorrelationEstimate::fixed(
            SymMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
        );
        let err =
            pseudo_likelihood_fit(&data, LinkFamily::Logit, &corr, &[0.0], &Default::default())
                .unwrap_err();
        assert_eq!(err.kind(), "not-positive-definite");
    }

    #[test]
    fn two_step_on_exact_data_falls_back_to_truth() {
        let beta0 = [0.3, -0.7];
        let data = exact_data(11, 25, 3, &beta0, LinkFamily::Identity);
        let two = two_step_fit_detailed(&data, LinkFamily::Identity, &Default::default()).unwrap();
        for fit in [&two.independence, &two.final_fit] {
            for (b, t) in fit.beta_hat.iter().zip(&beta0) {
                assert!((b - t).abs() < 1e-12);
            }
        }
        // R̃ = 0 is singular, so the second stage is skipped
        assert!(two.final_fit.fallback);
    }

    #[test]
    fn two_step_root_certificate_and_equivariance() {
        let data = binary_data(12, 120, 4, 2);
        let opts = SolverOptions::default();
        let fit = two_step_fit(&data, LinkFamily::Logit, &opts).unwrap();
        assert!(fit.converged && !fit.fallback);
        let corr = fit.correlation_used.as_ref().unwrap();
        let g = pseudo_estimating_function(&data, LinkFamily::Logit, corr, &fit.beta_hat).unwrap();
        assert!(norm2(&g) <= opts.grad_tol * gradient_scale(&data));

        for c in [2.0, -0.5, 3.0] {
            let scaled = data.with_scaled_design(c).unwrap();
            let fc = two_step_fit(&scaled, LinkFamily::Logit, &opts).unwrap();
            let diff: Vec<f64> = fc
                .beta_hat
                .iter()
                .zip(&fit.beta_hat)
                .map(|(a, b)| c * a - b)
                .collect();
            assert!(norm2(&diff) <= 1e-6, "c={c}: {diff:?}");
        }
    }

    #[test]
    fn subject_order_does_not_change_estimates() {
        let data = binary_data(13, 50, 3, 2);
        let mut order: Vec<usize> = (0..50).collect();
        order.reverse();
        order.swap(3, 17);
        let perm = data.permuted(&order).unwrap();
        let a = two_step_fit_detailed(&data, LinkFamily::Logit, &Default::default()).unwrap();
        let b = two_step_fit_detailed(&perm, LinkFamily::Logit, &Default::default()).unwrap();
        let ra = &a.final_fit.correlation_used.as_ref().unwrap().r_tilde;
        let rb = &b.final_fit.correlation_used.as_ref().unwrap().r_tilde;
        assert!(ra.max_abs_diff(rb) < 1e-12);
        for (x, y) in a.independence.beta_hat.iter().zip(&b.independence.beta_hat) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in a.final_fit.beta_hat.iter().zip(&b.final_fit.beta_hat) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sandwich_zero_residuals() {
        let beta0 = [1.0, 2.0];
        let data = exact_data(14, 10, 3, &beta0, LinkFamily::Identity);
        let eye = CorrelationEstimate::fixed(SymMatrix::identity(3));
        let s = sandwich_covariance(&data, LinkFamily::Identity, &beta0, &eye).unwrap();
        assert_eq!(s.m_hat, SymMatrix::zeros(2));
        assert_eq!(s.cov_beta, SymMatrix::zeros(2));
    }

    #[test]
    fn sandwich_matches_stacked_oracle() {
        let data = noisy_identity_data(15, 40, 3, &[0.5, -1.0]);
        let fit = gee_independence_fit(
            &data,
            LinkFamily::Identity,
            &[0.0, 0.0],
            &Default::default(),
        )
        .unwrap();
        let eye = CorrelationEstimate::fixed(SymMatrix::identity(3));
        let s = sandwich_covariance(&data, LinkFamily::Identity, &fit.beta_hat, &eye).unwrap();

        // (Σ XᵀX)^{-1} (Σ Xᵀ e eᵀ X) (Σ XᵀX)^{-1} with a closed-form 2x2 inverse
        let (mut xtx, mut meat) = ([[0.0; 2]; 2], [[0.0; 2]; 2]);
        for sub in data.subjects() {
            let e: Vec<f64> = (0..3)
                .map(|j| {
                    sub.y[j] - sub.x.get(j, 0) * fit.beta_hat[0] - sub.x.get(j, 1) * fit.beta_hat[1]
                })
                .collect();
            let u: Vec<f64> = (0..2)
                .map(|c| (0..3).map(|j| sub.x.get(j, c) * e[j]).sum())
                .collect();
            for r in 0..2 {
                for c in 0..2 {
                    xtx[r][c] += (0..3)
                        .map(|j| sub.x.get(j, r) * sub.x.get(j, c))
                        .sum::<f64>();
                    meat[r][c] += u[r] * u[c];
                }
            }
        }
        let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
        let inv = [
            [xtx[1][1] / det, -xtx[0][1] / det],
            [-xtx[1][0] / det, xtx[0][0] / det],
        ];
        for r in 0..2 {
            for c in 0..2 {
                let mut want = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        want += inv[r][a] * meat[a][b] * inv[b][c];
                    }
                }
                assert!((s.cov_beta.get(r, c) - want).abs() < 1e-9 * want.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn sandwich_is_symmetric_psd() {
        let data = binary_data(16, 80, 4, 3);
        let fit = two_step_fit(&data, LinkFamily::Logit, &Default::default()).unwrap();
        let cov = fit.cov_beta.unwrap();
        let rows = cov.to_rows();
        for j in 0..3 {
            for k in 0..3 {
                assert!((rows[j][k] - rows[k][j]).abs() < 1e-12);
            }
        }
        assert!(sym_eigen(&cov).unwrap().lambda_min() >= -1e-10 * cov.trace());
    }

    fn fit_with_cov(beta: Vec<f64>, var: Vec<f64>) -> FitResult {
        FitResult {
            beta_hat: beta,
            converged: true,
            iterations: 1,
            final_gnorm: 0.0,
            gnorm_tolerance: 1e-8,
            trace: vec![],
            method: FitMethod::Independence,
            cov_beta: Some(SymMatrix::diag(&var)),
            correlation_used: None,
            fallback: false,
        }
    }

    #[test]
    fn wald_cases() {
        let ci = wald_intervals(&fit_with_cov(vec![1.0], vec![0.25]), 0.95).unwrap();
        assert!((ci[0].0 - 0.020_018).abs() < 1e-6);
        assert!((ci[0].1 - 1.979_982).abs() < 1e-6);
        assert!((ci[0].0 - (1.0 - 1.959_964 * 0.5)).abs() < 1e-6);

        let ci = wald_intervals(&fit_with_cov(vec![2.5], vec![0.0]), 0.95).unwrap();
        assert_eq!(ci[0], (2.5, 2.5));

        let ci = wald_intervals(&fit_with_cov(vec![0.0], vec![4.0]), 0.5).unwrap();
        assert!((ci[0].1 - 0.674_490 * 2.0).abs() < 1e-5);

        let mut no_cov = fit_with_cov(vec![0.0], vec![1.0]);
        no_cov.cov_beta = None;
        assert_eq!(
            wald_intervals(&no_cov, 0.9).unwrap_err().kind(),
            "precondition"
        );
        assert!(wald_intervals(&fit_with_cov(vec![0.0], vec![1.0]), 1.0).is_err());
    }
}
