//! Seeded synthetic longitudinal data and a Monte Carlo harness.
//!
//! Every replicate draws from its own ChaCha8 stream whose seed is a
//! splitmix64 mix of the base seed and the replicate index, so a run gives the
//! same report whether replicates execute sequentially or on a thread pool.
//! Normal variates come from the inverse distribution function applied to
//! open-interval uniforms; there is no rejection sampling anywhere.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::estimator::{two_step_fit_detailed, wald_intervals, SolverOptions};
use crate::matkernel::{cholesky_lower, norm2, sym_eigen, sym_sqrt_pair, Mat, SymMatrix};
use crate::model::{LinkFamily, LongitudinalDataset, Subject};
use crate::normal::{normal_cdf, normal_quantile, normal_sf};

/// Two-sided 95% normal critical value used for the `|z|` band.
pub const Z_975: f64 = 1.959964;

/// Largest Poisson mean the inverse-CDF sampler accepts (`e^{-mean}` must not underflow).
pub const MAX_POISSON_MEAN: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    /// Each covariate entry drawn independently from `U(lo, hi)`. With
    /// `intercept`, the first column is fixed at 1.
    IidUniform {
        lo: f64,
        hi: f64,
        #[serde(default)]
        intercept: bool,
    },
    /// Polynomial in time: column `k` of cell `j` is `t_j^k`, with `t_j`
    /// equally spaced on `[-1, 1]`. Identical for every subject; needs `m ≥ p`.
    Grid,
    /// Single categorical covariate coded as basis vectors, `levels == p`.
    Categorical { levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrelationSpec {
    Exchangeable { rho: f64 },
    Ar1 { rho: f64 },
    Custom { matrix: SymMatrix },
}

impl CorrelationSpec {
    pub fn matrix(&self, m: usize) -> Result<SymMatrix> {
        let r = match self {
            CorrelationSpec::Exchangeable { rho } => {
                let lower = if m > 1 {
                    -1.0 / (m as f64 - 1.0)
                } else {
                    f64::NEG_INFINITY
                };
                if !(*rho > lower && *rho < 1.0) {
                    return Err(GeeError::Config(format!(
                        "exchangeable rho = {rho} outside ({lower}, 1) for m = {m}"
                    )));
                }
                SymMatrix::from_fn(m, |j, k| if j == k { 1.0 } else { *rho })?
            }
            CorrelationSpec::Ar1 { rho } => {
                if rho.is_nan() || rho.abs() >= 1.0 {
                    return Err(GeeError::Config(format!("ar1 rho = {rho} needs |rho| < 1")));
                }
                SymMatrix::from_fn(m, |j, k| rho.powi(j.abs_diff(k) as i32))?
            }
            CorrelationSpec::Custom { matrix } => {
                if matrix.dim() != m {
                    return Err(GeeError::Config(format!(
                        "custom correlation is {0}x{0}, m = {m}",
                        matrix.dim()
                    )));
                }
                if matrix.diagonal().iter().any(|&d| d != 1.0) {
                    return Err(GeeError::Config(
                        "custom correlation must have unit diagonal".into(),
                    ));
                }
                let eig = sym_eigen(matrix)?;
                if eig.lambda_min() <= 0.0 {
                    return Err(GeeError::Config(format!(
                        "custom correlation is not positive definite (lambda_min = {:e})",
                        eig.lambda_min()
                    )));
                }
                matrix.clone()
            }
        };
        Ok(r)
    }

    fn max_abs_offdiag(&self, m: usize) -> f64 {
        match self {
            CorrelationSpec::Exchangeable { rho } | CorrelationSpec::Ar1 { rho } => {
                if m > 1 {
                    rho.abs()
                } else {
                    0.0
                }
            }
            CorrelationSpec::Custom { matrix } => {
                let mut best: f64 = 0.0;
                for j in 0..matrix.dim() {
                    for k in 0..j {
                        best = best.max(matrix.get(j, k).abs());
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectDependence {
    #[default]
    Independent,
    /// Subject `i`'s residual vector is multiplied by `+1` when the running sum
    /// of earlier subjects' first residuals is `≥ 0`, by `−1` otherwise. The
    /// sign is a function of the past only, so residuals form a martingale
    /// difference sequence with unchanged marginal covariance.
    SignModulated,
}

fn default_ci_level() -> f64 {
    0.95
}
fn default_one() -> f64 {
    1.0
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub family: LinkFamily,
    pub beta0: Vec<f64>,
    pub design: DesignSpec,
    pub correlation: CorrelationSpec,
    #[serde(default)]
    pub subject_dependence: SubjectDependence,
    pub replications: usize,
    pub base_seed: u64,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Multiplies the Gaussian noise; 0 gives exact, residual-free responses.
    #[serde(default = "default_one")]
    pub noise_scale: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            serde_json::from_str(text).map_err(|e| GeeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GeeError::Config(msg));
        if self.n == 0 || self.m == 0 || self.p == 0 {
            return bad(format!(
                "n, m, p must be positive (got {}, {}, {})",
                self.n, self.m, self.p
            ));
        }
        if self.beta0.len() != self.p {
            return bad(format!(
                "beta0 has {} entries, p = {}",
                self.beta0.len(),
                self.p
            ));
        }
        if self.beta0.iter().any(|b| !b.is_finite()) {
            return bad("beta0 must be finite".into());
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} outside (0, 1)", self.ci_level));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!(
                "noise_scale {} must be finite and >= 0",
                self.noise_scale
            ));
        }
        self.solver
            .validate()
            .map_err(|e| GeeError::Config(e.to_string()))?;
        match &self.design {
            DesignSpec::IidUniform { lo, hi, .. } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad(format!("iid_uniform needs finite lo < hi (got {lo}, {hi})"));
                }
            }
            DesignSpec::Grid => {
                if self.m < self.p {
                    return bad(format!(
                        "grid design needs m >= p (m = {}, p = {})",
                        self.m, self.p
                    ));
                }
            }
            DesignSpec::Categorical { levels } => {
                if *levels != self.p {
                    return bad(format!(
                        "categorical design has {levels} levels, p = {}",
                        self.p
                    ));
                }
            }
        }
        self.correlation.matrix(self.m)?;
        match self.family {
            LinkFamily::Identity => {}
            LinkFamily::Log | LinkFamily::Logit => {
                if self.subject_dependence != SubjectDependence::Independent {
                    return bad(
                        "sign_modulated dependence is only available for the identity link".into(),
                    );
                }
                if self.noise_scale != 1.0 {
                    return bad("noise_scale only applies to the identity link".into());
                }
            }
            LinkFamily::Probit => {
                return bad("no response generator exists for the probit link".into())
            }
        }
        Ok(())
    }

    /// Non-fatal concerns about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.family == LinkFamily::Logit && self.correlation.max_abs_offdiag(self.m) > 0.95 {
            let bound = self.theta_bound();
            if bound >= 2.0 {
                out.push(format!(
                    "latent correlation above 0.95 with |theta| up to {bound:.3}: binary responses cannot attain it"
                ));
            }
        }
        out
    }

    fn theta_bound(&self) -> f64 {
        match &self.design {
            DesignSpec::IidUniform { lo, hi, intercept } => {
                let scale = lo.abs().max(hi.abs());
                self.beta0
                    .iter()
                    .enumerate()
                    .map(|(k, b)| b.abs() * if *intercept && k == 0 { 1.0 } else { scale })
                    .sum()
            }
            DesignSpec::Grid => self.beta0.iter().map(|b| b.abs()).sum(),
            DesignSpec::Categorical { .. } => self.beta0.iter().fold(0.0, |a, b| a.max(b.abs())),
        }
    }
}

/// Covariates only; responses are attached by a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub m: usize,
    pub p: usize,
    pub xs: Vec<Mat>,
}

impl Design {
    pub fn n(&self) -> usize {
        self.xs.len()
    }

    pub fn with_responses(&self, ys: Vec<Vec<f64>>) -> Result<LongitudinalDataset> {
        if ys.len() != self.n() {
            return Err(GeeError::Shape(format!(
                "{} response vectors for {} subjects",
                ys.len(),
                self.n()
            )));
        }
        LongitudinalDataset::new(
            self.xs
                .iter()
                .cloned()
                .zip(ys)
                .map(|(x, y)| Subject { x, y })
                .collect(),
        )
    }

    fn thetas(&self, beta0: &[f64]) -> Vec<Vec<f64>> {
        self.xs.iter().map(|x| x.mul_vec(beta0)).collect()
    }
}

/// The splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replicate `r` of a run with `base_seed`.
pub fn replicate_seed(base_seed: u64, r: u64) -> u64 {
    splitmix64(splitmix64(base_seed) ^ r)
}

/// Uniform on the open interval `(0, 1)`, 52-bit resolution (cell midpoints,
/// so both ends stay representable below 1).
pub fn open_uniform<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    normal_quantile(open_uniform(rng))
}

/// Level of cell `c = i·m + j` before shuffling.
pub fn cyclic_levels(n: usize, m: usize, p: usize) -> Vec<usize> {
    (0..n * m).map(|c| c % p).collect()
}

pub fn make_design(config: &SimConfig, seed: u64) -> Result<Design> {
    config.validate()?;
    let (n, m, p) = (config.n, config.m, config.p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = match &config.design {
        DesignSpec::IidUniform { lo, hi, intercept } => (0..n)
            .map(|_| {
                let data = (0..m * p)
                    .map(|c| {
                        if *intercept && c % p == 0 {
                            1.0
                        } else {
                            rng.gen_range(*lo..*hi)
                        }
                    })
                    .collect();
                Mat::new(m, p, data)
            })
            .collect::<Result<Vec<_>>>()?,
        DesignSpec::Grid => {
            let t = |j: usize| {
                if m == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * j as f64 / (m - 1) as f64
                }
            };
            let x = Mat::new(
                m,
                p,
                (0..m * p).map(|c| t(c / p).powi((c % p) as i32)).collect(),
            )?;
            vec![x; n]
        }
        DesignSpec::Categorical { .. } => {
            let mut levels = cyclic_levels(n, m, p);
            levels.shuffle(&mut rng);
            levels
                .chunks(m)
                .map(|cells| {
                    let mut data = vec![0.0; m * p];
                    for (j, &l) in cells.iter().enumerate() {
                        data[j * p + l] = 1.0;
                    }
                    Mat::new(m, p, data)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Design { m, p, xs })
}

/// Identity-link responses `y_i = X_i β₀ + s_i · scale · L z_i`, `L Lᵀ = R̄`.
pub fn gen_gaussian(
    design: &Design,
    beta0: &[f64],
    correlation: &SymMatrix,
    dependence: SubjectDependence,
    noise_scale: f64,
    seed: u64,
) -> Result<LongitudinalDataset> {
    check_generator_inputs(design, beta0, correlation)?;
    let noise = gaussian_noise(design, correlation, dependence, noise_scale, seed)?;
    let ys = design
        .thetas(beta0)
        .into_iter()
        .zip(noise)
        .map(|(mu, eps)| mu.iter().zip(&eps).map(|(a, b)| a + b).collect())
        .collect();
    design.with_responses(ys)
}

fn gaussian_noise(
    design: &Design,
    correlation: &SymMatrix,
    dependence: SubjectDependence,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let l = cholesky_lower(correlation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut running = 0.0;
    Ok((0..design.n())
        .map(|_| {
            let z: Vec<f64> = (0..design.m).map(|_| standard_normal(&mut rng)).collect();
            let sign = match dependence {
                SubjectDependence::Independent => 1.0,
                SubjectDependence::SignModulated => {
                    if running >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            let eps: Vec<f64> = l
                .mul_vec(&z)
                .into_iter()
                .map(|e| sign * noise_scale * e)
                .collect();
            running += eps[0];
            eps
        })
        .collect())
}

/// Smallest `k` with `P(Poisson(mean) ≤ k) ≥ u`.
pub fn poisson_quantile(u: f64, mean: f64) -> Result<f64> {
    if !(mean > 0.0 && mean <= MAX_POISSON_MEAN) {
        return Err(GeeError::InvalidInput(format!(
            "Poisson mean {mean} outside (0, {MAX_POISSON_MEAN}]"
        )));
    }
    let cap = (mean + 40.0 * mean.sqrt() + 40.0) as u64;
    let mut k = 0u64;
    let mut pk = (-mean).exp();
    let mut cdf = pk;
    while cdf < u && k < cap {
        k += 1;
        pk *= mean / k as f64;
        cdf += pk;
    }
    Ok(k as f64)
}

/// Poisson (log link) or Bernoulli (logit link) responses coupled through a
/// latent Gaussian with correlation `R̄`. Marginal means and variances are
/// exact; the realized response correlation is smaller than the latent one.
pub fn gen_discrete(
    design: &Design,
    beta0: &[f64],
    family: LinkFamily,
    correlation: &SymMatrix,
    seed: u64,
) -> Result<LongitudinalDataset> {
    if !matches!(family, LinkFamily::Log | LinkFamily::Logit) {
        return Err(GeeError::Config(format!(
            "no discrete generator for the {family} link"
        )));
    }
    check_generator_inputs(design, beta0, correlation)?;
    let l = cholesky_lower(correlation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ys = Vec::with_capacity(design.n());
    for theta in design.thetas(beta0) {
        let w: Vec<f64> = (0..design.m).map(|_| standard_normal(&mut rng)).collect();
        let latent = l.mul_vec(&w);
        let y = theta
            .iter()
            .zip(&latent)
            .map(|(&t, &z)| match family {
                LinkFamily::Log => poisson_quantile(normal_cdf(z), t.exp()),
                _ => {
                    let mu = 1.0 / (1.0 + (-t).exp());
                    // u > 1 − μ  ⇔  1 − Φ(z) < μ
                    Ok(if normal_sf(z) < mu { 1.0 } else { 0.0 })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        ys.push(y);
    }
    design.with_responses(ys)
}

fn check_generator_inputs(design: &Design, beta0: &[f64], correlation: &SymMatrix) -> Result<()> {
    if beta0.len() != design.p {
        return Err(GeeError::Shape(format!(
            "beta0 has {} entries, p = {}",
            beta0.len(),
            design.p
        )));
    }
    if correlation.dim() != design.m {
        return Err(GeeError::Shape(format!(
            "correlation is {0}x{0}, m = {1}",
            correlation.dim(),
            design.m
        )));
    }
    Ok(())
}

/// The dataset of replicate `r`: design and responses from the replicate seed.
pub fn replicate_dataset(config: &SimConfig, r: u64) -> Result<LongitudinalDataset> {
    let seed = replicate_seed(config.base_seed, r);
    let design = make_design(config, splitmix64(seed ^ 1))?;
    let rbar = config.correlation.matrix(config.m)?;
    let response_seed = splitmix64(seed ^ 2);
    match config.family {
        LinkFamily::Identity => gen_gaussian(
            &design,
            &config.beta0,
            &rbar,
            config.subject_dependence,
            config.noise_scale,
            response_seed,
        ),
        family => gen_discrete(&design, &config.beta0, family, &rbar, response_seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub seed: u64,
    /// Both stages converged and the replicate enters the moment statistics.
    pub success: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub fallback: bool,
    pub beta_hat: Vec<f64>,
    pub beta_independence: Vec<f64>,
    /// `Ĉov^{-1/2}(β̂ − β₀)`; absent when the covariance is not positive definite.
    pub z: Option<Vec<f64>>,
    pub covered: Vec<bool>,
    pub r_tilde_max_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCReport {
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    pub fallbacks: usize,
    pub ci_level: f64,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub rmse: Vec<f64>,
    pub coverage: Vec<f64>,
    /// Fraction of pooled standardized components with `|z| ≤ 1.959964`.
    pub z_within: Option<f64>,
    /// Kolmogorov–Smirnov distance of the pooled `z` to `N(0, 1)`.
    pub ks_distance: Option<f64>,
    pub z_count: usize,
    pub median_error_norm: f64,
    pub mean_r_tilde_max_abs_error: Option<f64>,
    /// Two-step variance divided by independence variance, per coordinate.
    pub efficiency_ratio: Vec<f64>,
    pub variance_independence: Vec<f64>,
    pub oracle_lambda_min_rbar: f64,
    /// Largest `λ_max(R̃^{-1} R̄)` over successful replicates.
    pub oracle_tau_max: Option<f64>,
    pub warnings: Vec<String>,
    pub records: Vec<ReplicateRecord>,
}

impl MCReport {
    pub fn failure_fraction(&self) -> f64 {
        self.failures as f64 / self.replications as f64
    }

    /// At most 2% of replicates failed.
    pub fn acceptable(&self) -> bool {
        self.failure_fraction() <= 0.02
    }
}

struct ReplicateOutcome {
    record: ReplicateRecord,
    tau: Option<f64>,
}

fn failed_record(r: u64, seed: u64, err: String, p: usize) -> ReplicateRecord {
    ReplicateRecord {
        replicate: r,
        seed,
        success: false,
        error: Some(err),
        iterations: 0,
        fallback: false,
        beta_hat: vec![f64::NAN; p],
        beta_independence: vec![f64::NAN; p],
        z: None,
        covered: vec![false; p],
        r_tilde_max_abs_error: None,
    }
}

fn run_replicate(
    config: &SimConfig,
    rbar: &SymMatrix,
    rbar_half: &SymMatrix,
    r: u64,
) -> ReplicateOutcome {
    let seed = replicate_seed(config.base_seed, r);
    let p = config.p;
    let result = replicate_dataset(config, r)
        .and_then(|data| two_step_fit_detailed(&data, config.family, &config.solver));
    let two = match result {
        Ok(t) => t,
        Err(e) => {
            return ReplicateOutcome {
                record: failed_record(r, seed, format!("{}: {e}", e.kind()), p),
                tau: None,
            }
        }
    };
    let fit = &two.final_fit;
    let success = two.independence.converged && fit.converged;
    let covered = match wald_intervals(fit, config.ci_level) {
        Ok(ci) => ci
            .iter()
            .zip(&config.beta0)
            .zip(&fit.beta_hat)
            .map(|(((lo, hi), b0), bh)| {
                let slack = 1e-12 * (1.0 + bh.abs());
                *lo - slack <= *b0 && *b0 <= *hi + slack
            })
            .collect(),
        Err(_) => vec![false; p],
    };
    let diff: Vec<f64> = fit
        .beta_hat
        .iter()
        .zip(&config.beta0)
        .map(|(a, b)| a - b)
        .collect();
    let z = fit
        .cov_beta
        .as_ref()
        .and_then(|c| sym_sqrt_pair(c).ok())
        .map(|(_, inv_half)| inv_half.mul_vec(&diff));
    let (r_err, tau) = match &fit.correlation_used {
        Some(c) => {
            let tau = crate::matkernel::inverse_spd(&c.r_tilde)
                .ok()
                .and_then(|rinv| sym_eigen(&rbar_half.sandwich(&rinv)).ok())
                .map(|e| e.lambda_max());
            (Some(c.r_tilde.max_abs_diff(rbar)), tau)
        }
        None => (None, None),
    };
    let record = ReplicateRecord {
        replicate: r,
        seed,
        success,
        error: if success {
            None
        } else {
            Some("not converged".into())
        },
        iterations: fit.iterations,
        fallback: fit.fallback,
        beta_hat: fit.beta_hat.clone(),
        beta_independence: two.independence.beta_hat.clone(),
        z,
        covered,
        r_tilde_max_abs_error: r_err,
    };
    ReplicateOutcome { record, tau }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    s / c as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs.iter().copied());
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// One-sample Kolmogorov–Smirnov distance to the standard normal.
pub fn ks_distance_normal(sample: &[f64]) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Runs all replicates and aggregates them. Replicates that fail or do not
/// converge are counted and excluded from every moment statistic.
pub fn monte_carlo_run(config: &SimConfig) -> Result<MCReport> {
    config.validate()?;
    let rbar = config.correlation.matrix(config.m)?;
    let (rbar_half, _) = sym_sqrt_pair(&rbar)?;
    let reps = config.replications as u64;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| GeeError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<ReplicateOutcome> = pool.install(|| {
        (0..reps)
            .into_par_iter()
            .map(|r| run_replicate(config, &rbar, &rbar_half, r))
            .collect()
    });

    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.record.success).collect();
    if ok.is_empty() {
        return Err(GeeError::EmptyReport);
    }
    let p = config.p;
    let column = |k: usize, indep: bool| -> Vec<f64> {
        ok.iter()
            .map(|o| {
                if indep {
                    o.record.beta_independence[k]
                } else {
                    o.record.beta_hat[k]
                }
            })
            .collect()
    };
    let mut bias = Vec::with_capacity(p);
    let mut variance = Vec::with_capacity(p);
    let mut rmse = Vec::with_capacity(p);
    let mut coverage = Vec::with_capacity(p);
    let mut variance_independence = Vec::with_capacity(p);
    for k in 0..p {
        let b0 = config.beta0[k];
        let col = column(k, false);
        bias.push(mean(col.iter().copied()) - b0);
        variance.push(sample_variance(&col));
        rmse.push(mean(col.iter().map(|b| (b - b0) * (b - b0))).sqrt());
        coverage.push(ok.iter().filter(|o| o.record.covered[k]).count() as f64 / ok.len() as f64);
        variance_independence.push(sample_variance(&column(k, true)));
    }
    let efficiency_ratio = variance
        .iter()
        .zip(&variance_independence)
        .map(|(a, b)| a / b)
        .collect();

    let pool_z: Vec<f64> = ok
        .iter()
        .filter_map(|o| o.record.z.as_ref())
        .flatten()
        .copied()
        .collect();
    let (z_within, ks) = if pool_z.is_empty() {
        (None, None)
    } else {
        let within =
            pool_z.iter().filter(|z| z.abs() <= Z_975).count() as f64 / pool_z.len() as f64;
        (Some(within), Some(ks_distance_normal(&pool_z)))
    };
    let errs: Vec<f64> = ok
        .iter()
        .map(|o| {
            norm2(
                &o.record
                    .beta_hat
                    .iter()
                    .zip(&config.beta0)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let r_errs: Vec<f64> = ok
        .iter()
        .filter_map(|o| o.record.r_tilde_max_abs_error)
        .collect();
    let taus: Vec<f64> = ok.iter().filter_map(|o| o.tau).collect();

    Ok(MCReport {
        replications: config.replications,
        successes: ok.len(),
        failures: outcomes.len() - ok.len(),
        fallbacks: ok.iter().filter(|o| o.record.fallback).count(),
        ci_level: config.ci_level,
        bias,
        variance,
        rmse,
        coverage,
        z_within,
        ks_distance: ks,
        z_count: pool_z.len(),
        median_error_norm: median(errs),
        mean_r_tilde_max_abs_error: if r_errs.is_empty() {
            None
        } else {
            Some(mean(r_errs.into_iter()))
        },
        efficiency_ratio,
        variance_independence,
        oracle_lambda_min_rbar: sym_eigen(&rbar)?.lambda_min(),
        oracle_tau_max: taus.into_iter().reduce(f64::max),
        warnings: config.warnings(),
        records: outcomes.into_iter().map(|o| o.record).collect(),
    })
}
