//! Marginal GLM layer: canonical links, the longitudinal dataset, and the
//! per-subject quantities `θ_i`, `μ_i`, `A_i`, `ε_i` at a given parameter.
//!
//! Only canonical links are supported, so the marginal variance of every cell is
//! the derivative of the mean function: `σ²_ij = μ̇(θ_ij)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{GeeError, Result};
use crate::matkernel::{dot, Mat};
use crate::normal::{normal_cdf, normal_ln_pdf};

/// Largest |θ| accepted by the log link before `exp` is considered to overflow.
pub const LOG_LINK_THETA_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFamily {
    Identity,
    Log,
    Logit,
    Probit,
}

impl LinkFamily {
    pub const ALL: [LinkFamily; 4] = [
        LinkFamily::Identity,
        LinkFamily::Log,
        LinkFamily::Logit,
        LinkFamily::Probit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinkFamily::Identity => "identity",
            LinkFamily::Log => "log",
            LinkFamily::Logit => "logit",
            LinkFamily::Probit => "probit",
        }
    }
}

impl fmt::Display for LinkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkFamily {
    type Err = GeeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(LinkFamily::Identity),
            "log" => Ok(LinkFamily::Log),
            "logit" | "logistic" => Ok(LinkFamily::Logit),
            "probit" => Ok(LinkFamily::Probit),
            other => Err(GeeError::InvalidInput(format!("unknown link '{other}'"))),
        }
    }
}

/// `μ(θ)` and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkValues {
    pub mu: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// Evaluates the mean function and its derivatives at `theta`.
///
/// Logit and probit saturate instead of failing: `d1` is floored at the
/// smallest positive normal so the variance stays strictly positive even for
/// extreme `θ` that a Newton step may probe transiently.
pub fn link_eval(family: LinkFamily, theta: f64) -> Result<LinkValues> {
    if !theta.is_finite() {
        return Err(GeeError::InvalidInput(format!(
            "non-finite linear predictor {theta}"
        )));
    }
    Ok(match family {
        LinkFamily::Identity => LinkValues {
            mu: theta,
            d1: 1.0,
            d2: 0.0,
            d3: 0.0,
        },
        LinkFamily::Log => {
            if theta.abs() > LOG_LINK_THETA_LIMIT {
                return Err(GeeError::Overflow {
                    theta,
                    subject: None,
                    time: None,
                });
            }
            let e = theta.exp();
            LinkValues {
                mu: e,
                d1: e,
                d2: e,
                d3: e,
            }
        }
        LinkFamily::Logit => {
            let e = (-theta.abs()).exp();
            let mu = if theta >= 0.0 {
                1.0 / (1.0 + e)
            } else {
                e / (1.0 + e)
            };
            let v = e / ((1.0 + e) * (1.0 + e));
            let d1 = v.max(f64::MIN_POSITIVE);
            LinkValues {
                mu,
                d1,
                d2: d1 * (1.0 - 2.0 * mu),
                d3: d1 * (1.0 - 6.0 * v),
            }
        }
        LinkFamily::Probit => {
            let d1 = normal_ln_pdf(theta).exp().max(f64::MIN_POSITIVE);
            LinkValues {
                mu: normal_cdf(theta),
                d1,
                d2: -theta * d1,
                d3: (theta * theta - 1.0) * d1,
            }
        }
    })
}

/// One subject: an `m×p` design and its `m` responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub x: Mat,
    pub y: Vec<f64>,
}

/// `n` subjects, each observed at the same `m` time points with `p` covariates.
///
/// Subject order is meaningful: index `i` is the filtration index under which
/// the residual vectors form a martingale difference sequence. All estimators
/// iterate subjects in stored order.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    m: usize,
    p: usize,
    subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| GeeError::InvalidInput("dataset needs at least one subject".into()))?;
        let (m, p) = (first.x.rows(), first.x.cols());
        for (i, s) in subjects.iter().enumerate() {
            if s.x.rows() != m || s.x.cols() != p || s.y.len() != m {
                return Err(GeeError::Shape(format!(
                    "subject {i} has a {}x{} design and {} responses, expected {m}x{p} and {m}",
                    s.x.rows(),
                    s.x.cols(),
                    s.y.len()
                )));
            }
            if !s.x.as_slice().iter().chain(&s.y).all(|v| v.is_finite()) {
                return Err(GeeError::InvalidInput(format!(
                    "subject {i} has non-finite entries"
                )));
            }
        }
        Ok(LongitudinalDataset { m, p, subjects })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    /// The first `k` subjects (in stored order).
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.n() {
            return Err(GeeError::InvalidInput(format!(
                "prefix size {k} outside 1..={}",
                self.n()
            )));
        }
        Self::new(self.subjects[..k].to_vec())
    }

    /// Reorders subjects; `order[t]` is the old index placed at position `t`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n()];
        for &i in order {
            if i >= self.n() || std::mem::replace(&mut seen[i], true) {
                return Err(GeeError::InvalidInput("order is not a permutation".into()));
            }
        }
        if order.len() != self.n() {
            return Err(GeeError::InvalidInput("order is not a permutation".into()));
        }
        Self::new(order.iter().map(|&i| self.subjects[i].clone()).collect())
    }

    /// Same responses, every design entry multiplied by `c`.
    pub fn with_scaled_design(&self, c: f64) -> Result<Self> {
        Self::new(
            self.subjects
                .iter()
                .map(|s| Subject {
                    x: s.x.scale(c),
                    y: s.y.clone(),
                })
                .collect(),
        )
    }
}

/// Per-subject model quantities at one parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEval {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Diagonal of `A_i`: the marginal variances `σ²_ij = μ̇(θ_ij)`.
    pub var: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEval {
    pub subjects: Vec<SubjectEval>,
}

pub fn eval_model(
    data: &LongitudinalDataset,
    family: LinkFamily,
    beta: &[f64],
) -> Result<ModelEval> {
    if beta.len() != data.p() {
        return Err(GeeError::Shape(format!(
            "beta has {} entries, design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(GeeError::InvalidInput("beta has non-finite entries".into()));
    }
    let subjects = data
        .subjects()
        .iter()
        .enumerate()
        .map(|(i, s)| eval_subject(s, family, beta).map_err(|e| attach_cell(e, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelEval { subjects })
}

fn attach_cell(e: GeeError, subject: usize) -> GeeError {
    match e {
        GeeError::Overflow { theta, time, .. } => GeeError::Overflow {
            theta,
            subject: Some(subject),
            time,
        },
        other => other,
    }
}

pub(crate) fn eval_subject(s: &Subject, family: LinkFamily, beta: &[f64]) -> Result<SubjectEval> {
    let m = s.y.len();
    let mut out = SubjectEval {
        theta: Vec::with_capacity(m),
        mu: Vec::with_capacity(m),
        var: Vec::with_capacity(m),
        eps: Vec::with_capacity(m),
    };
    for j in 0..m {
        let theta = dot(s.x.row(j), beta);
        let lv = link_eval(family, theta).map_err(|e| match e {
            GeeError::Overflow { theta, .. } => GeeError::Overflow {
                theta,
                subject: None,
                time: Some(j),
            },
            other => other,
        })?;
        out.theta.push(theta);
        out.mu.push(lv.mu);
        out.var.push(lv.d1);
        out.eps.push(s.y[j] - lv.mu);
    }
    Ok(out)
}
