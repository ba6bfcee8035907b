//! Case-weighted Cox proportional hazards.
//!
//! The partial likelihood is maximised by Newton-Raphson with step halving.
//! Tied event times use Efron's approximation by default, Breslow's on
//! request. The reported covariance is a design-based sandwich built from
//! weighted score residuals (dfbeta), the with-replacement estimator for a
//! single-stage weighted design.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::evalue::{EffectEstimate, Scale};
use crate::glm::{DesignError, DesignMatrix};
use crate::linalg::{Cholesky, LinalgError, SquareMatrix};

pub const MAX_ITER: usize = 30;
pub const LOGLIK_TOL: f64 = 1e-9;
/// Coefficient magnitude (per unit of covariate range) treated as divergence.
pub const DIVERGENCE_BETA: f64 = 22.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Efron,
    Breslow,
}

impl fmt::Display for Ties {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ties::Efron => "efron",
            Ties::Breslow => "breslow",
        })
    }
}

impl FromStr for Ties {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "efron" => Ok(Ties::Efron),
            "breslow" => Ok(Ties::Breslow),
            _ => Err(format!("unknown ties method '{s}' (expected efron or breslow)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoxError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("{field} has {found} entries, expected {expected}")]
    Length {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("time must be positive and finite, got {value} at row {row}")]
    Time { row: usize, value: f64 },
    #[error("weight must be positive and finite, got {value} at row {row}")]
    Weight { row: usize, value: f64 },
    #[error("no events in the data")]
    NoEvents,
    #[error("information matrix is singular: column '{column}' is collinear with earlier columns")]
    RankDeficient { column: String },
    #[error("monotone likelihood: coefficient for '{column}' diverges ({value:.2})")]
    MonotoneLikelihood { column: String, value: f64 },
    #[error("Cox fit did not converge after {iterations} iterations (last loglik change {last_change})")]
    NotConverged { iterations: usize, last_change: f64 },
    #[error("unknown term '{0}'")]
    UnknownTerm(String),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
}

#[derive(Debug, Clone)]
pub struct SurvivalData {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    /// Covariates without an intercept column.
    pub covariates: DesignMatrix,
    pub weights: Vec<f64>,
}

impl SurvivalData {
    pub fn new(
        time: Vec<f64>,
        event: Vec<bool>,
        covariates: DesignMatrix,
        weights: Vec<f64>,
    ) -> Result<Self, CoxError> {
        let n = covariates.nrows();
        for (field, len) in [
            ("time", time.len()),
            ("event", event.len()),
            ("weights", weights.len()),
        ] {
            if len != n {
                return Err(CoxError::Length {
                    field,
                    expected: n,
                    found: len,
                });
            }
        }
        if let Some(row) = time.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(CoxError::Time {
                row,
                value: time[row],
            });
        }
        if let Some(row) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(CoxError::Weight {
                row,
                value: weights[row],
            });
        }
        Ok(Self {
            time,
            event,
            covariates,
            weights,
        })
    }

    pub fn with_unit_weights(
        time: Vec<f64>,
        event: Vec<bool>,
        covariates: DesignMatrix,
    ) -> Result<Self, CoxError> {
        let n = covariates.nrows();
        Self::new(time, event, covariates, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub names: Vec<String>,
    /// Log-hazard ratios.
    pub coefficients: Vec<f64>,
    pub robust_covariance: Vec<Vec<f64>>,
    /// Inverse of the observed information.
    pub model_covariance: Vec<Vec<f64>>,
    pub loglik: f64,
    pub loglik_null: f64,
    pub iterations: usize,
    pub converged: bool,
    pub ties: Ties,
    pub n: usize,
    pub n_events: usize,
}

impl CoxFit {
    fn index(&self, term: &str) -> Result<usize, CoxError> {
        self.names
            .iter()
            .position(|n| n == term)
            .ok_or_else(|| CoxError::UnknownTerm(term.to_string()))
    }

    pub fn coefficient(&self, term: &str) -> Result<f64, CoxError> {
        Ok(self.coefficients[self.index(term)?])
    }

    pub fn robust_se(&self, term: &str) -> Result<f64, CoxError> {
        let j = self.index(term)?;
        Ok(self.robust_covariance[j][j].sqrt())
    }
}

/// Event time group in sorted order: members `start..end`, deaths first.
#[derive(Debug, Clone, Copy)]
struct TimeGroup {
    start: usize,
    end: usize,
    deaths: usize,
}

/// Partial likelihood prepared for repeated evaluation: subjects sorted by
/// time, covariates centred, risk-set groups precomputed.
#[derive(Debug, Clone)]
pub struct CoxObjective {
    ties: Ties,
    p: usize,
    /// original row of each sorted position
    order: Vec<usize>,
    /// row-major centred covariates in sorted order
    x: Vec<f64>,
    weights: Vec<f64>,
    event: Vec<bool>,
    groups: Vec<TimeGroup>,
    names: Vec<String>,
    ranges: Vec<f64>,
}

/// Value, gradient and observed information of the log partial likelihood.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub information: SquareMatrix,
}

/// Per-group hazard increments, kept for score residuals.
struct GroupHazard {
    /// sum_k haz_k and sum_k haz_k a_k: compensator for subjects at risk
    c0: f64,
    c1: Vec<f64>,
    /// the same with Efron's (1 - k/d) down-weighting, for the group's deaths
    e0: f64,
    e1: Vec<f64>,
    /// mean over k of a_k
    abar: Vec<f64>,
}

impl CoxObjective {
    pub fn new(data: &SurvivalData, ties: Ties) -> Self {
        let n = data.len();
        let p = data.covariates.ncols();
        let mut order: Vec<usize> = (0..n).collect();
        // time ascending, events before censorings at equal times
        order.sort_by(|&a, &b| {
            data.time[a]
                .total_cmp(&data.time[b])
                .then(data.event[b].cmp(&data.event[a]))
                .then(a.cmp(&b))
        });

        let means: Vec<f64> = (0..p)
            .map(|j| data.covariates.column(j).iter().sum::<f64>() / n.max(1) as f64)
            .collect();
        let ranges: Vec<f64> = (0..p)
            .map(|j| {
                let col = data.covariates.column(j);
                let (lo, hi) = col
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect();
        let mut x = vec![0.0; n * p];
        for (pos, &row) in order.iter().enumerate() {
            for j in 0..p {
                x[pos * p + j] = data.covariates.column(j)[row] - means[j];
            }
        }
        let weights = order.iter().map(|&r| data.weights[r]).collect();
        let event: Vec<bool> = order.iter().map(|&r| data.event[r]).collect();

        let mut groups = Vec::new();
        let mut start = 0;
        while start < n {
            let t = data.time[order[start]];
            let mut end = start;
            while end < n && data.time[order[end]] == t {
                end += 1;
            }
            let deaths = event[start..end].iter().filter(|&&e| e).count();
            groups.push(TimeGroup { start, end, deaths });
            start = end;
        }

        Self {
            ties,
            p,
            order,
            x,
            weights,
            event,
            groups,
            names: data.covariates.names().to_vec(),
            ranges,
        }
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    fn row(&self, pos: usize) -> &[f64] {
        &self.x[pos * self.p..(pos + 1) * self.p]
    }

    fn etas(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.order.len())
            .map(|pos| self.row(pos).iter().zip(beta).map(|(x, b)| x * b).sum())
            .collect()
    }

    fn efron_fraction(&self, k: usize, d: usize) -> f64 {
        match self.ties {
            Ties::Efron => k as f64 / d as f64,
            Ties::Breslow => 0.0,
        }
    }

    /// Log partial likelihood only.
    pub fn loglik(&self, beta: &[f64]) -> f64 {
        let eta = self.etas(beta);
        let mut s0 = 0.0;
        let mut ll = 0.0;
        for g in self.groups.iter().rev() {
            let (mut d0, mut wsum) = (0.0, 0.0);
            for pos in g.start..g.end {
                let r = self.weights[pos] * eta[pos].exp();
                s0 += r;
                if self.event[pos] {
                    d0 += r;
                    wsum += self.weights[pos];
                    ll += self.weights[pos] * eta[pos];
                }
            }
            if g.deaths == 0 {
                continue;
            }
            let wmean = wsum / g.deaths as f64;
            for k in 0..g.deaths {
                let f = self.efron_fraction(k, g.deaths);
                ll -= wmean * (s0 - f * d0).ln();
            }
        }
        ll
    }

    /// Log partial likelihood with its gradient and information matrix.
    pub fn evaluate(&self, beta: &[f64]) -> Evaluation {
        let p = self.p;
        let eta = self.etas(beta);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        let mut s2 = SquareMatrix::zeros(p);
        let mut ll = 0.0;
        let mut grad = vec![0.0; p];
        let mut info = SquareMatrix::zeros(p);

        let mut d1 = vec![0.0; p];
        let mut d2 = SquareMatrix::zeros(p);
        let mut a = vec![0.0; p];

        for g in self.groups.iter().rev() {
            let mut d0 = 0.0;
            let mut wsum = 0.0;
            d1.iter_mut().for_each(|v| *v = 0.0);
            if g.deaths > 0 {
                d2 = SquareMatrix::zeros(p);
            }
            for pos in g.start..g.end {
                let xr = self.row(pos);
                let w = self.weights[pos];
                let r = w * eta[pos].exp();
                s0 += r;
                for j in 0..p {
                    s1[j] += r * xr[j];
                    for k in j..p {
                        s2.add(j, k, r * xr[j] * xr[k]);
                    }
                }
                if self.event[pos] {
                    d0 += r;
                    wsum += w;
                    ll += w * eta[pos];
                    for j in 0..p {
                        grad[j] += w * xr[j];
                        d1[j] += r * xr[j];
                        for k in j..p {
                            d2.add(j, k, r * xr[j] * xr[k]);
                        }
                    }
                }
            }
            if g.deaths == 0 {
                continue;
            }
            let wmean = wsum / g.deaths as f64;
            for k in 0..g.deaths {
                let f = self.efron_fraction(k, g.deaths);
                let den = s0 - f * d0;
                ll -= wmean * den.ln();
                for j in 0..p {
                    a[j] = (s1[j] - f * d1[j]) / den;
                    grad[j] -= wmean * a[j];
                }
                for j in 0..p {
                    for l in j..p {
                        let second = (s2.get(j, l) - f * d2.get(j, l)) / den;
                        info.add(j, l, wmean * (second - a[j] * a[l]));
                    }
                }
            }
        }
        info.symmetrize_from_upper();
        Evaluation {
            loglik: ll,
            gradient: grad,
            information: info,
        }
    }

    fn group_hazards(&self, eta: &[f64]) -> Vec<Option<GroupHazard>> {
        let p = self.p;
        let mut out: Vec<Option<GroupHazard>> = Vec::with_capacity(self.groups.len());
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; p];
        for g in self.groups.iter().rev() {
            let mut d0 = 0.0;
            let mut d1 = vec![0.0; p];
            let mut wsum = 0.0;
            for pos in g.start..g.end {
                let xr = self.row(pos);
                let r = self.weights[pos] * eta[pos].exp();
                s0 += r;
                for j in 0..p {
                    s1[j] += r * xr[j];
                }
                if self.event[pos] {
                    d0 += r;
                    wsum += self.weights[pos];
                    for j in 0..p {
                        d1[j] += r * xr[j];
                    }
                }
            }
            if g.deaths == 0 {
                out.push(None);
                continue;
            }
            let d = g.deaths;
            let wmean = wsum / d as f64;
            let mut h = GroupHazard {
                c0: 0.0,
                c1: vec![0.0; p],
                e0: 0.0,
                e1: vec![0.0; p],
                abar: vec![0.0; p],
            };
            for k in 0..d {
                let f = self.efron_fraction(k, d);
                let den = s0 - f * d0;
                let haz = wmean / den;
                h.c0 += haz;
                h.e0 += haz * (1.0 - f);
                for j in 0..p {
                    let ak = (s1[j] - f * d1[j]) / den;
                    h.c1[j] += haz * ak;
                    h.e1[j] += haz * (1.0 - f) * ak;
                    h.abar[j] += ak / d as f64;
                }
            }
            out.push(Some(h));
        }
        out.reverse();
        out
    }

    /// Unweighted score residuals, one row per subject in original row order.
    pub fn score_residuals(&self, beta: &[f64]) -> Vec<Vec<f64>> {
        let p = self.p;
        let n = self.order.len();
        let eta = self.etas(beta);
        let hazards = self.group_hazards(&eta);
        let mut resid = vec![vec![0.0; p]; n];
        let mut cum0 = 0.0;
        let mut cum1 = vec![0.0; p];
        for (g, h) in self.groups.iter().zip(&hazards) {
            let (prev0, prev1) = (cum0, cum1.clone());
            if let Some(h) = h {
                cum0 += h.c0;
                for j in 0..p {
                    cum1[j] += h.c1[j];
                }
            }
            for pos in g.start..g.end {
                let xr = self.row(pos);
                let risk = eta[pos].exp();
                let out = &mut resid[self.order[pos]];
                match (self.event[pos], h) {
                    (true, Some(h)) => {
                        let c0 = prev0 + h.e0;
                        for j in 0..p {
                            let c1 = prev1[j] + h.e1[j];
                            out[j] = (xr[j] - h.abar[j]) - risk * (xr[j] * c0 - c1);
                        }
                    }
                    _ => {
                        for j in 0..p {
                            out[j] = -risk * (xr[j] * cum0 - cum1[j]);
                        }
                    }
                }
            }
        }
        resid
    }

    fn rank_error(&self, err: LinalgError) -> CoxError {
        let LinalgError::RankDeficient { index } = err;
        CoxError::RankDeficient {
            column: self.names[index].clone(),
        }
    }
}

/// Maximises the weighted partial likelihood.
pub fn fit_cox(data: &SurvivalData, ties: Ties) -> Result<CoxFit, CoxError> {
    let n_events = data.event.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Err(CoxError::NoEvents);
    }
    let obj = CoxObjective::new(data, ties);
    let p = obj.dim();

    let mut beta = vec![0.0; p];
    let mut cur = obj.evaluate(&beta);
    let loglik_null = cur.loglik;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    if p == 0 {
        converged = true;
    }
    while !converged && iterations < MAX_ITER {
        iterations += 1;
        let chol = Cholesky::factor(&cur.information).map_err(|e| obj.rank_error(e))?;
        let step = chol.solve(&cur.gradient);
        let mut trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut next = obj.evaluate(&trial);
        let mut halvings = 0;
        while !(next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs()) && halvings < 30 {
            trial = beta.iter().zip(&trial).map(|(b, t)| 0.5 * (b + t)).collect();
            next = obj.evaluate(&trial);
            halvings += 1;
        }
        last_change = (next.loglik - cur.loglik).abs();
        beta = trial;
        cur = next;
        if last_change < LOGLIK_TOL {
            converged = true;
        }
    }

    if converged && p > 0 {
        // final Newton step from the accepted point
        if let Ok(chol) = Cholesky::factor(&cur.information) {
            let step = chol.solve(&cur.gradient);
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            let next = obj.evaluate(&trial);
            if next.loglik >= cur.loglik - 1e-12 * cur.loglik.abs() {
                beta = trial;
                cur = next;
            }
        }
    }

    if let Some((j, scaled)) = beta
        .iter()
        .zip(&obj.ranges)
        .map(|(b, r)| (b * r).abs())
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
    {
        if scaled > DIVERGENCE_BETA || !beta[j].is_finite() {
            return Err(CoxError::MonotoneLikelihood {
                column: obj.names[j].clone(),
                value: beta[j],
            });
        }
    }
    if !converged {
        return Err(CoxError::NotConverged {
            iterations,
            last_change,
        });
    }

    let chol = Cholesky::factor(&cur.information).map_err(|e| obj.rank_error(e))?;
    let model_cov = chol.inverse();
    let robust = sandwich(&obj, &beta, &model_cov, &data.weights);

    Ok(CoxFit {
        names: obj.names.clone(),
        coefficients: beta,
        robust_covariance: robust.rows(),
        model_covariance: model_cov.rows(),
        loglik: cur.loglik,
        loglik_null,
        iterations,
        converged,
        ties,
        n: data.len(),
        n_events,
    })
}

/// `n/(n-1) sum_i (d_i - dbar)(d_i - dbar)'` with `d_i = w_i U_i I^-1`.
fn sandwich(obj: &CoxObjective, beta: &[f64], model_cov: &SquareMatrix, weights: &[f64]) -> SquareMatrix {
    let p = beta.len();
    let n = weights.len();
    let resid = obj.score_residuals(beta);
    let dfbeta: Vec<Vec<f64>> = resid
        .iter()
        .zip(weights)
        .map(|(u, w)| {
            let wu: Vec<f64> = u.iter().map(|v| v * w).collect();
            model_cov.mul_vec(&wu)
        })
        .collect();
    let mut mean = vec![0.0; p];
    for d in &dfbeta {
        for j in 0..p {
            mean[j] += d[j] / n as f64;
        }
    }
    let mut v = SquareMatrix::zeros(p);
    for d in &dfbeta {
        for j in 0..p {
            for k in j..p {
                v.add(j, k, (d[j] - mean[j]) * (d[k] - mean[k]));
            }
        }
    }
    v.symmetrize_from_upper();
    if n > 1 {
        v.scale(n as f64 / (n as f64 - 1.0));
    }
    v
}

/// Two-sided normal quantile for a confidence level.
pub fn normal_quantile(level: f64) -> Result<f64, CoxError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CoxError::Level(level));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

/// Hazard ratio with a Wald interval from the robust standard error.
pub fn effect_with_ci(
    fit: &CoxFit,
    term: &str,
    level: f64,
    outcome_common: bool,
) -> Result<EffectEstimate, CoxError> {
    let beta = fit.coefficient(term)?;
    let se = fit.robust_se(term)?;
    interval_from_log(beta, se, level, outcome_common)
}

pub fn interval_from_log(
    beta: f64,
    se: f64,
    level: f64,
    outcome_common: bool,
) -> Result<EffectEstimate, CoxError> {
    let z = normal_quantile(level)?;
    Ok(EffectEstimate {
        estimate: beta.exp(),
        lcl: (beta - z * se).exp(),
        ucl: (beta + z * se).exp(),
        scale: Scale::HazardRatio,
        outcome_common,
    })
}
