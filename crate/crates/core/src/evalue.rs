//! Closed-form sensitivity mathematics for unmeasured confounding.
//!
//! Everything here works on ratio-scale effects. Bounds below the null are
//! reflected with [`orient`], odds and hazard ratios for common outcomes are
//! mapped to the risk-ratio scale with [`to_risk_ratio_scale`], and the
//! E-value family is computed from the resulting risk ratios.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalueError {
    #[error("{name} must be positive and finite, got {value}")]
    Domain { name: &'static str, value: f64 },
    #[error("invalid interval: need 0 < lcl <= estimate <= ucl, got ({lcl}, {estimate}, {ucl})")]
    Interval { estimate: f64, lcl: f64, ucl: f64 },
    #[error("{name} must lie in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("{name} must be >= 1, got {value}")]
    BelowOne { name: &'static str, value: f64 },
    #[error("no finite tipping association: rr_eu ({rr_eu}) must exceed the limiting bound ({lb_obs})")]
    NoFiniteTip { lb_obs: f64, rr_eu: f64 },
    #[error("unknown scale '{0}' (expected rr, or, hr)")]
    UnknownScale(String),
}

/// Ratio scale an effect is reported on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[serde(rename = "rr")]
    RiskRatio,
    #[serde(rename = "or")]
    OddsRatio,
    #[serde(rename = "hr")]
    HazardRatio,
}

impl Scale {
    pub fn short_name(self) -> &'static str {
        match self {
            Scale::RiskRatio => "rr",
            Scale::OddsRatio => "or",
            Scale::HazardRatio => "hr",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Scale {
    type Err = EvalueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rr" | "risk" | "riskratio" => Ok(Scale::RiskRatio),
            "or" | "odds" | "oddsratio" => Ok(Scale::OddsRatio),
            "hr" | "hazard" | "hazardratio" => Ok(Scale::HazardRatio),
            _ => Err(EvalueError::UnknownScale(s.to_string())),
        }
    }
}

/// A ratio-scale effect with its confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimate: f64,
    pub lcl: f64,
    pub ucl: f64,
    pub scale: Scale,
    pub outcome_common: bool,
}

impl EffectEstimate {
    pub fn new(
        estimate: f64,
        lcl: f64,
        ucl: f64,
        scale: Scale,
        outcome_common: bool,
    ) -> Result<Self, EvalueError> {
        check_positive("estimate", estimate)?;
        check_positive("lcl", lcl)?;
        check_positive("ucl", ucl)?;
        if !(lcl <= estimate && estimate <= ucl) {
            return Err(EvalueError::Interval { estimate, lcl, ucl });
        }
        Ok(Self {
            estimate,
            lcl,
            ucl,
            scale,
            outcome_common,
        })
    }

    /// True when the interval contains the null value 1.
    pub fn covers_null(&self) -> bool {
        self.lcl <= 1.0 && 1.0 <= self.ucl
    }

    /// The confidence limit closest to 1.
    pub fn limiting_bound(&self) -> f64 {
        limiting_bound(self.lcl, self.ucl)
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<(), EvalueError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(EvalueError::Domain { name, value })
    }
}

/// The interval endpoint closest to the null.
///
/// Lower bound when the interval lies above 1, upper bound when it lies
/// below 1. For an interval spanning 1 the endpoint that is closer to 1
/// after orientation is returned.
pub fn limiting_bound(lcl: f64, ucl: f64) -> f64 {
    if lcl > 1.0 {
        lcl
    } else if ucl < 1.0 {
        ucl
    } else if reflect(lcl) <= reflect(ucl) {
        lcl
    } else {
        ucl
    }
}

#[inline]
fn reflect(x: f64) -> f64 {
    if x >= 1.0 {
        x
    } else {
        1.0 / x
    }
}

/// Reflects a ratio below the null onto the `>= 1` side.
pub fn orient(bound: f64) -> Result<f64, EvalueError> {
    check_positive("bound", bound)?;
    Ok(reflect(bound))
}

/// Maps an odds or hazard ratio onto the approximate risk-ratio scale.
///
/// Rare outcomes and risk ratios pass through unchanged. For common outcomes
/// an odds ratio is square-rooted and a hazard ratio goes through
/// `(1 - 0.5^sqrt(h)) / (1 - 0.5^sqrt(1/h))`.
pub fn to_risk_ratio_scale(value: f64, scale: Scale, outcome_common: bool) -> Result<f64, EvalueError> {
    check_positive("value", value)?;
    Ok(rr_transform(value, scale, outcome_common))
}

fn rr_transform(value: f64, scale: Scale, outcome_common: bool) -> f64 {
    if !outcome_common {
        return value;
    }
    match scale {
        Scale::RiskRatio => value,
        Scale::OddsRatio => value.sqrt(),
        Scale::HazardRatio => {
            // 1 - 0.5^s == -expm1(s ln 0.5); keeps precision near h = 1
            let num = -(-value.sqrt() * LN_2).exp_m1();
            let den = -(-(1.0 / value).sqrt() * LN_2).exp_m1();
            num / den
        }
    }
}

/// `x + sqrt(x (x - 1))` for a risk ratio already on the `>= 1` side.
pub fn evalue_rr(rr: f64) -> f64 {
    debug_assert!(rr >= 1.0);
    rr + (rr * (rr - 1.0)).sqrt()
}

/// E-values for the point estimate and for the confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EValues {
    pub evalue_point: f64,
    pub evalue_ci: f64,
}

pub fn evalue(effect: &EffectEstimate) -> EValues {
    let on_rr = |x: f64| rr_transform(reflect(x), effect.scale, effect.outcome_common);
    let evalue_point = evalue_rr(on_rr(effect.estimate));
    let evalue_ci = if effect.covers_null() {
        1.0
    } else {
        evalue_rr(on_rr(effect.limiting_bound()))
    };
    EValues {
        evalue_point,
        evalue_ci,
    }
}

/// Observed Covariate E-value for moving the full-model limiting bound to the
/// limiting bound of a refit that dropped covariates.
///
/// The side (lower or upper) is chosen from the full-model interval and the
/// same side of the adjusted interval is compared against it. When the full
/// bound sits below 1 both bounds are reflected. Each bound is mapped to the
/// risk-ratio scale before the ratio is formed.
pub fn observed_covariate_evalue(
    lb: f64,
    ub: f64,
    lb_adj: f64,
    ub_adj: f64,
    scale: Scale,
    outcome_common: bool,
) -> Result<f64, EvalueError> {
    check_positive("lb", lb)?;
    check_positive("ub", ub)?;
    check_positive("lb_adj", lb_adj)?;
    check_positive("ub_adj", ub_adj)?;

    let use_lower = if lb > 1.0 {
        true
    } else if ub < 1.0 {
        false
    } else {
        reflect(lb) <= reflect(ub)
    };
    let (mut full, mut adj) = if use_lower { (lb, lb_adj) } else { (ub, ub_adj) };
    if full < 1.0 {
        full = 1.0 / full;
        adj = 1.0 / adj;
    }
    let full = rr_transform(full, scale, outcome_common);
    let adj = rr_transform(adj, scale, outcome_common);
    let ratio = full.max(adj) / full.min(adj);
    Ok(evalue_rr(ratio))
}

/// Sensitivity parameters of a binary unmeasured confounder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TipParameters {
    pub rr_eu: f64,
    pub rr_ud: f64,
    pub p0: f64,
    pub p1: f64,
}

impl TipParameters {
    pub fn new(rr_ud: f64, p0: f64, p1: f64) -> Result<Self, EvalueError> {
        for (name, p) in [("p0", p0), ("p1", p1)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EvalueError::Probability { name, value: p });
            }
        }
        if !(rr_ud >= 1.0 && rr_ud.is_finite()) {
            return Err(EvalueError::BelowOne {
                name: "rr_ud",
                value: rr_ud,
            });
        }
        let rr_eu = if p0 > 0.0 {
            (p1 / p0).max(1.0)
        } else {
            f64::INFINITY
        };
        Ok(Self { rr_eu, rr_ud, p0, p1 })
    }
}

/// Limiting bound after adjusting for a binary confounder with outcome
/// association `rr_ud` and prevalences `p0` (unexposed) and `p1` (exposed).
pub fn lin_adjust(lb_obs: f64, params: &TipParameters) -> f64 {
    let TipParameters { rr_ud, p0, p1, .. } = *params;
    lb_obs * (rr_ud * p0 + (1.0 - p0)) / (rr_ud * p1 + (1.0 - p1))
}

/// Right-hand side of the tipping condition with the exposed prevalence
/// fixed at 1: `lb * (rr_ud / rr_eu + 1 - 1 / rr_eu) / rr_ud`.
pub fn tipping_condition(lb_obs: f64, rr_eu: f64, rr_ud: f64) -> f64 {
    lb_obs * (rr_ud / rr_eu + (1.0 - 1.0 / rr_eu)) / rr_ud
}

/// Smallest confounder-outcome association that, paired with exposure
/// association `rr_eu`, drags `lb_obs` to the null.
pub fn tip_rr_ud(lb_obs: f64, rr_eu: f64) -> Result<f64, EvalueError> {
    check_positive("lb_obs", lb_obs)?;
    check_positive("rr_eu", rr_eu)?;
    if lb_obs < 1.0 {
        return Err(EvalueError::BelowOne {
            name: "lb_obs",
            value: lb_obs,
        });
    }
    if rr_eu <= lb_obs {
        return Err(EvalueError::NoFiniteTip { lb_obs, rr_eu });
    }
    Ok(lb_obs * (rr_eu - 1.0) / (rr_eu - lb_obs))
}
