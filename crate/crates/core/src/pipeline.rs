//! Observed bias analysis: propensity model, overlap weights, weighted Cox
//! outcome model, and the leave-covariate-out refits.
//!
//! Every drop-list entry removes its covariates from both the propensity
//! model and the outcome model before refitting. Refits are independent and
//! may run on a worker pool; results are merged back in drop-list order.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, MissingReport};
use crate::evalue::{limiting_bound, observed_covariate_evalue, EffectEstimate, Scale};
use crate::glm::{fit_logistic, predict_probabilities, DesignMatrix, GlmFit};
use crate::plot::PlotTheme;
use crate::survival::{effect_with_ci, fit_cox, CoxFit, SurvivalData, Ties};

pub const TIP_LB_LABEL: &str = "Hypothetical unmeasured confounder (Tip LB)";
pub const TIP_POINT_LABEL: &str = "Hypothetical unmeasured confounder (Tip Point Est)";
pub const FULL_LABEL: &str = "Full model";

fn default_ci_level() -> f64 {
    0.95
}

/// Which variables to use and which covariate sets to drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub exposure: String,
    pub time: String,
    pub event: String,
    pub covariates: Vec<String>,
    #[serde(default)]
    pub groups: IndexMap<String, Vec<String>>,
    #[serde(default)]
    pub outcome_common: bool,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub ties: Ties,
    #[serde(default)]
    pub order_by: SortKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme: Option<PlotTheme>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("config field '{field}': {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

impl AnalysisConfig {
    pub fn new(exposure: &str, time: &str, event: &str, covariates: &[&str]) -> Self {
        Self {
            exposure: exposure.to_string(),
            time: time.to_string(),
            event: event.to_string(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            groups: IndexMap::new(),
            outcome_common: false,
            ci_level: default_ci_level(),
            ties: Ties::Efron,
            order_by: SortKey::Lcl,
            theme: None,
        }
    }

    pub fn with_group(mut self, name: &str, members: &[&str]) -> Self {
        self.groups
            .insert(name.to_string(), members.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("exposure", &self.exposure),
            ("time", &self.time),
            ("event", &self.event),
        ] {
            if value.is_empty() {
                return Err(config_err(field, "must not be empty"));
            }
        }
        if self.exposure == self.time || self.exposure == self.event || self.time == self.event {
            return Err(config_err(
                "exposure",
                "exposure, time and event must be distinct columns",
            ));
        }
        for (i, c) in self.covariates.iter().enumerate() {
            if self.covariates[..i].contains(c) {
                return Err(config_err("covariates", format!("duplicate covariate '{c}'")));
            }
            if c == &self.exposure || c == &self.time || c == &self.event {
                return Err(config_err(
                    "covariates",
                    format!("'{c}' is also the exposure, time or event column"),
                ));
            }
        }
        for (name, members) in &self.groups {
            if self.covariates.contains(name) {
                return Err(config_err(
                    format!("groups.{name}"),
                    "group name collides with a covariate name",
                ));
            }
            if members.is_empty() {
                return Err(config_err(format!("groups.{name}"), "group is empty"));
            }
            for m in members {
                if !self.covariates.contains(m) {
                    return Err(config_err(
                        format!("groups.{name}"),
                        format!("member '{m}' is not in covariates"),
                    ));
                }
            }
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(config_err(
                "ci_level",
                format!("must lie in (0, 1), got {}", self.ci_level),
            ));
        }
        if let Some(theme) = &self.theme {
            theme.validate().map_err(|e| config_err("theme", e.to_string()))?;
        }
        Ok(())
    }

    /// Covariate drops in declaration order, then groups in declaration order.
    pub fn drop_list(&self) -> Vec<DropEntry> {
        self.covariates
            .iter()
            .map(|c| DropEntry {
                label: c.clone(),
                kind: RecordKind::Covariate,
                columns: vec![c.clone()],
            })
            .chain(self.groups.iter().map(|(name, members)| DropEntry {
                label: name.clone(),
                kind: RecordKind::Group,
                columns: members.clone(),
            }))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropEntry {
    pub label: String,
    pub kind: RecordKind,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Covariate,
    Group,
    Tip,
    Full,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Covariate => "covariate",
            RecordKind::Group => "group",
            RecordKind::Tip => "tip",
            RecordKind::Full => "full",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "covariate" => Ok(RecordKind::Covariate),
            "group" => Ok(RecordKind::Group),
            "tip" => Ok(RecordKind::Tip),
            "full" => Ok(RecordKind::Full),
            _ => Err(format!("unknown record kind '{s}'")),
        }
    }
}

/// One row of the observed bias table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedBiasRecord {
    pub label: String,
    pub kind: RecordKind,
    #[serde(deserialize_with = "crate::io::f64_or_nan")]
    pub estimate: f64,
    #[serde(deserialize_with = "crate::io::f64_or_nan")]
    pub lcl: f64,
    #[serde(deserialize_with = "crate::io::f64_or_nan")]
    pub ucl: f64,
    /// Absent for the full-model row and for failed refits.
    pub oce: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ObservedBiasRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    fn failed(label: &str, kind: RecordKind, error: String) -> Self {
        Self {
            label: label.to_string(),
            kind,
            estimate: f64::NAN,
            lcl: f64::NAN,
            ucl: f64::NAN,
            oce: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub covariate: String,
    #[serde(deserialize_with = "crate::io::f64_or_nan")]
    pub smd_unweighted: f64,
    #[serde(deserialize_with = "crate::io::f64_or_nan")]
    pub smd_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BalanceError {
    #[error("propensity {value} at row {row} is outside (0, 1)")]
    Probability { row: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("both exposure arms need at least one row with positive weight")]
    EmptyArm,
    #[error("pooled standard deviation is zero; SMD undefined")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Propensity,
    Weights,
    Outcome,
    Balance,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data preparation",
            Stage::Propensity => "propensity model",
            Stage::Weights => "overlap weights",
            Stage::Outcome => "outcome model",
            Stage::Balance => "balance diagnostics",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DatasetError),
    #[error("{stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

/// Overlap weights: `1 - p` for exposed rows, `p` for unexposed rows.
pub fn overlap_weights(propensity: &[f64], exposure: &[bool]) -> Result<Vec<f64>, BalanceError> {
    if propensity.len() != exposure.len() {
        return Err(BalanceError::Length {
            left: propensity.len(),
            right: exposure.len(),
        });
    }
    propensity
        .iter()
        .zip(exposure)
        .enumerate()
        .map(|(row, (&p, &z))| {
            if !(p > 0.0 && p < 1.0) {
                Err(BalanceError::Probability { row, value: p })
            } else if z {
                Ok(1.0 - p)
            } else {
                Ok(p)
            }
        })
        .collect()
}

struct ArmStats {
    mean: f64,
    variance: f64,
}

fn arm_stats(
    x: &[f64],
    exposure: &[bool],
    arm: bool,
    weights: Option<&[f64]>,
) -> Result<ArmStats, BalanceError> {
    let (mut n, mut sum, mut wsum, mut wxsum) = (0usize, 0.0, 0.0, 0.0);
    for (i, (&v, &z)) in x.iter().zip(exposure).enumerate() {
        if z != arm {
            continue;
        }
        n += 1;
        sum += v;
        let w = weights.map_or(1.0, |w| w[i]);
        wsum += w;
        wxsum += w * v;
    }
    if n == 0 || !(wsum > 0.0) {
        return Err(BalanceError::EmptyArm);
    }
    let raw_mean = sum / n as f64;
    let ss: f64 = x
        .iter()
        .zip(exposure)
        .filter(|(_, &z)| z == arm)
        .map(|(v, _)| (v - raw_mean).powi(2))
        .sum();
    let variance = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
    Ok(ArmStats {
        mean: wxsum / wsum,
        variance,
    })
}

/// `(mean_1 - mean_0) / sqrt((s1^2 + s0^2) / 2)`.
///
/// Means are weighted when `weights` is given; the pooled SD always comes
/// from the unweighted arm variances so pre- and post-weighting values share
/// one denominator.
pub fn standardized_mean_difference(
    x: &[f64],
    exposure: &[bool],
    weights: Option<&[f64]>,
) -> Result<f64, BalanceError> {
    if x.len() != exposure.len() {
        return Err(BalanceError::Length {
            left: x.len(),
            right: exposure.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != x.len() {
            return Err(BalanceError::Length {
                left: x.len(),
                right: w.len(),
            });
        }
    }
    let treated = arm_stats(x, exposure, true, weights)?;
    let control = arm_stats(x, exposure, false, weights)?;
    let pooled = ((treated.variance + control.variance) / 2.0).sqrt();
    if !(pooled > 0.0) {
        return Err(BalanceError::ZeroVariance);
    }
    Ok((treated.mean - control.mean) / pooled)
}

/// Complete-case analysis columns, validated once and shared by every refit.
#[derive(Debug, Clone)]
pub struct PreparedData {
    exposure: Vec<bool>,
    exposure_f: Vec<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
    covariates: IndexMap<String, Vec<f64>>,
    pub missing: MissingReport,
}

impl PreparedData {
    pub fn new(data: &Dataset, config: &AnalysisConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut used: Vec<&str> = vec![&config.exposure, &config.time, &config.event];
        used.extend(config.covariates.iter().map(String::as_str));
        let (cc, missing) = data.complete_cases(&used)?;
        if !missing.missing_by_column.is_empty() {
            for m in &missing.missing_by_column {
                log::warn!("column '{}': {} missing values", m.column, m.missing);
            }
            log::warn!(
                "complete-case analysis keeps {} of {} rows",
                missing.rows_used,
                missing.rows_in
            );
        }
        let exposure = cc.binary(&config.exposure)?;
        let event = cc.binary(&config.event)?;
        let time = cc.require(&config.time)?.to_vec();
        let covariates = config
            .covariates
            .iter()
            .map(|c| Ok((c.clone(), cc.require(c)?.to_vec())))
            .collect::<Result<IndexMap<_, _>, DatasetError>>()?;
        if !exposure.iter().any(|&z| z) || exposure.iter().all(|&z| z) {
            return Err(stage_err(Stage::Data)(format!(
                "exposure '{}' must contain both arms",
                config.exposure
            )));
        }
        Ok(Self {
            exposure_f: exposure.iter().map(|&z| z as u8 as f64).collect(),
            exposure,
            time,
            event,
            covariates,
            missing,
        })
    }

    pub fn nrows(&self) -> usize {
        self.time.len()
    }

    pub fn exposure(&self) -> &[bool] {
        &self.exposure
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        self.covariates.get(name).map(Vec::as_slice)
    }
}

/// Result of one propensity + outcome fit.
#[derive(Debug, Clone)]
pub struct EffectFit {
    pub effect: EffectEstimate,
    pub propensity: Vec<f64>,
    pub weights: Vec<f64>,
    pub ps_fit: GlmFit,
    pub outcome_fit: CoxFit,
}

/// Fits the propensity model on `covariates`, builds overlap weights, then
/// the weighted Cox model with the exposure plus the same covariates.
pub fn fit_effect(
    data: &PreparedData,
    covariates: &[&str],
    config: &AnalysisConfig,
) -> Result<EffectFit, PipelineError> {
    let n = data.nrows();
    let cols = covariates
        .iter()
        .map(|&c| {
            data.covariate(c)
                .map(|v| (c.to_string(), v.to_vec()))
                .ok_or_else(|| DatasetError::MissingColumn(c.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let ps_design = DesignMatrix::with_intercept(n, cols.iter().cloned())
        .map_err(|e| stage_err(Stage::Propensity)(e.to_string()))?;
    let ps_fit = fit_logistic(&ps_design, &data.exposure_f)
        .map_err(|e| stage_err(Stage::Propensity)(e.to_string()))?;
    for w in &ps_fit.warnings {
        log::warn!("propensity model: {w}");
    }
    let propensity = predict_probabilities(&ps_fit, &ps_design)
        .map_err(|e| stage_err(Stage::Propensity)(e.to_string()))?;
    let weights =
        overlap_weights(&propensity, &data.exposure).map_err(|e| stage_err(Stage::Weights)(e.to_string()))?;

    let mut names = vec![config.exposure.clone()];
    let mut columns = vec![data.exposure_f.clone()];
    for (name, col) in cols {
        names.push(name);
        columns.push(col);
    }
    let outcome_design =
        DesignMatrix::new(n, names, columns).map_err(|e| stage_err(Stage::Outcome)(e.to_string()))?;
    let surv = SurvivalData::new(
        data.time.clone(),
        data.event.clone(),
        outcome_design,
        weights.clone(),
    )
    .map_err(|e| stage_err(Stage::Outcome)(e.to_string()))?;
    let outcome_fit = fit_cox(&surv, config.ties).map_err(|e| stage_err(Stage::Outcome)(e.to_string()))?;
    let effect = effect_with_ci(
        &outcome_fit,
        &config.exposure,
        config.ci_level,
        config.outcome_common,
    )
    .map_err(|e| stage_err(Stage::Outcome)(e.to_string()))?;

    Ok(EffectFit {
        effect,
        propensity,
        weights,
        ps_fit,
        outcome_fit,
    })
}

#[derive(Debug, Clone)]
pub struct FullAnalysis {
    pub full: ObservedBiasRecord,
    pub fit: EffectFit,
    pub balance: Vec<BalanceRecord>,
    pub missing: MissingReport,
}

fn full_record(effect: &EffectEstimate) -> ObservedBiasRecord {
    ObservedBiasRecord {
        label: FULL_LABEL.to_string(),
        kind: RecordKind::Full,
        estimate: effect.estimate,
        lcl: effect.lcl,
        ucl: effect.ucl,
        oce: None,
        error: None,
    }
}

/// Balance of every configured covariate before and after weighting.
pub fn balance_table(data: &PreparedData, weights: &[f64]) -> Result<Vec<BalanceRecord>, PipelineError> {
    data.covariates
        .iter()
        .map(|(name, x)| {
            let err = |e: BalanceError| stage_err(Stage::Balance)(format!("covariate '{name}': {e}"));
            Ok(BalanceRecord {
                covariate: name.clone(),
                smd_unweighted: standardized_mean_difference(x, &data.exposure, None).map_err(err)?,
                smd_weighted: standardized_mean_difference(x, &data.exposure, Some(weights)).map_err(err)?,
            })
        })
        .collect()
}

pub fn run_full_analysis(data: &Dataset, config: &AnalysisConfig) -> Result<FullAnalysis, PipelineError> {
    let prepared = PreparedData::new(data, config)?;
    run_full_prepared(&prepared, config)
}

fn run_full_prepared(
    prepared: &PreparedData,
    config: &AnalysisConfig,
) -> Result<FullAnalysis, PipelineError> {
    let all: Vec<&str> = config.covariates.iter().map(String::as_str).collect();
    let fit = fit_effect(prepared, &all, config)?;
    let balance = balance_table(prepared, &fit.weights)?;
    Ok(FullAnalysis {
        full: full_record(&fit.effect),
        fit,
        balance,
        missing: prepared.missing.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct ObservedBiasAnalysis {
    pub full: FullAnalysis,
    /// Full-model record first, then one record per drop-list entry.
    pub records: Vec<ObservedBiasRecord>,
}

fn oce_against(
    full: &ObservedBiasRecord,
    lcl: f64,
    ucl: f64,
    config: &AnalysisConfig,
) -> Result<f64, String> {
    observed_covariate_evalue(
        full.lcl,
        full.ucl,
        lcl,
        ucl,
        Scale::HazardRatio,
        config.outcome_common,
    )
    .map_err(|e| e.to_string())
}

fn refit_record(
    prepared: &PreparedData,
    config: &AnalysisConfig,
    full: &ObservedBiasRecord,
    entry: &DropEntry,
) -> ObservedBiasRecord {
    let keep: Vec<&str> = config
        .covariates
        .iter()
        .filter(|c| !entry.columns.contains(c))
        .map(String::as_str)
        .collect();
    let fitted = fit_effect(prepared, &keep, config).and_then(|fit| {
        let e = fit.effect;
        let oce = oce_against(full, e.lcl, e.ucl, config).map_err(stage_err(Stage::Outcome))?;
        Ok(ObservedBiasRecord {
            label: entry.label.clone(),
            kind: entry.kind,
            estimate: e.estimate,
            lcl: e.lcl,
            ucl: e.ucl,
            oce: Some(oce),
            error: None,
        })
    });
    fitted.unwrap_or_else(|err| {
        log::warn!("refit without '{}' failed: {err}", entry.label);
        ObservedBiasRecord::failed(&entry.label, entry.kind, err.to_string())
    })
}

/// Runs the full analysis and every leave-covariate-out / leave-group-out
/// refit. A failed refit becomes a record carrying the error.
pub fn run_observed_bias(
    data: &Dataset,
    config: &AnalysisConfig,
    workers: usize,
) -> Result<ObservedBiasAnalysis, PipelineError> {
    let prepared = PreparedData::new(data, config)?;
    let full = run_full_prepared(&prepared, config)?;
    let entries = config.drop_list();
    let refits = map_entries(&entries, workers, |entry| {
        refit_record(&prepared, config, &full.full, entry)
    });
    let mut records = Vec::with_capacity(entries.len() + 1);
    records.push(full.full.clone());
    records.extend(refits);
    Ok(ObservedBiasAnalysis { full, records })
}

#[cfg(feature = "parallel")]
fn map_entries<F>(entries: &[DropEntry], workers: usize, f: F) -> Vec<ObservedBiasRecord>
where
    F: Fn(&DropEntry) -> ObservedBiasRecord + Sync + Send,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return entries.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| entries.par_iter().map(&f).collect()),
        Err(e) => {
            log::warn!("could not start {workers} workers ({e}); running sequentially");
            entries.iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn map_entries<F>(entries: &[DropEntry], _workers: usize, f: F) -> Vec<ObservedBiasRecord>
where
    F: Fn(&DropEntry) -> ObservedBiasRecord,
{
    entries.iter().map(f).collect()
}

/// Shifted copies of the full effect: one divided by its limiting bound
/// (the lower limit lands on 1) and one divided by the point estimate.
pub fn tip_rows(full: &ObservedBiasRecord, config: &AnalysisConfig) -> [ObservedBiasRecord; 2] {
    let tip = |label: &str, by: f64| {
        let (estimate, lcl, ucl) = (full.estimate / by, full.lcl / by, full.ucl / by);
        let oce = oce_against(full, lcl, ucl, config);
        ObservedBiasRecord {
            label: label.to_string(),
            kind: RecordKind::Tip,
            estimate,
            lcl,
            ucl,
            oce: oce.as_ref().ok().copied(),
            error: oce.err(),
        }
    };
    [
        tip(TIP_LB_LABEL, limiting_bound(full.lcl, full.ucl)),
        tip(TIP_POINT_LABEL, full.estimate),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortKey {
    Estimate,
    #[default]
    Lcl,
    Ucl,
    Oce,
}

impl FromStr for SortKey {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "estimate" | "point_estimate" => Ok(SortKey::Estimate),
            "lcl" | "lb" => Ok(SortKey::Lcl),
            "ucl" | "ub" => Ok(SortKey::Ucl),
            "oce" | "e_value" => Ok(SortKey::Oce),
            other => Err(PipelineError::Config(config_err(
                "order_by",
                format!("unknown field '{other}' (expected estimate, lcl, ucl, oce)"),
            ))),
        }
    }
}

impl SortKey {
    fn value(self, r: &ObservedBiasRecord) -> f64 {
        match self {
            SortKey::Estimate => r.estimate,
            SortKey::Lcl => r.lcl,
            SortKey::Ucl => r.ucl,
            SortKey::Oce => r.oce.unwrap_or(f64::NAN),
        }
    }
}

/// Stable ascending sort on `by`; equal keys fall back to label order and
/// missing values go last.
pub fn order_records(records: &[ObservedBiasRecord], by: SortKey) -> Vec<ObservedBiasRecord> {
    let mut out = records.to_vec();
    out.sort_by(|a, b| {
        let (ka, kb) = (by.value(a), by.value(b));
        match (ka.is_nan(), kb.is_nan()) {
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            (true, true) => std::cmp::Ordering::Equal,
            (false, false) => ka.total_cmp(&kb),
        }
        .then_with(|| a.label.cmp(&b.label))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(label: &str, kind: RecordKind, e: f64, l: f64, u: f64) -> ObservedBiasRecord {
        ObservedBiasRecord {
            label: label.into(),
            kind,
            estimate: e,
            lcl: l,
            ucl: u,
            oce: None,
            error: None,
        }
    }

    #[test]
    fn overlap_weight_rule() {
        assert_eq!(
            overlap_weights(&[0.5, 0.5], &[true, false]).unwrap(),
            vec![0.5, 0.5]
        );
        assert_abs_diff_eq!(overlap_weights(&[0.8], &[true]).unwrap()[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(
            overlap_weights(&[0.8], &[false]).unwrap()[0],
            0.8,
            epsilon = 1e-15
        );
        assert!(matches!(
            overlap_weights(&[0.3, 1.0], &[true, false]),
            Err(BalanceError::Probability { row: 1, .. })
        ));
        assert!(overlap_weights(&[0.3], &[true, false]).is_err());
    }

    #[test]
    fn smd_examples() {
        let z = [true, true, false, false];
        assert_eq!(
            standardized_mean_difference(&[1.0, 2.0, 1.0, 2.0], &z, None).unwrap(),
            0.0
        );
        // arm means 1 and 0, both sample variances 1
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let x = [1.0 - h, 1.0 + h, -h, h];
        assert_abs_diff_eq!(
            standardized_mean_difference(&x, &z, None).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_eq!(
            standardized_mean_difference(&[1.0, 1.0, 1.0, 1.0], &z, None),
            Err(BalanceError::ZeroVariance)
        );
        assert_eq!(
            standardized_mean_difference(&[1.0, 2.0], &[true, true], None),
            Err(BalanceError::EmptyArm)
        );
    }

    #[test]
    fn weighted_smd_keeps_unweighted_denominator() {
        let z = [true, true, false, false];
        let x = [0.0, 2.0, 0.0, 2.0];
        let w = [1.0, 3.0, 1.0, 1.0];
        // weighted means 1.5 and 1.0, pooled sd sqrt(2)
        assert_abs_diff_eq!(
            standardized_mean_difference(&x, &z, Some(&w)).unwrap(),
            0.5 / 2f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn config_validation() {
        let ok = AnalysisConfig::new("z", "t", "d", &["a", "b"]).with_group("ab", &["a", "b"]);
        assert!(ok.validate().is_ok());
        let bad = AnalysisConfig::new("z", "t", "d", &["a"]).with_group("g", &["a", "zz"]);
        let err = bad.validate().unwrap_err();
        assert_eq!(err.field, "groups.g");
        assert!(err.message.contains("zz"));
        assert!(AnalysisConfig::new("z", "z", "d", &[]).validate().is_err());
        assert!(AnalysisConfig::new("z", "t", "d", &["a", "a"])
            .validate()
            .is_err());
        let mut lvl = AnalysisConfig::new("z", "t", "d", &[]);
        lvl.ci_level = 1.5;
        assert_eq!(lvl.validate().unwrap_err().field, "ci_level");
    }

    #[test]
    fn drop_list_order() {
        let c = AnalysisConfig::new("z", "t", "d", &["a", "b", "c"])
            .with_group("second", &["c"])
            .with_group("first", &["a", "b"]);
        let labels: Vec<_> = c.drop_list().into_iter().map(|e| e.label).collect();
        assert_eq!(labels, ["a", "b", "c", "second", "first"]);
    }

    #[test]
    fn tip_rows_shift_to_null() {
        let config = AnalysisConfig::new("z", "t", "d", &[]);
        let full = rec(FULL_LABEL, RecordKind::Full, 1.24, 1.11, 1.37);
        let [lb, pt] = tip_rows(&full, &config);
        assert_eq!(lb.lcl, 1.0);
        assert_abs_diff_eq!(lb.estimate, 1.24 / 1.11, epsilon = 1e-15);
        assert_abs_diff_eq!(lb.ucl, 1.37 / 1.11, epsilon = 1e-15);
        assert_eq!(pt.estimate, 1.0);
        assert_eq!(lb.kind, RecordKind::Tip);

        // risk-ratio scale: Tip LB OCE is exactly the CI E-value
        let effect = EffectEstimate::new(1.24, 1.11, 1.37, Scale::RiskRatio, false).unwrap();
        assert_eq!(lb.oce.unwrap(), crate::evalue::evalue(&effect).evalue_ci);

        let mut common = config.clone();
        common.outcome_common = true;
        let [lb_hr, _] = tip_rows(&full, &common);
        assert_abs_diff_eq!(lb_hr.oce.unwrap(), 1.36, epsilon = 0.005);
    }

    #[test]
    fn ordering_rules() {
        let a = rec("a", RecordKind::Covariate, 1.2, 1.1, 1.3);
        let b = rec("b", RecordKind::Group, 1.2, 1.0, 1.3);
        let c = rec("c", RecordKind::Tip, 1.2, 1.2, 1.3);
        let sorted = order_records(&[b.clone(), a.clone(), c.clone()], SortKey::Lcl);
        assert_eq!(
            sorted.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            ["b", "a", "c"]
        );
        assert_eq!(order_records(&sorted, SortKey::Lcl), sorted);

        let x = rec("x", RecordKind::Covariate, 1.0, 1.0, 1.0);
        let y = rec("w", RecordKind::Tip, 1.0, 1.0, 1.0);
        let tied = order_records(&[x, y], SortKey::Estimate);
        assert_eq!(tied[0].label, "w");

        let failed = ObservedBiasRecord::failed("f", RecordKind::Covariate, "boom".into());
        let with_failed = order_records(&[failed, a], SortKey::Lcl);
        assert_eq!(with_failed[1].label, "f");

        assert!("bogus".parse::<SortKey>().is_err());
        assert_eq!("lb".parse::<SortKey>().unwrap(), SortKey::Lcl);
    }
}
