//! Browser bindings. Each export wraps a plain function that returns
//! `Result<String, String>` so the logic can be tested off the browser.

use obsbias_core::evalue::{evalue, evalue_rr, limiting_bound, to_risk_ratio_scale, EffectEstimate, Scale};
use obsbias_core::pipeline::{order_records, run_observed_bias, tip_rows, AnalysisConfig};
use obsbias_core::plot::{observed_bias_plot, tipping_curve_plot, BiasPlotOptions, PlotTheme};
use obsbias_core::synth::{generate, SynthSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

/// E-values of an estimate and interval as a JSON string.
pub fn evalue_report(
    estimate: f64,
    lcl: f64,
    ucl: f64,
    scale: &str,
    outcome_common: bool,
) -> Result<String, String> {
    let scale: Scale = scale
        .parse()
        .map_err(|e: obsbias_core::evalue::EvalueError| e.to_string())?;
    let effect = EffectEstimate::new(estimate, lcl, ucl, scale, outcome_common).map_err(|e| e.to_string())?;
    let e = evalue(&effect);
    let bound =
        to_risk_ratio_scale(limiting_bound(lcl, ucl), scale, outcome_common).map_err(|e| e.to_string())?;
    let value = json!({
        "evalue_point": e.evalue_point,
        "evalue_ci": e.evalue_ci,
        "covers_null": effect.covers_null(),
        "limiting_bound_rr": bound,
    });
    Ok(value.to_string())
}

/// Tipping curve SVG for a limiting bound on the risk-ratio scale.
pub fn tipping_curve_svg(lb: f64, max_rr: f64) -> Result<String, String> {
    if !(lb.is_finite() && lb > 1.0) {
        return Err(format!("bound must exceed 1, got {lb}"));
    }
    let max_rr = if max_rr.is_finite() && max_rr > lb {
        max_rr
    } else {
        3.0 * evalue_rr(lb)
    };
    tipping_curve_plot(lb, max_rr, &PlotTheme::default()).map_err(|e| e.to_string())
}

/// Observed bias plot for a synthetic cohort with one planted confounder
/// and two noise covariates.
pub fn synthetic_bias_svg(
    n: u32,
    seed: u64,
    effect_on_exposure: f64,
    effect_on_hazard: f64,
    log_axis: bool,
) -> Result<String, String> {
    let spec = SynthSpec::new(n as usize, seed)
        .with_confounder("confounder", effect_on_exposure, effect_on_hazard)
        .with_nulls(2);
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let config = AnalysisConfig::new("exposure", "time", "event", &["confounder", "null1", "null2"])
        .with_group("Noise", &["null1", "null2"]);
    let out = run_observed_bias(&data, &config, 1).map_err(|e| e.to_string())?;
    let full = out.records[0].clone();
    let mut rows = out.records[1..].to_vec();
    rows.extend(tip_rows(&full, &config));
    let options = BiasPlotOptions {
        log_axis,
        ..BiasPlotOptions::default()
    };
    observed_bias_plot(&full, &order_records(&rows, config.order_by), &options).map_err(|e| e.to_string())
}

#[wasm_bindgen(js_name = evalueReport)]
pub fn evalue_report_js(
    estimate: f64,
    lcl: f64,
    ucl: f64,
    scale: &str,
    outcome_common: bool,
) -> Result<String, JsValue> {
    js(evalue_report(estimate, lcl, ucl, scale, outcome_common))
}

#[wasm_bindgen(js_name = tippingCurveSvg)]
pub fn tipping_curve_svg_js(lb: f64, max_rr: f64) -> Result<String, JsValue> {
    js(tipping_curve_svg(lb, max_rr))
}

#[wasm_bindgen(js_name = syntheticBiasSvg)]
pub fn synthetic_bias_svg_js(
    n: u32,
    seed: u32,
    effect_on_exposure: f64,
    effect_on_hazard: f64,
    log_axis: bool,
) -> Result<String, JsValue> {
    js(synthetic_bias_svg(
        n,
        seed.into(),
        effect_on_exposure,
        effect_on_hazard,
        log_axis,
    ))
}
