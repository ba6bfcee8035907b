//! Deterministic SVG figures.
//!
//! Output depends only on the inputs: coordinates are printed with two
//! decimals and elements are emitted in input order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalue::evalue_rr;
use crate::pipeline::{BalanceRecord, ObservedBiasRecord, RecordKind};

const TOP: f64 = 60.0;
const BOTTOM: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlotError {
    #[error("theme field '{field}': '{value}' is not a #rrggbb colour")]
    Colour { field: &'static str, value: String },
    #[error("theme field '{field}' must be positive, got {value}")]
    Dimension { field: &'static str, value: f64 },
    #[error("nothing to plot")]
    Empty,
    #[error("non-positive value {0} on a log axis")]
    LogDomain(f64),
    #[error("invalid plot range: {0}")]
    Range(String),
}

/// Canvas size, font and colours used by every figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotTheme {
    pub width: f64,
    pub row_height: f64,
    pub font_family: String,
    pub font_size: f64,
    pub full_band_color: String,
    pub full_line_color: String,
    pub point_range_color: String,
    pub covariate_color: String,
    pub group_color: String,
    pub tip_color: String,
    pub null_line_color: String,
    pub text_color: String,
    pub unweighted_color: String,
    pub weighted_color: String,
}

impl Default for PlotTheme {
    fn default() -> Self {
        Self {
            width: 900.0,
            row_height: 30.0,
            font_family: "sans-serif".into(),
            font_size: 12.0,
            full_band_color: "#add8e6".into(),
            full_line_color: "#1f5fbf".into(),
            point_range_color: "#333333".into(),
            covariate_color: "#7b3294".into(),
            group_color: "#e66101".into(),
            tip_color: "#d7191c".into(),
            null_line_color: "#000000".into(),
            text_color: "#222222".into(),
            unweighted_color: "#d7191c".into(),
            weighted_color: "#2c7bb6".into(),
        }
    }
}

fn valid_colour(s: &str) -> bool {
    s.len() == 7 && s.starts_with('#') && s[1..].chars().all(|c| c.is_ascii_hexdigit())
}

impl PlotTheme {
    pub fn validate(&self) -> Result<(), PlotError> {
        let colours = [
            ("full_band_color", &self.full_band_color),
            ("full_line_color", &self.full_line_color),
            ("point_range_color", &self.point_range_color),
            ("covariate_color", &self.covariate_color),
            ("group_color", &self.group_color),
            ("tip_color", &self.tip_color),
            ("null_line_color", &self.null_line_color),
            ("text_color", &self.text_color),
            ("unweighted_color", &self.unweighted_color),
            ("weighted_color", &self.weighted_color),
        ];
        for (field, value) in colours {
            if !valid_colour(value) {
                return Err(PlotError::Colour {
                    field,
                    value: value.clone(),
                });
            }
        }
        let dims = [
            ("width", self.width),
            ("row_height", self.row_height),
            ("font_size", self.font_size),
        ];
        for (field, value) in dims {
            if !(value.is_finite() && value > 0.0) {
                return Err(PlotError::Dimension { field, value });
            }
        }
        Ok(())
    }

    fn kind_color(&self, kind: RecordKind) -> &str {
        match kind {
            RecordKind::Covariate => &self.covariate_color,
            RecordKind::Group => &self.group_color,
            RecordKind::Tip => &self.tip_color,
            RecordKind::Full => &self.full_line_color,
        }
    }

    fn height(&self, rows: usize) -> f64 {
        self.row_height * rows as f64 + TOP + BOTTOM
    }

    fn row_y(&self, i: usize) -> f64 {
        TOP + self.row_height * (i as f64 + 0.5)
    }

    fn label_right(&self) -> f64 {
        self.width * 0.375
    }

    fn panel_a(&self) -> (f64, f64) {
        (self.width * 0.395, self.width * 0.71)
    }

    fn panel_b(&self) -> (f64, f64) {
        (self.width * 0.755, self.width * 0.975)
    }
}

/// Affine map from a data interval to a pixel interval, optionally on the
/// log of the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearScale {
    d0: f64,
    d1: f64,
    r0: f64,
    r1: f64,
    log: bool,
}

impl LinearScale {
    pub fn new(domain: (f64, f64), range: (f64, f64)) -> Result<Self, PlotError> {
        Self::build(domain, range, false)
    }

    pub fn log(domain: (f64, f64), range: (f64, f64)) -> Result<Self, PlotError> {
        for v in [domain.0, domain.1] {
            if !(v > 0.0) {
                return Err(PlotError::LogDomain(v));
            }
        }
        Self::build((domain.0.ln(), domain.1.ln()), range, true)
    }

    fn build(domain: (f64, f64), range: (f64, f64), log: bool) -> Result<Self, PlotError> {
        if !(domain.0.is_finite() && domain.1.is_finite() && domain.1 > domain.0) {
            return Err(PlotError::Range(format!("domain {:?}", domain)));
        }
        Ok(Self {
            d0: domain.0,
            d1: domain.1,
            r0: range.0,
            r1: range.1,
            log,
        })
    }

    pub fn map(&self, v: f64) -> f64 {
        let v = if self.log { v.ln() } else { v };
        self.r0 + (v - self.d0) / (self.d1 - self.d0) * (self.r1 - self.r0)
    }

    pub fn domain(&self) -> (f64, f64) {
        if self.log {
            (self.d0.exp(), self.d1.exp())
        } else {
            (self.d0, self.d1)
        }
    }

    /// Roughly five round-numbered ticks inside the domain.
    pub fn ticks(&self) -> Vec<f64> {
        let (lo, hi) = self.domain();
        let step = nice_step((hi - lo) / 5.0);
        let start = (lo / step).ceil() as i64;
        let end = (hi / step).floor() as i64;
        (start..=end).map(|k| k as f64 * step).collect()
    }
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let s = format!("{:.*}", decimals, v);
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn escape_xml(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

struct Svg {
    buf: String,
}

impl Svg {
    fn new(width: f64, height: f64, theme: &PlotTheme) -> Self {
        let mut buf = String::new();
        let _ = writeln!(
            buf,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="{f}" font-size="{s:.2}" fill="{c}">"#,
            w = width,
            h = height,
            f = escape_xml(&theme.font_family),
            s = theme.font_size,
            c = theme.text_color,
        );
        let _ = writeln!(
            buf,
            r##"<rect class="background" x="0" y="0" width="{width:.0}" height="{height:.0}" fill="#ffffff"/>"##
        );
        Self { buf }
    }

    fn line(&mut self, class: &str, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, extra: &str) {
        let _ = writeln!(
            self.buf,
            r#"<line class="{class}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"{extra}/>"#
        );
    }

    fn circle(&mut self, class: &str, cx: f64, cy: f64, r: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.buf,
            r#"<circle class="{class}" cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}" stroke="{stroke}"/>"#
        );
    }

    fn rect(&mut self, class: &str, x: f64, y: f64, w: f64, h: f64, fill: &str, extra: &str) {
        let _ = writeln!(
            self.buf,
            r#"<rect class="{class}" x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"{extra}/>"#
        );
    }

    fn text(&mut self, class: &str, x: f64, y: f64, anchor: &str, content: &str, extra: &str) {
        let _ = writeln!(
            self.buf,
            r#"<text class="{class}" x="{x:.2}" y="{y:.2}" text-anchor="{anchor}"{extra}>{}</text>"#,
            escape_xml(content)
        );
    }

    fn raw(&mut self, s: &str) {
        self.buf.push_str(s);
        self.buf.push('\n');
    }

    fn finish(mut self) -> String {
        self.buf.push_str("</svg>\n");
        self.buf
    }
}

fn x_axis(svg: &mut Svg, scale: &LinearScale, y: f64, title: &str) {
    let (lo, hi) = scale.domain();
    let (x0, x1) = (scale.map(lo), scale.map(hi));
    svg.line("axis", x0, y, x1, y, "#444444", "");
    let ticks = scale.ticks();
    let step = if ticks.len() > 1 {
        ticks[1] - ticks[0]
    } else {
        hi - lo
    };
    for t in ticks {
        let x = scale.map(t);
        svg.line("tick", x, y, x, y + 5.0, "#444444", "");
        svg.text("tick-label", x, y + 18.0, "middle", &tick_label(t, step), "");
    }
    svg.text("axis-title", (x0 + x1) / 2.0, y + 38.0, "middle", title, "");
}

/// Options for [`observed_bias_plot`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiasPlotOptions {
    pub log_axis: bool,
    pub theme: PlotTheme,
}

fn padded(lo: f64, hi: f64, log: bool) -> (f64, f64) {
    if log {
        let (a, b) = (lo.ln(), hi.ln());
        let pad = ((b - a) * 0.05).max(1e-3);
        ((a - pad).exp(), (b + pad).exp())
    } else {
        let pad = ((hi - lo) * 0.05).max(1e-3);
        (lo - pad, hi + pad)
    }
}

/// Axis scales of the observed bias plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasLayout {
    pub panel_a: LinearScale,
    /// Starts at 1 on the left edge.
    pub panel_b: LinearScale,
}

fn plottable(r: &ObservedBiasRecord) -> bool {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    r.is_ok() && ok(r.lcl) && ok(r.estimate) && ok(r.ucl)
}

pub fn bias_plot_layout(
    full: &ObservedBiasRecord,
    rows: &[ObservedBiasRecord],
    options: &BiasPlotOptions,
) -> Result<BiasLayout, PlotError> {
    let mut lo = 1f64.min(full.lcl);
    let mut hi = 1f64.max(full.ucl);
    let mut oce_hi = 1f64;
    for r in rows.iter().filter(|r| plottable(r)) {
        lo = lo.min(r.lcl);
        hi = hi.max(r.ucl);
        if let Some(o) = r.oce.filter(|o| o.is_finite()) {
            oce_hi = oce_hi.max(o);
        }
    }
    if !(lo.is_finite() && lo > 0.0 && hi.is_finite()) {
        return Err(PlotError::Range(format!("[{lo}, {hi}]")));
    }
    let theme = &options.theme;
    let domain_a = padded(lo, hi, options.log_axis);
    let panel_a = if options.log_axis {
        LinearScale::log(domain_a, theme.panel_a())?
    } else {
        LinearScale::new(domain_a, theme.panel_a())?
    };
    let oce_top = if oce_hi > 1.0 {
        1.0 + (oce_hi - 1.0) * 1.1
    } else {
        1.1
    };
    let panel_b = LinearScale::new((1.0, oce_top), theme.panel_b())?;
    Ok(BiasLayout { panel_a, panel_b })
}

/// Row label shown on the figure.
pub fn display_label(r: &ObservedBiasRecord) -> String {
    match r.kind {
        RecordKind::Covariate | RecordKind::Group => format!("Dropped {}", r.label),
        RecordKind::Tip | RecordKind::Full => r.label.clone(),
    }
}

/// Two-panel figure. Panel A shows each refit interval against the full
/// model band and the null line at 1; Panel B shows the observed covariate
/// E-value of each row. Rows appear in the order given.
pub fn observed_bias_plot(
    full: &ObservedBiasRecord,
    rows: &[ObservedBiasRecord],
    options: &BiasPlotOptions,
) -> Result<String, PlotError> {
    let theme = &options.theme;
    theme.validate()?;
    if rows.is_empty() {
        return Err(PlotError::Empty);
    }
    let BiasLayout {
        panel_a: xa,
        panel_b: xb,
    } = bias_plot_layout(full, rows, options)?;
    let plot_top = TOP;
    let plot_bottom = TOP + theme.row_height * rows.len() as f64;
    let mut svg = Svg::new(theme.width, theme.height(rows.len()), theme);
    let bold = " font-weight=\"bold\"";
    svg.text(
        "title",
        theme.panel_a().0,
        24.0,
        "start",
        "A. Observed bias effect",
        bold,
    );
    svg.text(
        "title",
        theme.panel_b().0,
        24.0,
        "start",
        "B. Observed covariate E-value",
        bold,
    );

    let (band_l, band_u) = (xa.map(full.lcl), xa.map(full.ucl));
    svg.rect(
        "full-band",
        band_l,
        plot_top,
        band_u - band_l,
        plot_bottom - plot_top,
        &theme.full_band_color,
        " fill-opacity=\"0.5\"",
    );
    let x_full = xa.map(full.estimate);
    svg.line(
        "full-estimate",
        x_full,
        plot_top,
        x_full,
        plot_bottom,
        &theme.full_line_color,
        " stroke-width=\"2\"",
    );
    let x_null = xa.map(1.0);
    svg.line(
        "null-line",
        x_null,
        plot_top - 6.0,
        x_null,
        plot_bottom + 6.0,
        &theme.null_line_color,
        " stroke-dasharray=\"4 3\"",
    );

    for (i, r) in rows.iter().enumerate() {
        let y = theme.row_y(i);
        svg.raw(&format!(
            r#"<g class="row" data-kind="{}" data-label="{}">"#,
            r.kind,
            escape_xml(&r.label)
        ));
        svg.text(
            "label",
            theme.label_right(),
            y + 4.0,
            "end",
            &display_label(r),
            "",
        );
        if plottable(r) {
            let c = &theme.point_range_color;
            svg.line("ci", xa.map(r.lcl), y, xa.map(r.ucl), y, c, " stroke-width=\"2\"");
            svg.circle("estimate", xa.map(r.estimate), y, 3.5, c, c);
            if let Some(o) = r.oce.filter(|o| o.is_finite()) {
                let kc = theme.kind_color(r.kind);
                svg.circle("oce", xb.map(o), y, 4.5, kc, kc);
            }
        } else {
            svg.text(
                "failed",
                theme.panel_a().0 + 4.0,
                y + 4.0,
                "start",
                "refit failed",
                " font-style=\"italic\"",
            );
        }
        svg.raw("</g>");
    }

    let axis_title = if options.log_axis {
        "Hazard ratio (log scale)"
    } else {
        "Hazard ratio"
    };
    x_axis(&mut svg, &xa, plot_bottom + 8.0, axis_title);
    x_axis(&mut svg, &xb, plot_bottom + 8.0, "Observed covariate E-value");
    Ok(svg.finish())
}

/// Absolute standardized mean differences before and after weighting, one
/// row per covariate, largest unweighted imbalance first.
pub fn love_plot(balance: &[BalanceRecord], theme: &PlotTheme) -> Result<String, PlotError> {
    theme.validate()?;
    if balance.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut rows: Vec<&BalanceRecord> = balance.iter().collect();
    rows.sort_by(|a, b| {
        b.smd_unweighted
            .abs()
            .total_cmp(&a.smd_unweighted.abs())
            .then_with(|| a.covariate.cmp(&b.covariate))
    });
    let mut extent = 0.1f64;
    for b in &rows {
        for v in [b.smd_unweighted, b.smd_weighted] {
            if v.is_finite() {
                extent = extent.max(v.abs());
            }
        }
    }
    let left = theme.label_right() + 20.0;
    let scale = LinearScale::new((0.0, extent * 1.1), (left, theme.width - 40.0))?;
    let plot_bottom = TOP + theme.row_height * rows.len() as f64;
    let mut svg = Svg::new(theme.width, theme.height(rows.len()), theme);

    svg.text(
        "title",
        left,
        24.0,
        "start",
        "Covariate balance",
        " font-weight=\"bold\"",
    );
    let legend_x = theme.width - 280.0;
    svg.circle(
        "legend-unweighted",
        legend_x,
        20.0,
        4.0,
        &theme.unweighted_color,
        &theme.unweighted_color,
    );
    svg.text("legend", legend_x + 10.0, 24.0, "start", "Unweighted", "");
    svg.circle(
        "legend-weighted",
        legend_x + 110.0,
        20.0,
        4.0,
        &theme.weighted_color,
        &theme.weighted_color,
    );
    svg.text("legend", legend_x + 120.0, 24.0, "start", "Overlap weighted", "");

    let x0 = scale.map(0.0);
    svg.line("zero-line", x0, TOP - 6.0, x0, plot_bottom, "#888888", "");
    let xt = scale.map(0.1);
    svg.line(
        "threshold",
        xt,
        TOP - 6.0,
        xt,
        plot_bottom + 6.0,
        &theme.null_line_color,
        " stroke-dasharray=\"4 3\"",
    );
    for (i, b) in rows.iter().enumerate() {
        let y = theme.row_y(i);
        svg.text("label", theme.label_right(), y + 4.0, "end", &b.covariate, "");
        if b.smd_unweighted.is_finite() {
            let c = &theme.unweighted_color;
            svg.circle("unweighted", scale.map(b.smd_unweighted.abs()), y, 4.0, c, c);
        }
        if b.smd_weighted.is_finite() {
            let c = &theme.weighted_color;
            svg.circle("weighted", scale.map(b.smd_weighted.abs()), y, 4.0, c, c);
        }
    }
    x_axis(
        &mut svg,
        &scale,
        plot_bottom + 8.0,
        "Absolute standardized mean difference",
    );
    Ok(svg.finish())
}

/// Curve of (RR_EU, RR_UD) pairs that exactly explain away the bound `lb`.
pub fn tipping_curve_plot(lb: f64, max_rr: f64, theme: &PlotTheme) -> Result<String, PlotError> {
    theme.validate()?;
    if !(lb.is_finite() && lb > 1.0) {
        return Err(PlotError::Range(format!("bound must exceed 1, got {lb}")));
    }
    let e = evalue_rr(lb);
    if !(max_rr.is_finite() && max_rr > e) {
        return Err(PlotError::Range(format!(
            "axis limit {max_rr} must exceed the E-value {e:.4}"
        )));
    }
    let (left, right, top, bottom) = (80.0, theme.width - 40.0, 50.0, 470.0);
    let x = LinearScale::new((1.0, max_rr), (left, right))?;
    let y = LinearScale::new((1.0, max_rr), (bottom, top))?;
    let mut svg = Svg::new(theme.width, 540.0, theme);
    svg.text(
        "title",
        left,
        28.0,
        "start",
        &format!("Confounder strength needed to move {lb:.3} to 1"),
        " font-weight=\"bold\"",
    );

    // RR_UD = lb (RR_EU - 1) / (RR_EU - lb), starting where it enters the box
    let rr_eu_min = lb * (max_rr - 1.0) / (max_rr - lb);
    let steps = 200;
    let mut d = String::new();
    for k in 0..=steps {
        let rr_eu = rr_eu_min + (max_rr - rr_eu_min) * k as f64 / steps as f64;
        let rr_ud = (lb * (rr_eu - 1.0) / (rr_eu - lb)).min(max_rr);
        let _ = write!(
            d,
            "{}{:.2},{:.2}",
            if k == 0 { "M" } else { " L" },
            x.map(rr_eu),
            y.map(rr_ud)
        );
    }
    svg.rect(
        "frame",
        left,
        top,
        right - left,
        bottom - top,
        "#ffffff",
        " stroke=\"#cccccc\"",
    );
    svg.raw(&format!(
        r#"<path class="tipping-curve" d="{d}" fill="none" stroke="{}" stroke-width="2"/>"#,
        theme.tip_color
    ));
    svg.circle(
        "evalue-point",
        x.map(e),
        y.map(e),
        5.0,
        &theme.full_line_color,
        &theme.full_line_color,
    );
    svg.text(
        "evalue-label",
        x.map(e) + 8.0,
        y.map(e) - 8.0,
        "start",
        &format!("E-value {e:.3}"),
        "",
    );
    x_axis(&mut svg, &x, bottom, "Exposure-confounder risk ratio");
    let ticks = y.ticks();
    let step = if ticks.len() > 1 { ticks[1] - ticks[0] } else { 1.0 };
    svg.line("axis", left, bottom, left, top, "#444444", "");
    for t in ticks {
        let py = y.map(t);
        svg.line("tick", left - 5.0, py, left, py, "#444444", "");
        svg.text(
            "tick-label",
            left - 8.0,
            py + 4.0,
            "end",
            &tick_label(t, step),
            "",
        );
    }
    let mid = (top + bottom) / 2.0;
    svg.text(
        "axis-title",
        20.0,
        mid,
        "middle",
        "Confounder-outcome risk ratio",
        &format!(" transform=\"rotate(-90 20 {mid:.2})\""),
    );
    Ok(svg.finish())
}
