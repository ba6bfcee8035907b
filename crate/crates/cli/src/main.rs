use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use obsbias_core::evalue::{
    evalue, evalue_rr, observed_covariate_evalue, tip_rr_ud, tipping_condition, EffectEstimate, EvalueError,
    Scale,
};
use obsbias_core::io::{
    apply_rhc_preset, dataset_to_csv, read_config, read_csv, read_json, read_results, rhc_config,
    to_canonical_json, write_file, write_results, IoError, RunArtifact, SoftwareInfo,
};
use obsbias_core::pipeline::{order_records, run_observed_bias, tip_rows, ObservedBiasRecord, PipelineError};
use obsbias_core::plot::{love_plot, observed_bias_plot, BiasPlotOptions, PlotError};
use obsbias_core::synth::{generate, SynthSpec};
use serde_json::json;

const VALIDATION: u8 = 2;
const COMPUTATION: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "obsbias",
    version,
    about = "E-values, observed covariate E-values and observed bias plots"
)]
struct Cli {
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// E-values for a point estimate and its confidence interval.
    Evalue(EvalueArgs),
    /// Observed covariate E-value between two confidence intervals.
    Oce(OceArgs),
    /// Confounder-outcome association that tips a bound to the null.
    Tip(TipArgs),
    /// Full analysis, leave-one-out refits, result files and figures.
    Analyze(AnalyzeArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Redraw figures from a results file.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Rr,
    Or,
    Hr,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Rr => Scale::RiskRatio,
            ScaleArg::Or => Scale::OddsRatio,
            ScaleArg::Hr => Scale::HazardRatio,
        }
    }
}

#[derive(Debug, Args)]
struct EvalueArgs {
    #[arg(long)]
    estimate: f64,
    #[arg(long)]
    lcl: f64,
    #[arg(long)]
    ucl: f64,
    #[arg(long, value_enum, default_value = "rr")]
    scale: ScaleArg,
    /// Outcome prevalence above 15%.
    #[arg(long)]
    common_outcome: bool,
}

#[derive(Debug, Args)]
struct OceArgs {
    #[arg(long)]
    lb: f64,
    #[arg(long)]
    ub: f64,
    #[arg(long)]
    lb_adj: f64,
    #[arg(long)]
    ub_adj: f64,
    #[arg(long, value_enum, default_value = "rr")]
    scale: ScaleArg,
    #[arg(long)]
    common_outcome: bool,
}

#[derive(Debug, Args)]
struct TipArgs {
    /// Limiting bound on the risk-ratio scale.
    #[arg(long)]
    lb: f64,
    /// Exposure-confounder association; defaults to the E-value of `lb`.
    #[arg(long)]
    rr_eu: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Rhc,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    data: PathBuf,
    /// Analysis config JSON; optional with --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Results JSON; the records CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Observed bias plot SVG [default: <out>.bias.svg]
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Love plot SVG [default: <out>.love.svg]
    #[arg(long)]
    love: Option<PathBuf>,
    #[arg(long, env = "OBSBIAS_THREADS")]
    workers: Option<usize>,
    #[arg(long)]
    log_axis: bool,
    /// Record wall time in the results file.
    #[arg(long)]
    timing: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Generator spec JSON.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Results JSON written by `analyze`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    love: Option<PathBuf>,
    #[arg(long)]
    log_axis: bool,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn validation(message: impl std::fmt::Display) -> Self {
        Self {
            code: VALIDATION,
            message: message.to_string(),
        }
    }

    fn computation(message: impl std::fmt::Display) -> Self {
        Self {
            code: COMPUTATION,
            message: message.to_string(),
        }
    }
}

impl From<EvalueError> for CliError {
    fn from(e: EvalueError) -> Self {
        Self::validation(e)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::File { .. } => Self::computation(e),
            _ => Self::validation(e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Data(_) => Self::validation(e),
            PipelineError::Stage { .. } => Self::computation(e),
        }
    }
}

impl From<PlotError> for CliError {
    fn from(e: PlotError) -> Self {
        Self::computation(format!("plotting failed: {e}"))
    }
}

/// A missing or unreadable input is the caller's fault, unlike a failed write.
fn unreadable_input(e: IoError) -> CliError {
    match e {
        IoError::File { .. } => CliError::validation(e),
        other => other.into(),
    }
}

type CliResult = Result<String, CliError>;

fn emit(value: &serde_json::Value, pretty: bool, table: impl FnOnce() -> String) -> CliResult {
    if pretty {
        Ok(table())
    } else {
        to_canonical_json(value, false).map_err(CliError::computation)
    }
}

fn cmd_evalue(a: &EvalueArgs, pretty: bool) -> CliResult {
    let effect = EffectEstimate::new(a.estimate, a.lcl, a.ucl, a.scale.into(), a.common_outcome)?;
    let e = evalue(&effect);
    let value = json!({
        "estimate": effect.estimate,
        "lcl": effect.lcl,
        "ucl": effect.ucl,
        "scale": effect.scale,
        "outcome_common": effect.outcome_common,
        "evalue_point": e.evalue_point,
        "evalue_ci": e.evalue_ci,
    });
    emit(&value, pretty, || {
        format!(
            "E-value (point)  {:.4}\nE-value (CI)     {:.4}\n",
            e.evalue_point, e.evalue_ci
        )
    })
}

fn cmd_oce(a: &OceArgs, pretty: bool) -> CliResult {
    let oce = observed_covariate_evalue(a.lb, a.ub, a.lb_adj, a.ub_adj, a.scale.into(), a.common_outcome)?;
    emit(&json!({ "oce": oce }), pretty, || {
        format!("Observed covariate E-value  {oce:.6}\n")
    })
}

fn cmd_tip(a: &TipArgs, pretty: bool) -> CliResult {
    let rr_eu = a.rr_eu.unwrap_or_else(|| evalue_rr(a.lb));
    let rr_ud = tip_rr_ud(a.lb, rr_eu)?;
    let value = json!({
        "lb": a.lb,
        "rr_eu": rr_eu,
        "rr_ud": rr_ud,
        "adjusted_bound": tipping_condition(a.lb, rr_eu, rr_ud),
    });
    emit(&value, pretty, || {
        format!("RR_EU {rr_eu:.4}  needs RR_UD {rr_ud:.4}\n")
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn write_figures(artifact: &RunArtifact, plot: &Path, love: &Path, log_axis: bool) -> Result<(), CliError> {
    let options = BiasPlotOptions {
        log_axis,
        theme: artifact.config.theme.clone().unwrap_or_default(),
    };
    write_file(
        plot,
        &observed_bias_plot(&artifact.full, &artifact.records, &options)?,
    )?;
    if artifact.balance.is_empty() {
        log::warn!("no covariates, Love plot skipped");
    } else {
        write_file(love, &love_plot(&artifact.balance, &options.theme)?)?;
    }
    Ok(())
}

fn record_table(full: &ObservedBiasRecord, records: &[ObservedBiasRecord]) -> String {
    let width = records
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(0)
        .max(full.label.len());
    let mut out = format!(
        "{:<width$}  {:>9}  {:>6} {:>6} {:>6}  {:>6}\n",
        "label", "kind", "est", "lcl", "ucl", "oce"
    );
    for r in std::iter::once(full).chain(records) {
        let oce = r.oce.map_or_else(|| "-".to_string(), |o| format!("{o:.3}"));
        out.push_str(&format!(
            "{:<width$}  {:>9}  {:>6.3} {:>6.3} {:>6.3}  {:>6}\n",
            r.label,
            r.kind.as_str(),
            r.estimate,
            r.lcl,
            r.ucl,
            oce
        ));
    }
    out
}

fn cmd_analyze(a: &AnalyzeArgs, pretty: bool) -> CliResult {
    let started = Instant::now();
    let config = match (&a.config, a.preset) {
        (Some(path), _) => read_config(path).map_err(unreadable_input)?,
        (None, Some(Preset::Rhc)) => rhc_config(),
        (None, None) => {
            return Err(CliError::validation(
                "--config is required unless --preset is given",
            ))
        }
    };
    let mut loaded = read_csv(&a.data).map_err(unreadable_input)?;
    if let Some(Preset::Rhc) = a.preset {
        apply_rhc_preset(&mut loaded.data)?;
    }
    let workers = a.workers.unwrap_or_else(default_workers).max(1);
    let out = run_observed_bias(&loaded.data, &config, workers)?;
    let full = out.records[0].clone();
    let mut rows = out.records[1..].to_vec();
    rows.extend(tip_rows(&full, &config));
    let artifact = RunArtifact {
        software: SoftwareInfo {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        input_sha256: loaded.sha256,
        records: order_records(&rows, config.order_by),
        balance: out.full.balance,
        missing: out.full.missing,
        full,
        config,
        wall_time_seconds: a.timing.then(|| started.elapsed().as_secs_f64()),
    };
    let plot = a.plot.clone().unwrap_or_else(|| with_suffix(&a.out, ".bias.svg"));
    let love = a.love.clone().unwrap_or_else(|| with_suffix(&a.out, ".love.svg"));
    let csv = write_results(&artifact, &a.out, false)?;
    write_figures(&artifact, &plot, &love, a.log_axis)?;

    let failed = artifact.records.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} refits failed; see the error field in the results file");
    }
    let value = json!({
        "full": artifact.full,
        "records": artifact.records.len(),
        "failed_refits": failed,
        "outputs": {
            "results": a.out,
            "records_csv": csv,
            "plot": plot,
            "love": love,
        },
    });
    emit(&value, pretty, || record_table(&artifact.full, &artifact.records))
}

fn cmd_synth(a: &SynthArgs, pretty: bool) -> CliResult {
    let spec: SynthSpec = read_json(&a.spec).map_err(unreadable_input)?;
    let data = generate(&spec).map_err(CliError::validation)?;
    write_file(&a.out, &dataset_to_csv(&data))?;
    let exposed = data.column("exposure").map_or(0.0, |z| z.iter().sum::<f64>());
    let events = data.column("event").map_or(0.0, |d| d.iter().sum::<f64>());
    let value = json!({
        "rows": data.nrows(),
        "columns": data.names(),
        "exposed": exposed,
        "events": events,
        "out": a.out,
    });
    emit(&value, pretty, || {
        format!(
            "{} rows, {} exposed, {} events -> {}\n",
            data.nrows(),
            exposed,
            events,
            a.out.display()
        )
    })
}

fn cmd_plot(a: &PlotArgs, pretty: bool) -> CliResult {
    let artifact = read_results(&a.results).map_err(unreadable_input)?;
    let plot = a
        .plot
        .clone()
        .unwrap_or_else(|| with_suffix(&a.results, ".bias.svg"));
    let love = a
        .love
        .clone()
        .unwrap_or_else(|| with_suffix(&a.results, ".love.svg"));
    write_figures(&artifact, &plot, &love, a.log_axis)?;
    emit(&json!({ "plot": plot, "love": love }), pretty, || {
        format!("{}\n{}\n", plot.display(), love.display())
    })
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Evalue(a) => cmd_evalue(a, cli.pretty),
        Command::Oce(a) => cmd_oce(a, cli.pretty),
        Command::Tip(a) => cmd_tip(a, cli.pretty),
        Command::Analyze(a) => cmd_analyze(a, cli.pretty),
        Command::Synth(a) => cmd_synth(a, cli.pretty),
        Command::Plot(a) => cmd_plot(a, cli.pretty),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
