//! Acceptance criteria, one line per criterion.
//!
//! Run with `cargo test -p obsbias-cli --test acceptance`. The study-data
//! reproduction runs only when `OBSBIAS_RHC_CSV` points at the right heart
//! catheterization CSV; otherwise it reports SKIP and criterion 6 stands in.

use std::path::{Path, PathBuf};
use std::process::Command;

use obsbias_core::evalue::{
    evalue, evalue_rr, lin_adjust, observed_covariate_evalue, tip_rr_ud, tipping_condition, EffectEstimate,
    Scale, TipParameters,
};
use obsbias_core::glm::{fit_logistic, DesignMatrix};
use obsbias_core::io::{apply_rhc_preset, arm_counts, read_csv, rhc_config};
use obsbias_core::pipeline::{run_full_analysis, run_observed_bias, AnalysisConfig};
use obsbias_core::survival::{fit_cox, CoxObjective, SurvivalData, Ties};
use obsbias_core::synth::{generate, SynthSpec};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{name}: got {got}, want {want} +/- {tol}")
    })
}

fn criterion_1() -> Check {
    let hr = EffectEstimate::new(1.24, 1.11, 1.37, Scale::HazardRatio, true).map_err(|e| e.to_string())?;
    let e = evalue(&hr).evalue_ci;
    within("E-value of HR lcl 1.11", e, 1.36, 0.005)?;
    let oce = observed_covariate_evalue(1.11, 1.37, 1.00, 1.23, Scale::HazardRatio, true)
        .map_err(|e| e.to_string())?;
    within("OCE", oce, 1.358969, 1e-5)?;
    let params = TipParameters::new(9.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    let adj = lin_adjust(9.0, &params);
    within("lin_adjust(9; 9, 1, 0)", adj, 1.0, 1e-12)?;
    Ok(format!("E-value {e:.4}, OCE {oce:.6}, adjusted bound {adj}"))
}

fn criterion_2() -> Check {
    let mut worst_fixed: f64 = 0.0;
    let mut worst_eq: f64 = 0.0;
    for k in 0..50 {
        let lb = 1.01 + (10.0 - 1.01) * k as f64 / 49.0;
        let e = evalue_rr(lb);
        let rr_ud = tip_rr_ud(lb, e).map_err(|err| err.to_string())?;
        worst_fixed = worst_fixed.max((rr_ud - e).abs());
        worst_eq = worst_eq.max((tipping_condition(lb, e, rr_ud) - 1.0).abs());
    }
    ensure(worst_fixed <= 1e-9, || {
        format!("fixed point error {worst_fixed:e}")
    })?;
    ensure(worst_eq <= 1e-12, || {
        format!("tipping condition error {worst_eq:e}")
    })?;
    Ok(format!(
        "max |RR_UD - E| {worst_fixed:.1e}, max |condition - 1| {worst_eq:.1e}"
    ))
}

fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    while (b - a).abs() > 1e-12 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn criterion_3() -> Check {
    // logistic: 30/100 events when x = 0, 45/80 when x = 1
    let (n0, y0, n1, y1) = (100, 30, 80, 45);
    let x: Vec<f64> = (0..n0 + n1).map(|i| (i >= n0) as u8 as f64).collect();
    let y: Vec<f64> = (0..n0 + n1)
        .map(|i| {
            if i < n0 {
                (i < y0) as u8 as f64
            } else {
                (i - n0 < y1) as u8 as f64
            }
        })
        .collect();
    let design = DesignMatrix::with_intercept(x.len(), [("x".to_string(), x)]).map_err(|e| e.to_string())?;
    let fit = fit_logistic(&design, &y).map_err(|e| e.to_string())?;
    let logit = |k: f64, n: f64| (k / (n - k)).ln();
    let b0 = logit(y0 as f64, n0 as f64);
    let b1 = logit(y1 as f64, n1 as f64) - b0;
    let glm_err = (fit.coefficients[0] - b0)
        .abs()
        .max((fit.coefficients[1] - b1).abs());
    ensure(glm_err <= 1e-8, || format!("logistic 2x2 error {glm_err:e}"))?;

    // Breslow Cox on four observations against a golden-section search
    let time = vec![1.0, 2.0, 3.0, 4.0];
    let event = vec![true, true, false, true];
    let xs = vec![1.0, 0.0, 1.0, 0.0];
    let ll = |b: f64| {
        let mut total = 0.0;
        for i in 0..4 {
            if event[i] {
                let s0: f64 = (0..4)
                    .filter(|&j| time[j] >= time[i])
                    .map(|j| (b * xs[j]).exp())
                    .sum();
                total += b * xs[i] - s0.ln();
            }
        }
        total
    };
    let oracle = golden_section_max(ll, -10.0, 10.0);
    let d = DesignMatrix::new(4, vec!["x".into()], vec![xs.clone()]).map_err(|e| e.to_string())?;
    let data = SurvivalData::with_unit_weights(time, event, d).map_err(|e| e.to_string())?;
    let cox = fit_cox(&data, Ties::Breslow).map_err(|e| e.to_string())?;
    let cox_err = (cox.coefficients[0] - oracle).abs();
    ensure(cox_err <= 1e-6, || {
        format!("Cox beta {} vs oracle {oracle}", cox.coefficients[0])
    })?;

    // analytic gradient against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 60;
    let cols: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n).map(|_| uniform(&mut rng) * 2.0 - 1.0).collect())
        .collect();
    let t: Vec<f64> = (0..n)
        .map(|_| (1.0 + (uniform(&mut rng) * 8.0).floor()) / 2.0)
        .collect();
    let ev: Vec<bool> = (0..n).map(|_| uniform(&mut rng) < 0.7).collect();
    let w: Vec<f64> = (0..n).map(|_| 0.2 + uniform(&mut rng)).collect();
    let design =
        DesignMatrix::new(n, vec!["a".into(), "b".into(), "c".into()], cols).map_err(|e| e.to_string())?;
    let sd = SurvivalData::new(t, ev, design, w).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for ties in [Ties::Breslow, Ties::Efron] {
        let obj = CoxObjective::new(&sd, ties);
        for _ in 0..20 {
            let beta: Vec<f64> = (0..3).map(|_| uniform(&mut rng) * 2.0 - 1.0).collect();
            let g = obj.evaluate(&beta).gradient;
            for j in 0..3 {
                let h = 1e-5;
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (obj.loglik(&up) - obj.loglik(&dn)) / (2.0 * h);
                worst = worst.max((g[j] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("gradient relative error {worst:e}"))?;
    Ok(format!(
        "logistic {glm_err:.1e}, Cox beta vs oracle {cox_err:.1e}, gradient {worst:.1e}"
    ))
}

fn synth_config(spec: &SynthSpec) -> AnalysisConfig {
    let names = spec.covariate_names();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    AnalysisConfig::new("exposure", "time", "event", &refs)
}

fn criterion_4() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let spec = SynthSpec::new(3000, 100 + seed)
            .with_confounder("c1", 1.0, 0.5)
            .with_confounder("c2", -0.7, 0.8)
            .with_confounder("c3", 0.4, -0.3)
            .with_nulls(2);
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let full = run_full_analysis(&data, &synth_config(&spec)).map_err(|e| e.to_string())?;
        for b in &full.balance {
            worst = worst.max(b.smd_weighted.abs());
        }
    }
    ensure(worst < 1e-6, || format!("weighted SMD {worst:e}"))?;
    Ok(format!("max |weighted SMD| {worst:.1e} over 5 datasets"))
}

const PER_DROP: [(&str, [f64; 3]); 10] = [
    ("renalhx", [1.24, 1.11, 1.37]),
    ("gibledhx", [1.23, 1.10, 1.36]),
    ("transhx", [1.25, 1.12, 1.38]),
    ("aps1", [1.25, 1.12, 1.38]),
    ("wblc1", [1.24, 1.11, 1.37]),
    ("hrt1", [1.25, 1.13, 1.39]),
    ("pafi1", [1.25, 1.13, 1.38]),
    ("alb1", [1.24, 1.11, 1.37]),
    ("hema1", [1.23, 1.11, 1.37]),
    ("bili1", [1.24, 1.11, 1.37]),
];

fn two_dp(v: f64) -> String {
    format!("{v:.2}")
}

fn criterion_5(path: &Path) -> Check {
    let mut loaded = read_csv(path).map_err(|e| e.to_string())?;
    apply_rhc_preset(&mut loaded.data).map_err(|e| e.to_string())?;
    let arms = arm_counts(&loaded.data, "exposure").map_err(|e| e.to_string())?;
    ensure(
        arms.get(&true) == Some(&2184) && arms.get(&false) == Some(&3551),
        || format!("arms {arms:?}"),
    )?;
    let config = rhc_config();
    let out = run_observed_bias(&loaded.data, &config, 4).map_err(|e| e.to_string())?;
    let full = &out.records[0];
    let mut failures = Vec::new();
    if (full.estimate - 1.235202).abs() > 0.005 {
        failures.push(format!("HR {}", full.estimate));
    }
    if (full.lcl - 1.11277).abs() > 0.02 || (full.ucl - 1.371105).abs() > 0.02 {
        failures.push(format!("CI ({}, {})", full.lcl, full.ucl));
    }
    for (label, want) in PER_DROP {
        let r = out
            .records
            .iter()
            .find(|r| r.label == label)
            .ok_or(format!("no record {label}"))?;
        let got = [r.estimate, r.lcl, r.ucl].map(two_dp);
        if got != want.map(two_dp) {
            failures.push(format!("{label}: {got:?} vs {:?}", want.map(two_dp)));
        }
    }
    let dnr = out
        .records
        .iter()
        .find(|r| r.label == "dnr1")
        .ok_or("no dnr1 record")?;
    if two_dp(dnr.lcl) != "1.00" || two_dp(dnr.ucl) != "1.23" {
        failures.push(format!("dnr1 bounds ({}, {})", dnr.lcl, dnr.ucl));
    }
    let oce = dnr.oce.unwrap_or(f64::NAN);
    if oce.is_nan() || (oce - 1.36).abs() > 0.01 {
        failures.push(format!("dnr1 OCE {oce}"));
    }
    if failures.is_empty() {
        Ok(format!(
            "HR {:.6} ({:.5}, {:.5}); 10 drops match; dnr1 OCE {oce:.4}",
            full.estimate, full.lcl, full.ucl
        ))
    } else {
        Err(failures.join("; "))
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_obsbias")
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "obsbias {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

const OUTPUTS: [&str; 4] = ["r.json", "r.csv", "r.bias.svg", "r.love.svg"];

/// Writes a synthetic dataset and config, then runs `analyze` into `run`.
fn analyze_run(dir: &Path, run: &str, workers: &str) -> Result<PathBuf, String> {
    let out_dir = dir.join(run);
    std::fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
    let out = out_dir.join("r.json");
    run_cli(&[
        "analyze",
        "--data",
        dir.join("data.csv").to_str().unwrap(),
        "--config",
        dir.join("config.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        workers,
    ])?;
    Ok(out_dir)
}

fn prepare_cli_inputs(dir: &Path) -> Result<(), String> {
    write(
        &dir.join("spec.json"),
        r#"{"n": 3000, "seed": 17, "null_covariates": 2, "confounders": [
            {"name": "severity", "effect_on_exposure": 1.0, "effect_on_hazard": 1.0},
            {"name": "frailty", "effect_on_exposure": 0.4, "effect_on_hazard": -0.6}]}"#,
    )?;
    run_cli(&[
        "synth",
        "--spec",
        dir.join("spec.json").to_str().unwrap(),
        "--out",
        dir.join("data.csv").to_str().unwrap(),
    ])?;
    write(
        &dir.join("config.json"),
        r#"{"exposure": "exposure", "time": "time", "event": "event",
            "covariates": ["severity", "frailty", "null1", "null2"],
            "groups": {"Measured": ["severity", "frailty"], "Noise": ["null1", "null2"]},
            "outcome_common": true}"#,
    )
}

fn criterion_6(dir: &Path) -> Check {
    let mut worst_null: f64 = 0.0;
    for seed in 0..20 {
        let spec = SynthSpec::new(5000, 500 + seed)
            .with_confounder("conf", 0.5, 0.5)
            .with_nulls(3);
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let out = run_observed_bias(&data, &synth_config(&spec), 2).map_err(|e| e.to_string())?;
        for r in out.records.iter().filter(|r| r.label.starts_with("null")) {
            worst_null = worst_null.max(r.oce.ok_or(format!("seed {seed}: {} failed", r.label))?);
        }
    }
    ensure(worst_null < 1.1, || format!("null covariate OCE {worst_null}"))?;

    let mut planted = Vec::new();
    for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let spec = SynthSpec::new(5000, 9)
            .with_confounder("conf", a, b)
            .with_nulls(1);
        let data = generate(&spec).map_err(|e| e.to_string())?;
        let out = run_observed_bias(&data, &synth_config(&spec), 2).map_err(|e| e.to_string())?;
        let full = &out.records[0];
        let dropped = out
            .records
            .iter()
            .find(|r| r.label == "conf")
            .ok_or("no conf record")?;
        let oce = dropped.oce.unwrap_or(f64::NAN);
        ensure(oce > 1.1, || format!("planted ({a}, {b}) OCE {oce}"))?;
        // omitting a confounder biases toward the sign of the product of its effects
        let upward = a * b > 0.0;
        ensure((dropped.estimate > full.estimate) == upward, || {
            format!(
                "planted ({a}, {b}): estimate {} vs full {}",
                dropped.estimate, full.estimate
            )
        })?;
        planted.push(oce);
    }

    prepare_cli_inputs(dir)?;
    let one = analyze_run(dir, "w1", "1")?;
    let four = analyze_run(dir, "w4", "4")?;
    for f in OUTPUTS {
        ensure(read(&one.join(f))? == read(&four.join(f))?, || {
            format!("{f} differs between 1 and 4 workers")
        })?;
    }
    let min_planted = planted.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "max null OCE {worst_null:.4} over 20 seeds; min planted OCE {min_planted:.3}, directions match; \
         outputs identical for 1 and 4 workers"
    ))
}

fn criterion_7(dir: &Path) -> Check {
    let a = analyze_run(dir, "rep_a", "2")?;
    let b = analyze_run(dir, "rep_b", "2")?;
    for f in OUTPUTS {
        ensure(read(&a.join(f))? == read(&b.join(f))?, || {
            format!("{f} differs between runs")
        })?;
    }
    run_cli(&[
        "plot",
        "--results",
        a.join("r.json").to_str().unwrap(),
        "--plot",
        a.join("log.svg").to_str().unwrap(),
        "--love",
        a.join("love2.svg").to_str().unwrap(),
        "--log-axis",
    ])?;
    ensure(
        read(&a.join("love2.svg"))? == read(&a.join("r.love.svg"))?,
        || "replotted Love plot differs".to_string(),
    )?;
    let mut checked = 0;
    for f in ["r.bias.svg", "r.love.svg", "log.svg"] {
        let text = String::from_utf8(read(&a.join(f))?).map_err(|e| e.to_string())?;
        let doc = roxmltree::Document::parse(&text).map_err(|e| format!("{f}: {e}"))?;
        checked += 1;
        if f == "r.love.svg" {
            continue;
        }
        let null = doc
            .descendants()
            .find(|n| n.attribute("class") == Some("null-line"))
            .ok_or(format!("{f}: no null line"))?;
        let tip = doc
            .descendants()
            .find(|n| n.attribute("data-label") == Some("Hypothetical unmeasured confounder (Tip LB)"))
            .ok_or(format!("{f}: no Tip LB row"))?;
        let ci = tip
            .children()
            .find(|n| n.attribute("class") == Some("ci"))
            .ok_or(format!("{f}: Tip LB row has no interval"))?;
        ensure(ci.attribute("x1") == null.attribute("x1"), || {
            format!(
                "{f}: Tip LB lcl at x={:?}, null line at x={:?}",
                ci.attribute("x1"),
                null.attribute("x1")
            )
        })?;
    }
    Ok(format!(
        "4 outputs byte-identical across runs; {checked} SVGs parse; Tip LB lcl on the null line"
    ))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let rhc = std::env::var_os("OBSBIAS_RHC_CSV").map(PathBuf::from);
    let results: Vec<(&str, Outcome)> = vec![
        ("1 formula anchors", outcome(criterion_1())),
        ("2 tipping fixed point", outcome(criterion_2())),
        ("3 fitter oracles", outcome(criterion_3())),
        ("4 overlap exact balance", outcome(criterion_4())),
        (
            "5 study data reproduction",
            match rhc {
                Some(p) if p.is_file() => outcome(criterion_5(&p)),
                Some(p) => Outcome::Fail(format!("OBSBIAS_RHC_CSV={} is not a file", p.display())),
                None => Outcome::Skip("OBSBIAS_RHC_CSV not set; criterion 6 stands in".into()),
            },
        ),
        ("6 synthetic pipeline", outcome(criterion_6(dir.path()))),
        ("7 determinism and figures", outcome(criterion_7(dir.path()))),
    ];
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Outcome::Pass(detail) => println!("PASS  {name}: {detail}"),
            Outcome::Skip(detail) => println!("SKIP  {name}: {detail}"),
            Outcome::Fail(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results
            .iter()
            .filter(|(_, r)| matches!(r, Outcome::Pass(_)))
            .count()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn outcome(check: Check) -> Outcome {
    match check {
        Ok(detail) => Outcome::Pass(detail),
        Err(detail) => Outcome::Fail(detail),
    }
}
