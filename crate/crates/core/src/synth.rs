//! Seeded synthetic survival data with planted confounders.
//!
//! Each row draws its covariates as independent standard normals, then a
//! logistic exposure, then an exponential event time censored at a fixed
//! horizon. The draw order is fixed so a seed always yields the same table.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

pub const EXPOSURE: &str = "exposure";
pub const TIME: &str = "time";
pub const EVENT: &str = "event";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfounder {
    pub name: String,
    /// Log-odds change in exposure per SD.
    pub effect_on_exposure: f64,
    /// Log-hazard change per SD.
    pub effect_on_hazard: f64,
}

fn default_baseline() -> f64 {
    0.1
}

fn default_loghr() -> f64 {
    0.2
}

fn default_censor() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub confounders: Vec<PlantedConfounder>,
    /// Count of pure-noise covariates, named `null1`, `null2`, ...
    #[serde(default)]
    pub null_covariates: usize,
    #[serde(default = "default_baseline")]
    pub baseline_hazard: f64,
    #[serde(default = "default_loghr")]
    pub exposure_loghr: f64,
    #[serde(default = "default_censor")]
    pub censor_time: f64,
    #[serde(default)]
    pub exposure_intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("n must be at least 10, got {0}")]
    TooFewRows(usize),
    #[error("'{field}' must be {requirement}, got {value}")]
    Parameter {
        field: String,
        requirement: &'static str,
        value: f64,
    },
    #[error("covariate name '{0}' is empty, reserved or repeated")]
    Name(String),
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            confounders: Vec::new(),
            null_covariates: 0,
            baseline_hazard: default_baseline(),
            exposure_loghr: default_loghr(),
            censor_time: default_censor(),
            exposure_intercept: 0.0,
        }
    }

    pub fn with_confounder(mut self, name: &str, effect_on_exposure: f64, effect_on_hazard: f64) -> Self {
        self.confounders.push(PlantedConfounder {
            name: name.to_string(),
            effect_on_exposure,
            effect_on_hazard,
        });
        self
    }

    pub fn with_nulls(mut self, k: usize) -> Self {
        self.null_covariates = k;
        self
    }

    /// Confounder names followed by null covariate names.
    pub fn covariate_names(&self) -> Vec<String> {
        self.confounders
            .iter()
            .map(|c| c.name.clone())
            .chain((1..=self.null_covariates).map(|k| format!("null{k}")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n < 10 {
            return Err(SynthError::TooFewRows(self.n));
        }
        let positive = [
            ("baseline_hazard", self.baseline_hazard),
            ("censor_time", self.censor_time),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SynthError::Parameter {
                    field: field.into(),
                    requirement: "finite and positive",
                    value,
                });
            }
        }
        let mut finite = vec![
            ("exposure_loghr".to_string(), self.exposure_loghr),
            ("exposure_intercept".to_string(), self.exposure_intercept),
        ];
        for c in &self.confounders {
            finite.push((format!("{}.effect_on_exposure", c.name), c.effect_on_exposure));
            finite.push((format!("{}.effect_on_hazard", c.name), c.effect_on_hazard));
        }
        for (field, value) in finite {
            if !value.is_finite() {
                return Err(SynthError::Parameter {
                    field,
                    requirement: "finite",
                    value,
                });
            }
        }
        let names = self.covariate_names();
        for (i, name) in names.iter().enumerate() {
            if name.is_empty()
                || [EXPOSURE, TIME, EVENT].contains(&name.as_str())
                || names[..i].contains(name)
            {
                return Err(SynthError::Name(name.clone()));
            }
        }
        Ok(())
    }
}

/// Uniform on the open interval (0, 1) from the top 53 bits.
fn uniform(rng: &mut ChaCha20Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1 = uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset, SynthError> {
    spec.validate()?;
    let n = spec.n;
    let k_conf = spec.confounders.len();
    let k = k_conf + spec.null_covariates;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let mut covs = vec![Vec::with_capacity(n); k];
    let mut exposure = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    let mut row = vec![0.0; k];
    for _ in 0..n {
        for x in row.iter_mut() {
            *x = standard_normal(&mut rng);
        }
        let mut logit = spec.exposure_intercept;
        let mut lp = 0.0;
        for (c, &x) in spec.confounders.iter().zip(&row) {
            logit += c.effect_on_exposure * x;
            lp += c.effect_on_hazard * x;
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        let z = uniform(&mut rng) < p;
        if z {
            lp += spec.exposure_loghr;
        }
        let t = -uniform(&mut rng).ln() / (spec.baseline_hazard * lp.exp());
        exposure.push(z as u8 as f64);
        if t <= spec.censor_time {
            time.push(t);
            event.push(1.0);
        } else {
            time.push(spec.censor_time);
            event.push(0.0);
        }
        for (col, &x) in covs.iter_mut().zip(&row) {
            col.push(x);
        }
    }

    let mut names = vec![EXPOSURE.to_string(), TIME.to_string(), EVENT.to_string()];
    names.extend(spec.covariate_names());
    let mut columns = vec![exposure, time, event];
    columns.extend(covs);
    Ok(Dataset::new(names, columns).expect("names validated"))
}
