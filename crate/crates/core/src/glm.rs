//! Logistic regression by iteratively reweighted least squares.
//!
//! Used for the propensity score model. The solver always starts from the
//! zero vector and runs the same sequence of floating point operations, so
//! refits on identical data are bit-identical.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Cholesky, LinalgError, SquareMatrix};

pub const INTERCEPT: &str = "(Intercept)";

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-10;
pub const MAX_ITER: usize = 25;
pub const DEVIANCE_TOL: f64 = 1e-8;
/// Linear predictors beyond this magnitude indicate (quasi-)separation.
pub const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("column '{name}' has {found} rows, expected {expected}")]
    Length {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate column name '{0}'")]
    DuplicateName(String),
    #[error("column '{name}' has a non-finite value at row {row}")]
    NonFinite { name: String, row: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GlmError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("response has {found} rows, design has {expected}")]
    ResponseLength { expected: usize, found: usize },
    #[error("response must be 0 or 1, got {value} at row {row}")]
    Response { row: usize, value: f64 },
    #[error("design has {rows} rows but {cols} columns")]
    TooFewRows { rows: usize, cols: usize },
    #[error("information matrix is singular: column '{column}' is collinear with earlier columns")]
    RankDeficient { column: String },
    #[error("logistic fit did not converge after {iterations} iterations (deviance {deviance}, last change {last_change})")]
    NotConverged {
        iterations: usize,
        deviance: f64,
        last_change: f64,
    },
    #[error("complete separation detected: |linear predictor| reached {max_abs_eta:.1} without convergence")]
    Separation { max_abs_eta: f64 },
    #[error("design columns {found:?} do not match fitted coefficients {expected:?}")]
    Schema {
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// Named numeric columns, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    nrows: usize,
}

impl DesignMatrix {
    pub fn new(nrows: usize, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, DesignError> {
        assert_eq!(names.len(), columns.len(), "one name per column");
        for (j, (name, col)) in names.iter().zip(&columns).enumerate() {
            if names[..j].contains(name) {
                return Err(DesignError::DuplicateName(name.clone()));
            }
            if col.len() != nrows {
                return Err(DesignError::Length {
                    name: name.clone(),
                    expected: nrows,
                    found: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(DesignError::NonFinite {
                    name: name.clone(),
                    row,
                });
            }
        }
        Ok(Self {
            names,
            columns,
            nrows,
        })
    }

    /// Prepends an intercept column of ones to the given covariates.
    pub fn with_intercept<I>(nrows: usize, covariates: I) -> Result<Self, DesignError>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        let mut names = vec![INTERCEPT.to_string()];
        let mut columns = vec![vec![1.0; nrows]];
        for (name, col) in covariates {
            names.push(name);
            columns.push(col);
        }
        Self::new(nrows, names, columns)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn column_by_name(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }

    /// `X beta`
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.nrows];
        for (col, &b) in self.columns.iter().zip(beta) {
            if b == 0.0 {
                continue;
            }
            for (e, x) in eta.iter_mut().zip(col) {
                *e += b * x;
            }
        }
        eta
    }

    /// `X' W X` (upper triangle filled, then mirrored).
    pub(crate) fn weighted_gram(&self, w: &[f64]) -> SquareMatrix {
        let p = self.ncols();
        let mut m = SquareMatrix::zeros(p);
        let mut wx = vec![0.0; self.nrows];
        for j in 0..p {
            for ((t, x), wi) in wx.iter_mut().zip(&self.columns[j]).zip(w) {
                *t = x * wi;
            }
            for k in j..p {
                let s: f64 = wx.iter().zip(&self.columns[k]).map(|(a, b)| a * b).sum();
                m.set(j, k, s);
            }
        }
        m.symmetrize_from_upper();
        m
    }

    /// `X' v`
    pub(crate) fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        self.columns
            .iter()
            .map(|col| col.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    pub names: Vec<String>,
    /// Log-odds coefficients, one per design column.
    pub coefficients: Vec<f64>,
    /// Inverse Fisher information at the solution, row-major.
    pub covariance: Vec<Vec<f64>>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl GlmFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.coefficients[j])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.covariance[j][j].sqrt())
    }
}

#[inline]
fn inv_logit(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn deviance(y: &[f64], p: &[f64]) -> f64 {
    -2.0 * y
        .iter()
        .zip(p)
        .map(|(&yi, &pi)| if yi > 0.5 { pi.ln() } else { (1.0 - pi).ln() })
        .sum::<f64>()
}

fn rank_error(design: &DesignMatrix, err: LinalgError) -> GlmError {
    let LinalgError::RankDeficient { index } = err;
    GlmError::RankDeficient {
        column: design.names[index].clone(),
    }
}

struct Iterate {
    beta: Vec<f64>,
    eta: Vec<f64>,
    p: Vec<f64>,
    deviance: f64,
}

impl Iterate {
    fn at(design: &DesignMatrix, y: &[f64], beta: Vec<f64>) -> Self {
        let eta = design.linear_predictor(&beta);
        let p: Vec<f64> = eta.iter().map(|&e| inv_logit(e)).collect();
        let deviance = deviance(y, &p);
        Self {
            beta,
            eta,
            p,
            deviance,
        }
    }

    /// Newton (IRLS) proposal from this point.
    fn newton_target(&self, design: &DesignMatrix, y: &[f64]) -> Result<(Vec<f64>, SquareMatrix), GlmError> {
        let w: Vec<f64> = self.p.iter().map(|p| p * (1.0 - p)).collect();
        let info = design.weighted_gram(&w);
        let chol = Cholesky::factor(&info).map_err(|e| rank_error(design, e))?;
        let resid: Vec<f64> = y.iter().zip(&self.p).map(|(yi, pi)| yi - pi).collect();
        let step = chol.solve(&design.transpose_mul(&resid));
        let target = self.beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        Ok((target, info))
    }

    fn max_abs_eta(&self) -> f64 {
        self.eta.iter().fold(0.0f64, |m, e| m.max(e.abs()))
    }
}

/// Fits `P(y = 1) = logit^-1(X beta)` by maximum likelihood.
pub fn fit_logistic(design: &DesignMatrix, response: &[f64]) -> Result<GlmFit, GlmError> {
    let n = design.nrows();
    let p = design.ncols();
    if response.len() != n {
        return Err(GlmError::ResponseLength {
            expected: n,
            found: response.len(),
        });
    }
    if let Some(row) = response.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(GlmError::Response {
            row,
            value: response[row],
        });
    }
    if n < p {
        return Err(GlmError::TooFewRows { rows: n, cols: p });
    }

    let mut cur = Iterate::at(design, response, vec![0.0; p]);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < MAX_ITER {
        iterations += 1;
        let (target, _) = cur.newton_target(design, response)?;
        let mut next = Iterate::at(design, response, target);
        let mut halvings = 0;
        while !(next.deviance <= cur.deviance * (1.0 + 1e-12)) && halvings < 30 {
            let mid = cur
                .beta
                .iter()
                .zip(&next.beta)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            next = Iterate::at(design, response, mid);
            halvings += 1;
        }
        last_change = (next.deviance - cur.deviance).abs();
        cur = next;
        if last_change / (cur.deviance.abs() + 0.1) < DEVIANCE_TOL {
            converged = true;
            break;
        }
    }

    if !converged {
        let max_abs_eta = cur.max_abs_eta();
        if max_abs_eta > SEPARATION_ETA {
            return Err(GlmError::Separation { max_abs_eta });
        }
        return Err(GlmError::NotConverged {
            iterations,
            deviance: cur.deviance,
            last_change,
        });
    }

    // one more Newton step drives the score to rounding level
    let (target, _) = cur.newton_target(design, response)?;
    let polished = Iterate::at(design, response, target);
    if polished.deviance <= cur.deviance * (1.0 + 1e-12) {
        cur = polished;
    }

    let w: Vec<f64> = cur.p.iter().map(|p| p * (1.0 - p)).collect();
    let info = design.weighted_gram(&w);
    let covariance = Cholesky::factor(&info)
        .map_err(|e| rank_error(design, e))?
        .inverse();

    let mut warnings = Vec::new();
    let max_abs_eta = cur.max_abs_eta();
    if max_abs_eta > SEPARATION_ETA {
        warnings.push(format!(
            "possible quasi-separation: |linear predictor| up to {max_abs_eta:.1}"
        ));
    }

    Ok(GlmFit {
        names: design.names().to_vec(),
        coefficients: cur.beta,
        covariance: covariance.rows(),
        deviance: cur.deviance,
        iterations,
        converged,
        warnings,
    })
}

/// Fitted probabilities, clamped strictly inside (0, 1).
pub fn predict_probabilities(fit: &GlmFit, design: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    if fit.names != design.names() {
        return Err(GlmError::Schema {
            expected: fit.names.clone(),
            found: design.names().to_vec(),
        });
    }
    Ok(design
        .linear_predictor(&fit.coefficients)
        .into_iter()
        .map(inv_logit)
        .collect())
}

/// `X'(y - p)` at the fitted coefficients.
pub fn score(fit: &GlmFit, design: &DesignMatrix, response: &[f64]) -> Result<Vec<f64>, GlmError> {
    let p = predict_probabilities(fit, design)?;
    let resid: Vec<f64> = response.iter().zip(&p).map(|(y, p)| y - p).collect();
    Ok(design.transpose_mul(&resid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// x = 1: 30 exposed / 10 unexposed; x = 0: 10 exposed / 30 unexposed.
    fn two_by_two() -> (DesignMatrix, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (xv, ones, zeros) in [(1.0, 30, 10), (0.0, 10, 30)] {
            x.extend(std::iter::repeat_n(xv, ones + zeros));
            y.extend(std::iter::repeat_n(1.0, ones));
            y.extend(std::iter::repeat_n(0.0, zeros));
        }
        let d = DesignMatrix::with_intercept(80, [("x".to_string(), x)]).unwrap();
        (d, y)
    }

    #[test]
    fn intercept_only_is_logit_of_mean() {
        let y: Vec<f64> = (0..50).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let d = DesignMatrix::with_intercept(50, std::iter::empty()).unwrap();
        let fit = fit_logistic(&d, &y).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], (0.2f64 / 0.8).ln(), epsilon = 1e-10);
    }

    #[test]
    fn two_by_two_closed_form() {
        let (d, y) = two_by_two();
        let fit = fit_logistic(&d, &y).unwrap();
        assert_abs_diff_eq!(fit.coefficient("x").unwrap(), 9f64.ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(
            fit.coefficient(INTERCEPT).unwrap(),
            (1.0f64 / 3.0).ln(),
            epsilon = 1e-8
        );
        // Woolf: var(log OR) = 1/30 + 1/10 + 1/10 + 1/30
        assert_abs_diff_eq!(fit.std_error("x").unwrap().powi(2), 4.0 / 15.0, epsilon = 1e-8);

        let p = predict_probabilities(&fit, &d).unwrap();
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-8);
        assert_abs_diff_eq!(p[79], 0.25, epsilon = 1e-8);

        let g = score(&fit, &d, &y).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8), "{g:?}");
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let d = DesignMatrix::with_intercept(20, [("a".to_string(), x.clone()), ("a_copy".to_string(), x)])
            .unwrap();
        assert_eq!(
            fit_logistic(&d, &y).unwrap_err(),
            GlmError::RankDeficient {
                column: "a_copy".into()
            }
        );
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let y: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let d = DesignMatrix::with_intercept(20, [("k".to_string(), vec![3.0; 20])]).unwrap();
        assert!(matches!(
            fit_logistic(&d, &y),
            Err(GlmError::RankDeficient { column }) if column == "k"
        ));
    }

    #[test]
    fn complete_separation_is_reported() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let d = DesignMatrix::with_intercept(20, [("x".to_string(), x)]).unwrap();
        let err = fit_logistic(&d, &y).unwrap_err();
        assert!(matches!(err, GlmError::Separation { .. }), "{err:?}");
    }

    #[test]
    fn bad_response_rejected() {
        let d = DesignMatrix::with_intercept(3, std::iter::empty()).unwrap();
        assert_eq!(
            fit_logistic(&d, &[0.0, 2.0, 1.0]).unwrap_err(),
            GlmError::Response { row: 1, value: 2.0 }
        );
    }

    #[test]
    fn prediction_edge_cases() {
        let d = DesignMatrix::with_intercept(2, [("x".to_string(), vec![-1.0, 1.0])]).unwrap();
        let zero = GlmFit {
            names: d.names().to_vec(),
            coefficients: vec![0.0, 0.0],
            covariance: vec![vec![0.0; 2]; 2],
            deviance: 0.0,
            iterations: 0,
            converged: true,
            warnings: vec![],
        };
        assert_eq!(predict_probabilities(&zero, &d).unwrap(), vec![0.5, 0.5]);

        let huge = GlmFit {
            coefficients: vec![0.0, 1e4],
            ..zero.clone()
        };
        let p = predict_probabilities(&huge, &d).unwrap();
        assert!(p[1] < 1.0 && p[1] > 1.0 - 1e-9);
        assert!(p[0] > 0.0 && p[0] < 1e-9);

        let other = DesignMatrix::with_intercept(2, [("z".to_string(), vec![0.0, 1.0])]).unwrap();
        assert!(matches!(
            predict_probabilities(&zero, &other),
            Err(GlmError::Schema { .. })
        ));
    }

    #[test]
    fn saturated_design_matches_cell_proportions() {
        // two binary covariates, all four cells populated
        let cells = [
            ((0.0, 0.0), 3, 7),
            ((1.0, 0.0), 6, 4),
            ((0.0, 1.0), 2, 9),
            ((1.0, 1.0), 8, 1),
        ];
        let (mut a, mut b, mut ab, mut y) = (vec![], vec![], vec![], vec![]);
        for ((xa, xb), ones, zeros) in cells {
            for k in 0..(ones + zeros) {
                a.push(xa);
                b.push(xb);
                ab.push(xa * xb);
                y.push(if k < ones { 1.0 } else { 0.0 });
            }
        }
        let n = y.len();
        let d = DesignMatrix::with_intercept(
            n,
            [("a".to_string(), a), ("b".to_string(), b), ("ab".to_string(), ab)],
        )
        .unwrap();
        let fit = fit_logistic(&d, &y).unwrap();
        let p = predict_probabilities(&fit, &d).unwrap();
        let mut start = 0;
        for (_, ones, zeros) in cells {
            let expected = ones as f64 / (ones + zeros) as f64;
            assert_abs_diff_eq!(p[start], expected, epsilon = 1e-8);
            start += ones + zeros;
        }
        assert!(fit.covariance.iter().enumerate().all(|(i, r)| r
            .iter()
            .enumerate()
            .all(|(j, v)| (v - fit.covariance[j][i]).abs() < 1e-10)));
    }

    fn random_design(seed: u64, n: usize) -> (DesignMatrix, Vec<f64>) {
        // small LCG keeps the generator local to the test
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / (1u64 << 53) as f64
        };
        let x1: Vec<f64> = (0..n).map(|_| next() * 4.0 - 2.0).collect();
        let x2: Vec<f64> = (0..n).map(|_| next() * 10.0).collect();
        let y: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| {
                let p = 1.0 / (1.0 + (-(0.3 + 0.8 * a - 0.1 * b)).exp());
                if next() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let d = DesignMatrix::with_intercept(n, [("x1".to_string(), x1), ("x2".to_string(), x2)]).unwrap();
        (d, y)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn score_equations_hold(seed in any::<u64>()) {
            let (d, y) = random_design(seed, 200);
            let fit = fit_logistic(&d, &y).unwrap();
            let g = score(&fit, &d, &y).unwrap();
            prop_assert!(g.iter().all(|v| v.abs() < 1e-6), "{:?}", g);
            let again = fit_logistic(&d, &y).unwrap();
            prop_assert_eq!(fit.coefficients, again.coefficients);
        }

        #[test]
        fn rescaling_a_column(seed in any::<u64>(), c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0]) {
            let (d, y) = random_design(seed, 200);
            let fit = fit_logistic(&d, &y).unwrap();
            let scaled = DesignMatrix::with_intercept(200, [
                ("x1".to_string(), d.column(1).iter().map(|v| v * c).collect()),
                ("x2".to_string(), d.column(2).to_vec()),
            ]).unwrap();
            let fit_s = fit_logistic(&scaled, &y).unwrap();
            prop_assert!((fit_s.coefficients[1] - fit.coefficients[1] / c).abs() < 1e-8);
            let p = predict_probabilities(&fit, &d).unwrap();
            let ps = predict_probabilities(&fit_s, &scaled).unwrap();
            prop_assert!(p.iter().zip(&ps).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }
}
