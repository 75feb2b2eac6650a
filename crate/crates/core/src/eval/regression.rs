//! Multivariable logistic regression over categorical factors, fit by
//! iteratively reweighted least squares with a small ridge penalty.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const RIDGE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
/// Coefficients beyond this magnitude are flagged as likely separation.
pub const SEPARATION_MAGNITUDE: f64 = 10.0;

/// A categorical covariate. `levels[0]` is the reference level.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub values: Vec<usize>,
}

impl Factor {
    /// Builds a factor from per-case level strings. Levels follow
    /// `level_order` first (its first present entry becomes the reference),
    /// then unseen values in order of appearance. Declared levels without
    /// cases are dropped and reported.
    pub fn from_values(name: &str, values: &[String], level_order: &[String]) -> (Self, Vec<String>) {
        let mut levels: Vec<String> = Vec::new();
        let mut dropped = Vec::new();
        for l in level_order {
            if values.contains(l) {
                if !levels.contains(l) {
                    levels.push(l.clone());
                }
            } else {
                dropped.push(format!("factor `{name}`: level `{l}` has no cases and was dropped"));
            }
        }
        for v in values {
            if !levels.contains(v) {
                levels.push(v.clone());
            }
        }
        let idx = values.iter().map(|v| levels.iter().position(|l| l == v).expect("level present")).collect();
        (Self { name: name.to_string(), levels, values: idx }, dropped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionRow {
    pub factor: String,
    pub level: String,
    pub log_odds: f64,
    pub std_err: f64,
    pub p_value: f64,
    pub significant_bonferroni: bool,
    /// Number of non-reference levels in the factor (the Bonferroni divisor).
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub intercept: f64,
    pub rows: Vec<RegressionRow>,
    pub iterations: usize,
    pub converged: bool,
    pub advisories: Vec<String>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intercept column followed by one indicator per non-reference level.
pub fn design_matrix(factors: &[Factor], n: usize) -> DMatrix<f64> {
    let p = 1 + factors.iter().map(|f| f.levels.len() - 1).sum::<usize>();
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    let mut col = 1;
    for f in factors {
        for i in 0..n {
            if f.values[i] > 0 {
                x[(i, col + f.values[i] - 1)] = 1.0;
            }
        }
        col += f.levels.len() - 1;
    }
    x
}

/// Penalized negative log-likelihood, `-loglik + ridge/2 * |beta_{1..}|^2`.
#[cfg(test)]
fn penalized_nll(x: &DMatrix<f64>, y: &[bool], beta: &DVector<f64>, ridge: f64) -> f64 {
    let eta = x * beta;
    let mut nll = 0.0;
    for (e, &yi) in eta.iter().zip(y) {
        // log(1 + exp(e)) - y * e, computed stably
        let softplus = if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
        nll += softplus - if yi { *e } else { 0.0 };
    }
    nll + 0.5 * ridge * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

fn penalized_hessian(x: &DMatrix<f64>, beta: &DVector<f64>, ridge: f64) -> DMatrix<f64> {
    let eta = x * beta;
    let w = DVector::from_iterator(eta.len(), eta.iter().map(|e| {
        let p = sigmoid(*e);
        p * (1.0 - p)
    }));
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut h = x.transpose() * xw;
    for j in 1..h.ncols() {
        h[(j, j)] += ridge;
    }
    h
}

fn invert(h: DMatrix<f64>) -> Result<DMatrix<f64>> {
    match h.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => h.try_inverse().ok_or_else(|| Error::UnsupportedFit("singular information matrix".into())),
    }
}

/// Fits `logit P(outcome) = b0 + sum of level effects` and reports Wald
/// statistics per non-reference level.
pub fn factor_regression(factors: &[Factor], outcome: &[bool]) -> Result<RegressionFit> {
    let n = outcome.len();
    if n == 0 {
        return Err(Error::EmptyInput("no cases for regression"));
    }
    if outcome.iter().all(|&y| y) || outcome.iter().all(|&y| !y) {
        return Err(Error::UnsupportedFit("outcome has a single class".into()));
    }
    if let Some(f) = factors.iter().find(|f| f.values.len() != n) {
        return Err(Error::Shape(format!("factor `{}` has {} values for {n} cases", f.name, f.values.len())));
    }
    let x = design_matrix(factors, n);
    let p = x.ncols();
    let yv = DVector::from_iterator(n, outcome.iter().map(|&y| if y { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let probs = (&x * &beta).map(sigmoid);
        let mut grad = x.transpose() * (&yv - probs);
        for j in 1..p {
            grad[j] -= RIDGE * beta[j];
        }
        let h = penalized_hessian(&x, &beta, RIDGE);
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => h.lu().solve(&grad).ok_or_else(|| Error::UnsupportedFit("singular information matrix".into()))?,
        };
        beta += &step;
        if step.amax() < TOLERANCE {
            converged = true;
            break;
        }
    }
    let cov = invert(penalized_hessian(&x, &beta, RIDGE))?;
    let normal = Normal::standard();
    let mut advisories = Vec::new();
    if !converged {
        advisories.push(format!("IRLS stopped after {MAX_ITERATIONS} iterations without converging"));
    }
    let mut rows = Vec::new();
    let mut col = 1;
    for f in factors {
        let group_size = f.levels.len() - 1;
        for (j, level) in f.levels.iter().enumerate().skip(1) {
            let c = col + j - 1;
            let log_odds = beta[c];
            let std_err = cov[(c, c)].max(0.0).sqrt();
            let z = log_odds / std_err;
            let p_value = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
            if log_odds.abs() > SEPARATION_MAGNITUDE {
                advisories.push(format!("`{}={level}`: |log-odds| {:.1} suggests separation", f.name, log_odds.abs()));
            }
            rows.push(RegressionRow {
                factor: f.name.clone(),
                level: level.clone(),
                log_odds,
                std_err,
                p_value,
                significant_bonferroni: p_value < 0.05 / group_size as f64,
                group_size,
            });
        }
        col += group_size;
    }
    Ok(RegressionFit { intercept: beta[0], rows, iterations, converged, advisories })
}

pub fn write_regression_csv<W: Write>(out: W, rows: &[RegressionRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["factor", "level", "log_odds", "std_err", "p_value", "significant_bonferroni", "group_size"])?;
    for r in rows {
        w.write_record([
            r.factor.clone(),
            r.level.clone(),
            format!("{:.6}", r.log_odds),
            format!("{:.6}", r.std_err),
            format!("{:.6e}", r.p_value),
            r.significant_bonferroni.to_string(),
            r.group_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn factor(name: &str, levels: &[&str], values: Vec<usize>) -> Factor {
        Factor { name: name.into(), levels: levels.iter().map(|s| s.to_string()).collect(), values }
    }

    /// Cases from a 2x2 table: (reference correct, reference wrong, exposed correct, exposed wrong).
    fn two_by_two(a: usize, b: usize, c: usize, d: usize) -> (Factor, Vec<bool>) {
        let mut values = Vec::new();
        let mut y = Vec::new();
        for (level, correct, count) in [(0, true, a), (0, false, b), (1, true, c), (1, false, d)] {
            values.extend(std::iter::repeat_n(level, count));
            y.extend(std::iter::repeat_n(correct, count));
        }
        (factor("exposure", &["ref", "exposed"], values), y)
    }

    #[test]
    fn closed_form_odds_ratio() {
        let (f, y) = two_by_two(5, 15, 20, 10);
        let fit = factor_regression(&[f], &y).unwrap();
        assert!(fit.converged);
        assert!((fit.rows[0].log_odds - 6f64.ln()).abs() < 1e-3);
        assert!((fit.intercept - (5.0f64 / 15.0).ln()).abs() < 1e-3);
        // Wald SE of a log odds ratio: sqrt(1/a + 1/b + 1/c + 1/d)
        let se = (1.0 / 5.0 + 1.0 / 15.0 + 1.0 / 20.0 + 1.0 / 10.0f64).sqrt();
        assert!((fit.rows[0].std_err - se).abs() < 1e-4);
        assert_eq!(fit.rows[0].group_size, 1);
        assert_eq!(fit.rows[0].significant_bonferroni, fit.rows[0].p_value < 0.05);
    }

    #[test]
    fn intercept_only() {
        let y: Vec<bool> = (0..37).map(|i| i % 3 != 0).collect();
        let mean = y.iter().filter(|&&v| v).count() as f64 / y.len() as f64;
        let fit = factor_regression(&[], &y).unwrap();
        assert!((fit.intercept - (mean / (1.0 - mean)).ln()).abs() < 1e-6);
        assert!(fit.rows.is_empty());
    }

    #[test]
    fn null_factor_is_small() {
        let mut rng = stream_rng(8, 0);
        let n = 10_000;
        let values: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
        let fit = factor_regression(&[factor("f", &["a", "b", "c"], values)], &y).unwrap();
        for r in &fit.rows {
            assert!(r.log_odds.abs() < 0.1);
            assert!(!r.significant_bonferroni);
            assert_eq!(r.group_size, 2);
        }
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(factor_regression(&[], &[true, true]), Err(Error::UnsupportedFit(_))));
    }

    #[test]
    fn separation_stays_finite() {
        let (f, y) = two_by_two(0, 10, 10, 0);
        let fit = factor_regression(&[f], &y).unwrap();
        assert!(fit.rows[0].log_odds.is_finite());
        assert!(!fit.advisories.is_empty());
    }

    #[test]
    fn levels_follow_declared_order() {
        let values: Vec<String> = ["x", "y", "x", "z"].iter().map(|s| s.to_string()).collect();
        let order: Vec<String> = ["w", "y", "x"].iter().map(|s| s.to_string()).collect();
        let (f, dropped) = Factor::from_values("g", &values, &order);
        assert_eq!(f.levels, vec!["y", "x", "z"]);
        assert_eq!(f.values, vec![1, 0, 1, 2]);
        assert_eq!(dropped.len(), 1);
    }

    fn gradient_descent(x: &DMatrix<f64>, y: &[bool]) -> DVector<f64> {
        let yv = DVector::from_iterator(y.len(), y.iter().map(|&v| v as u8 as f64));
        let mut beta = DVector::zeros(x.ncols());
        let lipschitz = 0.25 * (x.transpose() * x).symmetric_eigenvalues().max() + RIDGE;
        let step = 1.0 / lipschitz;
        for _ in 0..2_000_000 {
            let probs = (x * &beta).map(sigmoid);
            let mut grad = x.transpose() * (probs - &yv);
            for j in 1..beta.len() {
                grad[j] += RIDGE * beta[j];
            }
            if grad.amax() < 1e-11 {
                break;
            }
            beta -= step * grad;
        }
        beta
    }

    #[test]
    fn matches_brute_force_optimizer() {
        for seed in 0..4 {
            let mut rng = stream_rng(seed, 1);
            let n = 300;
            let f1: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let f2: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y: Vec<bool> = (0..n)
                .map(|i| rng.random::<f64>() < sigmoid(-0.3 + 0.8 * (f1[i] == 1) as u8 as f64 - 0.5 * f2[i] as f64))
                .collect();
            let factors = [factor("a", &["0", "1", "2"], f1), factor("b", &["0", "1"], f2)];
            let fit = factor_regression(&factors, &y).unwrap();
            let oracle = gradient_descent(&design_matrix(&factors, n), &y);
            assert!((fit.intercept - oracle[0]).abs() < 1e-5);
            for (r, o) in fit.rows.iter().zip(oracle.iter().skip(1)) {
                assert!((r.log_odds - o).abs() < 1e-5, "{} vs {o}", r.log_odds);
            }
            let at_fit = {
                let mut b = DVector::zeros(4);
                b[0] = fit.intercept;
                for (j, r) in fit.rows.iter().enumerate() {
                    b[j + 1] = r.log_odds;
                }
                b
            };
            let x = design_matrix(&factors, n);
            assert!(penalized_nll(&x, &y, &at_fit, RIDGE) <= penalized_nll(&x, &y, &oracle, RIDGE) + 1e-9);
        }
    }
}
