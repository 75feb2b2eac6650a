//! Per-category temperature recalibration and expected calibration error.
//!
//! Logits are centered (per-case mean removed) before the per-category
//! temperatures are applied. With a single shared temperature this is the
//! usual temperature scaling; with several it removes the dependence on the
//! arbitrary logit offset that softmax training leaves unidentified.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ConditionId, ConditionTaxonomy};

pub const LOG_T_MIN: f64 = -3.0;
pub const LOG_T_MAX: f64 = 3.0;
pub const GOLDEN_ITERATIONS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub temperatures: Vec<f64>,
}

impl CalibrationParams {
    pub fn identity(num_categories: usize) -> Self {
        Self { temperatures: vec![1.0; num_categories] }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::Config(format!("temperature {t} is not positive and finite")));
        }
        Ok(())
    }
}

fn centered(logits: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mean = logits.iter().sum::<f64>() / logits.len() as f64;
    logits.iter().map(move |z| z - mean)
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Softmax of centered logits, each divided by its category's temperature.
pub fn recalibrate_with_table(logits: &[f64], temperatures: &[f64], category_of: &[usize]) -> Vec<f64> {
    let mut scaled: Vec<f64> =
        centered(logits).zip(category_of).map(|(z, &k)| z / temperatures[k]).collect();
    softmax_in_place(&mut scaled);
    scaled
}

pub fn recalibrate(logits: &[f64], params: &CalibrationParams, taxonomy: &ConditionTaxonomy) -> Result<Vec<f64>> {
    params.validate()?;
    if logits.len() != taxonomy.num_conditions() || params.temperatures.len() != taxonomy.num_categories() {
        return Err(Error::Shape(format!(
            "{} logits / {} temperatures for {} conditions in {} categories",
            logits.len(),
            params.temperatures.len(),
            taxonomy.num_conditions(),
            taxonomy.num_categories()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Config("non-finite logit".into()));
    }
    Ok(recalibrate_with_table(logits, &params.temperatures, &taxonomy.category_table()))
}

/// Negative log-likelihood of the coarsened label for category `k` under
/// temperature `t` on its members: the exact label when it lies in `k`,
/// otherwise only the event "not in `k`". With a single category this is the
/// multiclass NLL of plain temperature scaling.
pub fn category_nll(
    centered_logits: &[Vec<f64>],
    labels: &[ConditionId],
    category_of: &[usize],
    k: usize,
    t: f64,
) -> f64 {
    let mut buf = Vec::new();
    let mut nll = 0.0;
    for (z, y) in centered_logits.iter().zip(labels) {
        buf.clear();
        buf.extend(z.iter().zip(category_of).map(|(z, &c)| if c == k { z / t } else { *z }));
        softmax_in_place(&mut buf);
        let p = if category_of[y.0] == k {
            buf[y.0]
        } else {
            1.0 - buf.iter().zip(category_of).filter(|(_, &c)| c == k).map(|(p, _)| p).sum::<f64>()
        };
        nll -= p.max(1e-300).ln();
    }
    nll
}

/// Golden-section minimization of a function on `[lo, hi]`.
pub fn golden_section(mut lo: f64, mut hi: f64, iterations: usize, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iterations {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFitStats {
    pub category: String,
    pub n_in_category: usize,
    pub nll_before: f64,
    pub nll_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub params: CalibrationParams,
    pub stats: Vec<CategoryFitStats>,
}

/// Fits one temperature per category independently by golden-section search
/// on `log T` in `[-3, 3]`. Categories without calibration cases keep `T = 1`.
pub fn fit_temperatures(
    calib_logits: &[Vec<f64>],
    calib_labels: &[ConditionId],
    taxonomy: &ConditionTaxonomy,
) -> Result<TemperatureFit> {
    if calib_logits.is_empty() {
        return Err(Error::EmptyInput("calibration set is empty"));
    }
    if calib_logits.len() != calib_labels.len() {
        return Err(Error::Shape(format!("{} logits vs {} labels", calib_logits.len(), calib_labels.len())));
    }
    let c = taxonomy.num_conditions();
    if calib_logits.iter().any(|z| z.len() != c) {
        return Err(Error::Shape(format!("calibration logits must have {c} entries")));
    }
    let table = taxonomy.category_table();
    let centered_logits: Vec<Vec<f64>> = calib_logits.iter().map(|z| centered(z).collect()).collect();

    let mut temperatures = vec![1.0; taxonomy.num_categories()];
    let mut stats = Vec::with_capacity(temperatures.len());
    for (k, name) in taxonomy.category_names().iter().enumerate() {
        let n_in = calib_labels.iter().filter(|y| table[y.0] == k).count();
        let nll = |t: f64| category_nll(&centered_logits, calib_labels, &table, k, t);
        let before = nll(1.0);
        if n_in > 0 {
            let log_t = golden_section(LOG_T_MIN, LOG_T_MAX, GOLDEN_ITERATIONS, |lt| nll(lt.exp()));
            temperatures[k] = log_t.exp();
        }
        stats.push(CategoryFitStats {
            category: name.clone(),
            n_in_category: n_in,
            nll_before: before,
            nll_after: nll(temperatures[k]),
        });
    }
    Ok(TemperatureFit { params: CalibrationParams { temperatures }, stats })
}

/// On-disk calibration artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub temperatures: Vec<f64>,
    pub taxonomy_hash: String,
    pub fit_stats: Vec<CategoryFitStats>,
}

impl CalibrationArtifact {
    pub fn new(fit: &TemperatureFit, taxonomy: &ConditionTaxonomy) -> Self {
        Self {
            temperatures: fit.params.temperatures.clone(),
            taxonomy_hash: taxonomy.hash().to_string(),
            fit_stats: fit.stats.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, taxonomy: &ConditionTaxonomy) -> Result<CalibrationParams> {
        let a: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if a.taxonomy_hash != taxonomy.hash() {
            return Err(Error::TaxonomyMismatch { expected: taxonomy.hash().into(), found: a.taxonomy_hash });
        }
        let params = CalibrationParams { temperatures: a.temperatures };
        params.validate()?;
        if params.temperatures.len() != taxonomy.num_categories() {
            return Err(Error::Shape("temperature count differs from category count".into()));
        }
        Ok(params)
    }
}

/// Bin index for a confidence in `[0, 1]`: bins are right-closed, `(b/B, (b+1)/B]`,
/// with zero falling in the first bin.
fn ece_bin(confidence: f64, bins: usize) -> usize {
    ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1
}

/// Expected calibration error of the top-1 prediction over equal-width bins.
pub fn expected_calibration_error(probs: &[Vec<f64>], labels: &[ConditionId], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    if probs.is_empty() {
        return Err(Error::EmptyInput("no predictions"));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions vs {} labels", probs.len(), labels.len())));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    for (p, y) in probs.iter().zip(labels) {
        let (arg, conf) = p
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        let b = ece_bin(conf, bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if arg == y.0 {
            hits[b] += 1.0;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (hits[b] / m - conf_sum[b] / m).abs()
        })
        .sum())
}
