//! Accuracy metrics with optional sampling weights, percentile bootstrap
//! intervals, stratified breakdowns and logistic factor regression.

mod regression;

pub use regression::{factor_regression, write_regression_csv, Factor, RegressionFit, RegressionRow, RIDGE};

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ReferenceLabel;
use crate::predict::{ranking, PredictionSet};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_boot: 2000, level: 0.95, seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 || !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("bootstrap n_boot {} / level {}", self.n_boot, self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub weighted: bool,
}

/// Treats constant weights as absent so weighted and unweighted metrics agree bit for bit.
fn effective_weights(weights: Option<&[f64]>) -> Option<&[f64]> {
    weights.filter(|w| w.iter().any(|x| *x != w[0]))
}

fn weighted_mean(flags: &[f64], weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => {
            let num: f64 = flags.iter().zip(w).map(|(f, w)| f * w).sum();
            num / w.iter().sum::<f64>()
        }
        None => flags.iter().sum::<f64>() / flags.len() as f64,
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the (weighted) mean. Replicate `r` draws
/// from stream `(seed, r)`, so the result does not depend on scheduling.
pub fn bootstrap_ci(flags: &[f64], weights: Option<&[f64]>, config: &BootstrapConfig) -> Result<(f64, f64)> {
    config.validate()?;
    if flags.is_empty() {
        return Err(Error::EmptyInput("no cases to bootstrap"));
    }
    if weights.is_some_and(|w| w.len() != flags.len()) {
        return Err(Error::Shape("weights and flags differ in length".into()));
    }
    let weights = effective_weights(weights);
    let n = flags.len();
    let mut means: Vec<f64> = (0..config.n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(config.seed, r as u64);
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                let w = weights.map_or(1.0, |w| w[i]);
                num += w * flags[i];
                den += w;
            }
            num / den
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Point estimate plus bootstrap interval. The interval is widened to contain
/// the point estimate when resampling skews it off.
pub fn metric_from_flags(flags: &[f64], weights: Option<&[f64]>, config: &BootstrapConfig) -> Result<MetricResult> {
    if flags.is_empty() {
        return Err(Error::EmptyInput("no cases"));
    }
    if weights.is_some_and(|w| w.len() != flags.len()) {
        return Err(Error::Shape("weights and flags differ in length".into()));
    }
    let value = weighted_mean(flags, effective_weights(weights));
    let (lo, hi) = bootstrap_ci(flags, weights, config)?;
    Ok(MetricResult { value, ci_lo: lo.min(value), ci_hi: hi.max(value), n: flags.len(), weighted: weights.is_some() })
}

/// 1.0 where the reference top-1 is among the `k` highest scores (ties by id).
pub fn topk_hits(predictions: &[Vec<f64>], refs: &[ReferenceLabel], k: usize) -> Result<Vec<f64>> {
    if predictions.len() != refs.len() {
        return Err(Error::Shape(format!("{} predictions vs {} references", predictions.len(), refs.len())));
    }
    Ok(predictions
        .iter()
        .zip(refs)
        .map(|(p, r)| if ranking(p).iter().take(k).any(|&i| i == r.top1.0) { 1.0 } else { 0.0 })
        .collect())
}

pub fn set_hits(sets: &[PredictionSet], refs: &[ReferenceLabel]) -> Result<Vec<f64>> {
    if sets.len() != refs.len() {
        return Err(Error::Shape(format!("{} sets vs {} references", sets.len(), refs.len())));
    }
    Ok(sets.iter().zip(refs).map(|(s, r)| if s.contains(r.top1) { 1.0 } else { 0.0 }).collect())
}

pub fn topk_accuracy(
    predictions: &[Vec<f64>],
    refs: &[ReferenceLabel],
    k: usize,
    weights: Option<&[f64]>,
    config: &BootstrapConfig,
) -> Result<MetricResult> {
    metric_from_flags(&topk_hits(predictions, refs, k)?, weights, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableKResult {
    pub accuracy: MetricResult,
    pub mean_k: f64,
}

pub fn variablek_accuracy(
    sets: &[PredictionSet],
    refs: &[ReferenceLabel],
    weights: Option<&[f64]>,
    config: &BootstrapConfig,
) -> Result<VariableKResult> {
    let accuracy = metric_from_flags(&set_hits(sets, refs)?, weights, config)?;
    let mean_k = sets.iter().map(|s| s.k as f64).sum::<f64>() / sets.len() as f64;
    Ok(VariableKResult { accuracy, mean_k })
}

/// One cell of a stratified table; `result` is `None` for empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRow {
    pub metric: String,
    pub stratum: String,
    pub result: Option<MetricResult>,
}

/// Recomputes a metric per stratum. Declared levels with no cases produce an
/// empty row; levels not declared are appended in order of first appearance.
pub fn stratified_table(
    metric: &str,
    flags: &[f64],
    weights: Option<&[f64]>,
    strata: &[String],
    declared_levels: &[String],
    config: &BootstrapConfig,
) -> Result<Vec<StratumRow>> {
    if strata.len() != flags.len() {
        return Err(Error::Shape(format!("{} strata labels for {} cases", strata.len(), flags.len())));
    }
    let mut levels: Vec<String> = declared_levels.to_vec();
    for s in strata {
        if !levels.contains(s) {
            levels.push(s.clone());
        }
    }
    levels
        .into_iter()
        .map(|level| {
            let idx: Vec<usize> = (0..flags.len()).filter(|&i| strata[i] == level).collect();
            let result = if idx.is_empty() {
                None
            } else {
                let f: Vec<f64> = idx.iter().map(|&i| flags[i]).collect();
                let w: Option<Vec<f64>> = weights.map(|w| idx.iter().map(|&i| w[i]).collect());
                Some(metric_from_flags(&f, w.as_deref(), config)?)
            };
            Ok(StratumRow { metric: metric.to_string(), stratum: level, result })
        })
        .collect()
}

/// Metrics CSV: `metric,stratum,value,ci_lo,ci_hi,n,weighted`.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[StratumRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "stratum", "value", "ci_lo", "ci_hi", "n", "weighted"])?;
    for row in rows {
        match &row.result {
            Some(r) => w.write_record([
                row.metric.clone(),
                row.stratum.clone(),
                format!("{:.6}", r.value),
                format!("{:.6}", r.ci_lo),
                format!("{:.6}", r.ci_hi),
                r.n.to_string(),
                r.weighted.to_string(),
            ])?,
            None => w.write_record([row.metric.as_str(), &row.stratum, "", "", "", "0", "false"])?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{Ambiguity, WeightedDifferential};
    use crate::predict::ScoredCondition;
    use crate::taxonomy::ConditionId;
    use proptest::prelude::*;
    use rand::Rng;

    fn refs(ids: &[usize]) -> Vec<ReferenceLabel> {
        ids.iter()
            .map(|&i| ReferenceLabel {
                top1: ConditionId(i),
                combined: WeightedDifferential::single(ConditionId(i)),
                ambiguity: Ambiguity::Unanimous,
            })
            .collect()
    }

    fn boot() -> BootstrapConfig {
        BootstrapConfig { n_boot: 500, level: 0.95, seed: 1 }
    }

    #[test]
    fn topk_boundaries() {
        let preds = vec![vec![0.5, 0.3, 0.2, 0.0], vec![0.1, 0.2, 0.3, 0.4]];
        assert_eq!(topk_accuracy(&preds, &refs(&[0, 3]), 1, None, &boot()).unwrap().value, 1.0);
        // reference at rank 3 everywhere
        assert_eq!(topk_accuracy(&preds, &refs(&[2, 1]), 2, None, &boot()).unwrap().value, 0.0);
        assert_eq!(topk_accuracy(&preds, &refs(&[2, 1]), 3, None, &boot()).unwrap().value, 1.0);
        assert!(topk_accuracy(&preds, &refs(&[0]), 1, None, &boot()).is_err());
    }

    #[test]
    fn weighted_correct_and_incorrect() {
        let preds = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let r = topk_accuracy(&preds, &refs(&[0, 1]), 1, Some(&[4.0, 1.0]), &boot()).unwrap();
        assert!((r.value - 0.8).abs() < 1e-15);
        assert!(r.weighted);
    }

    #[test]
    fn variable_k_hand_count() {
        let set = |ids: &[usize]| PredictionSet {
            ranked: ids.iter().map(|&i| ScoredCondition { condition: ConditionId(i), score: 0.1 }).collect(),
            k: ids.len(),
        };
        let sets = vec![set(&[0, 1, 2]), set(&[3, 4, 5, 6]), set(&[1, 2, 3]), set(&[0, 1, 2, 3, 4, 5, 6]), set(&[5, 6, 7])];
        let r = variablek_accuracy(&sets, &refs(&[2, 0, 1, 6, 4]), None, &boot()).unwrap();
        assert_eq!(r.accuracy.value, 0.6);
        assert_eq!(r.mean_k, 20.0 / 5.0);
    }

    #[test]
    fn bootstrap_degenerate_and_width() {
        assert_eq!(bootstrap_ci(&[1.0; 50], None, &boot()).unwrap(), (1.0, 1.0));
        assert_eq!(bootstrap_ci(&[0.0; 50], None, &boot()).unwrap(), (0.0, 0.0));
        let mut rng = stream_rng(99, 0);
        let flags: Vec<f64> = (0..1000).map(|_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 }).collect();
        let (lo, hi) = bootstrap_ci(&flags, None, &BootstrapConfig { n_boot: 2000, level: 0.95, seed: 3 }).unwrap();
        assert!((0.04..=0.08).contains(&(hi - lo)), "{}", hi - lo);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let flags: Vec<f64> = (0..300).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let a = bootstrap_ci(&flags, None, &boot()).unwrap();
        let b = bootstrap_ci(&flags, None, &boot()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strata_recombine_to_overall() {
        let flags: Vec<f64> = (0..40).map(|i| ((i * 7) % 5 < 3) as u8 as f64).collect();
        let weights: Vec<f64> = (0..40).map(|i| 1.0 + (i % 4) as f64).collect();
        let strata: Vec<String> = (0..40).map(|i| if i < 15 { "a".into() } else { "b".into() }).collect();
        let rows = stratified_table("top3", &flags, Some(&weights), &strata, &[], &boot()).unwrap();
        let overall = metric_from_flags(&flags, Some(&weights), &boot()).unwrap().value;
        let wa: f64 = weights[..15].iter().sum();
        let wb: f64 = weights[15..].iter().sum();
        let combined = (wa * rows[0].result.unwrap().value + wb * rows[1].result.unwrap().value) / (wa + wb);
        assert!((combined - overall).abs() < 1e-12);

        let single: Vec<String> = vec!["all".into(); 40];
        let rows = stratified_table("top3", &flags, None, &single, &["all".into(), "none".into()], &boot()).unwrap();
        assert_eq!(rows[0].result.unwrap(), metric_from_flags(&flags, None, &boot()).unwrap());
        assert!(rows[1].result.is_none());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            StratumRow { metric: "top3".into(), stratum: "all".into(), result: Some(MetricResult { value: 0.5, ci_lo: 0.4, ci_hi: 0.6, n: 10, weighted: false }) },
            StratumRow { metric: "top3".into(), stratum: "empty".into(), result: None },
        ];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "metric,stratum,value,ci_lo,ci_hi,n,weighted\ntop3,all,0.500000,0.400000,0.600000,10,false\ntop3,empty,,,,0,false\n"
        );
    }

    proptest! {
        #[test]
        fn topk_monotone_and_equal_weights(
            seed in 0u64..1000, n in 1usize..40, c in 2usize..10, w in 0.01f64..10.0
        ) {
            let mut rng = stream_rng(seed, 0);
            let preds: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random()).collect()).collect();
            let r = refs(&(0..n).map(|_| rng.random_range(0..c)).collect::<Vec<_>>());
            let cfg = BootstrapConfig { n_boot: 50, level: 0.9, seed };
            let mut last = 0.0;
            for k in 1..=c {
                let m = topk_accuracy(&preds, &r, k, None, &cfg).unwrap();
                prop_assert!(m.value >= last);
                prop_assert!(m.ci_lo <= m.value && m.value <= m.ci_hi);
                last = m.value;
            }
            let unweighted = topk_accuracy(&preds, &r, 2, None, &cfg).unwrap();
            let weighted = topk_accuracy(&preds, &r, 2, Some(&vec![w; n]), &cfg).unwrap();
            prop_assert_eq!(unweighted.value, weighted.value);
        }
    }
}
