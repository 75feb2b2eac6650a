//! Inference: score vectors, fixed top-k, and variable-k prediction sets.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{recalibrate, CalibrationParams};
use crate::dataio::{Case, Dataset};
use crate::encoder::{aggregate_images, encode_metadata, film_fuse, MetadataSchema};
use crate::error::{Error, Result};
use crate::labels::ReferenceLabel;
use crate::rng::stream_rng;
use crate::taxonomy::{ConditionId, ConditionTaxonomy};
use crate::trainer::ModelParams;

/// Raw classifier logits for one case (no metadata dropout).
pub fn case_logits<R: Rng + ?Sized>(
    model: &ModelParams,
    case: &Case,
    schema: &MetadataSchema,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model.check_shapes()?;
    let image = aggregate_images(&case.image_embeddings, rng)?;
    let meta = encode_metadata(&case.metadata, case.age, schema).map_err(|e| match e {
        Error::Schema { detail, .. } => Error::Schema { case_id: case.case_id.clone(), detail },
        other => other,
    })?;
    let fused = film_fuse(image.view(), meta.view(), &model.film)?;
    Ok((model.classifier_w.dot(&fused) + &model.classifier_b).to_vec())
}

/// Probability vector for one case; plain softmax when no calibration is given.
pub fn predict_case<R: Rng + ?Sized>(
    model: &ModelParams,
    case: &Case,
    schema: &MetadataSchema,
    calib: Option<&CalibrationParams>,
    taxonomy: &ConditionTaxonomy,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let logits = case_logits(model, case, schema, rng)?;
    scores_from_logits(&logits, calib, taxonomy)
}

pub fn scores_from_logits(logits: &[f64], calib: Option<&CalibrationParams>, taxonomy: &ConditionTaxonomy) -> Result<Vec<f64>> {
    match calib {
        Some(params) => recalibrate(logits, params, taxonomy),
        None => recalibrate(logits, &CalibrationParams::identity(taxonomy.num_categories()), taxonomy),
    }
}

/// Logits for every case in a dataset. Case `i` aggregates its images with
/// stream `(seed, i)`, so results do not depend on batching.
pub fn dataset_logits(
    model: &ModelParams,
    dataset: &Dataset,
    schema: &MetadataSchema,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    model.check_shapes()?;
    if dataset.dim != model.dim() {
        return Err(Error::Shape(format!("dataset D={} vs model D={}", dataset.dim, model.dim())));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = dataset
        .cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let image = aggregate_images(&case.image_embeddings, &mut stream_rng(seed, i as u64))?;
            let meta = encode_metadata(&case.metadata, case.age, schema).map_err(|e| match e {
                Error::Schema { detail, .. } => Error::Schema { case_id: case.case_id.clone(), detail },
                other => other,
            })?;
            Ok((image.to_vec(), meta.to_vec()))
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let width = rows[0].1.len();
    let mut images = Array2::zeros((n, dataset.dim));
    let mut metadata = Array2::zeros((n, width));
    for (i, (img, meta)) in rows.iter().enumerate() {
        images.row_mut(i).assign(&ArrayView1::from(&img[..]));
        metadata.row_mut(i).assign(&ArrayView1::from(&meta[..]));
    }
    let logits = model.batch_logits(&images, &metadata);
    Ok(logits.outer_iter().map(|r| r.to_vec()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCondition {
    pub condition: ConditionId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub ranked: Vec<ScoredCondition>,
    pub k: usize,
}

impl PredictionSet {
    pub fn contains(&self, id: ConditionId) -> bool {
        self.ranked.iter().any(|s| s.condition == id)
    }
}

/// Condition indices by descending score, ties by ascending id.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k(scores: &[f64], k: usize) -> PredictionSet {
    let ranked: Vec<ScoredCondition> = ranking(scores)
        .into_iter()
        .take(k)
        .map(|i| ScoredCondition { condition: ConditionId(i), score: scores[i] })
        .collect();
    PredictionSet { k: ranked.len(), ranked }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KThreshold {
    pub threshold: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub target_sensitivity: f64,
}

impl Default for KThreshold {
    fn default() -> Self {
        Self { threshold: 0.95, k_min: 3, k_max: 7, target_sensitivity: 0.95 }
    }
}

impl KThreshold {
    pub fn validate(&self, num_conditions: usize) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        if !(1 <= self.k_min && self.k_min <= self.k_max && self.k_max <= num_conditions) {
            return Err(Error::Config(format!(
                "need 1 <= k_min ({}) <= k_max ({}) <= C ({num_conditions})",
                self.k_min, self.k_max
            )));
        }
        Ok(())
    }
}

/// Smallest prefix of the ranking whose cumulative score reaches the
/// threshold, clamped to `[k_min, k_max]`.
pub fn variable_k_predict(scores: &[f64], th: &KThreshold) -> PredictionSet {
    let order = ranking(scores);
    let mut cumulative = 0.0;
    let mut k_star = order.len();
    for (j, &i) in order.iter().enumerate() {
        cumulative += scores[i];
        if cumulative >= th.threshold {
            k_star = j + 1;
            break;
        }
    }
    let k = k_star.clamp(th.k_min, th.k_max).min(order.len());
    let ranked = order[..k].iter().map(|&i| ScoredCondition { condition: ConditionId(i), score: scores[i] }).collect();
    PredictionSet { ranked, k }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KThresholdFit {
    pub threshold: KThreshold,
    pub sensitivity: f64,
    /// Set when no grid threshold reached the target sensitivity.
    pub advisory: bool,
}

pub const THRESHOLD_GRID: usize = 99;

/// Fraction of high-risk reference cases whose set contains the reference top-1.
pub fn high_risk_sensitivity(
    scores: &[Vec<f64>],
    refs: &[ReferenceLabel],
    taxonomy: &ConditionTaxonomy,
    th: &KThreshold,
) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (s, r) in scores.iter().zip(refs) {
        if taxonomy.is_high_risk(r.top1) {
            total += 1;
            if variable_k_predict(s, th).contains(r.top1) {
                hits += 1;
            }
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Smallest threshold on the 0.01 grid whose high-risk sensitivity reaches
/// `target`; 0.99 with the advisory flag when none does.
pub fn fit_k_threshold(
    dev_scores: &[Vec<f64>],
    dev_refs: &[ReferenceLabel],
    taxonomy: &ConditionTaxonomy,
    k_min: usize,
    k_max: usize,
    target: f64,
) -> Result<KThresholdFit> {
    if dev_scores.len() != dev_refs.len() {
        return Err(Error::Shape(format!("{} score vectors vs {} references", dev_scores.len(), dev_refs.len())));
    }
    if !dev_refs.iter().any(|r| taxonomy.is_high_risk(r.top1)) {
        return Err(Error::UnsupportedFit("no high-risk reference cases".into()));
    }
    let at = |i: usize| KThreshold { threshold: i as f64 / 100.0, k_min, k_max, target_sensitivity: target };
    at(1).validate(taxonomy.num_conditions())?;
    for i in 1..=THRESHOLD_GRID {
        let th = at(i);
        let sens = high_risk_sensitivity(dev_scores, dev_refs, taxonomy, &th).expect("high-risk cases exist");
        if sens >= target {
            return Ok(KThresholdFit { threshold: th, sensitivity: sens, advisory: false });
        }
    }
    let th = at(THRESHOLD_GRID);
    let sens = high_risk_sensitivity(dev_scores, dev_refs, taxonomy, &th).expect("high-risk cases exist");
    Ok(KThresholdFit { threshold: th, sensitivity: sens, advisory: true })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkEntry {
    pub condition: String,
    pub score: f64,
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub scores_topk: Vec<TopkEntry>,
    pub k: usize,
}

impl PredictionRecord {
    pub fn new(case_id: &str, set: &PredictionSet, taxonomy: &ConditionTaxonomy) -> Self {
        Self {
            case_id: case_id.to_string(),
            scores_topk: set
                .ranked
                .iter()
                .map(|s| TopkEntry { condition: taxonomy.name(s.condition).to_string(), score: s.score })
                .collect(),
            k: set.k,
        }
    }
}

pub fn write_predictions<W: Write>(mut out: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
