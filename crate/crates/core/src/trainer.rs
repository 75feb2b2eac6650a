//! Classifier head training: focal loss, analytic gradients through the FiLM
//! fusion and final linear layer, and Adam at a constant learning rate.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::encoder::{aggregate_images, encode_sparse, FilmParams, MetadataSchema, SparseMetadata};
use crate::error::{Error, Result};
use crate::labels::{ReferenceLabel, WeightedDifferential};
use crate::rng::stream_rng;
use crate::taxonomy::ConditionTaxonomy;

/// Floor applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const TRACE_EVERY: usize = 50;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub film: FilmParams,
    /// `C x D`
    #[serde(rename = "classifier_W", with = "crate::serde_arrays::matrix")]
    pub classifier_w: Array2<f64>,
    #[serde(with = "crate::serde_arrays::vector")]
    pub classifier_b: Array1<f64>,
}

impl ModelParams {
    /// Uniform(-s, s) weights with `s = 1/sqrt(fan_in)`; alpha bias starts at
    /// one (identity modulation), other biases at zero.
    pub fn init(input_width: usize, meta_width: usize, dim: usize, num_conditions: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize| {
            let s = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-s..s))
        };
        let mut film = FilmParams::zeros(input_width, meta_width, dim);
        film.metadata_proj = uniform(input_width, meta_width);
        film.alpha_proj = uniform(meta_width, dim);
        film.beta_proj = uniform(meta_width, dim);
        film.alpha_bias.fill(1.0);
        let s = 1.0 / (dim as f64).sqrt();
        let classifier_w = Array2::from_shape_fn((num_conditions, dim), |_| rng.random_range(-s..s));
        Self { film, classifier_w, classifier_b: Array1::zeros(num_conditions) }
    }

    pub fn zeros_like(&self) -> Self {
        let f = &self.film;
        Self {
            film: FilmParams::zeros(f.input_width(), f.meta_width(), f.dim()),
            classifier_w: Array2::zeros(self.classifier_w.raw_dim()),
            classifier_b: Array1::zeros(self.classifier_b.len()),
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.classifier_b.len()
    }

    pub fn dim(&self) -> usize {
        self.film.dim()
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.film.check_shapes()?;
        if self.classifier_w.dim() != (self.classifier_b.len(), self.film.dim()) {
            return Err(Error::Shape("classifier shape does not match FiLM width".into()));
        }
        Ok(())
    }

    /// All parameter tensors; the first six belong to the FiLM fusion.
    pub fn tensors(&self) -> [&[f64]; 8] {
        let f = &self.film;
        [
            f.metadata_proj.as_slice().expect("standard layout"),
            f.metadata_bias.as_slice().expect("standard layout"),
            f.alpha_proj.as_slice().expect("standard layout"),
            f.alpha_bias.as_slice().expect("standard layout"),
            f.beta_proj.as_slice().expect("standard layout"),
            f.beta_bias.as_slice().expect("standard layout"),
            self.classifier_w.as_slice().expect("standard layout"),
            self.classifier_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        let f = &mut self.film;
        [
            f.metadata_proj.as_slice_mut().expect("standard layout"),
            f.metadata_bias.as_slice_mut().expect("standard layout"),
            f.alpha_proj.as_slice_mut().expect("standard layout"),
            f.alpha_bias.as_slice_mut().expect("standard layout"),
            f.beta_proj.as_slice_mut().expect("standard layout"),
            f.beta_bias.as_slice_mut().expect("standard layout"),
            self.classifier_w.as_slice_mut().expect("standard layout"),
            self.classifier_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Logits for a batch of aggregated images (`B x D`) and encoded metadata (`B x M_in`).
    pub fn batch_logits(&self, images: &Array2<f64>, metadata: &Array2<f64>) -> Array2<f64> {
        self.forward(images, metadata).logits
    }

    fn forward(&self, images: &Array2<f64>, metadata: &Array2<f64>) -> Forward {
        let f = &self.film;
        let meta = metadata.dot(&f.metadata_proj) + &f.metadata_bias;
        let alpha = meta.dot(&f.alpha_proj) + &f.alpha_bias;
        let beta = meta.dot(&f.beta_proj) + &f.beta_bias;
        let fused = &beta + &(&alpha * images);
        let logits = fused.dot(&self.classifier_w.t()) + &self.classifier_b;
        Forward { meta, fused, logits }
    }
}

struct Forward {
    meta: Array2<f64>,
    fused: Array2<f64>,
    logits: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    EndToEnd,
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub metadata_dropout_p: f64,
    pub mode: TrainMode,
    /// Train against the full weighted differential instead of the top-1 label.
    #[serde(default)]
    pub weighted_targets: bool,
    /// Metadata embedding width `M_emb` used for fresh initialization.
    pub metadata_width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            learning_rate: 1e-3,
            steps: 1500,
            batch_size: 64,
            metadata_dropout_p: 0.25,
            mode: TrainMode::EndToEnd,
            weighted_targets: false,
            metadata_width: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.focal_alpha > 0.0) || !(self.focal_gamma >= 0.0) {
            return bad("focal_alpha must be > 0 and focal_gamma >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.metadata_width == 0 {
            return bad("batch_size and metadata_width must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.metadata_dropout_p) {
            return bad("metadata_dropout_p must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `-alpha (1 - p)^gamma ln p` for one target probability.
fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    -alpha * (1.0 - p).max(0.0).powf(gamma) * p.max(PROB_CLAMP).ln()
}

/// Derivative of [`focal_term`] with respect to `p`.
fn focal_term_dp(p: f64, alpha: f64, gamma: f64) -> f64 {
    let q = (1.0 - p).max(0.0);
    let log_p = p.max(PROB_CLAMP).ln();
    let shrink = if gamma == 0.0 || q == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) * log_p };
    let log_slope = if p >= PROB_CLAMP { q.powf(gamma) / p } else { 0.0 };
    -alpha * (shrink + log_slope)
}

/// Focal loss of a predicted distribution against a weighted differential.
pub fn focal_loss(probs: ArrayView1<f64>, target: &WeightedDifferential, alpha: f64, gamma: f64) -> Result<f64> {
    let mut loss = 0.0;
    for e in target.entries() {
        let p = *probs.get(e.condition.0).ok_or_else(|| {
            Error::Shape(format!("target condition {} outside probability vector of length {}", e.condition, probs.len()))
        })?;
        loss += e.weight * focal_term(p, alpha, gamma);
    }
    Ok(loss)
}

/// Numerically stable softmax, in place over each row.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row /= total;
    }
}

/// One training example with precomputed image aggregate and sparse metadata.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Array1<f64>,
    pub metadata: SparseMetadata,
    pub target: Vec<(usize, f64)>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub examples: Vec<Example>,
    /// Absolute one-hot index of `unknown` per metadata field.
    pub unknown_slots: Vec<usize>,
    pub input_width: usize,
    pub dim: usize,
}

impl TrainingSet {
    /// Encodes every case once. Images are aggregated with a per-case stream
    /// derived from `seed`, so cases with more than six images get a fixed subset.
    pub fn build(
        dataset: &Dataset,
        labels: &[ReferenceLabel],
        schema: &MetadataSchema,
        weighted_targets: bool,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != dataset.len() {
            return Err(Error::Shape(format!("{} labels for {} cases", labels.len(), dataset.len())));
        }
        let weights = dataset.weights();
        let examples = dataset
            .cases
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (case, label))| {
                let with_id = |e: Error| match e {
                    Error::Schema { detail, .. } => Error::Schema { case_id: case.case_id.clone(), detail },
                    other => other,
                };
                let image = aggregate_images(&case.image_embeddings, &mut stream_rng(seed, i as u64)).map_err(with_id)?;
                let metadata = encode_sparse(&case.metadata, case.age, schema).map_err(with_id)?;
                let target = if weighted_targets {
                    label.combined.entries().iter().map(|e| (e.condition.0, e.weight)).collect()
                } else {
                    vec![(label.top1.0, 1.0)]
                };
                let weight = weights.as_ref().map_or(1.0, |w| w[i]);
                Ok(Example { image, metadata, target, weight })
            })
            .collect::<Result<Vec<_>>>()?;
        let unknown_slots =
            schema.offsets().iter().zip(&schema.fields).map(|(o, f)| o + f.unknown_index()).collect();
        Ok(Self { examples, unknown_slots, input_width: schema.input_width(), dim: dataset.dim })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Dense batch for the given example indices, with per-field metadata dropout.
    pub fn batch(&self, indices: &[usize], dropout_p: f64, rng: &mut ChaCha8Rng) -> Batch {
        let b = indices.len();
        let mut images = Array2::zeros((b, self.dim));
        let mut metadata = Array2::zeros((b, self.input_width));
        let mut targets = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(b);
        for (row, &i) in indices.iter().enumerate() {
            let ex = &self.examples[i];
            images.row_mut(row).assign(&ex.image);
            for (field, &slot) in ex.metadata.active.iter().enumerate() {
                let drop = dropout_p > 0.0 && rng.random::<f64>() < dropout_p;
                metadata[[row, if drop { self.unknown_slots[field] } else { slot }]] = 1.0;
            }
            metadata[[row, self.input_width - 1]] = ex.metadata.age;
            targets.push(ex.target.clone());
            weights.push(ex.weight);
        }
        Batch { images, metadata, targets, weights }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array2<f64>,
    pub metadata: Array2<f64>,
    pub targets: Vec<Vec<(usize, f64)>>,
    pub weights: Vec<f64>,
}

/// Weighted mean focal loss over a batch and, optionally, its gradient.
/// With `freeze_film` the FiLM gradients are left at exactly zero.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    alpha: f64,
    gamma: f64,
    want_grad: bool,
    freeze_film: bool,
) -> (f64, Option<ModelParams>) {
    let fwd = params.forward(&batch.images, &batch.metadata);
    let mut probs = fwd.logits.clone();
    softmax_rows(&mut probs);
    let total_weight: f64 = batch.weights.iter().sum();

    let mut loss = 0.0;
    let mut g_logits = Array2::zeros(probs.raw_dim());
    for (i, (row, target)) in probs.outer_iter().zip(&batch.targets).enumerate() {
        let scale = batch.weights[i] / total_weight;
        for &(j, w) in target {
            let p = row[j];
            loss += scale * w * focal_term(p, alpha, gamma);
            if want_grad {
                // dL/dz_k = dL/dp_j * p_j * (delta_jk - p_k)
                let coeff = scale * w * focal_term_dp(p, alpha, gamma) * p;
                let mut g = g_logits.row_mut(i);
                g.scaled_add(-coeff, &row);
                g[j] += coeff;
            }
        }
    }
    if !want_grad {
        return (loss, None);
    }

    let mut grad = params.zeros_like();
    grad.classifier_w = g_logits.t().dot(&fwd.fused);
    grad.classifier_b = g_logits.sum_axis(Axis(0));
    if !freeze_film {
        let f = &params.film;
        let g_fused = g_logits.dot(&params.classifier_w);
        let g_alpha = &g_fused * &batch.images;
        let g_beta = g_fused;
        grad.film.alpha_proj = fwd.meta.t().dot(&g_alpha);
        grad.film.alpha_bias = g_alpha.sum_axis(Axis(0));
        grad.film.beta_proj = fwd.meta.t().dot(&g_beta);
        grad.film.beta_bias = g_beta.sum_axis(Axis(0));
        let g_meta = g_alpha.dot(&f.alpha_proj.t()) + g_beta.dot(&f.beta_proj.t());
        grad.film.metadata_proj = batch.metadata.t().dot(&g_meta);
        grad.film.metadata_bias = g_meta.sum_axis(Axis(0));
    }
    (loss, Some(grad))
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(like: &ModelParams) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64, first_tensor: usize) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (k, ((p, m), v)) in params.tensors_mut().into_iter().zip(ms).zip(vs).enumerate().skip(first_tensor) {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[k]) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// `(step, batch loss)` every [`TRACE_EVERY`] steps.
    pub loss_trace: Vec<(usize, f64)>,
}

/// Mini-batch Adam on the weighted mean focal loss. Deterministic given `config.seed`.
pub fn train(set: &TrainingSet, num_conditions: usize, config: &TrainConfig, init: Option<&ModelParams>) -> Result<TrainOutput> {
    config.validate()?;
    if set.is_empty() {
        return Err(Error::EmptyInput("training set is empty"));
    }
    if config.mode == TrainMode::ClassifierOnly && init.is_none() {
        return Err(Error::Config("classifier-only training needs initial parameters".into()));
    }
    let mut params = match init {
        Some(p) => {
            p.check_shapes()?;
            if p.film.input_width() != set.input_width || p.dim() != set.dim || p.num_conditions() != num_conditions {
                return Err(Error::Shape("initial parameters do not match the training set".into()));
            }
            p.clone()
        }
        None => ModelParams::init(set.input_width, config.metadata_width, set.dim, num_conditions, &mut stream_rng(config.seed, 0)),
    };
    let frozen = config.mode == TrainMode::ClassifierOnly;
    let first_tensor = if frozen { 6 } else { 0 };

    let mut order_rng = stream_rng(config.seed, 1);
    let mut dropout_rng = stream_rng(config.seed, 2);
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let batch_size = config.batch_size.min(set.len());

    let mut adam = Adam::new(&params);
    let mut loss_trace = Vec::new();
    let mut indices = Vec::with_capacity(batch_size);
    for step in 0..config.steps {
        indices.clear();
        while indices.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            indices.push(order[cursor]);
            cursor += 1;
        }
        let batch = set.batch(&indices, config.metadata_dropout_p, &mut dropout_rng);
        let (loss, grad) =
            batch_loss_and_grad(&params, &batch, config.focal_alpha, config.focal_gamma, true, frozen);
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        if step % TRACE_EVERY == 0 {
            loss_trace.push((step, loss));
        }
        adam.step(&mut params, &grad.expect("requested"), config.learning_rate, first_tensor);
    }
    if !params.is_finite() {
        return Err(Error::Divergence { step: config.steps });
    }
    Ok(TrainOutput { params, loss_trace })
}

/// Convenience wrapper: encode a dataset and train on it.
pub fn train_dataset(
    dataset: &Dataset,
    labels: &[ReferenceLabel],
    schema: &MetadataSchema,
    taxonomy: &ConditionTaxonomy,
    config: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<TrainOutput> {
    let set = TrainingSet::build(dataset, labels, schema, config.weighted_targets, config.seed)?;
    train(&set, taxonomy.num_conditions(), config, init)
}

/// Largest relative error between analytic and central-difference gradients
/// of the batch mean focal loss, over every parameter.
pub fn grad_check(params: &ModelParams, batch: &Batch, config: &TrainConfig, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    if batch.targets.is_empty() {
        return Err(Error::EmptyInput("empty batch"));
    }
    let (alpha, gamma) = (config.focal_alpha, config.focal_gamma);
    let (_, grad) = batch_loss_and_grad(params, batch, alpha, gamma, true, false);
    let grad = grad.expect("requested");
    let analytic = grad.tensors();

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (k, g_tensor) in analytic.iter().enumerate() {
        for (idx, &ga) in g_tensor.iter().enumerate() {
            let orig = probe.tensors()[k][idx];
            probe.tensors_mut()[k][idx] = orig + eps;
            let (up, _) = batch_loss_and_grad(&probe, batch, alpha, gamma, false, false);
            probe.tensors_mut()[k][idx] = orig - eps;
            let (down, _) = batch_loss_and_grad(&probe, batch, alpha, gamma, false, false);
            probe.tensors_mut()[k][idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Serialized model: parameters plus everything needed to encode cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "M_emb")]
    pub meta_width: usize,
    #[serde(rename = "C")]
    pub num_conditions: usize,
    #[serde(flatten)]
    pub params: ModelParams,
    pub train_config: TrainConfig,
    pub taxonomy_hash: String,
    pub metadata_schema: MetadataSchema,
}

impl ModelArtifact {
    pub fn new(params: ModelParams, train_config: TrainConfig, taxonomy: &ConditionTaxonomy, schema: MetadataSchema) -> Self {
        Self {
            dim: params.dim(),
            meta_width: params.film.meta_width(),
            num_conditions: params.num_conditions(),
            params,
            train_config,
            taxonomy_hash: taxonomy.hash().to_string(),
            metadata_schema: schema,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, taxonomy: &ConditionTaxonomy) -> Result<Self> {
        let artifact: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if artifact.taxonomy_hash != taxonomy.hash() {
            return Err(Error::TaxonomyMismatch { expected: taxonomy.hash().into(), found: artifact.taxonomy_hash });
        }
        artifact.params.check_shapes()?;
        if artifact.dim != artifact.params.dim()
            || artifact.num_conditions != artifact.params.num_conditions()
            || artifact.num_conditions != taxonomy.num_conditions()
        {
            return Err(Error::Shape("model header disagrees with its parameters".into()));
        }
        Ok(artifact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ConditionId;
    use proptest::prelude::*;

    fn probs(v: &[f64]) -> Array1<f64> {
        Array1::from(v.to_vec())
    }

    #[test]
    fn focal_examples() {
        let t = WeightedDifferential::single(ConditionId(0));
        assert_eq!(focal_loss(probs(&[1.0, 0.0]).view(), &t, 0.25, 2.0).unwrap(), 0.0);
        let fl = focal_loss(probs(&[0.5, 0.5]).view(), &t, 0.25, 2.0).unwrap();
        assert!((fl - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((fl - 0.043321).abs() < 1e-6);
        let ce = focal_loss(probs(&[0.3, 0.7]).view(), &t, 1.0, 0.0).unwrap();
        assert!((ce + 0.3f64.ln()).abs() < 1e-15);
        let far = WeightedDifferential::single(ConditionId(5));
        assert!(matches!(focal_loss(probs(&[0.5, 0.5]).view(), &far, 1.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn clamp_keeps_loss_finite() {
        let t = WeightedDifferential::single(ConditionId(1));
        let fl = focal_loss(probs(&[1.0, 0.0]).view(), &t, 1.0, 0.0).unwrap();
        assert!((fl - (-PROB_CLAMP.ln())).abs() < 1e-12);
    }

    #[test]
    fn focal_derivative_matches_difference() {
        for &gamma in &[0.0, 0.5, 1.0, 2.0, 3.5] {
            for &p in &[0.01, 0.2, 0.5, 0.9, 0.999] {
                let h = 1e-7;
                let fd = (focal_term(p + h, 0.7, gamma) - focal_term(p - h, 0.7, gamma)) / (2.0 * h);
                let an = focal_term_dp(p, 0.7, gamma);
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "gamma {gamma} p {p}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn focal_nonnegative_and_monotone(p in 0.001f64..0.999, dp in 0.0001f64..0.001, g1 in 0.0f64..4.0, dg in 0.0f64..2.0) {
            let a = focal_term(p, 0.5, g1);
            prop_assert!(a > 0.0);
            prop_assert!(focal_term(p + dp, 0.5, g1) < a);
            prop_assert!(focal_term(p, 0.5, g1 + dg) <= a);
        }
    }
}
