//! End-to-end experiment runner: synthetic sites, baseline training, the
//! intervention arms, evaluation and the on-disk report bundle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    condition_aware_augment, mh_resample, random_augment, stratified_split_indices, AugmentConfig, TargetDistribution,
};
use crate::calibrate::{expected_calibration_error, fit_temperatures, CalibrationArtifact, CalibrationParams};
use crate::dataio::{condition_distribution, generate_synthetic_sites, Dataset, GeneratorConfig, Level};
use crate::encoder::MetadataSchema;
use crate::error::{Error, Result};
use crate::eval::{
    factor_regression, metric_from_flags, stratified_table, topk_hits, variablek_accuracy, write_metrics_csv,
    write_regression_csv, BootstrapConfig, Factor, MetricResult, RegressionRow, StratumRow, VariableKResult,
};
use crate::labels::ReferenceLabel;
use crate::predict::{
    dataset_logits, fit_k_threshold, high_risk_sensitivity, scores_from_logits, variable_k_predict,
    write_predictions, KThresholdFit, PredictionRecord, PredictionSet,
};
use crate::rng::{derive_seed, stream_rng};
use crate::taxonomy::{ConditionId, ConditionTaxonomy};
use crate::trainer::{train_dataset, ModelArtifact, ModelParams, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSettings {
    pub alpha: f64,
    /// Site cases added by the augmentation arms, drawn from the calibration split.
    pub n_add: usize,
    /// Level at which "less common in DEV" is decided.
    pub augment_level: Level,
    /// Level of the resampling target histogram.
    pub mh_level: Level,
    /// Resampled training-set size as a multiple of the DEV training size.
    /// Values above 1 keep more distinct cases in the resampled set.
    pub mh_size_factor: f64,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        Self { alpha: 0.7, n_add: 100, augment_level: Level::Condition, mh_level: Level::Category, mh_size_factor: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSettings {
    pub bins: usize,
    pub split_frac: f64,
}

impl Default for CalibSettings {
    fn default() -> Self {
        Self { bins: 10, split_frac: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub target_sensitivity: f64,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self { k_min: 3, k_max: 7, target_sensitivity: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_boot: usize,
    pub level: f64,
    pub top_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_boot: 2000, level: 0.95, top_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    /// Steps of the classifier-only fine-tune that starts from the baseline.
    pub finetune_steps: usize,
    /// Fraction of DEV held out from training for evaluation and threshold fitting.
    pub dev_holdout_frac: f64,
    pub adapt: AdaptSettings,
    pub calib: CalibSettings,
    pub predict: PredictSettings,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn desk_default(taxonomy: &ConditionTaxonomy) -> Self {
        Self {
            generator: GeneratorConfig::desk_default(taxonomy),
            train: TrainConfig::default(),
            finetune_steps: 2000,
            dev_holdout_frac: 0.2,
            adapt: AdaptSettings::default(),
            calib: CalibSettings::default(),
            predict: PredictSettings::default(),
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("report"),
            seeds: (0..10).collect(),
        }
    }

    pub fn validate(&self, taxonomy: &ConditionTaxonomy) -> Result<()> {
        self.generator.validate(taxonomy)?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds".into()));
        }
        if !(self.dev_holdout_frac > 0.0 && self.dev_holdout_frac < 1.0) {
            return Err(Error::Config("dev_holdout_frac must lie in (0, 1)".into()));
        }
        if !(self.calib.split_frac > 0.0 && self.calib.split_frac < 1.0) || self.calib.bins == 0 {
            return Err(Error::Config("calib split_frac must lie in (0, 1) and bins >= 1".into()));
        }
        AugmentConfig { alpha: self.adapt.alpha, n_add: self.adapt.n_add, level: self.adapt.augment_level, seed: 0 }
            .validate()?;
        if !(self.adapt.mh_size_factor > 0.0 && self.adapt.mh_size_factor.is_finite()) {
            return Err(Error::Config("mh_size_factor must be positive".into()));
        }
        let p = &self.predict;
        if !(1 <= p.k_min && p.k_min <= p.k_max && p.k_max <= taxonomy.num_conditions()) {
            return Err(Error::Config("need 1 <= k_min <= k_max <= number of conditions".into()));
        }
        if !(p.target_sensitivity > 0.0 && p.target_sensitivity <= 1.0) {
            return Err(Error::Config("target_sensitivity must lie in (0, 1]".into()));
        }
        BootstrapConfig { n_boot: self.eval.n_boot, level: self.eval.level, seed: 0 }.validate()?;
        if self.eval.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seeds".into()));
        }
        Ok(())
    }
}

/// Intervention arms, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Baseline,
    Recalibrated,
    DistributionMatched,
    RandomAugment,
    ConditionAware,
    ConditionAwareRecalibrated,
    ClassifierOnly,
    ClassifierOnlyRecalibrated,
}

impl Arm {
    pub const ALL: [Arm; 8] = [
        Arm::Baseline,
        Arm::Recalibrated,
        Arm::DistributionMatched,
        Arm::RandomAugment,
        Arm::ConditionAware,
        Arm::ConditionAwareRecalibrated,
        Arm::ClassifierOnly,
        Arm::ClassifierOnlyRecalibrated,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Baseline => "Baseline",
            Arm::Recalibrated => "Score recalibration",
            Arm::DistributionMatched => "Distribution matched retraining + score recalibration",
            Arm::RandomAugment => "Random split (20%)",
            Arm::ConditionAware => "Condition aware split (20%)",
            Arm::ConditionAwareRecalibrated => "Condition aware split (20%) + score recalibration",
            Arm::ClassifierOnly => "Condition aware split (20%), classifier-only fine-tune",
            Arm::ClassifierOnlyRecalibrated => {
                "Condition aware split (20%), classifier-only fine-tune + score recalibration"
            }
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Recalibrated => "recalibrated",
            Arm::DistributionMatched => "distribution_matched",
            Arm::RandomAugment => "random_augment",
            Arm::ConditionAware => "condition_aware",
            Arm::ConditionAwareRecalibrated => "condition_aware_recalibrated",
            Arm::ClassifierOnly => "classifier_only",
            Arm::ClassifierOnlyRecalibrated => "classifier_only_recalibrated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub top_k: MetricResult,
    pub variable_k: VariableKResult,
    pub k_threshold: KThresholdFit,
    pub ece: f64,
    pub eval_set_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// Baseline top-k on held-out DEV cases.
    pub dev_holdout_top_k: MetricResult,
    /// Baseline top-k on the site evaluation set resampled to the DEV label distribution.
    pub resampled_eval_top_k: MetricResult,
    /// Baseline high-risk sensitivity on the DEV cases not used to fit the threshold.
    pub heldout_high_risk_sensitivity: f64,
    /// Quartiles of the baseline variable-k set sizes on the site evaluation set.
    pub k_quartiles: [f64; 3],
    pub temperatures: Vec<f64>,
    pub regression: Vec<RegressionRow>,
    pub advisories: Vec<String>,
}

impl SeedReport {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("every arm is evaluated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub stage: String,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStatus {
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_set_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub complete: bool,
    pub seeds: Vec<SeedStatus>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub reports: Vec<SeedReport>,
    pub failures: Vec<SeedFailure>,
    pub manifest: Manifest,
}

impl ReportBundle {
    /// 0 when every seed finished, 4 when some did, otherwise the first failure's class.
    pub fn exit_code(&self) -> i32 {
        match (self.reports.is_empty(), self.failures.first()) {
            (_, None) => 0,
            (false, Some(_)) => 4,
            (true, Some(f)) => f.exit_code,
        }
    }
}

struct StageError {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage: name, error })
    }
}

/// Files written for one seed, relative to the output directory.
struct SeedFiles {
    files: Vec<(String, Vec<u8>)>,
}

/// Hash of the ordered case ids of an evaluation set.
pub fn eval_set_hash(dataset: &Dataset) -> String {
    let mut h = Sha256::new();
    for c in &dataset.cases {
        h.update(c.case_id.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

const SALT_GENERATOR: u64 = 1;
const SALT_HOLDOUT: u64 = 2;
const SALT_SPLIT: u64 = 3;
const SALT_TRAIN: u64 = 4;
const SALT_MH: u64 = 5;
const SALT_AUGMENT: u64 = 6;
const SALT_RANDOM: u64 = 7;
const SALT_IMAGES: u64 = 8;
const SALT_BOOT: u64 = 9;
const SALT_TEST_MH: u64 = 10;

/// Everything fixed before any arm is trained.
struct SeedData {
    dev_train: Dataset,
    dev_holdout: Dataset,
    /// Holdout indices used to fit the variable-k threshold; the rest measure it.
    kfit: Vec<usize>,
    ktest: Vec<usize>,
    site_calib: Dataset,
    site_eval: Dataset,
    dev_train_labels: Vec<ReferenceLabel>,
    holdout_labels: Vec<ReferenceLabel>,
    calib_labels: Vec<ReferenceLabel>,
    eval_labels: Vec<ReferenceLabel>,
    schema: MetadataSchema,
}

fn prepare(seed: u64, config: &ExperimentConfig, taxonomy: &ConditionTaxonomy) -> std::result::Result<SeedData, StageError> {
    let generator = GeneratorConfig { seed: derive_seed(seed, SALT_GENERATOR), ..config.generator.clone() };
    let sites = generate_synthetic_sites(&generator, taxonomy, &MetadataSchema::desk_default()).stage("generate")?;

    let mut order: Vec<usize> = (0..sites.dev.len()).collect();
    order.shuffle(&mut stream_rng(derive_seed(seed, SALT_HOLDOUT), 0));
    let n_holdout = ((sites.dev.len() as f64) * config.dev_holdout_frac).round() as usize;
    let (mut holdout_idx, mut train_idx) = (order[..n_holdout].to_vec(), order[n_holdout..].to_vec());
    holdout_idx.sort_unstable();
    train_idx.sort_unstable();
    let dev_train = sites.dev.subset(&train_idx);
    let dev_holdout = sites.dev.subset(&holdout_idx);
    if dev_train.is_empty() || dev_holdout.is_empty() {
        return Err(StageError { stage: "split", error: Error::EmptyInput("DEV too small to hold out cases") });
    }
    let (kfit, ktest): (Vec<usize>, Vec<usize>) = (0..dev_holdout.len()).partition(|i| i % 2 == 0);

    let (calib_idx, eval_idx) =
        stratified_split_indices(&sites.site, config.calib.split_frac, derive_seed(seed, SALT_SPLIT), taxonomy)
            .stage("split")?;
    let site_calib = sites.site.subset(&calib_idx);
    let site_eval = sites.site.subset(&eval_idx);
    if site_calib.is_empty() || site_eval.is_empty() {
        return Err(StageError { stage: "split", error: Error::EmptyInput("site too small to split") });
    }

    let schema = MetadataSchema::desk_default()
        .with_age_fit(dev_train.cases.iter().map(|c| c.age))
        .stage("schema")?;
    let labels = |d: &Dataset| d.reference_labels(taxonomy).stage("labels");
    Ok(SeedData {
        dev_train_labels: labels(&dev_train)?,
        holdout_labels: labels(&dev_holdout)?,
        calib_labels: labels(&site_calib)?,
        eval_labels: labels(&site_eval)?,
        dev_train,
        dev_holdout,
        kfit,
        ktest,
        site_calib,
        site_eval,
        schema,
    })
}

/// Logits of one model on the three evaluation inputs.
struct ModelLogits {
    holdout: Vec<Vec<f64>>,
    calib: Vec<Vec<f64>>,
    eval: Vec<Vec<f64>>,
}

fn model_logits(model: &ModelParams, data: &SeedData, seed: u64) -> Result<ModelLogits> {
    let s = derive_seed(seed, SALT_IMAGES);
    Ok(ModelLogits {
        holdout: dataset_logits(model, &data.dev_holdout, &data.schema, s)?,
        calib: dataset_logits(model, &data.site_calib, &data.schema, s)?,
        eval: dataset_logits(model, &data.site_eval, &data.schema, s)?,
    })
}

fn scores(logits: &[Vec<f64>], calib: Option<&CalibrationParams>, taxonomy: &ConditionTaxonomy) -> Result<Vec<Vec<f64>>> {
    logits.iter().map(|z| scores_from_logits(z, calib, taxonomy)).collect()
}

fn fit_calibration(logits: &ModelLogits, data: &SeedData, taxonomy: &ConditionTaxonomy) -> Result<CalibrationParams> {
    let tops: Vec<ConditionId> = data.calib_labels.iter().map(|l| l.top1).collect();
    Ok(fit_temperatures(&logits.calib, &tops, taxonomy)?.params)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

struct ArmEval {
    result: ArmResult,
    sets: Vec<PredictionSet>,
    hits: Vec<f64>,
}

fn evaluate_arm(
    arm: Arm,
    logits: &ModelLogits,
    calib: Option<&CalibrationParams>,
    data: &SeedData,
    config: &ExperimentConfig,
    taxonomy: &ConditionTaxonomy,
    boot: &BootstrapConfig,
) -> Result<ArmEval> {
    let eval_scores = scores(&logits.eval, calib, taxonomy)?;
    let holdout_scores = scores(&logits.holdout, calib, taxonomy)?;
    let hits = topk_hits(&eval_scores, &data.eval_labels, config.eval.top_k)?;
    let top_k = metric_from_flags(&hits, None, boot)?;
    let p = &config.predict;
    let k_threshold = fit_k_threshold(
        &pick(&holdout_scores, &data.kfit),
        &pick(&data.holdout_labels, &data.kfit),
        taxonomy,
        p.k_min,
        p.k_max,
        p.target_sensitivity,
    )?;
    let sets: Vec<PredictionSet> = eval_scores.iter().map(|s| variable_k_predict(s, &k_threshold.threshold)).collect();
    let variable_k = variablek_accuracy(&sets, &data.eval_labels, None, boot)?;
    let tops: Vec<ConditionId> = data.eval_labels.iter().map(|l| l.top1).collect();
    let ece = expected_calibration_error(&eval_scores, &tops, config.calib.bins)?;
    Ok(ArmEval {
        result: ArmResult { arm, top_k, variable_k, k_threshold, ece, eval_set_hash: eval_set_hash(&data.site_eval) },
        sets,
        hits,
    })
}

fn quartiles(values: &mut [f64]) -> [f64; 3] {
    values.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (values.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Regression design over the evaluation cases: demographics, panel
/// ambiguity, reference category, site, location, year and quality flags.
pub fn regression_design(dataset: &Dataset, labels: &[ReferenceLabel], taxonomy: &ConditionTaxonomy) -> (Vec<Factor>, Vec<String>) {
    let col = |f: &dyn Fn(usize) -> String| -> Vec<String> { (0..dataset.len()).map(f).collect() };
    let cases = &dataset.cases;
    let table = taxonomy.category_table();
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut columns: Vec<(String, Vec<String>, Vec<String>)> = vec![
        ("age_group".into(), col(&|i| cases[i].demographics.age_group.clone()), strings(&crate::encoder::AGE_GROUPS)),
        ("sex".into(), col(&|i| cases[i].demographics.sex.clone()), strings(&["female", "male"])),
        (
            "efst".into(),
            col(&|i| cases[i].demographics.efst.as_str().to_string()),
            strings(&["I/II", "III/IV", "V/VI", "Unknown"]),
        ),
        (
            "ambiguity".into(),
            col(&|i| labels[i].ambiguity.as_str().to_string()),
            strings(&["unanimous", "intermediate", "ambiguous"]),
        ),
        ("category".into(), col(&|i| taxonomy.category_names()[table[labels[i].top1.0]].clone()), taxonomy.category_names().to_vec()),
        ("site".into(), col(&|i| cases[i].site.to_string()), strings(&["CLIN", "PAT"])),
        ("location".into(), col(&|i| cases[i].attrs.anatomic_location.clone()), vec![]),
        ("year".into(), col(&|i| cases[i].attrs.year.to_string()), vec![]),
    ];
    let mut flags: Vec<String> = cases.iter().flat_map(|c| c.attrs.quality_flags.iter().cloned()).collect();
    flags.sort();
    flags.dedup();
    for flag in flags {
        let values = col(&|i| if cases[i].attrs.quality_flags.contains(&flag) { "yes".into() } else { "no".into() });
        columns.push((format!("flag:{flag}"), values, strings(&["no", "yes"])));
    }
    let mut warnings = Vec::new();
    let mut factors = Vec::new();
    for (name, values, order) in columns {
        let mut order = order;
        if order.is_empty() {
            order = values.clone();
            order.sort();
            order.dedup();
        }
        let (factor, dropped) = Factor::from_values(&name, &values, &order);
        warnings.extend(dropped);
        if factor.levels.len() > 1 {
            factors.push(factor);
        }
    }
    (factors, warnings)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn run_seed(
    seed: u64,
    config: &ExperimentConfig,
    taxonomy: &ConditionTaxonomy,
) -> std::result::Result<(SeedReport, SeedFiles), StageError> {
    let data = prepare(seed, config, taxonomy)?;
    let boot = BootstrapConfig { n_boot: config.eval.n_boot, level: config.eval.level, seed: derive_seed(seed, SALT_BOOT) };
    let train_config = TrainConfig { seed: derive_seed(seed, SALT_TRAIN), ..config.train.clone() };
    let train_on = |dataset: &Dataset, stage: &'static str| -> std::result::Result<ModelParams, StageError> {
        let labels = dataset.reference_labels(taxonomy).stage(stage)?;
        Ok(train_dataset(dataset, &labels, &data.schema, taxonomy, &train_config, None).stage(stage)?.params)
    };
    let mut advisories = Vec::new();
    let mut evals: Vec<ArmEval> = Vec::with_capacity(Arm::ALL.len());

    // Arms 0 and 1: baseline and recalibrated baseline.
    let baseline = train_dataset(&data.dev_train, &data.dev_train_labels, &data.schema, taxonomy, &train_config, None)
        .stage("train baseline")?
        .params;
    let base_logits = model_logits(&baseline, &data, seed).stage("predict baseline")?;
    let base_calib = fit_calibration(&base_logits, &data, taxonomy).stage("calibrate baseline")?;
    evals.push(evaluate_arm(Arm::Baseline, &base_logits, None, &data, config, taxonomy, &boot).stage("evaluate baseline")?);
    evals.push(
        evaluate_arm(Arm::Recalibrated, &base_logits, Some(&base_calib), &data, config, taxonomy, &boot)
            .stage("evaluate recalibrated")?,
    );

    // Arm 2: retrain on DEV resampled to the site label distribution seen in the calibration split.
    let level = config.adapt.mh_level;
    let site_target = condition_distribution(&data.site_calib, taxonomy, level, false).stage("resample")?;
    let dev_dist = condition_distribution(&data.dev_train, taxonomy, level, false).stage("resample")?;
    let supported: Vec<bool> = dev_dist.probs.iter().map(|p| *p > 0.0).collect();
    let target = TargetDistribution::new(site_target).restricted_to(&supported).stage("resample")?;
    let n_out = (config.adapt.mh_size_factor * data.dev_train.len() as f64).round() as usize;
    let matched = mh_resample(&data.dev_train, &target, n_out, derive_seed(seed, SALT_MH), taxonomy).stage("resample")?;
    let mh_model = train_on(&matched, "train distribution matched")?;
    let mh_logits = model_logits(&mh_model, &data, seed).stage("predict distribution matched")?;
    let mh_calib = fit_calibration(&mh_logits, &data, taxonomy).stage("calibrate distribution matched")?;
    evals.push(
        evaluate_arm(Arm::DistributionMatched, &mh_logits, Some(&mh_calib), &data, config, taxonomy, &boot)
            .stage("evaluate distribution matched")?,
    );

    // Arm 3: random site cases added to DEV.
    let random = random_augment(&data.dev_train, &data.site_calib, config.adapt.n_add, derive_seed(seed, SALT_RANDOM))
        .stage("augment random")?;
    let random_model = train_on(&random, "train random augment")?;
    let random_logits = model_logits(&random_model, &data, seed).stage("predict random augment")?;
    evals.push(
        evaluate_arm(Arm::RandomAugment, &random_logits, None, &data, config, taxonomy, &boot)
            .stage("evaluate random augment")?,
    );

    // Arms 4 and 5: condition-aware augmentation, with and without recalibration.
    let augment = AugmentConfig {
        alpha: config.adapt.alpha,
        n_add: config.adapt.n_add,
        level: config.adapt.augment_level,
        seed: derive_seed(seed, SALT_AUGMENT),
    };
    let aware = condition_aware_augment(&data.dev_train, &data.site_calib, &augment, taxonomy).stage("augment condition aware")?;
    let aware_model = train_on(&aware, "train condition aware")?;
    let aware_logits = model_logits(&aware_model, &data, seed).stage("predict condition aware")?;
    let aware_calib = fit_calibration(&aware_logits, &data, taxonomy).stage("calibrate condition aware")?;
    evals.push(
        evaluate_arm(Arm::ConditionAware, &aware_logits, None, &data, config, taxonomy, &boot)
            .stage("evaluate condition aware")?,
    );
    evals.push(
        evaluate_arm(Arm::ConditionAwareRecalibrated, &aware_logits, Some(&aware_calib), &data, config, taxonomy, &boot)
            .stage("evaluate condition aware")?,
    );

    // Arms 6 and 7: classifier-only fine-tune of the baseline on the same augmented set.
    let finetune_config = TrainConfig { mode: TrainMode::ClassifierOnly, steps: config.finetune_steps, ..train_config.clone() };
    let aware_labels = aware.reference_labels(taxonomy).stage("train classifier only")?;
    let finetuned = train_dataset(&aware, &aware_labels, &data.schema, taxonomy, &finetune_config, Some(&baseline))
        .stage("train classifier only")?
        .params;
    let ft_logits = model_logits(&finetuned, &data, seed).stage("predict classifier only")?;
    let ft_calib = fit_calibration(&ft_logits, &data, taxonomy).stage("calibrate classifier only")?;
    evals.push(
        evaluate_arm(Arm::ClassifierOnly, &ft_logits, None, &data, config, taxonomy, &boot)
            .stage("evaluate classifier only")?,
    );
    evals.push(
        evaluate_arm(Arm::ClassifierOnlyRecalibrated, &ft_logits, Some(&ft_calib), &data, config, taxonomy, &boot)
            .stage("evaluate classifier only")?,
    );

    let hashes: Vec<&str> = evals.iter().map(|e| e.result.eval_set_hash.as_str()).collect();
    if hashes.iter().any(|h| *h != hashes[0]) {
        return Err(StageError { stage: "evaluate", error: Error::Config("arms evaluated on different sets".into()) });
    }
    for e in &evals {
        if e.result.k_threshold.advisory {
            advisories.push(format!("{}: variable-k target sensitivity not reached on DEV", e.result.arm.key()));
        }
    }

    // DEV holdout accuracy and the held-out half of the threshold check.
    let holdout_scores = scores(&base_logits.holdout, None, taxonomy).stage("evaluate holdout")?;
    let dev_holdout_top_k = metric_from_flags(
        &topk_hits(&holdout_scores, &data.holdout_labels, config.eval.top_k).stage("evaluate holdout")?,
        None,
        &boot,
    )
    .stage("evaluate holdout")?;
    let base_threshold = evals[0].result.k_threshold.threshold;
    let heldout_high_risk_sensitivity = high_risk_sensitivity(
        &pick(&holdout_scores, &data.ktest),
        &pick(&data.holdout_labels, &data.ktest),
        taxonomy,
        &base_threshold,
    )
    .unwrap_or(f64::NAN);
    let mut ks: Vec<f64> = evals[0].sets.iter().map(|s| s.k as f64).collect();
    let k_quartiles = quartiles(&mut ks);

    // Site evaluation set resampled toward the DEV label distribution.
    let eval_dist = condition_distribution(&data.site_eval, taxonomy, level, false).stage("resample eval")?;
    let eval_supported: Vec<bool> = eval_dist.probs.iter().map(|p| *p > 0.0).collect();
    let dev_target = TargetDistribution::new(dev_dist).restricted_to(&eval_supported).stage("resample eval")?;
    let resampled = mh_resample(&data.site_eval, &dev_target, data.site_eval.len(), derive_seed(seed, SALT_TEST_MH), taxonomy)
        .stage("resample eval")?;
    let resampled_labels = resampled.reference_labels(taxonomy).stage("resample eval")?;
    let resampled_logits =
        dataset_logits(&baseline, &resampled, &data.schema, derive_seed(seed, SALT_IMAGES)).stage("resample eval")?;
    let resampled_scores = scores(&resampled_logits, None, taxonomy).stage("resample eval")?;
    let resampled_eval_top_k = metric_from_flags(
        &topk_hits(&resampled_scores, &resampled_labels, config.eval.top_k).stage("resample eval")?,
        None,
        &boot,
    )
    .stage("resample eval")?;

    // Factor regression on baseline correctness.
    let (factors, warnings) = regression_design(&data.site_eval, &data.eval_labels, taxonomy);
    advisories.extend(warnings);
    let outcome: Vec<bool> = evals[0].hits.iter().map(|h| *h > 0.5).collect();
    let regression = match factor_regression(&factors, &outcome) {
        Ok(fit) => {
            advisories.extend(fit.advisories);
            fit.rows
        }
        Err(e) => {
            advisories.push(format!("regression skipped: {e}"));
            Vec::new()
        }
    };

    // Files.
    let metric = format!("top{}", config.eval.top_k);
    let strata_columns: [(&str, Box<dyn Fn(usize) -> String>); 5] = [
        ("sex", Box::new(|i: usize| data.site_eval.cases[i].demographics.sex.clone())),
        ("age_group", Box::new(|i: usize| data.site_eval.cases[i].demographics.age_group.clone())),
        ("efst", Box::new(|i: usize| data.site_eval.cases[i].demographics.efst.as_str().to_string())),
        ("ambiguity", Box::new(|i: usize| data.eval_labels[i].ambiguity.as_str().to_string())),
        ("site", Box::new(|i: usize| data.site_eval.cases[i].site.to_string())),
    ];
    let mut rows: Vec<StratumRow> = Vec::new();
    for e in &evals {
        let key = e.result.arm.key();
        rows.push(StratumRow { metric: format!("{key}:{metric}"), stratum: "all".into(), result: Some(e.result.top_k) });
        rows.push(StratumRow {
            metric: format!("{key}:variable_k"),
            stratum: "all".into(),
            result: Some(e.result.variable_k.accuracy),
        });
        for (name, f) in &strata_columns {
            let strata: Vec<String> = (0..data.site_eval.len()).map(|i| format!("{name}={}", f(i))).collect();
            let mut levels = strata.clone();
            levels.sort();
            levels.dedup();
            rows.extend(
                stratified_table(&format!("{key}:{metric}"), &e.hits, None, &strata, &levels, &boot)
                    .stage("stratified metrics")?,
            );
        }
    }
    rows.push(StratumRow { metric: format!("baseline:{metric}"), stratum: "dev_holdout".into(), result: Some(dev_holdout_top_k) });
    rows.push(StratumRow {
        metric: format!("baseline:{metric}"),
        stratum: "eval_resampled_to_dev".into(),
        result: Some(resampled_eval_top_k),
    });

    let records: Vec<PredictionRecord> = data
        .site_eval
        .cases
        .iter()
        .zip(&evals[0].sets)
        .map(|(c, s)| PredictionRecord::new(&c.case_id, s, taxonomy))
        .collect();
    let dir = format!("seed-{seed}");
    let stage = "write";
    let files = vec![
        (format!("{dir}/metrics.csv"), csv_bytes(|b| write_metrics_csv(b, &rows)).stage(stage)?),
        (format!("{dir}/regression.csv"), csv_bytes(|b| write_regression_csv(b, &regression)).stage(stage)?),
        (format!("{dir}/predictions_baseline.jsonl"), csv_bytes(|b| write_predictions(b, &records)).stage(stage)?),
        (
            format!("{dir}/calibration_baseline.json"),
            serde_json::to_vec_pretty(&CalibrationArtifact::new(
                &fit_temperatures(
                    &base_logits.calib,
                    &data.calib_labels.iter().map(|l| l.top1).collect::<Vec<_>>(),
                    taxonomy,
                )
                .stage("calibrate baseline")?,
                taxonomy,
            ))
            .map_err(Error::from)
            .stage(stage)?,
        ),
        (
            format!("{dir}/model_baseline.json"),
            serde_json::to_vec(&ModelArtifact::new(baseline.clone(), train_config.clone(), taxonomy, data.schema.clone()))
                .map_err(Error::from)
                .stage(stage)?,
        ),
    ];
    let report = SeedReport {
        seed,
        arms: evals.into_iter().map(|e| e.result).collect(),
        dev_holdout_top_k,
        resampled_eval_top_k,
        heldout_high_risk_sensitivity,
        k_quartiles,
        temperatures: base_calib.temperatures,
        regression,
        advisories,
    };
    Ok((report, SeedFiles { files }))
}

fn summary_csv(reports: &[SeedReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "seed", "arm", "label", "top_k", "top_k_ci_lo", "top_k_ci_hi", "variable_k", "variable_k_ci_lo",
        "variable_k_ci_hi", "mean_k", "threshold", "ece", "n",
    ])?;
    for r in reports {
        for (i, a) in r.arms.iter().enumerate() {
            w.write_record([
                r.seed.to_string(),
                i.to_string(),
                a.arm.label().to_string(),
                format!("{:.6}", a.top_k.value),
                format!("{:.6}", a.top_k.ci_lo),
                format!("{:.6}", a.top_k.ci_hi),
                format!("{:.6}", a.variable_k.accuracy.value),
                format!("{:.6}", a.variable_k.accuracy.ci_lo),
                format!("{:.6}", a.variable_k.accuracy.ci_hi),
                format!("{:.4}", a.variable_k.mean_k),
                format!("{:.2}", a.k_threshold.threshold.threshold),
                format!("{:.6}", a.ece),
                a.top_k.n.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn ladder_text(reports: &[SeedReport], failures: &[SeedFailure], top_k: usize) -> String {
    let mut out = String::new();
    let n = reports.len();
    let _ = writeln!(out, "Intervention ladder: site evaluation top-{top_k} accuracy, mean over {n} seed(s)");
    if n == 0 {
        let _ = writeln!(out, "(no seed completed)");
    } else {
        let mean = |f: &dyn Fn(&SeedReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let base = mean(&|r| r.arms[0].top_k.value);
        let _ = writeln!(out, "{:<4} {:<80} {:>8} {:>8} {:>10} {:>8}", "arm", "label", "top-k", "delta", "beats base", "var-k");
        for (i, arm) in Arm::ALL.iter().enumerate() {
            let v = mean(&|r| r.arms[i].top_k.value);
            let vk = mean(&|r| r.arms[i].variable_k.accuracy.value);
            let wins = reports.iter().filter(|r| r.arms[i].top_k.value > r.arms[0].top_k.value).count();
            let _ = writeln!(
                out,
                "{i:<4} {:<80} {:>7.2}% {:>+7.2} {:>7}/{n:<2} {:>7.2}%",
                arm.label(),
                100.0 * v,
                100.0 * (v - base),
                wins,
                100.0 * vk
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "Baseline on held-out DEV:                {:>7.2}%", 100.0 * mean(&|r| r.dev_holdout_top_k.value));
        let _ = writeln!(out, "Baseline on site eval resampled to DEV:  {:>7.2}%", 100.0 * mean(&|r| r.resampled_eval_top_k.value));
    }
    for f in failures {
        let _ = writeln!(out, "seed {} failed at stage `{}`: {}", f.seed, f.stage, f.error);
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs every seed (concurrently), writes the report bundle and returns it.
/// A failing seed is recorded in the manifest and does not stop the others.
pub fn run_pipeline(config: &ExperimentConfig, taxonomy: &ConditionTaxonomy) -> Result<ReportBundle> {
    config.validate(taxonomy)?;
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir)?;

    let outcomes: Vec<_> = config.seeds.par_iter().map(|&seed| (seed, run_seed(seed, config, taxonomy))).collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut statuses = Vec::new();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok((report, seed_files)) => {
                statuses.push(SeedStatus {
                    seed,
                    status: "ok".into(),
                    stage: None,
                    error: None,
                    eval_set_hash: Some(report.arms[0].eval_set_hash.clone()),
                });
                files.extend(seed_files.files);
                reports.push(report);
            }
            Err(StageError { stage, error }) => {
                statuses.push(SeedStatus {
                    seed,
                    status: "failed".into(),
                    stage: Some(stage.into()),
                    error: Some(error.to_string()),
                    eval_set_hash: None,
                });
                failures.push(SeedFailure { seed, stage: stage.into(), error: error.to_string(), exit_code: error.exit_code() });
            }
        }
    }
    files.push(("config.json".into(), serde_json::to_vec_pretty(config)?));
    files.push(("summary.csv".into(), summary_csv(&reports)?));
    files.push(("ladder.txt".into(), ladder_text(&reports, &failures, config.eval.top_k).into_bytes()));
    files.push(("seed_reports.json".into(), serde_json::to_vec_pretty(&reports)?));

    let mut artifacts = Vec::with_capacity(files.len());
    for (rel, bytes) in &files {
        let path = out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        artifacts.push(ArtifactEntry { path: rel.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() });
    }
    let manifest = Manifest { complete: failures.is_empty(), seeds: statuses, artifacts };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(ReportBundle { reports, failures, manifest })
}

/// Reads a JSON experiment config.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("experiment config: {e}")))
}
