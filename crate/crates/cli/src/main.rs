//! `dermshift`: generate synthetic sites, train, recalibrate, adapt and
//! evaluate skin-condition classifiers under label shift.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dermshift::adapt::{condition_aware_augment, mh_resample, random_augment, stratified_split, TargetDistribution};
use dermshift::calibrate::{expected_calibration_error, fit_temperatures, CalibrationArtifact};
use dermshift::dataio::{condition_distribution, load_dataset, Dataset};
use dermshift::eval::{
    metric_from_flags, set_hits, stratified_table, topk_hits, write_metrics_csv, write_regression_csv, StratumRow,
};
use dermshift::pipeline::{load_config, regression_design};
use dermshift::predict::{
    dataset_logits, fit_k_threshold, scores_from_logits, top_k, variable_k_predict, write_predictions, KThreshold,
    PredictionRecord,
};
use dermshift::trainer::{train_dataset, ModelArtifact};
use dermshift::{
    factor_regression, generate_synthetic_sites, run_pipeline, AugmentConfig, BootstrapConfig, CalibrationParams,
    ConditionId, ConditionTaxonomy, Error, ExperimentConfig, MetadataSchema, Result, TrainConfig, TrainMode,
};

#[derive(Debug, Parser)]
#[command(name = "dermshift", version, about)]
struct Cli {
    /// Experiment config (JSON). Desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the command. For `pipeline`, runs only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Taxonomy JSON. The built-in desk taxonomy when omitted.
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic DEV and site datasets (`dev.jsonl`, `site.jsonl`).
    Generate,
    /// Train a model on a dataset (`model.json`).
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Start from an existing model instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Freeze the fusion layer and train only the classifier head.
        #[arg(long, requires = "init")]
        classifier_only: bool,
    },
    /// Fit per-category temperatures on a calibration set (`calibration.json`).
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Build an adapted training set, or split site data into calib/eval.
    Adapt {
        #[arg(long, value_enum)]
        method: AdaptMethod,
        /// Training source (DEV) for `mh`, `condition-aware` and `random`; site data for `split`.
        #[arg(long)]
        dev: PathBuf,
        /// Site data: the target distribution for `mh`, the case pool for augmentation.
        #[arg(long)]
        site: Option<PathBuf>,
        /// Output size for `mh`; defaults to the configured multiple of the source size.
        #[arg(long)]
        n_out: Option<usize>,
    },
    /// Score a dataset (`predictions.jsonl`).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Cumulative-score threshold for variable-k sets; fixed top-k otherwise.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Accuracy with bootstrap CIs, strata and factor regression (`metrics.csv`, `regression.csv`).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Held-out DEV data on which to fit the variable-k threshold.
        #[arg(long)]
        threshold_data: Option<PathBuf>,
    },
    /// Run every arm for every seed and write the report bundle.
    Pipeline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AdaptMethod {
    Mh,
    ConditionAware,
    Random,
    Split,
}

struct Context {
    config: ExperimentConfig,
    taxonomy: ConditionTaxonomy,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self, path: &Path) -> Result<Dataset> {
        load_dataset(path, &self.taxonomy, &MetadataSchema::desk_default())
    }

    fn boot(&self) -> BootstrapConfig {
        BootstrapConfig { n_boot: self.config.eval.n_boot, level: self.config.eval.level, seed: self.seed }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn run(cli: Cli) -> Result<i32> {
    let taxonomy = match &cli.taxonomy {
        Some(p) => ConditionTaxonomy::load(p).map_err(|e| Error::Config(format!("taxonomy: {e}")))?,
        None => ConditionTaxonomy::desk_default(),
    };
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::desk_default(&taxonomy),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate(&taxonomy)?;
    let ctx = Context { seed: config.seeds[0], out: config.output_dir.clone(), config, taxonomy };
    std::fs::create_dir_all(&ctx.out)?;

    match cli.command {
        Command::Generate => generate(&ctx),
        Command::Train { data, init, classifier_only } => train(&ctx, &data, init.as_deref(), classifier_only),
        Command::Calibrate { model, data } => calibrate(&ctx, &model, &data),
        Command::Adapt { method, dev, site, n_out } => adapt(&ctx, method, &dev, site.as_deref(), n_out),
        Command::Predict { model, data, calibration, threshold } => {
            predict(&ctx, &model, &data, calibration.as_deref(), threshold)
        }
        Command::Evaluate { model, data, calibration, threshold_data } => {
            evaluate(&ctx, &model, &data, calibration.as_deref(), threshold_data.as_deref())
        }
        Command::Pipeline => {
            let bundle = run_pipeline(&ctx.config, &ctx.taxonomy)?;
            print!("{}", std::fs::read_to_string(ctx.path("ladder.txt"))?);
            for f in &bundle.failures {
                eprintln!("seed {} failed at {}: {}", f.seed, f.stage, f.error);
            }
            return Ok(bundle.exit_code());
        }
    }?;
    Ok(0)
}

fn generate(ctx: &Context) -> Result<()> {
    let generator = dermshift::GeneratorConfig { seed: ctx.seed, ..ctx.config.generator.clone() };
    let sites = generate_synthetic_sites(&generator, &ctx.taxonomy, &MetadataSchema::desk_default())?;
    sites.dev.save(ctx.path("dev.jsonl"))?;
    sites.site.save(ctx.path("site.jsonl"))?;
    println!("wrote {} DEV and {} site cases to {}", sites.dev.len(), sites.site.len(), ctx.out.display());
    Ok(())
}

fn load_model(ctx: &Context, path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::load(path, &ctx.taxonomy)
}

fn train(ctx: &Context, data: &Path, init: Option<&Path>, classifier_only: bool) -> Result<()> {
    let dataset = ctx.dataset(data)?;
    let labels = dataset.reference_labels(&ctx.taxonomy)?;
    let init = init.map(|p| load_model(ctx, p)).transpose()?;
    // A warm start keeps the metadata encoding it was trained with.
    let schema = match &init {
        Some(a) => a.metadata_schema.clone(),
        None => MetadataSchema::desk_default().with_age_fit(dataset.cases.iter().map(|c| c.age))?,
    };
    let mut config = TrainConfig { seed: ctx.seed, ..ctx.config.train.clone() };
    if classifier_only {
        config.mode = TrainMode::ClassifierOnly;
        config.steps = ctx.config.finetune_steps;
    }
    let out = train_dataset(&dataset, &labels, &schema, &ctx.taxonomy, &config, init.as_ref().map(|a| &a.params))?;
    let final_loss = out.loss_trace.last().map_or(f64::NAN, |&(_, l)| l);
    ModelArtifact::new(out.params, config, &ctx.taxonomy, schema).save(ctx.path("model.json"))?;
    println!("trained on {} cases, final loss {final_loss:.4}", dataset.len());
    Ok(())
}

fn calibrate(ctx: &Context, model: &Path, data: &Path) -> Result<()> {
    let model = load_model(ctx, model)?;
    let dataset = ctx.dataset(data)?;
    let tops: Vec<ConditionId> = dataset.reference_labels(&ctx.taxonomy)?.iter().map(|l| l.top1).collect();
    let logits = dataset_logits(&model.params, &dataset, &model.metadata_schema, ctx.seed)?;
    let fit = fit_temperatures(&logits, &tops, &ctx.taxonomy)?;
    CalibrationArtifact::new(&fit, &ctx.taxonomy).save(ctx.path("calibration.json"))?;
    for (name, t) in ctx.taxonomy.category_names().iter().zip(&fit.params.temperatures) {
        println!("{name}\tT={t:.4}");
    }
    Ok(())
}

fn adapt(ctx: &Context, method: AdaptMethod, dev: &Path, site: Option<&Path>, n_out: Option<usize>) -> Result<()> {
    let dev = ctx.dataset(dev)?;
    if let AdaptMethod::Split = method {
        let (calib, eval) = stratified_split(&dev, ctx.config.calib.split_frac, ctx.seed, &ctx.taxonomy)?;
        calib.save(ctx.path("calib.jsonl"))?;
        eval.save(ctx.path("eval.jsonl"))?;
        println!("split {} cases into {} calib and {} eval", dev.len(), calib.len(), eval.len());
        return Ok(());
    }
    let site = site.ok_or_else(|| Error::Config("--site is required for this method".into()))?;
    let site = ctx.dataset(site)?;
    let adapt = &ctx.config.adapt;
    let adapted = match method {
        AdaptMethod::Mh => {
            let level = adapt.mh_level;
            let dev_dist = condition_distribution(&dev, &ctx.taxonomy, level, false)?;
            let supported: Vec<bool> = dev_dist.probs.iter().map(|p| *p > 0.0).collect();
            let target = TargetDistribution::new(condition_distribution(&site, &ctx.taxonomy, level, false)?)
                .restricted_to(&supported)?;
            let n_out = n_out.unwrap_or((adapt.mh_size_factor * dev.len() as f64).round() as usize);
            mh_resample(&dev, &target, n_out, ctx.seed, &ctx.taxonomy)?
        }
        AdaptMethod::ConditionAware => {
            let config = AugmentConfig { alpha: adapt.alpha, n_add: adapt.n_add, level: adapt.augment_level, seed: ctx.seed };
            condition_aware_augment(&dev, &site, &config, &ctx.taxonomy)?
        }
        AdaptMethod::Random => random_augment(&dev, &site, adapt.n_add, ctx.seed)?,
        AdaptMethod::Split => unreachable!("handled above"),
    };
    adapted.save(ctx.path("adapted.jsonl"))?;
    println!("wrote {} cases", adapted.len());
    Ok(())
}

fn load_calibration(ctx: &Context, path: Option<&Path>) -> Result<Option<CalibrationParams>> {
    path.map(|p| CalibrationArtifact::load(p, &ctx.taxonomy)).transpose()
}

fn scores(ctx: &Context, model: &ModelArtifact, data: &Dataset, calib: Option<&CalibrationParams>) -> Result<Vec<Vec<f64>>> {
    dataset_logits(&model.params, data, &model.metadata_schema, ctx.seed)?
        .iter()
        .map(|z| scores_from_logits(z, calib, &ctx.taxonomy))
        .collect()
}

fn predict(ctx: &Context, model: &Path, data: &Path, calibration: Option<&Path>, threshold: Option<f64>) -> Result<()> {
    let model = load_model(ctx, model)?;
    let dataset = ctx.dataset(data)?;
    let calib = load_calibration(ctx, calibration)?;
    let scores = scores(ctx, &model, &dataset, calib.as_ref())?;
    let th = threshold.map(|t| KThreshold {
        threshold: t,
        k_min: ctx.config.predict.k_min,
        k_max: ctx.config.predict.k_max,
        target_sensitivity: ctx.config.predict.target_sensitivity,
    });
    if let Some(th) = &th {
        th.validate(ctx.taxonomy.num_conditions())?;
    }
    let records: Vec<PredictionRecord> = dataset
        .cases
        .iter()
        .zip(&scores)
        .map(|(case, s)| {
            let set = match &th {
                Some(th) => variable_k_predict(s, th),
                None => top_k(s, ctx.config.eval.top_k),
            };
            PredictionRecord::new(&case.case_id, &set, &ctx.taxonomy)
        })
        .collect();
    write_predictions(BufWriter::new(File::create(ctx.path("predictions.jsonl"))?), &records)?;
    println!("wrote {} predictions", records.len());
    Ok(())
}

fn evaluate(
    ctx: &Context,
    model: &Path,
    data: &Path,
    calibration: Option<&Path>,
    threshold_data: Option<&Path>,
) -> Result<()> {
    let model = load_model(ctx, model)?;
    let dataset = ctx.dataset(data)?;
    let labels = dataset.reference_labels(&ctx.taxonomy)?;
    let calib = load_calibration(ctx, calibration)?;
    let scores = scores(ctx, &model, &dataset, calib.as_ref())?;
    let boot = ctx.boot();
    let weights = dataset.weights();
    let k = ctx.config.eval.top_k;
    let metric = format!("top{k}");

    let hits = topk_hits(&scores, &labels, k)?;
    let overall = metric_from_flags(&hits, weights.as_deref(), &boot)?;
    println!("{metric}: {:.4} [{:.4}, {:.4}] n={}", overall.value, overall.ci_lo, overall.ci_hi, overall.n);
    let tops: Vec<ConditionId> = labels.iter().map(|l| l.top1).collect();
    println!("ece: {:.4}", expected_calibration_error(&scores, &tops, ctx.config.calib.bins)?);

    let mut rows = vec![StratumRow { metric: metric.clone(), stratum: "all".into(), result: Some(overall) }];
    if let Some(path) = threshold_data {
        let holdout = ctx.dataset(path)?;
        let holdout_scores = self::scores(ctx, &model, &holdout, calib.as_ref())?;
        let p = &ctx.config.predict;
        let fit = fit_k_threshold(
            &holdout_scores,
            &holdout.reference_labels(&ctx.taxonomy)?,
            &ctx.taxonomy,
            p.k_min,
            p.k_max,
            p.target_sensitivity,
        )?;
        let sets: Vec<_> = scores.iter().map(|s| variable_k_predict(s, &fit.threshold)).collect();
        let result = metric_from_flags(&set_hits(&sets, &labels)?, weights.as_deref(), &boot)?;
        let mean_k = sets.iter().map(|s| s.k as f64).sum::<f64>() / sets.len() as f64;
        println!(
            "variable_k: {:.4} [{:.4}, {:.4}] threshold {:.2} mean k {mean_k:.3}{}",
            result.value,
            result.ci_lo,
            result.ci_hi,
            fit.threshold.threshold,
            if fit.advisory { " (target sensitivity not reached)" } else { "" }
        );
        rows.push(StratumRow { metric: "variable_k".into(), stratum: "all".into(), result: Some(result) });
        std::fs::write(ctx.path("k_threshold.json"), serde_json::to_vec_pretty(&fit.threshold)?)?;
    }

    let columns: [(&str, Box<dyn Fn(usize) -> String>); 5] = [
        ("sex", Box::new(|i| dataset.cases[i].demographics.sex.clone())),
        ("age_group", Box::new(|i| dataset.cases[i].demographics.age_group.clone())),
        ("efst", Box::new(|i| dataset.cases[i].demographics.efst.as_str().to_string())),
        ("ambiguity", Box::new(|i| labels[i].ambiguity.as_str().to_string())),
        ("site", Box::new(|i| dataset.cases[i].site.to_string())),
    ];
    for (name, f) in &columns {
        let strata: Vec<String> = (0..dataset.len()).map(|i| format!("{name}={}", f(i))).collect();
        let mut levels = strata.clone();
        levels.sort();
        levels.dedup();
        rows.extend(stratified_table(&metric, &hits, weights.as_deref(), &strata, &levels, &boot)?);
    }
    write_metrics_csv(File::create(ctx.path("metrics.csv"))?, &rows)?;

    let (factors, warnings) = regression_design(&dataset, &labels, &ctx.taxonomy);
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let outcome: Vec<bool> = hits.iter().map(|h| *h > 0.5).collect();
    match factor_regression(&factors, &outcome) {
        Ok(fit) => {
            for a in &fit.advisories {
                eprintln!("warning: {a}");
            }
            write_regression_csv(File::create(ctx.path("regression.csv"))?, &fit.rows)?;
        }
        Err(e) => eprintln!("warning: regression skipped: {e}"),
    }
    Ok(())
}
