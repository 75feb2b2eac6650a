use dermshift::pipeline::{Arm, Manifest, ReportBundle, SeedFailure};
use dermshift::{run_pipeline, ConditionTaxonomy, ExperimentConfig};
use sha2::{Digest, Sha256};

fn small_config(out: &std::path::Path) -> (ConditionTaxonomy, ExperimentConfig) {
    let taxonomy = ConditionTaxonomy::desk_default();
    let mut config = ExperimentConfig::desk_default(&taxonomy);
    config.generator.n_dev = 500;
    config.generator.n_site = 300;
    config.train.steps = 200;
    config.finetune_steps = 100;
    config.adapt.n_add = 20;
    config.adapt.mh_size_factor = 1.0;
    config.eval.n_boot = 100;
    config.seeds = vec![7];
    config.output_dir = out.to_path_buf();
    (taxonomy, config)
}

#[test]
fn single_seed_run_reports_every_arm_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (taxonomy, config) = small_config(dir.path());
    let bundle = run_pipeline(&config, &taxonomy).unwrap();
    assert_eq!(bundle.exit_code(), 0);
    assert!(bundle.failures.is_empty());

    let report = &bundle.reports[0];
    let arms: Vec<Arm> = report.arms.iter().map(|a| a.arm).collect();
    assert_eq!(arms, Arm::ALL);
    let hash = &report.arms[0].eval_set_hash;
    assert!(report.arms.iter().all(|a| &a.eval_set_hash == hash));
    for a in &report.arms {
        assert!((0.0..=1.0).contains(&a.top_k.value));
        assert!(a.top_k.ci_lo <= a.top_k.value && a.top_k.value <= a.top_k.ci_hi);
        assert!((3.0..=7.0).contains(&a.variable_k.mean_k));
        assert!(a.ece.is_finite() && a.ece >= 0.0);
    }
    assert_eq!(report.temperatures.len(), taxonomy.num_categories());

    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(summary.as_bytes());
    let labels: Vec<String> = rows.records().map(|r| r.unwrap()[2].to_string()).collect();
    assert_eq!(labels, Arm::ALL.map(|a| a.label().to_string()));

    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.complete);
    assert_eq!(manifest.seeds[0].eval_set_hash.as_deref(), Some(hash.as_str()));
    for artifact in &manifest.artifacts {
        let bytes = std::fs::read(dir.path().join(&artifact.path)).unwrap();
        assert_eq!(bytes.len(), artifact.bytes, "{}", artifact.path);
        assert_eq!(hex::encode(Sha256::digest(&bytes)), artifact.sha256, "{}", artifact.path);
        if artifact.path.ends_with(".json") {
            serde_json::from_slice::<serde_json::Value>(&bytes).unwrap();
        }
    }

    let failure = SeedFailure { seed: 8, stage: "train".into(), error: "diverged".into(), exit_code: 3 };
    let partial = ReportBundle { failures: vec![failure], ..bundle };
    assert_eq!(partial.exit_code(), 4);
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let (taxonomy, mut config) = small_config(&dir.path().join("out"));
    config.seeds.clear();
    let err = run_pipeline(&config, &taxonomy).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn exit_code_of_total_failure_is_the_first_error_class() {
    let manifest = Manifest { complete: false, seeds: vec![], artifacts: vec![] };
    let failure = SeedFailure { seed: 1, stage: "train".into(), error: "diverged".into(), exit_code: 3 };
    let total = ReportBundle { reports: vec![], failures: vec![failure], manifest };
    assert_eq!(total.exit_code(), 3);
}
