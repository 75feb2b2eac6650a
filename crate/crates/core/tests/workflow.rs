use std::collections::BTreeMap;

use dermshift::adapt::{split_stratum, stratified_split_indices};
use dermshift::encoder::encode_metadata;
use dermshift::predict::{dataset_logits, high_risk_sensitivity, scores_from_logits};
use dermshift::rng::stream_rng;
use dermshift::taxonomy::Condition;
use dermshift::trainer::TrainingSet;
use dermshift::{
    expected_calibration_error, fit_k_threshold, fit_temperatures, generate_synthetic_sites, predict_case, recalibrate,
    train, Ambiguity, CategoryId, ConditionId, ConditionTaxonomy, Dataset, GeneratorConfig, MetadataSchema,
    ModelParams, TrainConfig,
};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn sites(taxonomy: &ConditionTaxonomy, n_dev: usize, n_site: usize, seed: u64) -> dermshift::SyntheticSites {
    let config = GeneratorConfig { n_dev, n_site, seed, ..GeneratorConfig::desk_default(taxonomy) };
    generate_synthetic_sites(&config, taxonomy, &MetadataSchema::desk_default()).unwrap()
}

fn two_condition_taxonomy() -> ConditionTaxonomy {
    let condition = |id: usize, name: &str| Condition {
        id: ConditionId(id),
        name: name.into(),
        category: CategoryId(0),
        high_risk: id == 1,
        synonyms: vec![],
    };
    ConditionTaxonomy::new(vec!["only".into()], vec![condition(0, "eczema"), condition(1, "melanoma")]).unwrap()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_weights_predict_uniform_scores() {
    let taxonomy = ConditionTaxonomy::desk_default();
    let data = sites(&taxonomy, 50, 20, 1);
    let schema = MetadataSchema::desk_default();
    let mut rng = stream_rng(1, 0);
    let mut model = ModelParams::init(schema.input_width(), 8, data.dev.dim, taxonomy.num_conditions(), &mut rng);
    model.classifier_w.fill(0.0);
    model.classifier_b.fill(0.0);
    let c = taxonomy.num_conditions() as f64;
    for case in &data.dev.cases {
        let scores = predict_case(&model, case, &schema, None, &taxonomy, &mut rng).unwrap();
        assert!(scores.iter().all(|s| (s - 1.0 / c).abs() < 1e-15));
    }
}

#[test]
fn prediction_matches_hand_composition() {
    let taxonomy = two_condition_taxonomy();
    let config = GeneratorConfig { dim: 2, n_dev: 10, n_site: 10, seed: 3, ..GeneratorConfig::desk_default(&taxonomy) };
    let schema = MetadataSchema::desk_default();
    let data = generate_synthetic_sites(&config, &taxonomy, &schema).unwrap();
    let mut rng = stream_rng(3, 1);
    let mut model = ModelParams::init(schema.input_width(), 3, 2, 2, &mut rng);
    model.film.alpha_proj = random_matrix(3, 2, &mut rng);
    model.film.beta_proj = random_matrix(3, 2, &mut rng);
    model.film.alpha_bias = ndarray::arr1(&[0.7, -1.3]);
    model.film.beta_bias = ndarray::arr1(&[0.2, 0.4]);
    model.classifier_w = random_matrix(2, 2, &mut rng);
    model.classifier_b = ndarray::arr1(&[0.5, -0.25]);

    for (n, case) in data.site.cases.iter().enumerate() {
        let mut case = case.clone();
        case.image_embeddings = (0..=n % 4).map(|i| vec![0.3 * i as f64 - 0.5, 1.0 - 0.2 * n as f64]).collect();
        let m = encode_metadata(&case.metadata, case.age, &schema).unwrap();

        let k = case.image_embeddings.len() as f64;
        let x: Vec<f64> = (0..2).map(|d| case.image_embeddings.iter().map(|e| e[d]).sum::<f64>() / k).collect();
        let film = &model.film;
        let e: Vec<f64> = (0..3)
            .map(|j| film.metadata_bias[j] + (0..m.len()).map(|i| m[i] * film.metadata_proj[[i, j]]).sum::<f64>())
            .collect();
        let fused: Vec<f64> = (0..2)
            .map(|d| {
                let alpha = film.alpha_bias[d] + (0..3).map(|j| e[j] * film.alpha_proj[[j, d]]).sum::<f64>();
                let beta = film.beta_bias[d] + (0..3).map(|j| e[j] * film.beta_proj[[j, d]]).sum::<f64>();
                alpha * x[d] + beta
            })
            .collect();
        let logits: Vec<f64> = (0..2)
            .map(|c| model.classifier_b[c] + (0..2).map(|d| model.classifier_w[[c, d]] * fused[d]).sum::<f64>())
            .collect();
        let p1 = 1.0 / (1.0 + (logits[0] - logits[1]).exp());

        let scores = predict_case(&model, &case, &schema, None, &taxonomy, &mut rng).unwrap();
        assert!((scores[1] - p1).abs() < 1e-12 && (scores[0] - (1.0 - p1)).abs() < 1e-12, "{scores:?} vs {p1}");
    }
}

#[test]
fn stratified_split_is_proportional_in_every_stratum() {
    let taxonomy = ConditionTaxonomy::desk_default();
    for seed in 0..3 {
        let site = sites(&taxonomy, 50, 1000, seed).site;
        let (calib, eval) = stratified_split_indices(&site, 0.2, seed, &taxonomy).unwrap();
        let mut all: Vec<usize> = calib.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..site.len()).collect::<Vec<_>>());

        let labels = site.reference_labels(&taxonomy).unwrap();
        let key = |i: usize| split_stratum(labels[i].top1, &site.cases[i]);
        let mut total = BTreeMap::new();
        let mut picked = BTreeMap::new();
        for i in 0..site.len() {
            *total.entry(key(i)).or_insert(0usize) += 1;
        }
        for &i in &calib {
            *picked.entry(key(i)).or_insert(0usize) += 1;
        }
        for (k, &m) in &total {
            let got = picked.get(k).copied().unwrap_or(0) as f64;
            assert!((got - (0.2 * m as f64).round()).abs() <= 1.0, "stratum {k:?}: {got} of {m}");
        }

        let marginal_tv = |f: &dyn Fn(usize) -> String| {
            let mut p = BTreeMap::<String, [f64; 2]>::new();
            for i in 0..site.len() {
                p.entry(f(i)).or_default()[0] += 1.0 / site.len() as f64;
            }
            for &i in &calib {
                p.entry(f(i)).or_default()[1] += 1.0 / calib.len() as f64;
            }
            0.5 * p.values().map(|[a, b]| (a - b).abs()).sum::<f64>()
        };
        let c = &site.cases;
        assert!(marginal_tv(&|i| labels[i].top1.0.to_string()) <= 0.1);
        assert!(marginal_tv(&|i| c[i].demographics.sex.clone()) <= 0.1);
        assert!(marginal_tv(&|i| c[i].demographics.age_group.clone()) <= 0.1);
        assert!(marginal_tv(&|i| c[i].demographics.efst.as_str().to_string()) <= 0.1);
    }
}

/// Labels drawn from `softmax(z)`, reported logits `3 z`: a model that is right
/// about the ranking but three times too confident.
fn overconfident_sample(n: usize, c: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<ConditionId>) {
    let mut logits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let hot = rng.random_range(0..c);
        let z: Vec<f64> = (0..c)
            .map(|i| 0.8 * Distribution::<f64>::sample(&StandardNormal, rng) + if i == hot { 1.5 } else { 0.0 })
            .collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let y = w.iter().position(|&p| {
            u -= p;
            u <= 0.0
        });
        labels.push(ConditionId(y.unwrap_or(c - 1)));
        logits.push(z.iter().map(|v| 3.0 * v).collect());
    }
    (logits, labels)
}

#[test]
fn recalibration_lowers_held_out_ece() {
    let taxonomy = ConditionTaxonomy::desk_default();
    let c = taxonomy.num_conditions();
    let mut improved = 0;
    for seed in 0..10 {
        let mut rng = stream_rng(seed, 0);
        let (calib_logits, calib_labels) = overconfident_sample(3000, c, &mut rng);
        let (test_logits, test_labels) = overconfident_sample(2000, c, &mut rng);
        let fit = fit_temperatures(&calib_logits, &calib_labels, &taxonomy).unwrap();
        assert!(fit.params.temperatures.iter().all(|&t| t > 1.0), "{:?}", fit.params.temperatures);
        let before: Vec<Vec<f64>> = test_logits.iter().map(|z| scores_from_logits(z, None, &taxonomy).unwrap()).collect();
        let after: Vec<Vec<f64>> = test_logits.iter().map(|z| recalibrate(z, &fit.params, &taxonomy).unwrap()).collect();
        let ece_before = expected_calibration_error(&before, &test_labels, 10).unwrap();
        let ece_after = expected_calibration_error(&after, &test_labels, 10).unwrap();
        if ece_after <= ece_before {
            improved += 1;
        }
    }
    assert!(improved >= 8, "recalibration helped in {improved}/10 seeds");
}

struct Trained {
    taxonomy: ConditionTaxonomy,
    schema: MetadataSchema,
    model: ModelParams,
    holdout: Dataset,
}

fn trained(seed: u64) -> Trained {
    let taxonomy = ConditionTaxonomy::desk_default();
    let dev = sites(&taxonomy, 3000, 10, seed).dev;
    let (train_cases, holdout) = (dev.subset(&(0..2000).collect::<Vec<_>>()), dev.subset(&(2000..3000).collect::<Vec<_>>()));
    let schema = MetadataSchema::desk_default().with_age_fit(train_cases.cases.iter().map(|c| c.age)).unwrap();
    let labels = train_cases.reference_labels(&taxonomy).unwrap();
    let set = TrainingSet::build(&train_cases, &labels, &schema, false, seed).unwrap();
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let model = train(&set, taxonomy.num_conditions(), &config, None).unwrap().params;
    Trained { taxonomy, schema, model, holdout }
}

#[test]
fn trained_model_tracks_label_ambiguity_and_meets_the_sensitivity_target() {
    let mut sensitivities = Vec::new();
    let mut by_ambiguity = [[0.0f64; 2]; 3];
    for seed in 0..5 {
        let t = trained(seed);
        let refs = t.holdout.reference_labels(&t.taxonomy).unwrap();
        let scores: Vec<Vec<f64>> = dataset_logits(&t.model, &t.holdout, &t.schema, seed)
            .unwrap()
            .iter()
            .map(|z| scores_from_logits(z, None, &t.taxonomy).unwrap())
            .collect();

        for (s, r) in scores.iter().zip(&refs) {
            let slot = match r.ambiguity {
                Ambiguity::Unanimous => 0,
                Ambiguity::Intermediate => 1,
                Ambiguity::Ambiguous => 2,
            };
            let top3 = dermshift::predict::top_k(s, 3);
            by_ambiguity[slot][0] += f64::from(u8::from(top3.contains(r.top1)));
            by_ambiguity[slot][1] += 1.0;
        }

        let (fit_half, test_half) = scores.split_at(500);
        let (fit_refs, test_refs) = refs.split_at(500);
        let fit = fit_k_threshold(fit_half, fit_refs, &t.taxonomy, 3, 7, 0.95).unwrap();
        let sens = high_risk_sensitivity(test_half, test_refs, &t.taxonomy, &fit.threshold).unwrap();
        sensitivities.push(sens);
    }
    let acc: Vec<f64> = by_ambiguity.iter().map(|[hits, n]| hits / n).collect();
    assert!(acc[0] >= acc[1] && acc[1] >= acc[2], "top-3 by ambiguity {acc:?}");
    let mean = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    assert!(mean >= 0.93, "held-out high-risk sensitivity {sensitivities:?}");
}
