//! Synthetic two-site generator: a DEV source and a label-shifted target
//! site (CLIN/PAT) sharing class-conditional embedding distributions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Case, CaseAttrs, Dataset, Demographics, EfstBand, Site};
use crate::encoder::{age_group, MetadataSchema, INFORMATIVE_FIELDS, UNKNOWN};
use crate::error::{Error, Result};
use crate::labels::{reference_label, RaterDiagnosis};
use crate::rng::stream_rng;
use crate::taxonomy::{ConditionId, ConditionTaxonomy};

const STREAM_CLUSTERS: u64 = 1;
const STREAM_PRIORS: u64 = 2;
const STREAM_DEV: u64 = 3;
const STREAM_SITE: u64 = 4;

pub const MAX_GENERATED_IMAGES: usize = 8;

const LOCATIONS: [&str; 8] = ["head/neck", "arm", "hand", "leg", "foot", "trunk", "genital", "unspecified"];

/// Category profile of the default DEV prior (desk taxonomy category order).
const DEV_CATEGORY_PROFILE: [f64; 12] = [0.10, 0.12, 0.34, 0.08, 0.30, 0.0025, 0.0025, 0.0025, 0.0025, 0.00125, 0.0025, 0.00125];
/// Category profile of the default target-site prior.
const SITE_CATEGORY_PROFILE: [f64; 12] = [0.06, 0.10, 0.16, 0.08, 0.18, 0.06, 0.08, 0.08, 0.07, 0.05, 0.04, 0.04];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_conditions: usize,
    pub num_categories: usize,
    pub dim: usize,
    pub n_dev: usize,
    pub n_site: usize,
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    pub dirichlet_concentration_dev: Vec<f64>,
    pub dirichlet_concentration_site: Vec<f64>,
    pub pat_fraction: f64,
    /// Flip probability of informative metadata and extra Gumbel scale of rater perception.
    pub rater_noise: f64,
    /// Extra isotropic embedding noise on PAT images; 0 leaves CLIN and PAT identical.
    #[serde(default)]
    pub pat_quality_noise: f64,
    /// Spread of a case's latent appearance around its cluster mean. Raters
    /// read the appearance; images are noisy photographs of it.
    #[serde(default = "default_appearance_sigma")]
    pub appearance_sigma: f64,
    pub seed: u64,
}

fn default_appearance_sigma() -> f64 {
    0.5
}

impl GeneratorConfig {
    /// Desk-scale defaults for a taxonomy: DEV concentrated on common
    /// inflammatory and neoplastic categories, the site spread more evenly.
    pub fn desk_default(taxonomy: &ConditionTaxonomy) -> Self {
        let k = taxonomy.num_categories();
        let members = taxonomy.members();
        let profile = |table: &[f64; 12]| -> Vec<f64> {
            let cat_weight = |c: usize| if k == 12 { table[c] } else { 1.0 / k as f64 };
            taxonomy
                .conditions()
                .iter()
                .map(|c| {
                    let cat = c.category.0;
                    2000.0 * cat_weight(cat) / members[cat].len() as f64
                })
                .collect()
        };
        Self {
            num_conditions: taxonomy.num_conditions(),
            num_categories: k,
            dim: 32,
            n_dev: 5000,
            n_site: 1000,
            cluster_separation: 2.4,
            noise_sigma: 1.0,
            dirichlet_concentration_dev: profile(&DEV_CATEGORY_PROFILE),
            dirichlet_concentration_site: profile(&SITE_CATEGORY_PROFILE),
            pat_fraction: 0.25,
            rater_noise: 0.6,
            pat_quality_noise: 0.0,
            appearance_sigma: default_appearance_sigma(),
            seed: 0,
        }
    }

    pub fn validate(&self, taxonomy: &ConditionTaxonomy) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.num_conditions != taxonomy.num_conditions() || self.num_categories != taxonomy.num_categories() {
            return bad("condition/category counts do not match the taxonomy");
        }
        if self.dim == 0 || self.n_dev == 0 || self.n_site == 0 {
            return bad("counts must be at least 1");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.pat_fraction) || !(0.0..=1.0).contains(&self.rater_noise) {
            return bad("pat_fraction and rater_noise must lie in [0, 1]");
        }
        if !(self.pat_quality_noise >= 0.0) {
            return bad("pat_quality_noise must be nonnegative");
        }
        if !(self.appearance_sigma > 0.0 && self.appearance_sigma.is_finite()) {
            return bad("appearance_sigma must be positive");
        }
        for conc in [&self.dirichlet_concentration_dev, &self.dirichlet_concentration_site] {
            if conc.len() != self.num_conditions || conc.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return bad("Dirichlet concentrations must be positive, one per condition");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSites {
    pub dev: Dataset,
    pub site: Dataset,
    /// Realized class priors the cases were drawn from.
    pub dev_prior: Vec<f64>,
    pub site_prior: Vec<f64>,
    pub cluster_means: Vec<Vec<f64>>,
}

fn dirichlet(conc: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = conc
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("validated concentration").sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|g| g / total).collect()
}

fn categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

struct World<'a> {
    config: &'a GeneratorConfig,
    taxonomy: &'a ConditionTaxonomy,
    schema: &'a MetadataSchema,
    means: Vec<Vec<f64>>,
    /// Condition-specific symbol index per informative field.
    symbols: Vec<Vec<usize>>,
    informative: Vec<usize>,
    home_location: Vec<usize>,
}

impl World<'_> {
    fn case(&self, id: String, site: Site, condition: usize, rng: &mut ChaCha8Rng) -> Result<Case> {
        let cfg = self.config;
        let n_images = rng.random_range(1..=MAX_GENERATED_IMAGES);
        let sigma = if site == Site::Pat {
            (cfg.noise_sigma.powi(2) + cfg.pat_quality_noise.powi(2)).sqrt()
        } else {
            cfg.noise_sigma
        };
        let appearance: Vec<f64> = self.means[condition]
            .iter()
            .map(|m| m + cfg.appearance_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let images: Vec<Vec<f64>> = (0..n_images)
            .map(|_| appearance.iter().map(|a| a + sigma * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();

        let sex = if rng.random::<f64>() < 0.58 { "female" } else { "male" };
        let age = rng.random_range(18.0..90.0_f64).floor();
        let efst = match rng.random::<f64>() {
            u if u < 0.42 => EfstBand::OneTwo,
            u if u < 0.80 => EfstBand::ThreeFour,
            u if u < 0.88 => EfstBand::FiveSix,
            _ => EfstBand::Unknown,
        };

        let mut metadata = BTreeMap::new();
        for (fi, field) in self.schema.fields.iter().enumerate() {
            let n_known = field.values.len() - 1;
            let value = if let Some(slot) = self.informative.iter().position(|&f| f == fi) {
                let symbol = if rng.random::<f64>() < cfg.rater_noise {
                    rng.random_range(0..n_known)
                } else {
                    self.symbols[condition][slot]
                };
                field.values[symbol].clone()
            } else {
                match field.name.as_str() {
                    "sex" => sex.to_string(),
                    "age_group" => age_group(age).to_string(),
                    "efst" => match efst {
                        EfstBand::Unknown => UNKNOWN.to_string(),
                        band => band.as_str().to_string(),
                    },
                    _ => {
                        if rng.random::<f64>() < 0.1 {
                            UNKNOWN.to_string()
                        } else {
                            field.values[rng.random_range(0..n_known)].clone()
                        }
                    }
                }
            };
            metadata.insert(field.name.clone(), value);
        }

        let location = if rng.random::<f64>() < 0.5 {
            self.home_location[condition]
        } else {
            rng.random_range(0..LOCATIONS.len())
        };
        let mut quality_flags = BTreeSet::new();
        if rng.random::<f64>() < 0.10 {
            quality_flags.insert("non_skin_area".to_string());
        }
        if rng.random::<f64>() < 0.08 {
            quality_flags.insert("blurry".to_string());
        }
        let attrs = CaseAttrs {
            anatomic_location: LOCATIONS[location].to_string(),
            year: rng.random_range(2018..=2021),
            quality_flags,
        };

        let panel = self.panel(&appearance, rng);
        let stratum = reference_label(&panel, self.taxonomy)
            .map(|l| self.taxonomy.name(l.top1).to_string())
            .unwrap_or_else(|_| "undiagnosable".to_string());

        Ok(Case {
            case_id: id,
            site,
            image_embeddings: images,
            metadata,
            age,
            demographics: Demographics { sex: sex.to_string(), age_group: age_group(age).to_string(), efst },
            attrs,
            panel,
            stratum,
            true_condition: Some(ConditionId(condition)),
            weight: None,
        })
    }

    /// Three raters read the case's appearance: each samples a noisy
    /// nearest-cluster ranking (Gumbel-perturbed log-likelihoods) and emits
    /// the top 1-3 conditions with confidence falling with the score gap.
    fn panel(&self, appearance: &[f64], rng: &mut ChaCha8Rng) -> [Vec<RaterDiagnosis>; 3] {
        let cfg = self.config;
        let loglik: Vec<f64> = self
            .means
            .iter()
            .map(|mu| {
                let d2: f64 = appearance.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
                -d2 / (2.0 * cfg.appearance_sigma.powi(2))
            })
            .collect();
        let gumbel = Gumbel::new(0.0, 1.0 + cfg.rater_noise).expect("positive scale");
        std::array::from_fn(|_| {
            let mut scored: Vec<(f64, usize)> =
                loglik.iter().enumerate().map(|(c, l)| (l + gumbel.sample(rng), c)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let n_diag = rng.random_range(1..=3);
            let best = scored[0].0;
            scored
                .iter()
                .take(n_diag)
                .map(|&(s, c)| {
                    let gap = ((best - s) / 2.0).floor() as i64;
                    let confidence = (5 - gap).clamp(1, 5) as u8;
                    let cond = &self.taxonomy.conditions()[c];
                    let name = match cond.synonyms.choose(rng) {
                        Some(syn) if rng.random::<f64>() < 0.2 => syn.clone(),
                        _ => cond.name.clone(),
                    };
                    RaterDiagnosis::new(name, confidence)
                })
                .collect()
        })
    }
}

/// Draws a DEV dataset and a target-site dataset. Fully determined by `config.seed`.
pub fn generate_synthetic_sites(
    config: &GeneratorConfig,
    taxonomy: &ConditionTaxonomy,
    schema: &MetadataSchema,
) -> Result<SyntheticSites> {
    config.validate(taxonomy)?;
    schema.validate()?;
    let c = config.num_conditions;

    let mut rng = stream_rng(config.seed, STREAM_CLUSTERS);
    let scale = config.cluster_separation / (config.dim as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..config.dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let informative: Vec<usize> = INFORMATIVE_FIELDS
        .iter()
        .filter_map(|name| schema.fields.iter().position(|f| f.name == *name))
        .collect();
    let symbols: Vec<Vec<usize>> = (0..c)
        .map(|_| informative.iter().map(|&f| rng.random_range(0..schema.fields[f].values.len() - 1)).collect())
        .collect();
    let home_location: Vec<usize> = (0..c).map(|_| rng.random_range(0..LOCATIONS.len())).collect();

    // Both priors consume the same stream, so equal concentrations give equal priors.
    let dev_prior = dirichlet(&config.dirichlet_concentration_dev, &mut stream_rng(config.seed, STREAM_PRIORS));
    let site_prior = dirichlet(&config.dirichlet_concentration_site, &mut stream_rng(config.seed, STREAM_PRIORS));

    let world = World { config, taxonomy, schema, means, symbols, informative, home_location };

    let mut rng = stream_rng(config.seed, STREAM_DEV);
    let dev_cases = (0..config.n_dev)
        .map(|i| {
            let cond = categorical(&dev_prior, &mut rng);
            world.case(format!("dev-{i:06}"), Site::Dev, cond, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stream_rng(config.seed, STREAM_SITE);
    let site_cases = (0..config.n_site)
        .map(|i| {
            let site = if rng.random::<f64>() < config.pat_fraction { Site::Pat } else { Site::Clin };
            let cond = categorical(&site_prior, &mut rng);
            world.case(format!("site-{i:06}"), site, cond, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticSites {
        dev: Dataset::new(dev_cases, config.dim, taxonomy.hash()),
        site: Dataset::new(site_cases, config.dim, taxonomy.hash()),
        dev_prior,
        site_prior,
        cluster_means: world.means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::load_dataset;

    fn small(taxonomy: &ConditionTaxonomy, seed: u64) -> GeneratorConfig {
        GeneratorConfig { n_dev: 800, n_site: 300, seed, ..GeneratorConfig::desk_default(taxonomy) }
    }

    fn histogram(d: &Dataset, c: usize) -> Vec<f64> {
        let mut h = vec![0.0; c];
        for case in &d.cases {
            h[case.true_condition.unwrap().0] += 1.0 / d.len() as f64;
        }
        h
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let t = ConditionTaxonomy::desk_default();
        let schema = MetadataSchema::desk_default();
        let bytes = |seed| {
            let s = generate_synthetic_sites(&small(&t, seed), &t, &schema).unwrap();
            let mut buf = Vec::new();
            s.dev.write_jsonl(&mut buf).unwrap();
            s.site.write_jsonl(&mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(5), bytes(5));
        assert_ne!(bytes(5), bytes(6));
    }

    #[test]
    fn shapes_follow_the_schema() {
        let t = ConditionTaxonomy::desk_default();
        let schema = MetadataSchema::desk_default();
        let s = generate_synthetic_sites(&small(&t, 1), &t, &schema).unwrap();
        s.dev.validate(&t, &schema).unwrap();
        s.site.validate(&t, &schema).unwrap();
        let all = s.dev.cases.iter().chain(&s.site.cases);
        let counts: BTreeSet<usize> = all.clone().map(|c| c.image_embeddings.len()).collect();
        assert_eq!(counts, (1..=MAX_GENERATED_IMAGES).collect());
        assert!(all.clone().all(|c| c.metadata.len() == 25));
        assert!(s.dev.cases.iter().all(|c| c.site == Site::Dev));
        let pat = s.site.cases.iter().filter(|c| c.site == Site::Pat).count() as f64;
        assert!((pat / 300.0 - 0.25).abs() < 0.08);
    }

    #[test]
    fn round_trips_through_a_file() {
        let t = ConditionTaxonomy::desk_default();
        let schema = MetadataSchema::desk_default();
        let s = generate_synthetic_sites(&small(&t, 2), &t, &schema).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("site.jsonl");
        s.site.save(&path).unwrap();
        assert_eq!(load_dataset(&path, &t, &schema).unwrap(), s.site);
    }

    #[test]
    fn equal_concentrations_give_matching_sites() {
        let t = ConditionTaxonomy::desk_default();
        let mut cfg = GeneratorConfig { n_dev: 5000, n_site: 5000, seed: 3, ..GeneratorConfig::desk_default(&t) };
        cfg.dirichlet_concentration_site = cfg.dirichlet_concentration_dev.clone();
        let s = generate_synthetic_sites(&cfg, &t, &MetadataSchema::desk_default()).unwrap();
        assert_eq!(s.dev_prior, s.site_prior);
        let (a, b) = (histogram(&s.dev, t.num_conditions()), histogram(&s.site, t.num_conditions()));
        let tv = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn zero_separation_raters_are_at_chance() {
        let t = ConditionTaxonomy::desk_default();
        let c = t.num_conditions() as f64;
        let cfg = GeneratorConfig { n_dev: 4000, cluster_separation: 0.0, ..small(&t, 4) };
        let s = generate_synthetic_sites(&cfg, &t, &MetadataSchema::desk_default()).unwrap();
        let (mut hits, mut total) = (0.0, 0.0);
        for case in &s.dev.cases {
            for rater in &case.panel {
                let first = t.map_diagnosis(&rater[0].raw_name).unwrap();
                hits += f64::from(u8::from(Some(first) == case.true_condition));
                total += 1.0;
            }
        }
        let rate = hits / total;
        let sd = (1.0 / c * (1.0 - 1.0 / c) / total).sqrt();
        assert!((rate - 1.0 / c).abs() < 4.0 * sd, "agreement {rate} vs chance {}", 1.0 / c);
    }

    #[test]
    fn nearest_cluster_accuracy_grows_with_separation() {
        let t = ConditionTaxonomy::desk_default();
        let accuracy = |sep: f64| {
            let cfg = GeneratorConfig { cluster_separation: sep, ..small(&t, 7) };
            let s = generate_synthetic_sites(&cfg, &t, &MetadataSchema::desk_default()).unwrap();
            let correct = s
                .dev
                .cases
                .iter()
                .filter(|case| {
                    let n = case.image_embeddings.len() as f64;
                    let mean: Vec<f64> = (0..cfg.dim)
                        .map(|j| case.image_embeddings.iter().map(|e| e[j]).sum::<f64>() / n)
                        .collect();
                    let dist = |mu: &Vec<f64>| mean.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    let nearest = (0..s.cluster_means.len())
                        .min_by(|&a, &b| dist(&s.cluster_means[a]).total_cmp(&dist(&s.cluster_means[b])))
                        .unwrap();
                    Some(ConditionId(nearest)) == case.true_condition
                })
                .count();
            correct as f64 / s.dev.len() as f64
        };
        let grid: Vec<f64> = [0.5, 1.5, 3.0].iter().map(|&s| accuracy(s)).collect();
        assert!(grid[0] <= grid[1] && grid[1] <= grid[2], "{grid:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let t = ConditionTaxonomy::desk_default();
        let schema = MetadataSchema::desk_default();
        for cfg in [
            GeneratorConfig { noise_sigma: 0.0, ..small(&t, 0) },
            GeneratorConfig { n_site: 0, ..small(&t, 0) },
            GeneratorConfig { pat_fraction: 1.5, ..small(&t, 0) },
            GeneratorConfig { dirichlet_concentration_dev: vec![1.0; 3], ..small(&t, 0) },
        ] {
            assert!(matches!(generate_synthetic_sites(&cfg, &t, &schema), Err(Error::Config(_))));
        }
    }
}
