//! Dataset-level interventions: Metropolis–Hastings resampling toward a target
//! label distribution, condition-aware augmentation from a site pool, and the
//! stratified calibration/evaluation split.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{ConditionDistribution, Dataset, Level};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::taxonomy::{ConditionId, ConditionTaxonomy};

pub const MH_BURN_IN: usize = 1000;

/// Target label distribution for resampling. Category level by default;
/// condition level is also accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution(pub ConditionDistribution);

impl TargetDistribution {
    pub fn new(dist: ConditionDistribution) -> Self {
        Self(dist)
    }

    pub fn level(&self) -> Level {
        self.0.level
    }

    /// Moves target mass off bins the source cannot produce and renormalizes.
    pub fn restricted_to(&self, supported: &[bool]) -> Result<Self> {
        let kept: Vec<f64> =
            self.0.probs.iter().zip(supported).map(|(p, &s)| if s { *p } else { 0.0 }).collect();
        let total: f64 = kept.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("target has no mass on supported bins".into()));
        }
        Ok(Self(ConditionDistribution::new(self.0.level, kept.into_iter().map(|p| p / total).collect())?))
    }
}

fn bin_of(top: ConditionId, level: Level, table: &[usize]) -> usize {
    match level {
        Level::Condition => top.0,
        Level::Category => table[top.0],
    }
}

/// Label bin of every case (reference top-1 at the requested level).
pub fn case_bins(dataset: &Dataset, taxonomy: &ConditionTaxonomy, level: Level) -> Result<Vec<usize>> {
    let table = taxonomy.category_table();
    Ok(dataset.reference_labels(taxonomy)?.iter().map(|l| bin_of(l.top1, level, &table)).collect())
}

/// Independence Metropolis–Hastings chain over source case indices with a
/// uniform proposal and importance weight `target(bin) / source(bin)`.
/// After burn-in the current state is emitted at every step, so a rejected
/// proposal repeats the current case.
pub fn mh_chain(bins: &[usize], target: &[f64], n_out: usize, seed: u64) -> Result<Vec<usize>> {
    if n_out == 0 {
        return Ok(Vec::new());
    }
    if bins.is_empty() {
        return Err(Error::EmptyInput("resampling source is empty"));
    }
    let mut counts = vec![0usize; target.len()];
    for &b in bins {
        counts[b] += 1;
    }
    if let Some(bin) = (0..target.len()).find(|&b| target[b] > 0.0 && counts[b] == 0) {
        return Err(Error::UnsupportedTarget { category: bin });
    }
    let n = bins.len() as f64;
    let weight: Vec<f64> = (0..target.len())
        .map(|b| if counts[b] == 0 { 0.0 } else { target[b] / (counts[b] as f64 / n) })
        .collect();

    let mut rng = stream_rng(seed, 0);
    let mut current = rng.random_range(0..bins.len());
    while weight[bins[current]] == 0.0 {
        current = rng.random_range(0..bins.len());
    }
    let mut out = Vec::with_capacity(n_out);
    let mut step = 0usize;
    while out.len() < n_out {
        let proposal = rng.random_range(0..bins.len());
        let ratio = weight[bins[proposal]] / weight[bins[current]];
        if ratio >= 1.0 || rng.random::<f64>() < ratio {
            current = proposal;
        }
        step += 1;
        if step > MH_BURN_IN {
            out.push(current);
        }
    }
    Ok(out)
}

/// Copies the chosen cases; repeated cases get a `#n` suffix on their id so
/// the result keeps unique case ids. Sampling weights are dropped.
fn materialize(source: &Dataset, picks: &[usize]) -> Dataset {
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let cases = picks
        .iter()
        .map(|&i| {
            let copy = seen.entry(i).or_insert(0);
            let mut case = source.cases[i].clone();
            if *copy > 0 {
                case.case_id = format!("{}#{}", case.case_id, copy);
            }
            *copy += 1;
            case.weight = None;
            case
        })
        .collect();
    source.with_cases(cases)
}

pub fn mh_resample(
    source: &Dataset,
    target: &TargetDistribution,
    n_out: usize,
    seed: u64,
    taxonomy: &ConditionTaxonomy,
) -> Result<Dataset> {
    if n_out == 0 {
        return Ok(source.with_cases(Vec::new()));
    }
    let bins = case_bins(source, taxonomy, target.level())?;
    let expected = match target.level() {
        Level::Condition => taxonomy.num_conditions(),
        Level::Category => taxonomy.num_categories(),
    };
    if target.0.probs.len() != expected {
        return Err(Error::Shape(format!("target has {} bins, expected {expected}", target.0.probs.len())));
    }
    let picks = mh_chain(&bins, &target.0.probs, n_out, seed)?;
    Ok(materialize(source, &picks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub alpha: f64,
    pub n_add: usize,
    pub level: Level,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { alpha: 0.7, n_add: 0, level: Level::Condition, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Pool indices drawn by condition-aware augmentation, and for each whether
/// it came from the under-represented pool.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub picks: Vec<usize>,
    pub from_less_common: Vec<bool>,
    pub less_common_bins: Vec<bool>,
}

/// Bins where the site pool has more mass than DEV. Bins absent from DEV with
/// site mass are included.
pub fn less_common_bins(dev: &ConditionDistribution, site: &ConditionDistribution) -> Vec<bool> {
    dev.probs.iter().zip(&site.probs).map(|(d, s)| s > d).collect()
}

pub fn condition_aware_draw(
    dev: &Dataset,
    site_pool: &Dataset,
    config: &AugmentConfig,
    taxonomy: &ConditionTaxonomy,
) -> Result<AugmentDraw> {
    config.validate()?;
    if site_pool.is_empty() {
        return Err(Error::EmptyInput("site pool is empty"));
    }
    if config.n_add > site_pool.len() {
        return Err(Error::Config(format!("n_add {} exceeds pool size {}", config.n_add, site_pool.len())));
    }
    let dev_tops: Vec<ConditionId> = dev.reference_labels(taxonomy)?.iter().map(|l| l.top1).collect();
    let site_bins = case_bins(site_pool, taxonomy, config.level)?;
    let site_tops: Vec<ConditionId> = site_pool.reference_labels(taxonomy)?.iter().map(|l| l.top1).collect();
    let site_dist = ConditionDistribution::from_labels(&site_tops, None, config.level, taxonomy)?;
    let dev_dist = if dev_tops.is_empty() {
        ConditionDistribution { level: config.level, probs: vec![0.0; site_dist.probs.len()] }
    } else {
        ConditionDistribution::from_labels(&dev_tops, None, config.level, taxonomy)?
    };
    let less = less_common_bins(&dev_dist, &site_dist);

    let (mut pool_l, mut pool_m): (Vec<usize>, Vec<usize>) =
        (0..site_pool.len()).partition(|&i| less[site_bins[i]]);
    let mut rng = stream_rng(config.seed, 0);
    let mut picks = Vec::with_capacity(config.n_add);
    let mut from_less = Vec::with_capacity(config.n_add);
    for _ in 0..config.n_add {
        let mut use_l = rng.random::<f64>() < config.alpha;
        if use_l && pool_l.is_empty() {
            use_l = false;
        } else if !use_l && pool_m.is_empty() {
            use_l = true;
        }
        let pool = if use_l { &mut pool_l } else { &mut pool_m };
        let j = rng.random_range(0..pool.len());
        picks.push(pool.swap_remove(j));
        from_less.push(use_l);
    }
    Ok(AugmentDraw { picks, from_less_common: from_less, less_common_bins: less })
}

fn union(dev: &Dataset, site_pool: &Dataset, picks: &[usize]) -> Dataset {
    let mut cases = dev.cases.clone();
    cases.extend(picks.iter().map(|&i| site_pool.cases[i].clone()));
    for case in &mut cases {
        case.weight = None;
    }
    dev.with_cases(cases)
}

/// DEV plus `n_add` site cases, drawn from the under-represented pool with
/// probability `alpha` per draw.
pub fn condition_aware_augment(
    dev: &Dataset,
    site_pool: &Dataset,
    config: &AugmentConfig,
    taxonomy: &ConditionTaxonomy,
) -> Result<Dataset> {
    let draw = condition_aware_draw(dev, site_pool, config, taxonomy)?;
    Ok(union(dev, site_pool, &draw.picks))
}

/// DEV plus `n_add` site cases drawn uniformly without replacement.
pub fn random_augment(dev: &Dataset, site_pool: &Dataset, n_add: usize, seed: u64) -> Result<Dataset> {
    if n_add > site_pool.len() {
        return Err(Error::Config(format!("n_add {n_add} exceeds pool size {}", site_pool.len())));
    }
    let mut rng = stream_rng(seed, 0);
    let picks = rand::seq::index::sample(&mut rng, site_pool.len(), n_add).into_vec();
    Ok(union(dev, site_pool, &picks))
}

/// Stratum key used by the calibration split.
pub fn split_stratum(top1: ConditionId, case: &crate::dataio::Case) -> (usize, String, String, &'static str) {
    (top1.0, case.demographics.sex.clone(), case.demographics.age_group.clone(), case.demographics.efst.as_str())
}

/// Calibration and evaluation index sets of a stratified split.
pub fn stratified_split_indices(
    site: &Dataset,
    frac: f64,
    seed: u64,
    taxonomy: &ConditionTaxonomy,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("split fraction {frac} outside (0, 1)")));
    }
    let labels = site.reference_labels(taxonomy)?;
    let mut strata: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, (case, label)) in site.cases.iter().zip(&labels).enumerate() {
        strata.entry(split_stratum(label.top1, case)).or_default().push(i);
    }
    // Systematic sampling through the strata in key order: every stratum gets
    // floor or ceil of frac * m, and the overall fraction stays at frac even
    // when most strata are tiny.
    let mut rng = stream_rng(seed, 0);
    let mut acc: f64 = rng.random();
    let mut in_calib = vec![false; site.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            acc += frac;
            if acc >= 1.0 {
                acc -= 1.0;
                in_calib[i] = true;
            }
        }
    }
    let (calib, eval) = (0..site.len()).partition(|&i| in_calib[i]);
    Ok((calib, eval))
}

pub fn stratified_split(
    site: &Dataset,
    frac: f64,
    seed: u64,
    taxonomy: &ConditionTaxonomy,
) -> Result<(Dataset, Dataset)> {
    let (calib, eval) = stratified_split_indices(site, frac, seed, taxonomy)?;
    Ok((site.subset(&calib), site.subset(&eval)))
}
