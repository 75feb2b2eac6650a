//! Dataset schema, JSON Lines persistence, stratified downsampling and
//! condition distributions.

mod generate;

pub use generate::{generate_synthetic_sites, GeneratorConfig, SyntheticSites};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{MetadataSchema, NUM_METADATA_FIELDS};
use crate::error::{Error, Result};
use crate::labels::{reference_label, RaterDiagnosis, ReferenceLabel};
use crate::rng::stream_rng;
use crate::taxonomy::{ConditionId, ConditionTaxonomy};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    #[serde(rename = "DEV")]
    Dev,
    #[serde(rename = "CLIN")]
    Clin,
    #[serde(rename = "PAT")]
    Pat,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::Dev => "DEV",
            Site::Clin => "CLIN",
            Site::Pat => "PAT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EfstBand {
    #[serde(rename = "I/II")]
    OneTwo,
    #[serde(rename = "III/IV")]
    ThreeFour,
    #[serde(rename = "V/VI")]
    FiveSix,
    Unknown,
}

impl EfstBand {
    pub const ALL: [EfstBand; 4] = [EfstBand::OneTwo, EfstBand::ThreeFour, EfstBand::FiveSix, EfstBand::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            EfstBand::OneTwo => "I/II",
            EfstBand::ThreeFour => "III/IV",
            EfstBand::FiveSix => "V/VI",
            EfstBand::Unknown => "Unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: String,
    pub age_group: String,
    pub efst: EfstBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAttrs {
    pub anatomic_location: String,
    pub year: u16,
    #[serde(default)]
    pub quality_flags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub case_id: String,
    pub site: Site,
    pub image_embeddings: Vec<Vec<f64>>,
    pub metadata: BTreeMap<String, String>,
    pub age: f64,
    pub demographics: Demographics,
    pub attrs: CaseAttrs,
    pub panel: [Vec<RaterDiagnosis>; 3],
    pub stratum: String,
    /// Generator ground truth; diagnostics only, never used for training or evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_condition: Option<ConditionId>,
    /// Inverse-probability sampling weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    #[serde(rename = "D")]
    dim: usize,
    taxonomy_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
    pub dim: usize,
    pub taxonomy_hash: String,
}

impl Dataset {
    pub fn new(cases: Vec<Case>, dim: usize, taxonomy_hash: impl Into<String>) -> Self {
        Self { cases, dim, taxonomy_hash: taxonomy_hash.into() }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// A dataset with the same header and a different case list.
    pub fn with_cases(&self, cases: Vec<Case>) -> Self {
        Self { cases, dim: self.dim, taxonomy_hash: self.taxonomy_hash.clone() }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        self.with_cases(indices.iter().map(|&i| self.cases[i].clone()).collect())
    }

    /// Sampling weights, present only if every case carries one.
    pub fn weights(&self) -> Option<Vec<f64>> {
        self.cases.iter().map(|c| c.weight).collect()
    }

    pub fn reference_labels(&self, taxonomy: &ConditionTaxonomy) -> Result<Vec<ReferenceLabel>> {
        self.cases
            .iter()
            .map(|c| {
                reference_label(&c.panel, taxonomy).map_err(|e| Error::Schema {
                    case_id: c.case_id.clone(),
                    detail: e.to_string(),
                })
            })
            .collect()
    }

    /// Checks every dataset and case invariant.
    pub fn validate(&self, taxonomy: &ConditionTaxonomy, schema: &MetadataSchema) -> Result<()> {
        if self.taxonomy_hash != taxonomy.hash() {
            return Err(Error::TaxonomyMismatch {
                expected: taxonomy.hash().to_string(),
                found: self.taxonomy_hash.clone(),
            });
        }
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        let with_weight = self.cases.iter().filter(|c| c.weight.is_some()).count();
        let weights_all_or_none = with_weight == 0 || with_weight == self.cases.len();
        for case in &self.cases {
            let fail = |detail: String| Error::Schema { case_id: case.case_id.clone(), detail };
            if !seen.insert(case.case_id.as_str()) {
                return Err(fail("duplicate case_id".into()));
            }
            if case.image_embeddings.is_empty() {
                return Err(fail("no image embeddings".into()));
            }
            for e in &case.image_embeddings {
                if e.len() != self.dim {
                    return Err(fail(format!("embedding dimension {} != D={}", e.len(), self.dim)));
                }
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(fail("non-finite embedding value".into()));
                }
            }
            if case.metadata.len() != NUM_METADATA_FIELDS {
                let missing = schema.fields.iter().position(|f| !case.metadata.contains_key(&f.name));
                return Err(fail(match missing {
                    Some(i) => format!("missing metadata field {i} (`{}`)", schema.fields[i].name),
                    None => format!("expected {NUM_METADATA_FIELDS} metadata fields, found {}", case.metadata.len()),
                }));
            }
            for (i, f) in schema.fields.iter().enumerate() {
                match case.metadata.get(&f.name) {
                    None => return Err(fail(format!("missing metadata field {i} (`{}`)", f.name))),
                    Some(v) if f.index_of(v).is_none() => {
                        return Err(fail(format!("metadata field {i} (`{}`) has disallowed value `{v}`", f.name)))
                    }
                    Some(_) => {}
                }
            }
            if !case.age.is_finite() {
                return Err(fail("non-finite age".into()));
            }
            for rater in &case.panel {
                if let Some(d) = rater.iter().find(|d| !(1..=5).contains(&d.confidence)) {
                    return Err(fail(format!("confidence {} outside 1..=5", d.confidence)));
                }
            }
            match case.weight {
                Some(w) if !(w > 0.0 && w.is_finite()) => return Err(fail(format!("weight {w} not positive"))),
                None if !weights_all_or_none => return Err(fail("weight missing while other cases carry one".into())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        let header = Header { schema_version: SCHEMA_VERSION, dim: self.dim, taxonomy_hash: self.taxonomy_hash.clone() };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for case in &self.cases {
            serde_json::to_writer(&mut out, case)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    /// Parses a JSON Lines dataset without validating it.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(Error::EmptyInput("dataset file has no header"))?;
        let header: Header =
            serde_json::from_str(&first?).map_err(|e| Error::Parse { line: 1, detail: e.to_string() })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse { line: 1, detail: format!("unsupported schema_version {}", header.schema_version) });
        }
        let mut cases = Vec::new();
        for (i, line) in lines {
            let case: Case =
                serde_json::from_str(&line?).map_err(|e| Error::Parse { line: i + 1, detail: e.to_string() })?;
            cases.push(case);
        }
        Ok(Self { cases, dim: header.dim, taxonomy_hash: header.taxonomy_hash })
    }
}

/// Loads and validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>, taxonomy: &ConditionTaxonomy, schema: &MetadataSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let dataset = Dataset::read_jsonl(BufReader::new(file))?;
    dataset.validate(taxonomy, schema)?;
    Ok(dataset)
}

/// Keeps each case with probability equal to its stratum's retention rate
/// and attaches the inverse-probability weight `1 / rate`.
pub fn stratified_downsample(dataset: &Dataset, retention: &BTreeMap<String, f64>, seed: u64) -> Result<Dataset> {
    if let Some((s, r)) = retention.iter().find(|(_, r)| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::Config(format!("retention rate {r} for stratum `{s}` outside (0, 1]")));
    }
    let mut rng = stream_rng(seed, 0x5354_5241);
    let mut kept = Vec::new();
    for case in &dataset.cases {
        let rate = retention.get(&case.stratum).copied().unwrap_or(1.0);
        // full strata consume no draws and keep weight 1
        let keep = rate >= 1.0 || rng.random::<f64>() < rate;
        if keep {
            let mut c = case.clone();
            c.weight = Some(c.weight.unwrap_or(1.0) / rate);
            kept.push(c);
        }
    }
    Ok(dataset.with_cases(kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Condition,
    Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDistribution {
    pub level: Level,
    pub probs: Vec<f64>,
}

impl ConditionDistribution {
    pub fn new(level: Level, probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("not a probability vector (sum {total})")));
        }
        Ok(Self { level, probs })
    }

    /// Normalized histogram of reference top-1 labels.
    pub fn from_labels(
        tops: &[ConditionId],
        weights: Option<&[f64]>,
        level: Level,
        taxonomy: &ConditionTaxonomy,
    ) -> Result<Self> {
        if tops.is_empty() {
            return Err(Error::EmptyInput("no cases to build a distribution from"));
        }
        let bins = match level {
            Level::Condition => taxonomy.num_conditions(),
            Level::Category => taxonomy.num_categories(),
        };
        let table = taxonomy.category_table();
        let mut counts = vec![0.0; bins];
        for (i, t) in tops.iter().enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            let bin = match level {
                Level::Condition => t.0,
                Level::Category => table[t.0],
            };
            counts[bin] += w;
        }
        let total: f64 = counts.iter().sum();
        Ok(Self { level, probs: counts.into_iter().map(|c| c / total).collect() })
    }

    /// Half the L1 distance.
    pub fn tv_distance(&self, other: &Self) -> f64 {
        0.5 * self.probs.iter().zip(&other.probs).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

pub fn condition_distribution(
    dataset: &Dataset,
    taxonomy: &ConditionTaxonomy,
    level: Level,
    weighted: bool,
) -> Result<ConditionDistribution> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("empty dataset"));
    }
    let tops: Vec<ConditionId> = dataset.reference_labels(taxonomy)?.iter().map(|l| l.top1).collect();
    let weights = if weighted { dataset.weights() } else { None };
    ConditionDistribution::from_labels(&tops, weights.as_deref(), level, taxonomy)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoder::UNKNOWN;

    pub(crate) fn toy_case(id: &str, diagnosis: &str, schema: &MetadataSchema) -> Case {
        let rater = vec![RaterDiagnosis::new(diagnosis, 5)];
        Case {
            case_id: id.to_string(),
            site: Site::Clin,
            image_embeddings: vec![vec![0.1, 0.2, 0.3]],
            metadata: schema.field_names().map(|n| (n.to_string(), UNKNOWN.to_string())).collect(),
            age: 42.0,
            demographics: Demographics { sex: "female".into(), age_group: "40-49".into(), efst: EfstBand::OneTwo },
            attrs: CaseAttrs { anatomic_location: "arm".into(), year: 2020, quality_flags: BTreeSet::new() },
            panel: [rater.clone(), rater.clone(), rater],
            stratum: diagnosis.to_string(),
            true_condition: None,
            weight: None,
        }
    }

    fn toy(names: &[&str]) -> (Dataset, ConditionTaxonomy, MetadataSchema) {
        let t = ConditionTaxonomy::desk_default();
        let s = MetadataSchema::desk_default();
        let cases = names.iter().enumerate().map(|(i, n)| toy_case(&format!("c{i}"), n, &s)).collect();
        (Dataset::new(cases, 3, t.hash()), t, s)
    }

    fn round_trip(d: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        Dataset::read_jsonl(&buf[..]).unwrap()
    }

    #[test]
    fn valid_file_loads() {
        let (d, t, s) = toy(&["Eczema", "Tinea", "Melanoma"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        d.save(&path).unwrap();
        let back = load_dataset(&path, &t, &s).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back, d);
    }

    #[test]
    fn missing_field_is_named() {
        let (mut d, t, s) = toy(&["Eczema"]);
        let name = s.fields[12].name.clone();
        d.cases[0].metadata.remove(&name);
        let err = round_trip(&d).validate(&t, &s).unwrap_err();
        match err {
            Error::Schema { case_id, detail } => {
                assert_eq!(case_id, "c0");
                assert!(detail.contains("field 12"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_and_hash_mismatch() {
        let (mut d, t, s) = toy(&["Eczema", "Tinea"]);
        d.cases[1].case_id = "c0".into();
        assert!(matches!(d.validate(&t, &s), Err(Error::Schema { .. })));
        let (mut d, t, s) = toy(&["Eczema"]);
        d.taxonomy_hash = "deadbeef".into();
        assert!(matches!(d.validate(&t, &s), Err(Error::TaxonomyMismatch { .. })));
    }

    #[test]
    fn parse_errors_report_line() {
        let text = "{\"schema_version\":1,\"D\":3,\"taxonomy_hash\":\"x\"}\n{not json}\n";
        assert!(matches!(Dataset::read_jsonl(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn downsample_identity_at_full_retention() {
        let (d, _, _) = toy(&["Eczema", "Tinea", "Melanoma"]);
        let rates: BTreeMap<String, f64> = [("Eczema".to_string(), 1.0)].into();
        let out = stratified_downsample(&d, &rates, 1).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.cases.iter().all(|c| c.weight == Some(1.0)));
        assert!(stratified_downsample(&d, &[("Eczema".to_string(), 0.0)].into(), 1).is_err());
        assert!(stratified_downsample(&d, &[("Eczema".to_string(), 1.5)].into(), 1).is_err());
    }

    #[test]
    fn downsample_binomial_count() {
        let s = MetadataSchema::desk_default();
        let t = ConditionTaxonomy::desk_default();
        let cases = (0..10_000).map(|i| toy_case(&format!("c{i}"), "Eczema", &s)).collect();
        let d = Dataset::new(cases, 3, t.hash());
        let rates: BTreeMap<String, f64> = [("Eczema".to_string(), 0.2)].into();
        let out = stratified_downsample(&d, &rates, 7).unwrap();
        // 3 sigma = 3 * sqrt(10000 * 0.2 * 0.8) = 120
        assert!((out.len() as f64 - 2000.0).abs() <= 120.0, "{}", out.len());
        assert!(out.cases.iter().all(|c| c.weight == Some(5.0)));
        out.validate(&t, &s).unwrap();
    }

    #[test]
    fn distributions() {
        let (d, t, _) = toy(&["Eczema", "Eczema", "Tinea", "Tinea"]);
        let p = condition_distribution(&d, &t, Level::Condition, false).unwrap();
        let e = t.map_diagnosis("Eczema").unwrap().0;
        let ti = t.map_diagnosis("Tinea").unwrap().0;
        assert_eq!(p.probs[e], 0.5);
        assert_eq!(p.probs[ti], 0.5);

        let (mut d, t, _) = toy(&["Eczema", "Tinea"]);
        d.cases[0].weight = Some(5.0);
        d.cases[1].weight = Some(1.0);
        let p = condition_distribution(&d, &t, Level::Condition, true).unwrap();
        assert!((p.probs[e] - 5.0 / 6.0).abs() < 1e-15);
        assert!((p.probs[ti] - 1.0 / 6.0).abs() < 1e-15);

        let (d, t, _) = toy(&["Eczema", "Psoriasis", "Tinea"]);
        let p = condition_distribution(&d, &t, Level::Category, false).unwrap();
        let inflammatory = t.category_of(t.map_diagnosis("Eczema").unwrap()).unwrap().0;
        assert!((p.probs[inflammatory] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let empty = d.with_cases(vec![]);
        assert!(matches!(condition_distribution(&empty, &t, Level::Condition, false), Err(Error::EmptyInput(_))));
    }
}
