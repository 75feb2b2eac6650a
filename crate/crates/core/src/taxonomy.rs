//! Condition universe: conditions, their categories, and high-risk flags.
//!
//! Names and synonyms are matched exactly after case-folding and trimming;
//! there is no fuzzy matching.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense index of a condition, `0..C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub usize);

/// Dense index of a condition category, `0..K_cat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

impl ConditionId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl CategoryId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub id: ConditionId,
    pub name: String,
    pub category: CategoryId,
    pub high_risk: bool,
    pub synonyms: Vec<String>,
}

/// On-disk form of a condition entry; the category is referenced by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConditionRecord {
    id: usize,
    name: String,
    category: String,
    #[serde(default)]
    high_risk: bool,
    #[serde(default)]
    synonyms: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    categories: Vec<String>,
    conditions: Vec<ConditionRecord>,
}

/// Validated condition taxonomy. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ConditionTaxonomy {
    categories: Vec<String>,
    conditions: Vec<Condition>,
    lookup: HashMap<String, ConditionId>,
    hash: String,
}

fn normalize(name: &str) -> String {
    name.trim().to_lowercase()
}

impl ConditionTaxonomy {
    /// Builds a taxonomy, checking dense ids, category coverage and
    /// uniqueness of every name and synonym after case-folding.
    pub fn new(categories: Vec<String>, mut conditions: Vec<Condition>) -> Result<Self> {
        if conditions.is_empty() || categories.is_empty() {
            return Err(Error::Config("taxonomy needs at least one condition and category".into()));
        }
        conditions.sort_by_key(|c| c.id);
        for (i, c) in conditions.iter().enumerate() {
            if c.id.0 != i {
                return Err(Error::Config(format!(
                    "condition ids must be exactly 0..{} without gaps or duplicates (found {} at position {i})",
                    conditions.len(),
                    c.id.0
                )));
            }
            if c.category.0 >= categories.len() {
                return Err(Error::Config(format!(
                    "condition `{}` references unknown category {}",
                    c.name, c.category.0
                )));
            }
        }
        let mut used = vec![false; categories.len()];
        for c in &conditions {
            used[c.category.0] = true;
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return Err(Error::Config(format!("category `{}` has no conditions", categories[k])));
        }

        let mut lookup = HashMap::new();
        for c in &conditions {
            for s in std::iter::once(&c.name).chain(c.synonyms.iter()) {
                let key = normalize(s);
                if key.is_empty() {
                    return Err(Error::Config(format!("empty name or synonym on `{}`", c.name)));
                }
                if lookup.insert(key, c.id).is_some() {
                    return Err(Error::Config(format!("name or synonym `{s}` is not unique")));
                }
            }
        }

        let mut taxonomy = Self { categories, conditions, lookup, hash: String::new() };
        let canonical = serde_json::to_vec(&taxonomy.to_file())?;
        taxonomy.hash = hex::encode(Sha256::digest(&canonical));
        Ok(taxonomy)
    }

    fn to_file(&self) -> TaxonomyFile {
        TaxonomyFile {
            categories: self.categories.clone(),
            conditions: self
                .conditions
                .iter()
                .map(|c| ConditionRecord {
                    id: c.id.0,
                    name: c.name.clone(),
                    category: self.categories[c.category.0].clone(),
                    high_risk: c.high_risk,
                    synonyms: c.synonyms.clone(),
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        let by_name: HashMap<&str, usize> =
            file.categories.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        if by_name.len() != file.categories.len() {
            return Err(Error::Config("duplicate category name".into()));
        }
        let conditions = file
            .conditions
            .into_iter()
            .map(|r| {
                let category = *by_name.get(r.category.as_str()).ok_or_else(|| {
                    Error::Config(format!("condition `{}` has unknown category `{}`", r.name, r.category))
                })?;
                Ok(Condition {
                    id: ConditionId(r.id),
                    name: r.name,
                    category: CategoryId(category),
                    high_risk: r.high_risk,
                    synonyms: r.synonyms,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(file.categories, conditions)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn category_names(&self) -> &[String] {
        &self.categories
    }

    pub fn condition(&self, id: ConditionId) -> Result<&Condition> {
        self.conditions
            .get(id.0)
            .ok_or(Error::InvalidId { id: id.0, limit: self.conditions.len() })
    }

    pub fn name(&self, id: ConditionId) -> &str {
        &self.conditions[id.0].name
    }

    /// Looks up a rater-supplied diagnosis by exact name or synonym.
    pub fn map_diagnosis(&self, raw_name: &str) -> Option<ConditionId> {
        self.lookup.get(&normalize(raw_name)).copied()
    }

    pub fn category_of(&self, id: ConditionId) -> Result<CategoryId> {
        self.condition(id).map(|c| c.category)
    }

    pub fn is_high_risk(&self, id: ConditionId) -> bool {
        self.conditions.get(id.0).is_some_and(|c| c.high_risk)
    }

    /// Condition ids belonging to each category, in id order.
    pub fn members(&self) -> Vec<Vec<ConditionId>> {
        let mut out = vec![Vec::new(); self.categories.len()];
        for c in &self.conditions {
            out[c.category.0].push(c.id);
        }
        out
    }

    /// Category index per condition, as a flat lookup table.
    pub fn category_table(&self) -> Vec<usize> {
        self.conditions.iter().map(|c| c.category.0).collect()
    }

    /// The desk-scale default: 40 conditions over 12 categories.
    pub fn desk_default() -> Self {
        let groups: [(&str, &[(&str, bool, &[&str])]); 12] = [
            (
                "Contact dermatitis",
                &[
                    ("Allergic Contact Dermatitis", false, &["ACD"]),
                    ("Irritant Contact Dermatitis", false, &["ICD"]),
                ],
            ),
            (
                "Cutaneous Infections",
                &[
                    ("Impetigo", false, &[]),
                    ("Tinea", false, &["Ringworm", "Dermatophytosis"]),
                    ("Herpes Zoster", false, &["Shingles"]),
                    ("Molluscum Contagiosum", false, &["Molluscum"]),
                    ("Scabies", false, &[]),
                ],
            ),
            (
                "Inflammatory Eruptions",
                &[
                    ("Eczema", false, &["Atopic dermatitis", "Atopic eczema"]),
                    ("Psoriasis", false, &["Plaque psoriasis"]),
                    ("Acne", false, &["Acne vulgaris"]),
                    ("Rosacea", false, &[]),
                    ("Seborrheic Dermatitis", false, &["Dandruff"]),
                ],
            ),
            (
                "Other Eruptions",
                &[
                    ("Drug Rash", false, &["Drug eruption"]),
                    ("Urticaria", false, &["Hives"]),
                    ("Pityriasis rosea", false, &[]),
                    ("Stasis Dermatitis", false, &[]),
                ],
            ),
            (
                "Neoplasms",
                &[
                    ("SK/ISK", false, &["Seborrheic keratosis", "Irritated seborrheic keratosis"]),
                    ("Melanocytic Nevus", false, &["Mole", "Nevus"]),
                    ("Actinic Keratosis", false, &["AK"]),
                    ("SCC/SCCIS", true, &["Squamous cell carcinoma", "SCC"]),
                    ("Basal Cell Carcinoma", true, &["BCC"]),
                    ("Melanoma", true, &["Malignant melanoma"]),
                    ("Cutaneous T Cell Lymphoma", true, &["CTCL", "Mycosis fungoides"]),
                ],
            ),
            (
                "Blisters and Ulcers",
                &[
                    ("Bullous Pemphigoid", false, &[]),
                    ("Ulcer", false, &[]),
                    ("Pyoderma Gangrenosum", false, &[]),
                ],
            ),
            (
                "Nail disorders",
                &[
                    ("Onychomycosis", false, &["Nail fungus"]),
                    ("Onycholysis", false, &[]),
                    ("Longitudinal melanonychia", false, &[]),
                ],
            ),
            (
                "Hair Disorders",
                &[
                    ("Androgenetic Alopecia", false, &[]),
                    ("Alopecia Areata", false, &[]),
                    ("Telogen effluvium", false, &[]),
                ],
            ),
            (
                "Pigmentary Disorders",
                &[
                    ("Vitiligo", false, &[]),
                    ("Melasma", false, &[]),
                    ("Post-Inflammatory hyperpigmentation", false, &["PIH"]),
                ],
            ),
            (
                "Vascular",
                &[
                    ("Hemangioma", false, &[]),
                    ("Leukocytoclastic Vasculitis", false, &["LCV"]),
                ],
            ),
            ("Others", &[("Ecchymoses", false, &["Bruise"]), ("Burn of skin", false, &["Burn"])]),
            ("Healthy", &[("Healthy skin", false, &["Normal skin"])]),
        ];
        let mut categories = Vec::new();
        let mut conditions = Vec::new();
        for (k, (cat, members)) in groups.iter().enumerate() {
            categories.push(cat.to_string());
            for (name, high_risk, synonyms) in members.iter() {
                conditions.push(Condition {
                    id: ConditionId(conditions.len()),
                    name: name.to_string(),
                    category: CategoryId(k),
                    high_risk: *high_risk,
                    synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
                });
            }
        }
        Self::new(categories, conditions).expect("built-in taxonomy is valid")
    }
}
