//! Case encoding: metadata one-hot + standardized age, metadata dropout,
//! image aggregation and FiLM fusion.
//!
//! The fused embedding is `beta(e) + alpha(e) * x` where `e` is the affine
//! metadata embedding and `x` the mean image embedding. All projections are
//! affine with no nonlinearity.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNKNOWN: &str = "unknown";
pub const NUM_METADATA_FIELDS: usize = 25;
pub const MAX_IMAGES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    /// Allowed values; always contains [`UNKNOWN`].
    pub values: Vec<String>,
}

impl FieldSpec {
    fn new(name: &str, values: &[&str]) -> Self {
        let mut values: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        values.push(UNKNOWN.to_string());
        Self { name: name.to_string(), values }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn unknown_index(&self) -> usize {
        self.index_of(UNKNOWN).expect("validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeNormalizer {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub fields: Vec<FieldSpec>,
    pub age_normalizer: AgeNormalizer,
}

/// Names of the ten condition-informative fields in the default schema.
pub const INFORMATIVE_FIELDS: [&str; 10] = [
    "itch",
    "pain",
    "bleeding",
    "redness",
    "scaling",
    "swelling",
    "duration",
    "texture",
    "recurrence",
    "spread",
];

impl MetadataSchema {
    pub fn new(fields: Vec<FieldSpec>, age_normalizer: AgeNormalizer) -> Result<Self> {
        let schema = Self { fields, age_normalizer };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.len() != NUM_METADATA_FIELDS {
            return Err(Error::Config(format!(
                "metadata schema needs {NUM_METADATA_FIELDS} fields, got {}",
                self.fields.len()
            )));
        }
        for f in &self.fields {
            if f.index_of(UNKNOWN).is_none() {
                return Err(Error::Config(format!("field `{}` lacks an `unknown` value", f.name)));
            }
        }
        let n = &self.age_normalizer;
        if !(n.std > 0.0 && n.std.is_finite() && n.mean.is_finite()) {
            return Err(Error::Config("age normalizer std must be positive and finite".into()));
        }
        Ok(())
    }

    /// Default 25-field schema: ten condition-informative symptom/sign fields
    /// followed by demographic and history fields.
    pub fn desk_default() -> Self {
        let grade = ["none", "mild", "moderate", "severe"];
        let mut fields: Vec<FieldSpec> = INFORMATIVE_FIELDS
            .iter()
            .map(|name| match *name {
                "duration" => FieldSpec::new(name, &["days", "weeks", "months", "years"]),
                "texture" => FieldSpec::new(name, &["flat", "raised", "rough", "fluid_filled"]),
                "spread" => FieldSpec::new(name, &["single", "few", "many", "widespread"]),
                _ => FieldSpec::new(name, &grade),
            })
            .collect();
        fields.push(FieldSpec::new("sex", &["female", "male"]));
        fields.push(FieldSpec::new("age_group", &AGE_GROUPS));
        fields.push(FieldSpec::new("efst", &["I/II", "III/IV", "V/VI"]));
        for name in [
            "fever",
            "history_psoriasis",
            "history_eczema",
            "history_allergy",
            "smoker",
            "topical_medication",
            "oral_medication",
            "outdoor_work",
            "recent_travel",
            "prior_treatment",
            "family_history",
            "immunosuppressed",
        ] {
            fields.push(FieldSpec::new(name, &["no", "yes"]));
        }
        Self { fields, age_normalizer: AgeNormalizer { mean: 50.0, std: 18.0 } }
    }

    /// Refits the age standardization on a set of ages.
    pub fn with_age_fit(mut self, ages: impl IntoIterator<Item = f64>) -> Result<Self> {
        let ages: Vec<f64> = ages.into_iter().collect();
        if ages.is_empty() {
            return Err(Error::EmptyInput("no ages to fit the age normalizer"));
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        self.age_normalizer = AgeNormalizer { mean, std };
        Ok(self)
    }

    /// Encoded metadata width `M_in`: sum of field cardinalities plus one age slot.
    pub fn input_width(&self) -> usize {
        self.fields.iter().map(FieldSpec::cardinality).sum::<usize>() + 1
    }

    /// Start offset of each field's one-hot block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.fields
            .iter()
            .map(|f| {
                let o = acc;
                acc += f.cardinality();
                o
            })
            .collect()
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }
}

pub const AGE_GROUPS: [&str; 5] = ["<30", "30-39", "40-49", "50-59", ">=60"];

pub fn age_group(age: f64) -> &'static str {
    match age {
        a if a < 30.0 => AGE_GROUPS[0],
        a if a < 40.0 => AGE_GROUPS[1],
        a if a < 50.0 => AGE_GROUPS[2],
        a if a < 60.0 => AGE_GROUPS[3],
        _ => AGE_GROUPS[4],
    }
}

/// Compact form of an encoded metadata vector: the active one-hot slot of
/// each field (absolute index) plus the standardized age.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMetadata {
    pub active: Vec<usize>,
    pub age: f64,
}

impl SparseMetadata {
    pub fn to_dense(&self, width: usize) -> Array1<f64> {
        let mut v = Array1::zeros(width);
        for &i in &self.active {
            v[i] = 1.0;
        }
        v[width - 1] = self.age;
        v
    }
}

/// Per-field slot indices (relative to each field's block).
pub fn metadata_slots(metadata: &BTreeMap<String, String>, schema: &MetadataSchema) -> Result<Vec<usize>> {
    schema
        .fields
        .iter()
        .map(|f| {
            let value = metadata.get(&f.name).ok_or_else(|| Error::Schema {
                case_id: String::new(),
                detail: format!("missing metadata field `{}`", f.name),
            })?;
            f.index_of(value).ok_or_else(|| Error::Schema {
                case_id: String::new(),
                detail: format!("value `{value}` not allowed for field `{}`", f.name),
            })
        })
        .collect()
}

pub fn encode_sparse(
    metadata: &BTreeMap<String, String>,
    age: f64,
    schema: &MetadataSchema,
) -> Result<SparseMetadata> {
    let slots = metadata_slots(metadata, schema)?;
    let active = schema.offsets().into_iter().zip(slots).map(|(o, s)| o + s).collect();
    let n = schema.age_normalizer;
    Ok(SparseMetadata { active, age: (age - n.mean) / n.std })
}

/// One-hot blocks in schema order followed by the standardized age.
pub fn encode_metadata(
    metadata: &BTreeMap<String, String>,
    age: f64,
    schema: &MetadataSchema,
) -> Result<Array1<f64>> {
    Ok(encode_sparse(metadata, age, schema)?.to_dense(schema.input_width()))
}

/// Replaces each field independently with `unknown` with probability `p`.
pub fn metadata_dropout<R: Rng + ?Sized>(
    metadata: &BTreeMap<String, String>,
    p: f64,
    rng: &mut R,
) -> Result<BTreeMap<String, String>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok(metadata
        .iter()
        .map(|(k, v)| {
            let dropped = rng.random::<f64>() < p;
            (k.clone(), if dropped { UNKNOWN.to_string() } else { v.clone() })
        })
        .collect())
}

/// Mean of the image embeddings; more than six images are subsampled to six.
pub fn aggregate_images<R: Rng + ?Sized>(embeddings: &[Vec<f64>], rng: &mut R) -> Result<Array1<f64>> {
    let first = embeddings.first().ok_or(Error::EmptyInput("case has no image embeddings"))?;
    let dim = first.len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Shape("image embeddings differ in dimension".into()));
    }
    let chosen: Vec<usize> = if embeddings.len() > MAX_IMAGES {
        let mut idx = sample(rng, embeddings.len(), MAX_IMAGES).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..embeddings.len()).collect()
    };
    let mut out = Array1::zeros(dim);
    for &i in &chosen {
        out += &ArrayView1::from(&embeddings[i][..]);
    }
    out /= chosen.len() as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilmParams {
    /// `M_in x M_emb`
    #[serde(with = "crate::serde_arrays::matrix")]
    pub metadata_proj: Array2<f64>,
    #[serde(with = "crate::serde_arrays::vector")]
    pub metadata_bias: Array1<f64>,
    /// `M_emb x D`
    #[serde(with = "crate::serde_arrays::matrix")]
    pub alpha_proj: Array2<f64>,
    #[serde(with = "crate::serde_arrays::vector")]
    pub alpha_bias: Array1<f64>,
    /// `M_emb x D`
    #[serde(with = "crate::serde_arrays::matrix")]
    pub beta_proj: Array2<f64>,
    #[serde(with = "crate::serde_arrays::vector")]
    pub beta_bias: Array1<f64>,
}

impl FilmParams {
    pub fn zeros(input_width: usize, meta_width: usize, dim: usize) -> Self {
        Self {
            metadata_proj: Array2::zeros((input_width, meta_width)),
            metadata_bias: Array1::zeros(meta_width),
            alpha_proj: Array2::zeros((meta_width, dim)),
            alpha_bias: Array1::zeros(dim),
            beta_proj: Array2::zeros((meta_width, dim)),
            beta_bias: Array1::zeros(dim),
        }
    }

    pub fn input_width(&self) -> usize {
        self.metadata_proj.nrows()
    }

    pub fn meta_width(&self) -> usize {
        self.metadata_proj.ncols()
    }

    pub fn dim(&self) -> usize {
        self.alpha_proj.ncols()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (m_in, m_emb, d) = (self.input_width(), self.meta_width(), self.dim());
        let ok = self.metadata_bias.len() == m_emb
            && self.alpha_proj.dim() == (m_emb, d)
            && self.beta_proj.dim() == (m_emb, d)
            && self.alpha_bias.len() == d
            && self.beta_bias.len() == d;
        if !ok {
            return Err(Error::Shape(format!("inconsistent FiLM parameter shapes (M_in={m_in}, M_emb={m_emb}, D={d})")));
        }
        Ok(())
    }

    /// Affine metadata embedding `E_meta`.
    pub fn metadata_embedding(&self, metadata_vec: ArrayView1<f64>) -> Array1<f64> {
        metadata_vec.dot(&self.metadata_proj) + &self.metadata_bias
    }
}

pub fn film_fuse(
    image_emb: ArrayView1<f64>,
    metadata_vec: ArrayView1<f64>,
    params: &FilmParams,
) -> Result<Array1<f64>> {
    params.check_shapes()?;
    if image_emb.len() != params.dim() || metadata_vec.len() != params.input_width() {
        return Err(Error::Shape(format!(
            "image {} / metadata {} vs params D={} M_in={}",
            image_emb.len(),
            metadata_vec.len(),
            params.dim(),
            params.input_width()
        )));
    }
    let e = params.metadata_embedding(metadata_vec);
    let alpha = e.dot(&params.alpha_proj) + &params.alpha_bias;
    let beta = e.dot(&params.beta_proj) + &params.beta_bias;
    Ok(beta + alpha * image_emb)
}
