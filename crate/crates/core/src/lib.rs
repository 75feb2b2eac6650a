//! Diagnosis and adaptation toolkit for a multiclass skin-condition
//! classifier head trained on frozen image embeddings, under label shift
//! between a development source and deployment sites.
//!
//! The modules follow the data flow: [`taxonomy`] and [`labels`] define what
//! a reference diagnosis is, [`dataio`] holds cases (and a synthetic two-site
//! generator), [`encoder`] and [`trainer`] build and fit the FiLM head,
//! [`adapt`] and [`calibrate`] implement the interventions, [`predict`] and
//! [`eval`] score them, and [`pipeline`] runs the whole experiment.

pub mod adapt;
pub mod calibrate;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod labels;
pub mod pipeline;
pub mod predict;
pub mod rng;
mod serde_arrays;
pub mod taxonomy;
pub mod trainer;

pub use adapt::{condition_aware_augment, mh_resample, random_augment, stratified_split, AugmentConfig, TargetDistribution};
pub use calibrate::{expected_calibration_error, fit_temperatures, recalibrate, CalibrationParams};
pub use dataio::{generate_synthetic_sites, GeneratorConfig, SyntheticSites};
pub use dataio::{Case, ConditionDistribution, Dataset, Level, Site};
pub use encoder::{film_fuse, FilmParams, MetadataSchema};
pub use error::{Error, Result};
pub use eval::{bootstrap_ci, factor_regression, topk_accuracy, variablek_accuracy, BootstrapConfig, MetricResult, RegressionRow};
pub use labels::{reference_label, Ambiguity, RaterDiagnosis, ReferenceLabel, WeightedDifferential};
pub use pipeline::{run_pipeline, ExperimentConfig};
pub use predict::{fit_k_threshold, predict_case, variable_k_predict, KThreshold, PredictionSet};
pub use taxonomy::{CategoryId, ConditionId, ConditionTaxonomy};
pub use trainer::{train, ModelParams, TrainConfig, TrainMode};
