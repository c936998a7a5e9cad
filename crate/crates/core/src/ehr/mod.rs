//! Efficacy-aware fusion of visit records into labelled text samples.
//!
//! The flow is `ingest_records` → [`build_visit_pairs`] → [`rank_efficacy`]
//! → [`render_sample`], with [`generate_synthetic_cohort`] standing in for
//! real visit tables.

mod efficacy;
mod ingest;
mod pairs;
mod record;
mod registry;
mod render;
mod synth;

pub use efficacy::{
    rank_efficacy, top_k_treatments, EfficacyEntry, EfficacyKey, EfficacyParams, EfficacyTable, RankedTreatment,
};
pub use ingest::{ingest_records, read_records, write_records, IngestOptions, IngestReport, RowIssue, VISIT_COLUMNS};
pub use pairs::build_visit_pairs;
pub use record::{TreatmentKind, VisitPair, VisitRecord};
pub use registry::{phenotype_labels, PhenotypeKind, PhenotypeRegistry, NUM_PHENOTYPES};
pub use render::{render_raw, render_sample, FusedSample, Template, DEFAULT_FUSED_TEMPLATE, DEFAULT_RAW_TEMPLATE};
pub use synth::{
    default_planted_effects, generate_synthetic_cohort, PlantedEffect, SynthConfig, MEDICATIONS, PROCEDURES,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EhrError {
    #[error("missing required column `{column}`")]
    Schema { column: String },
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("duplicate visit key (patient `{patient_id}`, time {visit_time})")]
    DuplicateVisit { patient_id: String, visit_time: i64 },
    #[error("template is missing placeholder {placeholder}")]
    Template { placeholder: String },
    #[error("registry: {0}")]
    Registry(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EhrError> = std::result::Result<T, E>;
