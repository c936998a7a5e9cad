use std::fmt;
use std::path::PathBuf;

use ckd_core::distill::DistillError;
use ckd_core::ehr::EhrError;
use ckd_core::kv::KvError;
use ckd_core::model::ModelError;
use ckd_core::pipeline::PipelineError;

pub const INPUT: u8 = 2;
pub const MISSING: u8 = 3;
pub const DIVERGED: u8 = 4;

/// An upstream artifact the command needs is not there.
#[derive(Debug)]
pub struct Missing(pub PathBuf);

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing artifact {}", self.0.display())
    }
}

impl std::error::Error for Missing {}

/// Bad user input caught by the command layer.
#[derive(Debug)]
pub struct BadInput(pub String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn ehr(e: &EhrError) -> Option<u8> {
    match e {
        EhrError::Io(_) => None,
        _ => Some(INPUT),
    }
}

fn model(e: &ModelError) -> Option<u8> {
    match e {
        ModelError::Config(_) | ModelError::Vocab(_) | ModelError::Checkpoint(_) | ModelError::Kv(_) => Some(INPUT),
        _ => None,
    }
}

fn distill(e: &DistillError) -> Option<u8> {
    match e {
        DistillError::Divergence { .. } => Some(DIVERGED),
        DistillError::Config(_) | DistillError::Cache { .. } => Some(INPUT),
        DistillError::Model(m) => model(m),
        _ => None,
    }
}

fn pipeline(e: &PipelineError) -> Option<u8> {
    match e {
        PipelineError::Config(_) | PipelineError::Kv(_) => Some(INPUT),
        PipelineError::Ehr(e) => ehr(e),
        PipelineError::Model(e) => model(e),
        PipelineError::Distill(e) => distill(e),
        PipelineError::Eval(_) => None,
    }
}

/// 2 for bad input, 3 for a missing artifact, 4 for divergence, 1 otherwise.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if cause.is::<Missing>() {
            Some(MISSING)
        } else if cause.is::<BadInput>() || cause.is::<KvError>() || cause.is::<serde_json::Error>() {
            Some(INPUT)
        } else if let Some(e) = cause.downcast_ref::<PipelineError>() {
            pipeline(e)
        } else if let Some(e) = cause.downcast_ref::<DistillError>() {
            distill(e)
        } else if let Some(e) = cause.downcast_ref::<EhrError>() {
            ehr(e)
        } else if let Some(e) = cause.downcast_ref::<ModelError>() {
            model(e)
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    1
}
