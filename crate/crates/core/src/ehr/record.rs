use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentKind {
    Medication,
    Procedure,
}

impl fmt::Display for TreatmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Medication => "medication",
            Self::Procedure => "procedure",
        })
    }
}

impl std::str::FromStr for TreatmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "medication" => Ok(Self::Medication),
            "procedure" => Ok(Self::Procedure),
            other => Err(format!("unknown treatment kind `{other}`")),
        }
    }
}

/// One patient visit: who, when, and what was diagnosed and done.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitRecord {
    pub patient_id: String,
    pub visit_time: i64,
    pub diagnoses: BTreeSet<String>,
    pub medications: BTreeSet<String>,
    pub procedures: BTreeSet<String>,
}

impl VisitRecord {
    pub fn new(patient_id: impl Into<String>, visit_time: i64) -> Self {
        Self {
            patient_id: patient_id.into(),
            visit_time,
            diagnoses: BTreeSet::new(),
            medications: BTreeSet::new(),
            procedures: BTreeSet::new(),
        }
    }

    pub fn with_diagnoses<I: IntoIterator<Item = S>, S: Into<String>>(mut self, codes: I) -> Self {
        self.diagnoses = codes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_medications<I: IntoIterator<Item = S>, S: Into<String>>(mut self, codes: I) -> Self {
        self.medications = codes.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_procedures<I: IntoIterator<Item = S>, S: Into<String>>(mut self, codes: I) -> Self {
        self.procedures = codes.into_iter().map(Into::into).collect();
        self
    }

    /// All treatments given at this visit, tagged by kind.
    pub fn treatments(&self) -> impl Iterator<Item = (&str, TreatmentKind)> {
        self.medications
            .iter()
            .map(|m| (m.as_str(), TreatmentKind::Medication))
            .chain(self.procedures.iter().map(|p| (p.as_str(), TreatmentKind::Procedure)))
    }
}

/// Visit `i` of a patient together with the diagnoses of visit `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitPair {
    pub source: VisitRecord,
    /// Zero-based position of `source` among the patient's visits.
    pub visit_index: usize,
    pub next_time: i64,
    pub next_diagnoses: BTreeSet<String>,
}

impl VisitPair {
    pub fn sample_id(&self) -> String {
        format!("{}#{}", self.source.patient_id, self.visit_index)
    }
}
