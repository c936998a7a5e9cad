use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{phenotype_labels, top_k_treatments, EfficacyTable, EhrError, PhenotypeRegistry, Result, VisitPair};

pub const DEFAULT_FUSED_TEMPLATE: &str = include_str!("../../assets/fused_template.txt");
pub const DEFAULT_RAW_TEMPLATE: &str = include_str!("../../assets/raw_template.txt");

const VISIT_SLOTS: [&str; 3] = ["{diagnoses}", "{medications}", "{procedures}"];
const EFFICACY_SLOT: &str = "{efficacy_ranking}";

/// Prompt text with `{placeholder}` slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    text: String,
    with_efficacy: bool,
}

impl Template {
    /// Template for fused samples; all four slots are required.
    pub fn fused(text: &str) -> Result<Self> {
        Self::check(text, VISIT_SLOTS.iter().chain([&EFFICACY_SLOT]))?;
        Ok(Self {
            text: text.trim_end().to_string(),
            with_efficacy: true,
        })
    }

    /// Template for raw visit text without the efficacy clause.
    pub fn raw(text: &str) -> Result<Self> {
        Self::check(text, VISIT_SLOTS.iter())?;
        Ok(Self {
            text: text.trim_end().to_string(),
            with_efficacy: false,
        })
    }

    fn check<'a>(text: &str, mut slots: impl Iterator<Item = &'a &'a str>) -> Result<()> {
        match slots.find(|s| !text.contains(**s)) {
            Some(missing) => Err(EhrError::Template {
                placeholder: missing.to_string(),
            }),
            None => Ok(()),
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// One training/evaluation example. Serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedSample {
    pub text: String,
    pub label: Vec<u8>,
    pub patient_id: String,
    pub visit_index: usize,
}

impl FusedSample {
    pub fn sample_id(&self) -> String {
        format!("{}#{}", self.patient_id, self.visit_index)
    }
}

fn list(codes: &BTreeSet<String>) -> String {
    if codes.is_empty() {
        "none".to_string()
    } else {
        codes.iter().map(String::as_str).collect::<Vec<_>>().join(", ")
    }
}

fn efficacy_clause(pair: &VisitPair, table: &EfficacyTable, k: usize) -> String {
    let mut parts = Vec::new();
    for disease in &pair.source.diagnoses {
        let ranked = top_k_treatments(table, disease, k);
        if ranked.is_empty() {
            continue;
        }
        let items: Vec<String> = ranked
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {} ({:.2})", i + 1, r.treatment, r.score))
            .collect();
        parts.push(format!("{disease}: {}", items.join(", ")));
    }
    if parts.is_empty() {
        "no ranked treatments".to_string()
    } else {
        parts.join("; ")
    }
}

fn fill(template: &Template, pair: &VisitPair, efficacy: Option<String>) -> String {
    let mut text = template
        .text
        .replace("{diagnoses}", &list(&pair.source.diagnoses))
        .replace("{medications}", &list(&pair.source.medications))
        .replace("{procedures}", &list(&pair.source.procedures));
    if let Some(clause) = efficacy {
        text = text.replace(EFFICACY_SLOT, &clause);
    }
    text
}

fn finish(pair: &VisitPair, registry: &PhenotypeRegistry, text: String) -> (FusedSample, Vec<String>) {
    let label = phenotype_labels(pair.next_diagnoses.iter().map(String::as_str), registry);
    let dropped = pair
        .next_diagnoses
        .iter()
        .filter(|d| !registry.contains(d))
        .cloned()
        .collect();
    (
        FusedSample {
            text,
            label,
            patient_id: pair.source.patient_id.clone(),
            visit_index: pair.visit_index,
        },
        dropped,
    )
}

/// Renders a pair into instruction + input text with the top-`k` efficacy
/// ranking for each source diagnosis. Also returns next-visit codes that were
/// not in the registry and so were dropped from the label.
pub fn render_sample(
    pair: &VisitPair,
    table: &EfficacyTable,
    registry: &PhenotypeRegistry,
    template: &Template,
    k: usize,
) -> Result<(FusedSample, Vec<String>)> {
    if !template.with_efficacy {
        return Err(EhrError::Template {
            placeholder: EFFICACY_SLOT.to_string(),
        });
    }
    let text = fill(template, pair, Some(efficacy_clause(pair, table, k)));
    Ok(finish(pair, registry, text))
}

/// Same sample without efficacy information.
pub fn render_raw(pair: &VisitPair, registry: &PhenotypeRegistry, template: &Template) -> (FusedSample, Vec<String>) {
    let text = fill(template, pair, None);
    finish(pair, registry, text)
}
