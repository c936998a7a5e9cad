use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{TreatmentKind, VisitPair};

/// Smoothing and support thresholds for the efficacy score
/// `(resolved + a) / (exposed + a + b)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EfficacyParams {
    pub prior_resolved: u64,
    pub prior_unresolved: u64,
    /// Entries with fewer exposed pairs stay in the table but are never ranked.
    pub min_support: u64,
}

impl Default for EfficacyParams {
    fn default() -> Self {
        Self {
            prior_resolved: 1,
            prior_unresolved: 1,
            min_support: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EfficacyKey {
    pub disease: String,
    pub treatment: String,
    pub kind: TreatmentKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EfficacyEntry {
    pub exposed_pairs: u64,
    pub resolved_pairs: u64,
}

impl EfficacyEntry {
    fn numerator(&self, p: &EfficacyParams) -> u64 {
        self.resolved_pairs + p.prior_resolved
    }

    fn denominator(&self, p: &EfficacyParams) -> u64 {
        self.exposed_pairs + p.prior_resolved + p.prior_unresolved
    }

    pub fn score(&self, p: &EfficacyParams) -> f64 {
        self.numerator(p) as f64 / self.denominator(p) as f64
    }

    /// Exact comparison of two smoothed ratios by cross-multiplication.
    pub fn cmp_score(&self, other: &Self, p: &EfficacyParams) -> Ordering {
        let lhs = self.numerator(p) as u128 * other.denominator(p) as u128;
        let rhs = other.numerator(p) as u128 * self.denominator(p) as u128;
        lhs.cmp(&rhs)
    }
}

/// Co-occurrence counts of (disease at visit i, treatment at visit i) with
/// whether the disease was gone by visit i + 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EfficacyTable {
    pub params: EfficacyParams,
    entries: BTreeMap<EfficacyKey, EfficacyEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedTreatment {
    pub treatment: String,
    pub kind: TreatmentKind,
    pub score: f64,
    pub exposed_pairs: u64,
    pub resolved_pairs: u64,
}

impl EfficacyTable {
    pub fn new(params: EfficacyParams) -> Self {
        Self {
            params,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, disease: &str, treatment: &str, kind: TreatmentKind) -> Option<&EfficacyEntry> {
        self.entries.get(&EfficacyKey {
            disease: disease.to_string(),
            treatment: treatment.to_string(),
            kind,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EfficacyKey, &EfficacyEntry)> {
        self.entries.iter()
    }

    pub fn record(&mut self, key: EfficacyKey, resolved: bool) {
        let e = self.entries.entry(key).or_default();
        e.exposed_pairs += 1;
        e.resolved_pairs += u64::from(resolved);
    }

    /// Adds another table's counts. Commutative and associative, so
    /// patient shards can be counted independently.
    pub fn merge(&mut self, other: &EfficacyTable) {
        for (k, v) in &other.entries {
            let e = self.entries.entry(k.clone()).or_default();
            e.exposed_pairs += v.exposed_pairs;
            e.resolved_pairs += v.resolved_pairs;
        }
    }

    /// Tab-separated dump: disease, treatment, kind, exposed, resolved, score.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("disease\ttreatment\tkind\texposed_pairs\tresolved_pairs\tefficacy_score\n");
        for (k, e) in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.6}\n",
                k.disease,
                k.treatment,
                k.kind,
                e.exposed_pairs,
                e.resolved_pairs,
                e.score(&self.params)
            ));
        }
        out
    }
}

/// Counts, for every (source disease, source treatment) pair, how often the
/// disease was present and how often it was absent at the next visit. Every
/// treatment at the visit is credited to every disease at that visit.
pub fn rank_efficacy(pairs: &[VisitPair], params: EfficacyParams) -> EfficacyTable {
    let mut table = EfficacyTable::new(params);
    for pair in pairs {
        for disease in &pair.source.diagnoses {
            let resolved = !pair.next_diagnoses.contains(disease);
            for (treatment, kind) in pair.source.treatments() {
                table.record(
                    EfficacyKey {
                        disease: disease.clone(),
                        treatment: treatment.to_string(),
                        kind,
                    },
                    resolved,
                );
            }
        }
    }
    table
}

/// Best `k` treatments for `disease` among entries meeting `min_support`:
/// score descending, then exposure descending, then treatment code, then kind.
pub fn top_k_treatments(table: &EfficacyTable, disease: &str, k: usize) -> Vec<RankedTreatment> {
    let p = table.params;
    let mut candidates: Vec<(&EfficacyKey, &EfficacyEntry)> = table
        .entries
        .range(
            EfficacyKey {
                disease: disease.to_string(),
                treatment: String::new(),
                kind: TreatmentKind::Medication,
            }..,
        )
        .take_while(|(key, _)| key.disease == disease)
        .filter(|(_, e)| e.exposed_pairs >= p.min_support)
        .collect();
    candidates.sort_by(|(ka, ea), (kb, eb)| {
        eb.cmp_score(ea, &p)
            .then(eb.exposed_pairs.cmp(&ea.exposed_pairs))
            .then_with(|| ka.treatment.cmp(&kb.treatment))
            .then(ka.kind.cmp(&kb.kind))
    });
    candidates
        .into_iter()
        .take(k)
        .map(|(key, e)| RankedTreatment {
            treatment: key.treatment.clone(),
            kind: key.kind,
            score: e.score(&p),
            exposed_pairs: e.exposed_pairs,
            resolved_pairs: e.resolved_pairs,
        })
        .collect()
}
