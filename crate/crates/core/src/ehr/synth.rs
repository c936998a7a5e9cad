//! Seeded cohort generator with planted treatment effects.
//!
//! Each patient starts with a draw of phenotypes. At every visit each
//! current disease with planted treatments receives one of them, chosen
//! uniformly, with probability `treat_prob`. On top of that come at most
//! one background medication and an occasional procedure. A disease present at visit `i` is gone by
//! visit `i + 1` with the largest planted probability among the planted
//! treatments it received, or with its type's baseline rate otherwise.
//! New diseases appear at a small per-type onset rate.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EhrError, PhenotypeKind, PhenotypeRegistry, Result, TreatmentKind, VisitRecord};
use crate::rng::{self, stream};

pub const MEDICATIONS: [&str; 16] = [
    "albuterol",
    "amiodarone",
    "aspirin",
    "atorvastatin",
    "ceftriaxone",
    "furosemide",
    "heparin",
    "insulin",
    "lisinopril",
    "metformin",
    "metoprolol",
    "norepinephrine",
    "pantoprazole",
    "prednisone",
    "vancomycin",
    "warfarin",
];

pub const PROCEDURES: [&str; 8] = [
    "angioplasty",
    "bronchoscopy",
    "catheterization",
    "dialysis",
    "endoscopy",
    "intubation",
    "thoracentesis",
    "transfusion",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub disease: String,
    pub treatment: String,
    pub kind: TreatmentKind,
    pub resolve_prob: f64,
}

impl PlantedEffect {
    pub fn new(disease: &str, treatment: &str, kind: TreatmentKind, resolve_prob: f64) -> Self {
        Self {
            disease: disease.to_string(),
            treatment: treatment.to_string(),
            kind,
            resolve_prob,
        }
    }
}

/// Effects used by the CLI when no planted table is configured.
pub fn default_planted_effects() -> Vec<PlantedEffect> {
    use TreatmentKind::{Medication as M, Procedure as P};
    vec![
        PlantedEffect::new("Pneumonia", "ceftriaxone", M, 0.9),
        PlantedEffect::new("Pneumonia", "prednisone", M, 0.2),
        PlantedEffect::new("Septicemia (except in labor)", "vancomycin", M, 0.85),
        PlantedEffect::new("Shock", "norepinephrine", M, 0.85),
        PlantedEffect::new("Acute and unspecified renal failure", "dialysis", P, 0.8),
        PlantedEffect::new("Congestive heart failure; nonhypertensive", "furosemide", M, 0.75),
        PlantedEffect::new("Cardiac dysrhythmias", "amiodarone", M, 0.8),
        PlantedEffect::new("Gastrointestinal hemorrhage", "transfusion", P, 0.85),
        PlantedEffect::new("Respiratory failure; insufficiency; arrest", "intubation", P, 0.8),
        PlantedEffect::new("Diabetes mellitus with complications", "insulin", M, 0.7),
        PlantedEffect::new("Other lower respiratory disease", "albuterol", M, 0.85),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub planted: Vec<PlantedEffect>,
    /// Chance that a present disease receives one of its planted treatments.
    pub treat_prob: f64,
    /// Resolution rate without an effective planted treatment: acute, chronic, mixed.
    pub baseline_resolve: [f64; 3],
    /// Initial prevalence per phenotype: acute, chronic, mixed.
    pub prevalence: [f64; 3],
    /// Per-visit onset rate for absent phenotypes: acute, chronic, mixed.
    pub onset: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_patients: 500,
            min_visits: 2,
            max_visits: 5,
            planted: default_planted_effects(),
            treat_prob: 0.5,
            baseline_resolve: [0.1, 0.05, 0.2],
            prevalence: [0.2, 0.1, 0.08],
            onset: [0.06, 0.008, 0.012],
        }
    }
}

fn by_kind(values: &[f64; 3], kind: PhenotypeKind) -> f64 {
    match kind {
        PhenotypeKind::Acute => values[0],
        PhenotypeKind::Chronic => values[1],
        PhenotypeKind::Mixed => values[2],
    }
}

impl SynthConfig {
    pub fn validate(&self, registry: &PhenotypeRegistry) -> Result<()> {
        let probs = self
            .planted
            .iter()
            .map(|p| ("planted resolve_prob", p.resolve_prob))
            .chain([("treat_prob", self.treat_prob)])
            .chain(self.baseline_resolve.iter().map(|&p| ("baseline_resolve", p)))
            .chain(self.prevalence.iter().map(|&p| ("prevalence", p)))
            .chain(self.onset.iter().map(|&p| ("onset", p)));
        for (what, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(EhrError::Config(format!("{what} {p} outside [0,1]")));
            }
        }
        if self.min_visits == 0 || self.min_visits > self.max_visits {
            return Err(EhrError::Config(format!(
                "visit range {}..={} is empty or starts at 0",
                self.min_visits, self.max_visits
            )));
        }
        for p in &self.planted {
            if !registry.contains(&p.disease) {
                return Err(EhrError::Config(format!(
                    "planted disease `{}` is not a registry phenotype",
                    p.disease
                )));
            }
        }
        Ok(())
    }
}

pub fn generate_synthetic_cohort(config: &SynthConfig, registry: &PhenotypeRegistry) -> Result<Vec<VisitRecord>> {
    config.validate(registry)?;
    let mut rng = rng::seeded(config.seed, stream::COHORT);
    let n_dis = registry.len();
    let planted_for: Vec<Vec<&PlantedEffect>> = (0..n_dis)
        .map(|i| {
            config
                .planted
                .iter()
                .filter(|p| p.disease == registry.name(i))
                .collect()
        })
        .collect();

    let width = config.n_patients.max(1).to_string().len().max(5);
    let mut records = Vec::new();
    for patient in 0..config.n_patients {
        let id = format!("P{patient:0width$}");
        let visits = rng.random_range(config.min_visits..=config.max_visits);
        let mut time: i64 = rng.random_range(0..1000);
        let mut current: BTreeSet<usize> = (0..n_dis)
            .filter(|&d| rng.random_bool(by_kind(&config.prevalence, registry.kind(d))))
            .collect();
        if current.is_empty() {
            current.insert(rng.random_range(0..n_dis));
        }
        for _ in 0..visits {
            let mut meds = BTreeSet::new();
            let mut procs = BTreeSet::new();
            for &d in &current {
                let options = &planted_for[d];
                if !options.is_empty() && rng.random_bool(config.treat_prob) {
                    let effect = options[rng.random_range(0..options.len())];
                    match effect.kind {
                        TreatmentKind::Medication => meds.insert(effect.treatment.clone()),
                        TreatmentKind::Procedure => procs.insert(effect.treatment.clone()),
                    };
                }
            }
            if rng.random_bool(0.5) {
                meds.insert(MEDICATIONS[rng.random_range(0..MEDICATIONS.len())].to_string());
            }
            if rng.random_bool(0.2) {
                procs.insert(PROCEDURES[rng.random_range(0..PROCEDURES.len())].to_string());
            }
            records.push(VisitRecord {
                patient_id: id.clone(),
                visit_time: time,
                diagnoses: current.iter().map(|&d| registry.name(d).to_string()).collect(),
                medications: meds.clone(),
                procedures: procs.clone(),
            });

            // a planted treatment counts whenever its code was given, even
            // if it was given for another disease
            let mut next = BTreeSet::new();
            #[allow(clippy::needless_range_loop)]
            for d in 0..n_dis {
                if current.contains(&d) {
                    let mut p = by_kind(&config.baseline_resolve, registry.kind(d));
                    let effective = planted_for[d].iter().filter(|e| match e.kind {
                        TreatmentKind::Medication => meds.contains(&e.treatment),
                        TreatmentKind::Procedure => procs.contains(&e.treatment),
                    });
                    if let Some(best) = effective.map(|e| e.resolve_prob).reduce(f64::max) {
                        p = best;
                    }
                    if !rng.random_bool(p) {
                        next.insert(d);
                    }
                } else if rng.random_bool(by_kind(&config.onset, registry.kind(d))) {
                    next.insert(d);
                }
            }
            if next.is_empty() {
                next.insert(rng.random_range(0..n_dis));
            }
            current = next;
            time += rng.random_range(1..=180);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{build_visit_pairs, rank_efficacy, top_k_treatments, write_records, EfficacyParams};

    #[test]
    fn zero_patients_is_empty() {
        let cfg = SynthConfig {
            n_patients: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic_cohort(&cfg, &PhenotypeRegistry::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.planted[0].resolve_prob = 1.2;
        assert!(matches!(
            generate_synthetic_cohort(&cfg, &PhenotypeRegistry::default()),
            Err(EhrError::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            n_patients: 50,
            ..SynthConfig::default()
        };
        let reg = PhenotypeRegistry::default();
        let dump = |recs: &[VisitRecord]| {
            let mut buf = Vec::new();
            write_records(&mut buf, recs).unwrap();
            buf
        };
        let a = dump(&generate_synthetic_cohort(&cfg, &reg).unwrap());
        let b = dump(&generate_synthetic_cohort(&cfg, &reg).unwrap());
        assert_eq!(a, b);
        let other = SynthConfig { seed: 43, ..cfg };
        assert_ne!(a, dump(&generate_synthetic_cohort(&other, &reg).unwrap()));
    }

    #[test]
    fn visit_counts_respect_range() {
        let cfg = SynthConfig {
            n_patients: 10,
            min_visits: 2,
            max_visits: 4,
            ..SynthConfig::default()
        };
        let recs = generate_synthetic_cohort(&cfg, &PhenotypeRegistry::default()).unwrap();
        assert!((20..=40).contains(&recs.len()));
    }

    #[test]
    fn planted_gap_is_recovered() {
        use TreatmentKind::Medication as M;
        let cfg = SynthConfig {
            n_patients: 500,
            planted: vec![
                PlantedEffect::new("Pneumonia", "ceftriaxone", M, 0.9),
                PlantedEffect::new("Pneumonia", "prednisone", M, 0.1),
            ],
            ..SynthConfig::default()
        };
        let recs = generate_synthetic_cohort(&cfg, &PhenotypeRegistry::default()).unwrap();
        let table = rank_efficacy(&build_visit_pairs(&recs), EfficacyParams::default());
        let s = |t: &str| table.get("Pneumonia", t, M).unwrap().score(&table.params);
        assert!(s("ceftriaxone") > s("prednisone"));
        assert_eq!(top_k_treatments(&table, "Pneumonia", 1)[0].treatment, "ceftriaxone");
    }
}
