use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::{EhrError, Result};

pub const NUM_PHENOTYPES: usize = 25;

const DEFAULT_REGISTRY: &str = include_str!("../../assets/phenotypes.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhenotypeKind {
    Acute,
    Chronic,
    Mixed,
}

impl FromStr for PhenotypeKind {
    type Err = EhrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "acute" => Ok(Self::Acute),
            "chronic" => Ok(Self::Chronic),
            "mixed" => Ok(Self::Mixed),
            other => Err(EhrError::Registry(format!("unknown phenotype type `{other}`"))),
        }
    }
}

impl fmt::Display for PhenotypeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Acute => "acute",
            Self::Chronic => "chronic",
            Self::Mixed => "mixed",
        })
    }
}

/// The fixed, ordered set of 25 prediction targets. Label index equals
/// registry index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhenotypeRegistry {
    entries: Vec<(String, PhenotypeKind)>,
}

impl PhenotypeRegistry {
    pub fn from_entries(entries: Vec<(String, PhenotypeKind)>) -> Result<Self> {
        if entries.len() != NUM_PHENOTYPES {
            return Err(EhrError::Registry(format!(
                "expected {NUM_PHENOTYPES} phenotypes, found {}",
                entries.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            if name.is_empty() || name.contains('|') {
                return Err(EhrError::Registry(format!("invalid phenotype name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(EhrError::Registry(format!("duplicate phenotype `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    /// Parses the `name<TAB>type` format, one phenotype per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, kind) = line
                .split_once('\t')
                .ok_or_else(|| EhrError::Registry(format!("line {}: expected name<TAB>type", i + 1)))?;
            entries.push((name.trim().to_string(), kind.parse()?));
        }
        Self::from_entries(entries)
    }

    pub fn to_tsv(&self) -> String {
        self.entries.iter().map(|(n, k)| format!("{n}\t{k}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn kind(&self, i: usize) -> PhenotypeKind {
        self.entries[i].1
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }
}

impl Default for PhenotypeRegistry {
    fn default() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("bundled registry is valid")
    }
}

/// Multi-hot vector: entry `i` is 1 iff `registry.name(i)` is among `diagnoses`.
pub fn phenotype_labels<'a, I>(diagnoses: I, registry: &PhenotypeRegistry) -> Vec<u8>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = vec![0u8; registry.len()];
    for d in diagnoses {
        if let Some(i) = registry.index_of(d) {
            out[i] = 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_registry_has_25_tagged_entries() {
        let r = PhenotypeRegistry::default();
        assert_eq!(r.len(), 25);
        assert_eq!(r.name(0), "Acute and unspecified renal failure");
        assert_eq!(r.kind(3), PhenotypeKind::Mixed);
        assert_eq!(r.name(24), "Shock");
        assert_eq!(PhenotypeRegistry::parse(&r.to_tsv()).unwrap(), r);
    }

    #[test]
    fn empty_and_full_sets() {
        let r = PhenotypeRegistry::default();
        assert_eq!(phenotype_labels(std::iter::empty(), &r), vec![0; 25]);
        assert_eq!(phenotype_labels(r.names(), &r), vec![1; 25]);
    }

    #[test]
    fn pneumonia_and_shock_positions() {
        // row order of the phenotype table: Pneumonia is 22nd, Shock 25th
        let r = PhenotypeRegistry::default();
        let y = phenotype_labels(["Pneumonia", "Shock"], &r);
        let ones: Vec<usize> = y.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![21, 24]);
    }

    #[test]
    fn rejects_wrong_size_and_duplicates() {
        assert!(PhenotypeRegistry::parse("A\tacute\n").is_err());
        let mut text = PhenotypeRegistry::default().to_tsv();
        text = text.replace("Shock", "Pneumonia");
        assert!(PhenotypeRegistry::parse(&text).is_err());
    }

    proptest! {
        #[test]
        fn labels_ignore_order_and_duplicates(picks in prop::collection::vec(0usize..25, 0..40)) {
            let r = PhenotypeRegistry::default();
            let names: Vec<&str> = picks.iter().map(|&i| r.name(i)).collect();
            let mut reversed = names.clone();
            reversed.reverse();
            let doubled: Vec<&str> = names.iter().chain(names.iter()).copied().collect();
            let base = phenotype_labels(names.iter().copied(), &r);
            prop_assert_eq!(&base, &phenotype_labels(reversed, &r));
            prop_assert_eq!(&base, &phenotype_labels(doubled, &r));
        }
    }
}
