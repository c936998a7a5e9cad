use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use super::{ModelError, Result};
use crate::ehr::PhenotypeRegistry;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Lowercased alphanumeric runs. Everything else separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Word-level vocabulary. Ids are dense; the three specials come first and
/// fitted words follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one text, padded or truncated to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

impl Vocabulary {
    /// Every word of `corpus` plus every word of the registry names.
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a str>, registry: &PhenotypeRegistry) -> Self {
        let mut seen = BTreeSet::new();
        for text in corpus {
            seen.extend(words(text));
        }
        for name in registry.names() {
            seen.extend(words(name));
        }
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).chain(seen)).expect("fitted words are unique")
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(ModelError::Vocab(format!("the first tokens must be {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::Vocab(format!("duplicate token `{t}` at line {}", i + 1)));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] w1 w2 ...` truncated to `max_seq_len`, then right-padded.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Encoded {
        let mut ids = Vec::with_capacity(max_seq_len);
        ids.push(CLS);
        ids.extend(words(text).map(|w| self.id(&w)));
        ids.truncate(max_seq_len);
        let real = ids.len();
        ids.resize(max_seq_len, PAD);
        let mask = (0..max_seq_len).map(|i| i < real).collect();
        Encoded { ids, mask }
    }

    /// Distinct token ids of each phenotype name, in registry order.
    pub fn label_token_ids(&self, registry: &PhenotypeRegistry) -> Result<Vec<Vec<usize>>> {
        registry
            .names()
            .map(|name| {
                let ids: BTreeSet<usize> = words(name).map(|w| self.id(&w)).filter(|&id| id != UNK).collect();
                if ids.is_empty() {
                    Err(ModelError::Vocab(format!("label `{name}` has no known token")))
                } else {
                    Ok(ids.into_iter().collect())
                }
            })
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(lines)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::fit(
            ["Pneumonia treated with ceftriaxone (0.75)."],
            &PhenotypeRegistry::default(),
        )
    }

    #[test]
    fn empty_text_is_cls_then_pad() {
        let e = vocab().tokenize("", 4);
        assert_eq!(e.ids, vec![CLS, PAD, PAD, PAD]);
        assert_eq!(e.mask, vec![true, false, false, false]);
    }

    #[test]
    fn punctuation_splits_and_case_folds() {
        let v = vocab();
        let e = v.tokenize("PNEUMONIA, ceftriaxone; 0.75 zzz", 8);
        let words: Vec<&str> = e.ids[1..e.real_len()].iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(words, ["pneumonia", "ceftriaxone", "0", "75", "[UNK]"]);
    }

    #[test]
    fn truncation_keeps_cls() {
        let e = vocab().tokenize("a b c d e f", 3);
        assert_eq!(e.ids.len(), 3);
        assert_eq!(e.ids[0], CLS);
        assert!(e.mask.iter().all(|m| *m));
    }

    #[test]
    fn every_label_has_tokens() {
        let ids = vocab().label_token_ids(&PhenotypeRegistry::default()).unwrap();
        assert_eq!(ids.len(), 25);
        assert!(ids.iter().all(|s| !s.is_empty() && !s.contains(&UNK)));
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(&buf[..]).unwrap(), v);
        assert!(Vocabulary::read(&b"[PAD]\n[UNK]\n[CLS]\nx\nx\n"[..]).is_err());
        assert!(Vocabulary::read(&b"x\n"[..]).is_err());
    }
}
