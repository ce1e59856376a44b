// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use crate::error::{LabError, Result};

/// Character vocabulary, ids assigned in codepoint order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Self { chars }
    }

    pub fn from_strings(tokens: &[String]) -> Result<Self> {
        let chars = tokens
            .iter()
            .map(|t| {
                let mut it = t.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(LabError::Checkpoint(format!("vocabulary entry {t:?} is not one character"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { chars })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c).ok_or_else(|| {
                    LabError::InvalidArgument(format!("character {c:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }

    pub fn token_string(&self, id: usize) -> Option<String> {
        self.chars.get(id).map(|c| c.to_string())
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.chars.iter().map(|c| c.to_string()).collect()
    }
}

/// Tokenized text with a train/validation boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub ids: Vec<usize>,
    pub vocab: Vocab,
    /// First validation token; `ids[..split]` is the training split.
    pub split: usize,
}

impl Corpus {
    pub fn from_text(text: &str, val_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(LabError::InvalidArgument("corpus text is empty".into()));
        }
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(LabError::Config(format!(
                "validation fraction {val_fraction} must lie in (0, 1)"
            )));
        }
        let vocab = Vocab::from_text(text);
        let ids = vocab.encode(text)?;
        let n = ids.len();
        let split = ((1.0 - val_fraction) * n as f64).round() as usize;
        Ok(Self { ids, vocab, split })
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn val_ids(&self) -> &[usize] {
        &self.ids[self.split..]
    }
}

/// Reads a UTF-8 text file into a character-level corpus.
pub fn ingest_text(path: impl AsRef<Path>, val_fraction: f64) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    Corpus::from_text(&text, val_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_codepoint_vocabulary() {
        let c = Corpus::from_text("aba", 0.5).unwrap();
        assert_eq!(c.vocab.to_strings(), vec!["a", "b"]);
        assert_eq!(c.ids, vec![0, 1, 0]);
    }

    #[test]
    fn split_boundary() {
        let text: String = (0..100).map(|i| if i % 3 == 0 { 'x' } else { 'y' }).collect();
        let c = Corpus::from_text(&text, 0.5).unwrap();
        assert_eq!(c.split, 50);
        assert_eq!(c.train_ids().len() + c.val_ids().len(), 100);
    }

    #[test]
    fn ingest_is_deterministic_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        std::fs::write(&p, "hello world\n").unwrap();
        assert_eq!(ingest_text(&p, 0.1).unwrap(), ingest_text(&p, 0.1).unwrap());
        std::fs::write(&p, "").unwrap();
        assert!(ingest_text(&p, 0.1).is_err());
        assert!(ingest_text(dir.path().join("missing"), 0.1).is_err());
    }

    #[test]
    fn encode_rejects_unknown_characters() {
        let v = Vocab::from_text("abc");
        assert_eq!(v.encode("cab").unwrap(), vec![2, 0, 1]);
        assert!(v.encode("abz").is_err());
        assert_eq!(Vocab::from_strings(&v.to_strings()).unwrap(), v);
    }
}
