//! Word-level vocabulary over normalized (space-separated) text.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsg::{sentinel, MAX_SENTINELS};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const FIRST_SENTINEL: usize = 3;
/// PAD, EOS, UNK and the sentinels.
pub const NUM_SPECIALS: usize = FIRST_SENTINEL + MAX_SENTINELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then words by descending frequency, ties broken
    /// lexicographically. `max_size` caps the total including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: Option<usize>) -> Self {
        let mut words = vec!["<pad>".to_string(), "</s>".to_string(), "<unk>".to_string()];
        words.extend((0..MAX_SENTINELS).map(sentinel));
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let reserved: std::collections::HashSet<String> = words.iter().cloned().collect();
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !reserved.contains(*w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(words.len()));
        words.extend(ranked.into_iter().take(room).map(|(w, _)| w.to_string()));
        Vocab::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Token ids followed by EOS.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text.split_whitespace().map(|w| self.id(w)).collect();
        ids.push(EOS);
        ids
    }

    /// Joins words up to the first EOS, skipping PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The word list as a JSON array, index order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.words)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&text)?;
        if words.len() < NUM_SPECIALS || words[PAD] != "<pad>" || words[EOS] != "</s>" {
            return Err(Error::invalid(format!("{} is not a vocabulary file", path.display())));
        }
        Ok(Vocab::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_then_frequency_then_lexicographic() {
        let v = Vocab::build(["b a c", "a b", "a <extra_id_0>"], None);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(v.id("<extra_id_0>"), FIRST_SENTINEL);
        assert_eq!(v.id("a"), NUM_SPECIALS);
        assert_eq!(v.id("b"), NUM_SPECIALS + 1);
        assert_eq!(v.id("c"), NUM_SPECIALS + 2);
        assert_eq!(v.len(), NUM_SPECIALS + 3);
    }

    #[test]
    fn encode_decode_roundtrip_and_unknowns() {
        let v = Vocab::build(["the heart is normal"], Some(NUM_SPECIALS + 3));
        let ids = v.encode("the heart is big");
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), "<unk> heart is <unk>");
        assert_eq!(v.decode(&[v.id("is"), EOS, v.id("the")]), "is");
    }

    #[test]
    fn save_load_roundtrip() {
        let v = Vocab::build(["x y z"], None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
