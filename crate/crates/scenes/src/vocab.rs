//! Closed word list shared by the generator, the resolver and the text encoder.

use std::collections::HashMap;
use std::path::Path;

use crate::{Carried, Color, Error, Motion, Range, Result, Side};

/// Appended to every utterance; unmatched queries are pulled towards it.
pub const NOT_MENTIONED: &str = "<not-mentioned>";

pub const NOUNS: [&str; 4] = ["person", "man", "woman", "pedestrian"];

const FUNCTION_WORDS: [&str; 13] = [
    "the", "in", "wearing", "who", "that", "is", "on", "side", "sensor", "from", "with", "a", "carrying",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u16>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("bad word {w:?} at line {}", i + 1)));
            }
            if index.insert(w.clone(), i as u16).is_some() {
                return Err(Error::Vocabulary(format!("duplicate word {w:?}")));
            }
        }
        if words.len() > u16::MAX as usize {
            return Err(Error::Vocabulary("too many words".into()));
        }
        Ok(Self { words, index })
    }

    /// Every word the templates can emit; the terminal token is last.
    pub fn standard() -> Self {
        let mut w: Vec<String> = FUNCTION_WORDS.iter().map(|s| s.to_string()).collect();
        w.extend(NOUNS.iter().map(|s| s.to_string()));
        w.extend(Color::ALL.iter().map(|c| c.word().to_string()));
        w.extend(Motion::ALL.iter().map(|m| m.word().to_string()));
        w.extend(Carried::ALL[1..].iter().map(|c| c.word().to_string()));
        w.extend(Side::ALL.iter().map(|s| s.word().to_string()));
        w.extend(Range::ALL.iter().map(|s| s.word().to_string()));
        w.push(NOT_MENTIONED.into());
        Self::new(w).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u16> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u16) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<u16>> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::Vocabulary(format!("unknown word {w:?}"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u16]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&i| self.word(i).ok_or_else(|| Error::Vocabulary(format!("unknown id {i}"))))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}
