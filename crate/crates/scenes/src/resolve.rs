//! Symbolic grounding: parses an utterance into attribute constraints and
//! filters the scene's actors. Serves as the accuracy ceiling.

use crate::vocab::Vocabulary;
use crate::{Carried, Color, Error, Motion, Range, Result, Scene, Side};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Constraints {
    pub color: Option<Color>,
    pub motion: Option<Motion>,
    pub side: Option<Side>,
    pub range: Option<Range>,
    pub carried: Option<Carried>,
}

impl Constraints {
    pub fn parse(tokens: &[u16], vocab: &Vocabulary) -> Result<Self> {
        let mut c = Constraints::default();
        for w in vocab.decode(tokens)? {
            let dup = |what: &str| Error::Invalid(format!("two {what} words in one utterance"));
            if let Some(v) = Color::from_word(w) {
                c.color.replace(v).map_or(Ok(()), |_| Err(dup("color")))?;
            } else if let Some(v) = Motion::from_word(w) {
                c.motion.replace(v).map_or(Ok(()), |_| Err(dup("motion")))?;
            } else if let Some(v) = Side::from_word(w) {
                c.side.replace(v).map_or(Ok(()), |_| Err(dup("side")))?;
            } else if let Some(v) = Range::from_word(w) {
                c.range.replace(v).map_or(Ok(()), |_| Err(dup("range")))?;
            } else if let Some(v) = Carried::from_word(w) {
                c.carried.replace(v).map_or(Ok(()), |_| Err(dup("object")))?;
            }
        }
        Ok(c)
    }

    pub fn count(&self) -> usize {
        [
            self.color.is_some(),
            self.motion.is_some(),
            self.side.is_some(),
            self.range.is_some(),
            self.carried.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

/// Ids of the actors satisfying every constraint in the scene's last frame.
pub fn resolve(scene: &Scene, c: &Constraints) -> Vec<u16> {
    let f = scene.current();
    scene
        .actors
        .iter()
        .filter(|a| {
            c.color.is_none_or(|v| a.color == v)
                && c.motion.is_none_or(|v| a.motion == v)
                && c.side.is_none_or(|v| a.side(f) == v)
                && c.range.is_none_or(|v| a.range(f) == v)
                && c.carried.is_none_or(|v| a.carried == v)
        })
        .map(|a| a.id)
        .collect()
}
