//! Caption tokenization and the id↔word vocabulary.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::collections::HashMap;

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const PAD_TOKEN: &str = "<PAD>";
pub const SOS_TOKEN: &str = "<SOS>";
pub const EOS_TOKEN: &str = "<EOS>";
pub const UNK_TOKEN: &str = "<UNK>";

const RESERVED: [&str; 4] = [PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(caption: &str) -> Result<Vec<String>> {
    let cleaned: String = caption
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::InvalidInput(format!(
            "caption {caption:?} is empty after tokenization"
        )));
    }
    Ok(tokens)
}

// Punctuation here means anything that is neither alphanumeric nor
// whitespace; for caption text this coincides with the Unicode punctuation
// categories plus stray symbols.
fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Word↔id maps with the reserved ids 0..=3 fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from every unique token of the base-split captions
    /// (frequency threshold 1), reserved ids first, then sorted order.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut unique = BTreeSet::new();
        let mut any = false;
        for caption in captions {
            any = true;
            for tok in tokenize(caption)? {
                unique.insert(tok);
            }
        }
        if !any {
            return Err(Error::InvalidInput("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(unique);
        Ok(Self::from_words(words))
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Rebuild from a stored word list (checkpoint loading). The list must
    /// begin with the four reserved tokens.
    pub fn from_stored_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len()
            || words[..RESERVED.len()] != RESERVED.map(str::to_string)
        {
            return Err(Error::InvalidInput(
                "stored vocabulary does not start with the reserved tokens".into(),
            ));
        }
        Ok(Self::from_words(words))
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a word; unknown words map to `<UNK>`.
    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word_of(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Tokenize and encode a caption, wrapping it in `<SOS>`/`<EOS>`.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        let mut ids = vec![SOS_ID];
        for tok in tokenize(caption)? {
            ids.push(self.id_of(&tok));
        }
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Render token ids as text, dropping the structural markers
    /// (`<PAD>`, `<SOS>`, `<EOS>`); `<UNK>` prints as itself.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD_ID && id != SOS_ID && id != EOS_ID)
            .map(|&id| self.word_of(id))
            .collect();
        words.join(" ")
    }
}
