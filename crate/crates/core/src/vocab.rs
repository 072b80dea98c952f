//! Integer-coded word inventory with reserved control tokens.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

pub const BOS_WORD: &str = "<bos>";
pub const EOS_WORD: &str = "<eos>";
pub const UNK_WORD: &str = "<unk>";

/// Word inventory. Ids 0/1/2 are always BOS/EOS/UNK; the remaining words are
/// ordered by descending training count (ties by word) so the mapping is a
/// pure function of the counted corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from word counts, mapping words seen fewer than `min_count`
    /// times to UNK (they are dropped from the inventory).
    pub fn from_counts(counts: &BTreeMap<String, u64>, min_count: u64) -> Vocab {
        let mut kept: Vec<(&String, u64)> =
            counts.iter().filter(|(_, &c)| c >= min_count).map(|(w, &c)| (w, c)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut words = vec![BOS_WORD.to_string(), EOS_WORD.to_string(), UNK_WORD.to_string()];
        let mut wcounts = vec![0u64, 0, 0];
        for (w, c) in kept {
            if matches!(w.as_str(), BOS_WORD | EOS_WORD | UNK_WORD) {
                continue;
            }
            words.push(w.clone());
            wcounts.push(c);
        }
        let mut v = Vocab { words, counts: wcounts, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index =
            self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of a word, UNK if it is not in the inventory.
    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts[id as usize]
    }

    pub fn encode(&self, words: &[String]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Space-joined words for a token sequence, control tokens included.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.word(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("vocab encode: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut v: Vocab =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("vocab decode: {e}")))?;
        v.rebuild_index();
        Ok(v)
    }
}
