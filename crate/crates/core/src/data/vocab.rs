use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_ID: u32 = 4;
pub const BOS_ID: u32 = 5;
pub const EOS_ID: u32 = 6;
pub const NUM_RESERVED: u32 = 7;

pub const RESERVED_TOKENS: [&str; 7] = [
    "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]", "[BOS]", "[EOS]",
];

/// Word-level token↔id bijection. Reserved tokens hold the fixed low ids;
/// corpus tokens follow, sorted by (descending count, lexicographic), so the
/// build is deterministic for a given corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from token counts. Tokens under `min_count` are dropped (they
    /// map to `[UNK]` at encode time). Errors if nothing survives.
    pub fn from_counts(counts: &HashMap<String, u64>, min_count: u64) -> Result<Self> {
        let mut kept: Vec<(&String, u64)> = counts
            .iter()
            .filter(|(tok, &c)| c >= min_count && !RESERVED_TOKENS.contains(&tok.as_str()))
            .map(|(tok, &c)| (tok, c))
            .collect();
        if kept.is_empty() {
            return Err(Error::Data(
                "empty corpus: no tokens at or above min_count".into(),
            ));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(tok, _)| tok.clone()));
        Ok(Self::from_token_list(tokens))
    }

    /// Count whitespace tokens over any number of texts and build.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: u64) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        Self::from_counts(&counts, min_count)
    }

    fn from_token_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token; unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: u32) -> bool {
        id < NUM_RESERVED
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// FNV-1a over the token list; used to report vocabulary mismatches.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for b in tok.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            format_version: 1,
            tokens: self.tokens.clone(),
        };
        let body = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Data(format!("vocabulary serialization: {e}")))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("vocabulary file {}: {e}", path.display())))?;
        Self::from_saved_tokens(file.tokens)
    }

    /// Rebuild from a persisted token list (file or checkpoint).
    pub fn from_saved_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED as usize
            || tokens[..NUM_RESERVED as usize]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Vocab(
                "persisted vocabulary does not start with the reserved tokens".into(),
            ));
        }
        Ok(Self::from_token_list(tokens))
    }
}
