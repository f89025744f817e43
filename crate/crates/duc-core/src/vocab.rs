//! Shared word-level tokenizer and vocabulary.
//!
//! One tokenizer is used by corpus construction, metrics, and the toy model
//! so that metric scores and model tokens never disagree: Unicode-whitespace
//! split, punctuation kept attached, case-preserving.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DucError, Result, TokenId, TokenSeq};

pub const UNK_TOKEN: &str = "<unk>";
pub const EOT_TOKEN: &str = "<eot>";

/// Split text on Unicode whitespace, case-preserving, punctuation attached.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_string()).collect()
}

/// Bijective token <-> id mapping with reserved `<unk>` and `<eot>` ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    unk_id: TokenId,
    eot_id: TokenId,
}

impl Vocabulary {
    /// Build a vocabulary from text fragments, assigning ids in first-seen
    /// order after the reserved tokens. Deterministic for a fixed input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut id_to_token = vec![UNK_TOKEN.to_string(), EOT_TOKEN.to_string()];
        let mut token_to_id: HashMap<String, TokenId> = HashMap::new();
        token_to_id.insert(UNK_TOKEN.to_string(), 0);
        token_to_id.insert(EOT_TOKEN.to_string(), 1);
        for text in texts {
            for tok in tokenize(text) {
                if !token_to_id.contains_key(&tok) {
                    let id = id_to_token.len() as TokenId;
                    token_to_id.insert(tok.clone(), id);
                    id_to_token.push(tok);
                }
            }
        }
        Vocabulary {
            token_to_id,
            id_to_token,
            unk_id: 0,
            eot_id: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn eot_id(&self) -> TokenId {
        self.eot_id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_err(&self, token: &str) -> Result<TokenId> {
        self.id(token).ok_or_else(|| DucError::OutOfVocab {
            token: token.to_string(),
        })
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or(UNK_TOKEN)
    }

    /// Encode text; unknown tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSeq {
        tokenize(text)
            .iter()
            .map(|t| self.token_to_id.get(t).copied().unwrap_or(self.unk_id))
            .collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> TokenSeq {
        tokens
            .iter()
            .map(|t| self.token_to_id.get(t).copied().unwrap_or(self.unk_id))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&SerialVocab {
            tokens: &self.id_to_token,
        })
        .expect("vocab serializes");
        std::fs::write(path, json).map_err(|e| DucError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DucError::io(path, e))?;
        let sv: OwnedSerialVocab = serde_json::from_str(&text).map_err(|e| DucError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        let mut token_to_id = HashMap::new();
        for (i, t) in sv.tokens.iter().enumerate() {
            token_to_id.insert(t.clone(), i as TokenId);
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: sv.tokens,
            unk_id: 0,
            eot_id: 1,
        })
    }
}

#[derive(Serialize)]
struct SerialVocab<'a> {
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct OwnedSerialVocab {
    tokens: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_encode_decode() {
        let v = Vocabulary::build(["the cat sat. the dog ran."]);
        let ids = v.encode("the cat sat.");
        assert_eq!(v.decode(&ids), vec!["the", "cat", "sat."]);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let v = Vocabulary::build(["a b"]);
        let ids = v.encode("a zzz b");
        assert_eq!(ids[1], v.unk_id());
    }

    #[test]
    fn ids_bijective_and_stable() {
        let v = Vocabulary::build(["x y z", "y x"]);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id)), Some(id));
        }
        // first-seen order after reserved tokens
        assert_eq!(v.token(2), "x");
        assert_eq!(v.token(3), "y");
        assert_eq!(v.token(4), "z");
    }

    #[test]
    fn tokenize_is_whitespace_split() {
        assert_eq!(tokenize("  Hi!\tbye?  "), vec!["Hi!", "bye?"]);
        assert!(tokenize("   ").is_empty());
    }
}
