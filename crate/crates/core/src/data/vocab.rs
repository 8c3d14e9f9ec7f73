//! Word-level tokenizer and vocabulary with reserved special tokens.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::object::ObjectSequence;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const VAL_SEP: &str = "[VAL_SEP]";
pub const MASK: &str = "[MASK]";
pub const NONE: &str = "[NONE]";
pub const T_SEP: &str = "[T_SEP]";
pub const KV_SEP: &str = "[KV_SEP]";
pub const UNK: &str = "[UNK]";

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const VAL_SEP_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NONE_ID: usize = 4;
pub const T_SEP_ID: usize = 5;
pub const KV_SEP_ID: usize = 6;
pub const UNK_ID: usize = 7;

/// Reserved tokens in id order; `[UNK]` follows at id 7.
pub const SPECIALS: [&str; 7] = [PAD, CLS, VAL_SEP, MASK, NONE, T_SEP, KV_SEP];

/// True for the bracketed marker strings the view builders emit.
pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token) || token == UNK
}

/// Splits on whitespace, then separates every ASCII or Unicode punctuation
/// character into its own token. Marker strings such as `[CLS]` therefore
/// never come out of raw text in one piece.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    min_freq: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `texts`; tokens seen at least `min_freq` times get
    /// ids after the reserved block, ordered by frequency then token.
    pub fn build<'a, I>(texts: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for text in texts {
            any = true;
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.push(UNK.to_string());
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens, min_freq))
    }

    /// Vocabulary over every key and value string of a corpus.
    pub fn from_corpus(seqs: &[ObjectSequence], min_freq: usize) -> Result<Self> {
        Self::build(
            seqs.iter().flat_map(|s| {
                s.objects
                    .iter()
                    .flat_map(|o| o.pairs.iter().flat_map(|(k, v)| [k.as_str(), v.as_str()]))
            }),
            min_freq,
        )
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            min_freq,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Id of an already-split token; unknown tokens map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokenizes raw text and maps it to ids.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Maps view tokens (markers included) to ids.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if v.tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::format(None, format!("vocabulary id {i} must be {s}")));
            }
        }
        Ok(Self::from_tokens(v.tokens, v.min_freq))
    }
}
