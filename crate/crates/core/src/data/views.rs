//! The three competing serialisations of an object sequence: per-key value
//! sequences, one flattened stream, and per-step records.

use serde::{Deserialize, Serialize};

use super::object::ObjectSequence;
use super::vocab::{tokenize, CLS, KV_SEP, NONE, T_SEP, VAL_SEP};
use crate::error::{Error, Result};

/// Tokens of a value at one step; an absent key becomes `[NONE]`.
fn value_tokens(seq: &ObjectSequence, t: usize, key: &str) -> Vec<String> {
    match seq.value(t, key) {
        Some(v) => tokenize(v),
        None => vec![NONE.to_string()],
    }
}

/// `[CLS] key [VAL_SEP] v_1 [VAL_SEP] v_2 ...` for one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValueSequence {
    pub key: String,
    pub tokens: Vec<String>,
    /// Number of leading tokens before the first `[VAL_SEP]` (`[CLS]` plus key tokens).
    pub header_len: usize,
}

impl ValueSequence {
    /// Positions holding value tokens (including `[NONE]` fill).
    pub fn value_positions(&self) -> Vec<usize> {
        (self.header_len..self.tokens.len())
            .filter(|&i| self.tokens[i] != VAL_SEP)
            .collect()
    }
}

pub fn build_value_sequence(seq: &ObjectSequence, key: &str) -> Result<ValueSequence> {
    if !seq.objects.iter().any(|o| o.pairs.contains_key(key)) {
        return Err(Error::Key(key.to_string()));
    }
    let mut tokens = vec![CLS.to_string()];
    tokens.extend(tokenize(key));
    let header_len = tokens.len();
    for t in 0..seq.len() {
        tokens.push(VAL_SEP.to_string());
        tokens.extend(value_tokens(seq, t, key));
    }
    Ok(ValueSequence {
        key: key.to_string(),
        tokens,
        header_len,
    })
}

/// Every key's value sequence, keys in first-seen order.
pub fn build_key_centric_view(seq: &ObjectSequence) -> Vec<ValueSequence> {
    seq.key_universe()
        .iter()
        .map(|k| build_value_sequence(seq, k).expect("key from the universe"))
        .collect()
}

/// Tokens of one `key [KV_SEP] value` pair.
fn pair_tokens(seq: &ObjectSequence, t: usize, key: &str) -> Vec<String> {
    let mut out = tokenize(key);
    out.push(KV_SEP.to_string());
    out.extend(value_tokens(seq, t, key));
    out
}

/// A flattened stream plus how much of the sequence survived truncation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenedView {
    pub tokens: Vec<String>,
    pub steps_total: usize,
    pub steps_kept: usize,
    /// Token count before truncation.
    pub untruncated_len: usize,
}

impl FlattenedView {
    pub fn fraction_kept(&self) -> f64 {
        self.steps_kept as f64 / self.steps_total as f64
    }
}

/// Minimum admissible token cap for the flattened view.
pub const MIN_FLATTENED_TOKENS: usize = 16;

/// `[CLS]` then per step `[T_SEP]` and every pair of the key universe.
/// When over `max_tokens`, whole oldest steps are dropped first; if even the
/// newest step alone does not fit, its tail is cut.
pub fn build_flattened_view(seq: &ObjectSequence, max_tokens: usize) -> Result<FlattenedView> {
    if max_tokens < MIN_FLATTENED_TOKENS {
        return Err(Error::Config(format!(
            "flattened view needs max_tokens >= {MIN_FLATTENED_TOKENS}, got {max_tokens}"
        )));
    }
    let keys = seq.key_universe();
    let steps: Vec<Vec<String>> = (0..seq.len())
        .map(|t| {
            let mut s = vec![T_SEP.to_string()];
            for k in &keys {
                s.extend(pair_tokens(seq, t, k));
            }
            s
        })
        .collect();
    let untruncated_len = 1 + steps.iter().map(Vec::len).sum::<usize>();
    let mut budget = max_tokens - 1;
    let mut first = steps.len();
    while first > 0 && steps[first - 1].len() <= budget {
        budget -= steps[first - 1].len();
        first -= 1;
    }
    let mut tokens = vec![CLS.to_string()];
    let steps_kept;
    if first == steps.len() && !steps.is_empty() {
        // The newest step alone overflows; keep its prefix.
        tokens.extend(steps[steps.len() - 1].iter().take(max_tokens - 1).cloned());
        steps_kept = 1;
    } else {
        for s in &steps[first..] {
            tokens.extend(s.iter().cloned());
        }
        steps_kept = steps.len() - first;
    }
    Ok(FlattenedView {
        tokens,
        steps_total: seq.len(),
        steps_kept,
        untruncated_len,
    })
}

/// Per step, per key of the universe, the tokens `key [KV_SEP] value`.
pub fn build_record_view(seq: &ObjectSequence) -> Vec<Vec<Vec<String>>> {
    let keys = seq.key_universe();
    (0..seq.len())
        .map(|t| keys.iter().map(|k| pair_tokens(seq, t, k)).collect())
        .collect()
}
