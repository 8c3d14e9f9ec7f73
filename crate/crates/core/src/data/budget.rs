//! Token-budget accounting for the three views.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::object::ObjectSequence;
use super::views::{build_key_centric_view, build_record_view};
use super::vocab::{is_special, tokenize};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum View {
    Flattened,
    /// Longest value sequence of the object sequence.
    KeyCentric,
    /// Number of time steps.
    RecordCentric,
}

impl FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flattened" => Ok(View::Flattened),
            "key-centric" | "key_centric" => Ok(View::KeyCentric),
            "record-centric" | "record_centric" => Ok(View::RecordCentric),
            other => Err(Error::Config(format!(
                "unknown view `{other}` (expected flattened, key-centric or record-centric)"
            ))),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Flattened => "flattened",
            View::KeyCentric => "key-centric",
            View::RecordCentric => "record-centric",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub view: View,
    pub cap: usize,
    pub counts: Vec<usize>,
    pub median: f64,
    pub max: usize,
    pub p95: f64,
    pub over_cap_fraction: f64,
    /// Value words across the corpus, `[NONE]` fill excluded.
    pub value_words: usize,
}

/// Untruncated flattened length: `1 + Σ_steps (1 + Σ_pairs (|k| + 1 + |v|))`.
pub fn flattened_len(seq: &ObjectSequence) -> usize {
    let keys = seq.key_universe();
    let key_len: usize = keys.iter().map(|k| tokenize(k).len() + 1).sum();
    1 + (0..seq.len())
        .map(|t| {
            1 + key_len
                + keys
                    .iter()
                    .map(|k| seq.value(t, k).map_or(1, |v| tokenize(v).len()))
                    .sum::<usize>()
        })
        .sum::<usize>()
}

/// Length of the longest encoder input the view produces: the whole stream
/// (flattened), the longest per-key value sequence (key-centric), or the
/// step count seen by the inter-object encoder (record-centric).
pub fn token_count(seq: &ObjectSequence, view: View) -> usize {
    match view {
        View::Flattened => flattened_len(seq),
        View::KeyCentric => build_key_centric_view(seq)
            .iter()
            .map(|v| v.tokens.len())
            .max()
            .unwrap_or(0),
        View::RecordCentric => build_record_view(seq).len(),
    }
}

pub fn value_words(seq: &ObjectSequence) -> usize {
    seq.objects
        .iter()
        .flat_map(|o| o.pairs.values())
        .map(|v| tokenize(v).iter().filter(|t| !is_special(t)).count())
        .sum()
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac
}

pub fn budget_report(corpus: &[ObjectSequence], view: View, cap: usize) -> BudgetReport {
    let counts: Vec<usize> = corpus.iter().map(|s| token_count(s, view)).collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let over = counts.iter().filter(|&&c| c > cap).count();
    BudgetReport {
        view,
        cap,
        median: quantile(&sorted, 0.5),
        max: sorted.last().copied().unwrap_or(0),
        p95: quantile(&sorted, 0.95),
        over_cap_fraction: if counts.is_empty() {
            0.0
        } else {
            over as f64 / counts.len() as f64
        },
        value_words: corpus.iter().map(value_words).sum(),
        counts,
    }
}
