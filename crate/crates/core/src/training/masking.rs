//! Masked-token corruption restricted to value positions.

use rand::Rng;

use crate::data::vocab::{Vocabulary, MASK_ID};
use crate::data::ValueSequence;
use crate::error::{Error, Result};

/// A value sequence mapped to ids, with the positions eligible for masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedValueSequence {
    pub key: String,
    pub ids: Vec<usize>,
    pub value_positions: Vec<usize>,
}

impl EncodedValueSequence {
    pub fn new(vs: &ValueSequence, vocab: &Vocabulary) -> Self {
        EncodedValueSequence {
            key: vs.key.clone(),
            ids: vocab.encode(&vs.tokens),
            value_positions: vs.value_positions(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmBatch {
    pub input: Vec<usize>,
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
}

/// Selects each value position independently with probability `rate` and
/// replaces it by `[MASK]`. When nothing is selected one value position is
/// drawn uniformly so every sequence yields a target.
pub fn mlm_mask<R: Rng + ?Sized>(
    vs: &EncodedValueSequence,
    rate: f64,
    rng: &mut R,
) -> Result<MlmBatch> {
    if vs.value_positions.is_empty() {
        return Err(Error::Contract(format!(
            "value sequence for `{}` has no value tokens to mask",
            vs.key
        )));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate must be in [0,1], got {rate}")));
    }
    let mut positions: Vec<usize> = vs
        .value_positions
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(vs.value_positions[rng.gen_range(0..vs.value_positions.len())]);
    }
    let mut input = vs.ids.clone();
    let targets = positions.iter().map(|&p| vs.ids[p]).collect();
    for &p in &positions {
        input[p] = MASK_ID;
    }
    Ok(MlmBatch {
        input,
        positions,
        targets,
    })
}
