//! Synthetic classification tasks with known structure.
//!
//! In the needle task one key's value stream carries a class motif at one
//! random step and everything else is noise, so the signal is local to one
//! key but may sit anywhere in time. In the cross-key task the label says
//! whether two keys ever agree at the same step, a pattern that no single
//! key's stream reveals on its own.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::object::{ObjectSequence, StructuredObject};
use crate::error::{Error, Result};
use crate::rng::stream;

pub fn key_name(i: usize) -> String {
    format!("field_{i}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeedleConfig {
    pub keys: usize,
    pub steps: usize,
    pub words_per_value: usize,
    pub classes: usize,
    pub samples: usize,
    pub seed: u64,
    /// Index of the key that carries the motif.
    pub needle_key: usize,
    pub noise_words: usize,
    pub noise_prefix: String,
    pub motif_prefix: String,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        NeedleConfig {
            keys: 8,
            steps: 64,
            words_per_value: 4,
            classes: 4,
            samples: 10_000,
            seed: 0,
            needle_key: 0,
            noise_words: 32,
            noise_prefix: "n".into(),
            motif_prefix: "m".into(),
        }
    }
}

impl NeedleConfig {
    pub fn noise_word(&self, i: usize) -> String {
        format!("{}{i}", self.noise_prefix)
    }

    pub fn motif_word(&self, class: usize, j: usize) -> String {
        format!("{}{class}x{j}", self.motif_prefix)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keys == 0 || self.steps == 0 || self.words_per_value == 0 {
            return Err(Error::Config("needle task needs keys, steps and words >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("needle task needs at least 2 classes".into()));
        }
        if self.needle_key >= self.keys {
            return Err(Error::Config(format!(
                "needle key {} out of range for {} keys",
                self.needle_key, self.keys
            )));
        }
        if self.noise_words == 0 {
            return Err(Error::Config("noise alphabet must not be empty".into()));
        }
        let noise: std::collections::HashSet<String> =
            (0..self.noise_words).map(|i| self.noise_word(i)).collect();
        for c in 0..self.classes {
            for j in 0..self.words_per_value {
                let w = self.motif_word(c, j);
                if noise.contains(&w) {
                    return Err(Error::Config(format!(
                        "motif word `{w}` collides with the noise alphabet"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleDataset {
    pub sequences: Vec<ObjectSequence>,
    /// Step index of the motif in each sequence.
    pub motif_steps: Vec<usize>,
}

pub fn generate_needle_task(cfg: &NeedleConfig) -> Result<NeedleDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "needle");
    let mut sequences = Vec::with_capacity(cfg.samples);
    let mut motif_steps = Vec::with_capacity(cfg.samples);
    let keys: Vec<String> = (0..cfg.keys).map(key_name).collect();
    for n in 0..cfg.samples {
        let label = rng.gen_range(0..cfg.classes);
        let at = rng.gen_range(0..cfg.steps);
        let objects = (0..cfg.steps)
            .map(|t| {
                keys.iter()
                    .enumerate()
                    .map(|(k, name)| {
                        let words: Vec<String> = if k == cfg.needle_key && t == at {
                            (0..cfg.words_per_value).map(|j| cfg.motif_word(label, j)).collect()
                        } else {
                            (0..cfg.words_per_value)
                                .map(|_| cfg.noise_word(rng.gen_range(0..cfg.noise_words)))
                                .collect()
                        };
                        (name.clone(), words.join(" "))
                    })
                    .collect::<StructuredObject>()
            })
            .collect();
        sequences.push(ObjectSequence::new(format!("needle-{n}"), objects).with_label(label.to_string()));
        motif_steps.push(at);
    }
    Ok(NeedleDataset {
        sequences,
        motif_steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrosskeyConfig {
    pub keys: usize,
    pub steps: usize,
    pub alphabet: usize,
    pub samples: usize,
    pub seed: u64,
    /// The two keys whose same-step agreement decides the label.
    pub pair: (usize, usize),
}

impl Default for CrosskeyConfig {
    fn default() -> Self {
        CrosskeyConfig {
            keys: 4,
            steps: 16,
            alphabet: 6,
            samples: 20_000,
            seed: 0,
            pair: (0, 1),
        }
    }
}

impl CrosskeyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet < 2 {
            return Err(Error::Config("cross-key task needs an alphabet of at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("cross-key task needs at least one step".into()));
        }
        let (a, b) = self.pair;
        if a == b || a >= self.keys || b >= self.keys {
            return Err(Error::Config(format!(
                "cross-key pair ({a}, {b}) must name two distinct keys below {}",
                self.keys
            )));
        }
        Ok(())
    }
}

fn letter(i: usize) -> String {
    format!("a{i}")
}

/// Label "1" when keys `pair.0` and `pair.1` agree at exactly one step,
/// "0" when they never agree. Classes are balanced in expectation.
pub fn generate_crosskey_task(cfg: &CrosskeyConfig) -> Result<Vec<ObjectSequence>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "crosskey");
    let (ka, kb) = cfg.pair;
    let keys: Vec<String> = (0..cfg.keys).map(key_name).collect();
    let mut out = Vec::with_capacity(cfg.samples);
    for n in 0..cfg.samples {
        let positive = rng.gen_bool(0.5);
        let planted = rng.gen_range(0..cfg.steps);
        let mut grid: Vec<Vec<usize>> = (0..cfg.steps)
            .map(|_| (0..cfg.keys).map(|_| rng.gen_range(0..cfg.alphabet)).collect())
            .collect();
        for (t, row) in grid.iter_mut().enumerate() {
            if positive && t == planted {
                row[kb] = row[ka];
            } else if row[kb] == row[ka] {
                let others: Vec<usize> = (0..cfg.alphabet).filter(|&x| x != row[ka]).collect();
                row[kb] = *others.choose(&mut rng).expect("alphabet >= 2");
            }
        }
        let objects = grid
            .iter()
            .map(|row| {
                keys.iter()
                    .zip(row)
                    .map(|(k, &v)| (k.clone(), letter(v)))
                    .collect::<StructuredObject>()
            })
            .collect();
        out.push(
            ObjectSequence::new(format!("crosskey-{n}"), objects)
                .with_label(if positive { "1" } else { "0" }),
        );
    }
    Ok(out)
}

/// Whether keys `a` and `b` share a value at some step.
pub fn has_same_step_match(seq: &ObjectSequence, a: &str, b: &str) -> bool {
    seq.objects
        .iter()
        .any(|o| matches!((o.get(a), o.get(b)), (Some(x), Some(y)) if x == y))
}
