//! Interleaved training of the value modeler and the key aggregator.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::engine::{predict, train_steps, EpochSampler};
use super::kr_cache::{CacheStatus, KrCache};
use super::masking::{mlm_mask, EncodedValueSequence};
use super::metrics::{evaluate, MetricsReport};
use super::schedule::{InterleaveSchedule, Phase, PhaseKind};
use crate::attention::DropHeadConfig;
use crate::checkpoint;
use crate::data::budget::flattened_len;
use crate::data::{build_value_sequence, ObjectSequence, Vocabulary};
use crate::encoder::{EncoderConfig, TvmKa};
use crate::error::{Error, Result};
use crate::rng::{stream, RunRng};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Real, Tensor};

/// Sequences with class indices.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub seqs: Vec<ObjectSequence>,
    pub labels: Vec<usize>,
}

impl Corpus {
    /// Maps each sequence label through `classes` (label string per class index).
    pub fn new(name: &str, seqs: Vec<ObjectSequence>, classes: &[String]) -> Result<Self> {
        let labels = seqs
            .iter()
            .map(|s| {
                let l = s
                    .label
                    .as_ref()
                    .ok_or_else(|| Error::format(None, format!("sequence `{}` has no label", s.id)))?;
                classes
                    .iter()
                    .position(|c| c == l)
                    .ok_or_else(|| Error::Key(format!("label `{l}` of sequence `{}`", s.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            name: name.to_string(),
            seqs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.seqs.iter().map(|s| s.id.clone()).collect()
    }

    /// Untruncated flattened length of every sequence, used for slicing.
    pub fn lengths(&self) -> Vec<usize> {
        self.seqs.iter().map(flattened_len).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub schedule: InterleaveSchedule,
    pub drophead: f64,
    /// Keep DropHead on in the per-round value-modeler phases, not only in pretraining.
    pub drophead_in_rounds: bool,
    pub mlm_rate: f64,
    /// Value sequences per value-modeler step.
    pub tvm_batch: usize,
    /// Object sequences per aggregator step.
    pub ka_batch: usize,
    pub tvm_lr: f64,
    pub ka_lr: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub eval_k: usize,
    pub positive_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            schedule: InterleaveSchedule::default(),
            drophead: 0.2,
            drophead_in_rounds: true,
            mlm_rate: 0.15,
            tvm_batch: 8,
            ka_batch: 16,
            tvm_lr: 1e-3,
            ka_lr: 1e-3,
            clip_norm: Some(1.0),
            seed: 0,
            eval_k: 1,
            positive_class: 1,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.encoder.problems();
        out.extend(self.schedule.problems());
        if !(0.0..=1.0).contains(&self.drophead) {
            out.push(format!("drophead must be in [0,1], got {}", self.drophead));
        }
        if self.encoder.shared_heads == self.encoder.heads
            && self.encoder.heads > 0
            && self.drophead >= 1.0
        {
            out.push("drophead 1 with every head shared would silence whole layers".into());
        }
        if !(0.0..=1.0).contains(&self.mlm_rate) {
            out.push(format!("mlm_rate must be in [0,1], got {}", self.mlm_rate));
        }
        if self.tvm_batch == 0 || self.ka_batch == 0 {
            out.push("batch sizes must be >= 1".into());
        }
        for (name, lr) in [("tvm_lr", self.tvm_lr), ("ka_lr", self.ka_lr)] {
            if !(lr > 0.0) {
                out.push(format!("{name} must be > 0, got {lr}"));
            }
        }
        if self.eval_k == 0 {
            out.push("eval_k must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }
}

/// One executed phase as written to the phase log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub kind: PhaseKind,
    pub round: usize,
    pub steps: usize,
    pub tvm_optimizer_steps: u64,
    pub ka_optimizer_steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub split: String,
    #[serde(flatten)]
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub phases: Vec<PhaseRecord>,
    pub metrics: Vec<RoundMetrics>,
}

impl RunReport {
    pub fn metric(&self, round: usize, split: &str) -> Option<&MetricsReport> {
        self.metrics
            .iter()
            .find(|m| m.round == round && m.split == split)
            .map(|m| &m.report)
    }

    pub fn last_round(&self) -> usize {
        self.metrics.iter().map(|m| m.round).max().unwrap_or(0)
    }

    /// Round with the best dev macro F1 (earliest on ties).
    pub fn best_dev_round(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for m in self.metrics.iter().filter(|m| m.split == "dev") {
            if best.map_or(true, |(_, f)| m.report.macro_f1 > f) {
                best = Some((m.round, m.report.macro_f1));
            }
        }
        best.map(|b| b.0)
    }
}

/// Key representations of every sequence of a corpus.
pub type KrSet<T> = Vec<Vec<Tensor<T>>>;

/// Owns the parameters, both optimizers and the phase state of a run.
pub struct TvmKaTrainer<T: Real> {
    pub cfg: TrainConfig,
    pub store: ParamStore<T>,
    pub model: TvmKa,
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
    tvm_opt: Adam<T>,
    ka_opt: Adam<T>,
    tvm_sampler: Option<EpochSampler>,
    ka_sampler: Option<EpochSampler>,
}

impl<T: Real> TvmKaTrainer<T> {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, classes: Vec<String>) -> Result<Self> {
        let mut cfg = cfg;
        cfg.encoder.vocab_size = vocab.len();
        cfg.validate()?;
        if classes.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", classes.len())));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(cfg.seed, "init");
        let drophead = DropHeadConfig::new(cfg.drophead)?;
        let model = TvmKa::new(&mut store, &cfg.encoder, classes.len(), drophead, &mut rng)?;
        let tvm_opt = Adam::new(cfg.adam(cfg.tvm_lr), &store, &model.tvm_params())?;
        let ka_opt = Adam::new(cfg.adam(cfg.ka_lr), &store, &model.ka_params())?;
        Ok(TvmKaTrainer {
            cfg,
            store,
            model,
            vocab,
            classes,
            tvm_opt,
            ka_opt,
            tvm_sampler: None,
            ka_sampler: None,
        })
    }

    /// Hash of every value-modeler parameter, shared heads included.
    pub fn tvm_hash(&self) -> String {
        self.store.content_hash("tvm.")
    }

    pub fn tvm_steps(&self) -> u64 {
        self.tvm_opt.steps_taken()
    }

    pub fn ka_steps(&self) -> u64 {
        self.ka_opt.steps_taken()
    }

    /// Token ids of one sequence's value sequence for `key`.
    pub fn encode_key(&self, seq: &ObjectSequence, key: &str) -> Result<EncodedValueSequence> {
        Ok(EncodedValueSequence::new(&build_value_sequence(seq, key)?, &self.vocab))
    }

    /// Masked-token training over every (sequence, key) pair of `corpus`.
    pub fn mlm_phase(
        &mut self,
        corpus: &[ObjectSequence],
        steps: usize,
        drophead: bool,
        rng: &mut RunRng,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        let items: Vec<(usize, String)> = corpus
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.key_universe().into_iter().map(move |k| (i, k)))
            .collect();
        let sampler = self
            .tvm_sampler
            .get_or_insert_with(|| EpochSampler::new(items.len()));
        let mut tvm = self.model.tvm.clone();
        if !drophead {
            tvm.set_drophead(DropHeadConfig::default());
        }
        let vocab = &self.vocab;
        let rate = self.cfg.mlm_rate;
        train_steps(
            &mut self.store,
            &mut self.tvm_opt,
            sampler,
            steps,
            self.cfg.tvm_batch,
            rng,
            |g, item, rng| {
                let (s, key) = &items[item];
                let vs = EncodedValueSequence::new(&build_value_sequence(&corpus[*s], key)?, vocab);
                let batch = mlm_mask(&vs, rate, rng)?;
                let out = tvm.encode(g, &batch.input, None, Some(rng), false)?;
                let states = out.states.expect("full forward returns states");
                let logits = tvm.mlm_head(g, states, &batch.positions)?;
                g.cross_entropy(logits, &batch.targets)
            },
        )
    }

    /// Key representations with frozen weights, one per key of each sequence.
    pub fn build_krs(&self, corpus: &[ObjectSequence]) -> Result<KrSet<T>> {
        use rayon::prelude::*;
        corpus
            .par_iter()
            .map(|s| {
                s.key_universe()
                    .iter()
                    .map(|k| {
                        let ids = self.encode_key(s, k)?.ids;
                        let mut g = Graph::inference(&self.store);
                        let out = self.model.tvm.encode::<T, RunRng>(&mut g, &ids, None, None, true)?;
                        Ok(g.value(out.key_rep).clone())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// As [`build_krs`](Self::build_krs), reusing a cache entry only when it
    /// was built from identical weights and sequences.
    pub fn build_krs_cached(
        &self,
        corpus: &Corpus,
        cache: Option<&KrCache>,
    ) -> Result<(KrSet<T>, CacheStatus)> {
        let Some(cache) = cache else {
            return Ok((self.build_krs(&corpus.seqs)?, CacheStatus::Miss));
        };
        let hash = self.tvm_hash();
        let ids = corpus.ids();
        match cache.load::<T>(&corpus.name, &hash, &ids)? {
            (CacheStatus::Hit, Some(krs)) => Ok((krs, CacheStatus::Hit)),
            (status, _) => {
                let krs = self.build_krs(&corpus.seqs)?;
                cache.store(&corpus.name, &hash, &ids, &krs)?;
                Ok((krs, status))
            }
        }
    }

    /// Classification training of the aggregator on frozen representations.
    pub fn ka_phase(
        &mut self,
        krs: &KrSet<T>,
        labels: &[usize],
        steps: usize,
        rng: &mut RunRng,
    ) -> Result<Vec<f64>> {
        if steps == 0 {
            return Ok(Vec::new());
        }
        if krs.len() != labels.len() {
            return Err(Error::dim(
                "ka_phase",
                format!("{} sequences vs {} labels", krs.len(), labels.len()),
            ));
        }
        let classes = self.classes.len();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                op: "ka_phase",
                index: bad,
                bound: classes,
            });
        }
        let sampler = self
            .ka_sampler
            .get_or_insert_with(|| EpochSampler::new(krs.len()));
        let ka = &self.model.ka;
        train_steps(
            &mut self.store,
            &mut self.ka_opt,
            sampler,
            steps,
            self.cfg.ka_batch,
            rng,
            |g, item, rng| {
                let reps: Vec<_> = krs[item].iter().map(|t| g.input(t.clone())).collect();
                let e = ka.encode(g, &reps, Some(rng))?;
                let logits = ka.head.forward(g, e)?;
                g.cross_entropy(logits, &[labels[item]])
            },
        )
    }

    /// Class logits from frozen representations.
    pub fn predict(&self, krs: &KrSet<T>) -> Result<Vec<Vec<f64>>> {
        let ka = &self.model.ka;
        predict(&self.store, krs.len(), |g, i| {
            let reps: Vec<_> = krs[i].iter().map(|t| g.input(t.clone())).collect();
            let e = ka.encode::<T, RunRng>(g, &reps, None)?;
            ka.head.forward(g, e)
        })
    }

    pub fn evaluate(&self, corpus: &Corpus, krs: &KrSet<T>) -> Result<MetricsReport> {
        let scores = self.predict(krs)?;
        let positive = self.cfg.positive_class.min(self.classes.len() - 1);
        evaluate(
            &scores,
            &corpus.labels,
            self.cfg.eval_k,
            positive,
            Some(&corpus.lengths()),
        )
    }

    /// Writes a checkpoint embedding the resolved config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::json!({
            "train": self.cfg,
            "classes": self.classes,
        });
        checkpoint::save(path, &self.store, &cfg)
    }

    /// Restores parameters written by [`save`](Self::save).
    pub fn load(&mut self, path: &Path) -> Result<()> {
        checkpoint::load_into(path, &mut self.store).map(|_| ())
    }

    /// Executes the schedule: pretraining, then per round a value-modeler
    /// phase, a key-representation build and an aggregator phase, evaluating
    /// on every eval corpus after each aggregator phase. With `run_dir`,
    /// checkpoints, the phase log and the metrics file are written there.
    pub fn run(
        &mut self,
        train: &Corpus,
        evals: &[&Corpus],
        run_dir: Option<&Path>,
    ) -> Result<RunReport> {
        let mut report = RunReport::default();
        let cache = match run_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                Some(KrCache::new(d.join("kr-cache"))?)
            }
            None => None,
        };
        let phases = self.cfg.schedule.phases();
        let mut train_krs: Option<KrSet<T>> = None;
        let seed = self.cfg.seed;
        for (idx, phase) in phases.iter().enumerate() {
            let t0 = Instant::now();
            let mut status = None;
            let trace = match phase.kind {
                PhaseKind::Pretrain | PhaseKind::Tvm => {
                    let mut rng = stream(seed, &format!("{}-r{}", phase.kind, phase.round));
                    let drop = phase.kind == PhaseKind::Pretrain || self.cfg.drophead_in_rounds;
                    self.mlm_phase(&train.seqs, phase.steps, drop, &mut rng)?
                }
                PhaseKind::KrBuild => {
                    let (krs, s) = self.build_krs_cached(train, cache.as_ref())?;
                    train_krs = Some(krs);
                    status = Some(format!("{s:?}").to_lowercase());
                    Vec::new()
                }
                PhaseKind::Ka => {
                    let mut rng = stream(seed, &format!("ka-r{}", phase.round));
                    let krs = train_krs.as_ref().expect("build precedes aggregator phase");
                    self.ka_phase(krs, &train.labels, phase.steps, &mut rng)?
                }
            };
            let ckpt = match run_dir {
                Some(d) if phase.kind != PhaseKind::KrBuild => {
                    let p = d.join(format!("phase{idx:02}-{}-r{}.ckpt", phase.kind, phase.round));
                    self.save(&p)?;
                    self.save(&d.join("latest.ckpt"))?;
                    Some(p)
                }
                _ => None,
            };
            log::info!(
                "phase {idx} {} r{} steps {} loss {:?} -> {:?} in {:.1}s",
                phase.kind,
                phase.round,
                phase.steps,
                trace.first(),
                trace.last(),
                t0.elapsed().as_secs_f64()
            );
            let rec = PhaseRecord {
                kind: phase.kind,
                round: phase.round,
                steps: phase.steps,
                tvm_optimizer_steps: self.tvm_steps(),
                ka_optimizer_steps: self.ka_steps(),
                first_loss: trace.first().copied(),
                last_loss: trace.last().copied(),
                seconds: t0.elapsed().as_secs_f64(),
                checkpoint: ckpt,
                cache: status,
            };
            if let Some(d) = run_dir {
                append_jsonl(&d.join("phases.jsonl"), &rec)?;
            }
            report.phases.push(rec);
            if phase.kind == PhaseKind::Ka {
                for corpus in evals {
                    let (krs, _) = self.build_krs_cached(corpus, cache.as_ref())?;
                    let m = RoundMetrics {
                        round: phase.round,
                        split: corpus.name.clone(),
                        report: self.evaluate(corpus, &krs)?,
                    };
                    if let Some(d) = run_dir {
                        append_jsonl(&d.join("metrics.jsonl"), &m)?;
                    }
                    log::info!(
                        "round {} {} accuracy {:.4} macro-F1 {:.4}",
                        m.round,
                        m.split,
                        m.report.accuracy,
                        m.report.macro_f1
                    );
                    report.metrics.push(m);
                }
            }
        }
        Ok(report)
    }
}

/// Steps per phase kind summed over a phase log.
pub fn step_totals(phases: &[Phase]) -> (usize, usize) {
    phases.iter().fold((0, 0), |(t, k), p| match p.kind {
        PhaseKind::Tvm => (t + p.steps, k),
        PhaseKind::Ka => (t, k + p.steps),
        _ => (t, k),
    })
}

pub fn append_jsonl<S: Serialize>(path: &Path, record: &S) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(path, e))
}
