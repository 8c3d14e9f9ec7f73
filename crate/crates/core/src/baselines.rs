//! Comparison systems: a classifier over the flattened token stream, and
//! record-centric models that embed each time step from its key-value pairs
//! and run an inter-object transformer over the steps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadAttentionLayer;
use crate::data::vocab::Vocabulary;
use crate::data::{build_flattened_view, build_record_view, ObjectSequence};
use crate::encoder::{ClassifierHead, EncoderConfig, EncoderStack, TemporalValueModeler};
use crate::error::{Error, Result};
use crate::rng::{stream, RunRng};
use crate::tensor::{uniform, xavier, Adam, AdamConfig, Graph, ParamId, ParamStore, Real, Var};
use crate::training::engine::{predict, train_steps, EpochSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordAggregatorKind {
    Sum,
    ConcatProject,
    SelfAttnAvg,
}

impl FromStr for RecordAggregatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "concat" | "concat-project" => Ok(Self::ConcatProject),
            "selfattn" | "self-attn-avg" => Ok(Self::SelfAttnAvg),
            other => Err(Error::Config(format!("unknown record aggregator `{other}`"))),
        }
    }
}

impl fmt::Display for RecordAggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::ConcatProject => "concat",
            Self::SelfAttnAvg => "selfattn",
        })
    }
}

/// Mean of the token embeddings of one `key [KV_SEP] value` pair, `1×d`.
pub fn pair_embed<T: Real>(g: &mut Graph<'_, T>, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract("pair_embed needs at least one token".into()));
    }
    let rows = g.gather_rows(table, ids)?;
    g.mean_rows(rows)
}

/// Learned parts of a record aggregator.
#[derive(Clone, Debug)]
pub enum RecordAggregator {
    Sum,
    /// Projection from `K·d` to `d`.
    ConcatProject { w: ParamId, keys: usize },
    SelfAttnAvg { attn: MultiHeadAttentionLayer },
}

impl RecordAggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: RecordAggregatorKind,
        d_model: usize,
        heads: usize,
        keys: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            RecordAggregatorKind::Sum => RecordAggregator::Sum,
            RecordAggregatorKind::ConcatProject => {
                if keys == 0 {
                    return Err(Error::Config("concat aggregator needs a fixed key count".into()));
                }
                let w = store.add(format!("{prefix}.W"), xavier(keys * d_model, d_model, rng))?;
                RecordAggregator::ConcatProject { w, keys }
            }
            RecordAggregatorKind::SelfAttnAvg => RecordAggregator::SelfAttnAvg {
                attn: MultiHeadAttentionLayer::new(store, &format!("{prefix}.attn"), d_model, heads, rng)?,
            },
        })
    }

    pub fn kind(&self) -> RecordAggregatorKind {
        match self {
            RecordAggregator::Sum => RecordAggregatorKind::Sum,
            RecordAggregator::ConcatProject { .. } => RecordAggregatorKind::ConcatProject,
            RecordAggregator::SelfAttnAvg { .. } => RecordAggregatorKind::SelfAttnAvg,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            RecordAggregator::Sum => Vec::new(),
            RecordAggregator::ConcatProject { w, .. } => vec![*w],
            RecordAggregator::SelfAttnAvg { attn } => attn.param_ids(),
        }
    }
}

/// Combines the pair embeddings (`1×d` each) of one step into `1×d`.
pub fn aggregate_record<T: Real>(
    g: &mut Graph<'_, T>,
    pairs: &[Var],
    agg: &RecordAggregator,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Contract("a record needs at least one pair".into()));
    }
    match agg {
        RecordAggregator::Sum => {
            let x = g.concat_rows(pairs)?;
            let m = g.mean_rows(x)?;
            Ok(g.scale(m, T::lit(pairs.len() as f64)))
        }
        RecordAggregator::ConcatProject { w, keys } => {
            if pairs.len() != *keys {
                return Err(Error::dim(
                    "aggregate_record",
                    format!("concat aggregator expects {keys} pairs, got {}", pairs.len()),
                ));
            }
            let x = g.concat_cols(pairs)?;
            let w = g.param(*w);
            g.matmul(x, w)
        }
        RecordAggregator::SelfAttnAvg { attn } => {
            let x = g.concat_rows(pairs)?;
            let y = attn.forward::<T, RunRng>(g, x, x, None, None)?;
            g.mean_rows(y)
        }
    }
}

/// Per-step aggregates with positional embeddings, an inter-object encoder
/// and a pooled classifier. Step order matters here.
#[derive(Clone, Debug)]
pub struct RecordCentricModel {
    pub tok_emb: ParamId,
    pub aggregator: RecordAggregator,
    pub cls: ParamId,
    pub pos_emb: ParamId,
    pub max_steps: usize,
    pub stack: EncoderStack,
    pub head: ClassifierHead,
}

impl RecordCentricModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        kind: RecordAggregatorKind,
        keys: usize,
        max_steps: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.add("record.tok_emb", uniform(&[cfg.vocab_size, d], 0.5, rng))?;
        let aggregator = RecordAggregator::new(store, "record.agg", kind, d, cfg.heads, keys, rng)?;
        let cls = store.add("record.cls", uniform(&[1, d], 0.5, rng))?;
        let pos_emb = store.add("record.pos_emb", uniform(&[max_steps + 1, d], 0.1, rng))?;
        let stack = EncoderStack::new(store, "record", cfg, rng)?;
        let head = ClassifierHead::new(store, "record.cls_head", d, classes, rng)?;
        Ok(RecordCentricModel {
            tok_emb,
            aggregator,
            cls,
            pos_emb,
            max_steps,
            stack,
            head,
        })
    }

    /// `steps[t][j]` holds the token ids of pair `j` at step `t`.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        steps: &[Vec<Vec<usize>>],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if steps.len() > self.max_steps {
            return Err(Error::Length {
                len: steps.len(),
                max: self.max_steps,
            });
        }
        let table = g.param(self.tok_emb);
        let mut rows = vec![g.param(self.cls)];
        for pairs in steps {
            let embs = pairs
                .iter()
                .map(|ids| pair_embed(g, table, ids))
                .collect::<Result<Vec<_>>>()?;
            rows.push(aggregate_record(g, &embs, &self.aggregator)?);
        }
        let x = g.concat_rows(&rows)?;
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..rows.len()).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(x, pos)?;
        let pooled = self.stack.forward(g, x, None, rng, true)?;
        self.head.forward(g, pooled)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb];
        ids.extend(self.aggregator.param_ids());
        ids.extend([self.cls, self.pos_emb]);
        ids.extend(self.stack.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

/// The value-modeler architecture applied to the flattened stream, pooled
/// at position 0, with a classifier head.
#[derive(Clone, Debug)]
pub struct FlattenedModel {
    pub encoder: TemporalValueModeler,
    pub head: ClassifierHead,
    pub max_tokens: usize,
}

impl FlattenedModel {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        max_tokens: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = EncoderConfig {
            max_len: max_tokens,
            ..cfg.clone()
        };
        let encoder = TemporalValueModeler::new(store, "flat", &cfg, rng)?;
        let head = ClassifierHead::new(store, "flat.cls_head", cfg.d_model, classes, rng)?;
        Ok(FlattenedModel {
            encoder,
            head,
            max_tokens,
        })
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let out = self.encoder.encode(g, ids, None, rng, true)?;
        self.head.forward(g, out.key_rep)
    }

    /// Parameters on the classification path (the masked-token bias is unused).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.retain(|&p| p != self.encoder.mlm_bias);
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Flattened ids truncated to `max_tokens`.
pub fn flattened_input(seq: &ObjectSequence, vocab: &Vocabulary, max_tokens: usize) -> Result<Vec<usize>> {
    Ok(vocab.encode(&build_flattened_view(seq, max_tokens)?.tokens))
}

/// Record-view ids: per step, per pair.
pub fn record_input(seq: &ObjectSequence, vocab: &Vocabulary) -> Vec<Vec<Vec<usize>>> {
    build_record_view(seq)
        .iter()
        .map(|step| step.iter().map(|p| vocab.encode(p)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Flattened,
    Record(RecordAggregatorKind),
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineKind::Flattened => f.write_str("flattened"),
            BaselineKind::Record(k) => write!(f, "record_{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum BaselineModel {
    Flattened(FlattenedModel),
    Record(RecordCentricModel),
}

/// Pre-encoded model input for one sequence.
#[derive(Clone, Debug)]
pub enum BaselineInput {
    Flat(Vec<usize>),
    Record(Vec<Vec<Vec<usize>>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub flattened_max_tokens: usize,
    /// Maximum steps for the inter-object encoder.
    pub record_max_steps: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Pairs per step for the concat aggregator; 0 means taken from the training data.
    pub keys: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            flattened_max_tokens: 512,
            record_max_steps: 512,
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            keys: 0,
        }
    }
}

/// A baseline with its parameters and optimizer.
pub struct BaselineTrainer<T: Real> {
    pub kind: BaselineKind,
    pub cfg: BaselineConfig,
    pub store: ParamStore<T>,
    pub model: BaselineModel,
    pub vocab: Vocabulary,
    pub classes: Vec<String>,
    opt: Adam<T>,
    sampler: Option<EpochSampler>,
}

impl<T: Real> BaselineTrainer<T> {
    /// `keys` is the fixed pair count per step (needed by the concat aggregator).
    pub fn new(
        kind: BaselineKind,
        encoder: &EncoderConfig,
        cfg: BaselineConfig,
        vocab: Vocabulary,
        classes: Vec<String>,
        keys: usize,
        seed: u64,
    ) -> Result<Self> {
        let enc = EncoderConfig {
            vocab_size: vocab.len(),
            ..encoder.clone()
        };
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &format!("init-{kind}"));
        let model = match kind {
            BaselineKind::Flattened => BaselineModel::Flattened(FlattenedModel::new(
                &mut store,
                &enc,
                cfg.flattened_max_tokens,
                classes.len(),
                &mut rng,
            )?),
            BaselineKind::Record(k) => BaselineModel::Record(RecordCentricModel::new(
                &mut store,
                &enc,
                k,
                keys,
                cfg.record_max_steps,
                classes.len(),
                &mut rng,
            )?),
        };
        let params = match &model {
            BaselineModel::Flattened(m) => m.param_ids(),
            BaselineModel::Record(m) => m.param_ids(),
        };
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &store,
            &params,
        )?;
        Ok(BaselineTrainer {
            kind,
            cfg,
            store,
            model,
            vocab,
            classes,
            opt,
            sampler: None,
        })
    }

    pub fn encode(&self, seqs: &[ObjectSequence]) -> Result<Vec<BaselineInput>> {
        seqs.iter()
            .map(|s| {
                Ok(match &self.model {
                    BaselineModel::Flattened(m) => {
                        BaselineInput::Flat(flattened_input(s, &self.vocab, m.max_tokens)?)
                    }
                    BaselineModel::Record(_) => BaselineInput::Record(record_input(s, &self.vocab)),
                })
            })
            .collect()
    }

    fn logits<R: Rng + ?Sized>(
        model: &BaselineModel,
        g: &mut Graph<'_, T>,
        input: &BaselineInput,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        match (model, input) {
            (BaselineModel::Flattened(m), BaselineInput::Flat(ids)) => m.forward(g, ids, rng),
            (BaselineModel::Record(m), BaselineInput::Record(steps)) => m.forward(g, steps, rng),
            _ => Err(Error::Contract("input does not match the baseline kind".into())),
        }
    }

    pub fn train(
        &mut self,
        inputs: &[BaselineInput],
        labels: &[usize],
        steps: usize,
        rng: &mut RunRng,
    ) -> Result<Vec<f64>> {
        let sampler = self
            .sampler
            .get_or_insert_with(|| EpochSampler::new(inputs.len()));
        let model = &self.model;
        train_steps(
            &mut self.store,
            &mut self.opt,
            sampler,
            steps,
            self.cfg.batch,
            rng,
            |g, i, rng| {
                let logits = Self::logits(model, g, &inputs[i], Some(rng))?;
                g.cross_entropy(logits, &[labels[i]])
            },
        )
    }

    pub fn predict(&self, inputs: &[BaselineInput]) -> Result<Vec<Vec<f64>>> {
        let model = &self.model;
        predict(&self.store, inputs.len(), |g, i| {
            Self::logits::<RunRng>(model, g, &inputs[i], None)
        })
    }
}
