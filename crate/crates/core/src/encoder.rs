//! Transformer encoder stacks: the temporal value modeler over value
//! sequences and the key aggregator over sets of key representations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{bind_shared_heads, DropHeadConfig, MultiHeadAttentionLayer};
use crate::data::vocab::CLS_ID;
use crate::error::{Error, Result};
use crate::tensor::{uniform, xavier, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Heads per layer shared between the value modeler and the aggregator.
    pub shared_heads: usize,
    pub d_ff: usize,
    /// Token positions available to the value modeler.
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 16,
            heads: 4,
            shared_heads: 2,
            d_ff: 64,
            max_len: 512,
            vocab_size: 0,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.layers == 0 {
            out.push("encoder.layers must be >= 1".to_string());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            out.push(format!(
                "encoder.heads ({}) must divide encoder.d_model ({})",
                self.heads, self.d_model
            ));
        }
        if self.shared_heads > self.heads {
            out.push(format!(
                "encoder.shared_heads ({}) exceeds encoder.heads ({})",
                self.shared_heads, self.heads
            ));
        }
        if self.d_ff == 0 {
            out.push("encoder.d_ff must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("encoder.dropout must be in [0,1), got {}", self.dropout));
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
}

/// Pre-norm residual block: attention then GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub attn: MultiHeadAttentionLayer,
    pub ln2: (ParamId, ParamId),
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn layer_norm_params<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
) -> Result<(ParamId, ParamId)> {
    let g = store.add(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?;
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
    Ok((g, b))
}

impl Block {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let ln1 = layer_norm_params(store, &format!("{prefix}.ln1"), d)?;
        let attn = MultiHeadAttentionLayer::new(store, &format!("{prefix}.attn"), d, cfg.heads, rng)?;
        let ln2 = layer_norm_params(store, &format!("{prefix}.ln2"), d)?;
        let w1 = store.add(format!("{prefix}.ff.W1"), xavier(d, cfg.d_ff, rng))?;
        let b1 = store.add(format!("{prefix}.ff.b1"), Tensor::zeros(&[cfg.d_ff]))?;
        let w2 = store.add(format!("{prefix}.ff.W2"), xavier(cfg.d_ff, d, rng))?;
        let b2 = store.add(format!("{prefix}.ff.b2"), Tensor::zeros(&[d]))?;
        Ok(Block {
            ln1,
            attn,
            ln2,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// `query_rows` restricts the outputs to those rows (keys and values still
    /// see every row); the result has one row per requested index.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<&Mask>,
        dropout: f64,
        mut rng: Option<&mut R>,
        query_rows: Option<&[usize]>,
    ) -> Result<Var> {
        let (g1, b1) = (g.param(self.ln1.0), g.param(self.ln1.1));
        let h = g.layer_norm(x, g1, b1, LN_EPS)?;
        let (hq, xq, qmask) = match query_rows {
            Some(rows) => (
                g.gather_rows(h, rows)?,
                g.gather_rows(x, rows)?,
                mask.map(|m| m.select_rows(rows)),
            ),
            None => (h, x, mask.cloned()),
        };
        let a = self
            .attn
            .forward(g, hq, h, qmask.as_ref(), rng.as_deref_mut())?;
        let a = match rng.as_deref_mut() {
            Some(r) => g.dropout(a, dropout, r)?,
            None => a,
        };
        let x1 = g.add(xq, a)?;
        let (g2, b2) = (g.param(self.ln2.0), g.param(self.ln2.1));
        let h2 = g.layer_norm(x1, g2, b2, LN_EPS)?;
        let w1 = g.param(self.w1);
        let f = g.matmul(h2, w1)?;
        let bb1 = g.param(self.b1);
        let f = g.add_row(f, bb1)?;
        let f = g.gelu(f);
        let w2 = g.param(self.w2);
        let f = g.matmul(f, w2)?;
        let bb2 = g.param(self.b2);
        let f = g.add_row(f, bb2)?;
        let f = match rng {
            Some(r) => g.dropout(f, dropout, r)?,
            None => f,
        };
        g.add(x1, f)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.0, self.ln1.1];
        ids.extend(self.attn.param_ids());
        ids.extend([self.ln2.0, self.ln2.1, self.w1, self.b1, self.w2, self.b2]);
        ids
    }
}

/// Blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<Block>,
    pub final_ln: (ParamId, ParamId),
    pub dropout: f64,
}

impl EncoderStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("{prefix}.layer{l}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = layer_norm_params(store, &format!("{prefix}.final_ln"), cfg.d_model)?;
        Ok(EncoderStack {
            blocks,
            final_ln,
            dropout: cfg.dropout,
        })
    }

    /// Runs every block. With `pooled_only`, the last block computes only
    /// row 0, which is bitwise identical to row 0 of the full output.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<&Mask>,
        mut rng: Option<&mut R>,
        pooled_only: bool,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let rows: Option<&[usize]> = if pooled_only && i == last { Some(&[0]) } else { None };
            h = block.forward(g, h, mask, self.dropout, rng.as_deref_mut(), rows)?;
        }
        let (fg, fb) = (g.param(self.final_ln.0), g.param(self.final_ln.1));
        g.layer_norm(h, fg, fb, LN_EPS)
    }

    pub fn attention_layers(&self) -> impl Iterator<Item = &MultiHeadAttentionLayer> {
        self.blocks.iter().map(|b| &b.attn)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(Block::param_ids).collect();
        ids.extend([self.final_ln.0, self.final_ln.1]);
        ids
    }
}

/// Pooled embedding of a value sequence for one key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyRepresentation<T> {
    pub key: String,
    pub vector: Tensor<T>,
}

/// Embedding of a whole object sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding<T> {
    pub vector: Tensor<T>,
}

/// Outputs of a value-modeler forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TvmOutput {
    /// Position-0 state, `1×d_model`.
    pub key_rep: Var,
    /// Every position's state, `L×d_model`; `None` on the pooled-only path.
    pub states: Option<Var>,
}

/// Temporal value modeler: token + learned absolute position embeddings,
/// encoder stack, masked-token head tied to the token embeddings.
#[derive(Clone, Debug)]
pub struct TemporalValueModeler {
    pub cfg: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub stack: EncoderStack,
    pub mlm_bias: ParamId,
}

impl TemporalValueModeler {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(Error::Config("encoder.vocab_size must be set".into()));
        }
        let tok_emb = store.add(
            format!("{prefix}.tok_emb"),
            uniform(&[cfg.vocab_size, cfg.d_model], 0.5, rng),
        )?;
        let pos_emb = store.add(
            format!("{prefix}.pos_emb"),
            uniform(&[cfg.max_len, cfg.d_model], 0.1, rng),
        )?;
        let stack = EncoderStack::new(store, prefix, cfg, rng)?;
        let mlm_bias = store.add(format!("{prefix}.mlm.bias"), Tensor::zeros(&[cfg.vocab_size]))?;
        Ok(TemporalValueModeler {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            stack,
            mlm_bias,
        })
    }

    pub fn set_drophead(&mut self, cfg: DropHeadConfig) {
        for b in &mut self.stack.blocks {
            b.attn.drophead = cfg;
        }
    }

    /// Encodes one value sequence. `valid` marks non-padding positions.
    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        tokens: &[usize],
        valid: Option<&[bool]>,
        rng: Option<&mut R>,
        pooled_only: bool,
    ) -> Result<TvmOutput> {
        let len = tokens.len();
        if len > self.cfg.max_len {
            return Err(Error::Length {
                len,
                max: self.cfg.max_len,
            });
        }
        if tokens.first() != Some(&CLS_ID) {
            return Err(Error::Contract("value sequence must start with [CLS]".into()));
        }
        let mask = match valid {
            Some(v) => {
                if v.len() != len {
                    return Err(Error::dim(
                        "tvm_encode",
                        format!("{len} tokens vs {} padding flags", v.len()),
                    ));
                }
                Some(Mask::from_key_padding(len, v))
            }
            None => None,
        };
        let table = g.param(self.tok_emb);
        let tok = g.gather_rows(table, tokens)?;
        let pos_table = g.param(self.pos_emb);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let out = self.stack.forward(g, x, mask.as_ref(), rng, pooled_only)?;
        if pooled_only {
            Ok(TvmOutput {
                key_rep: out,
                states: None,
            })
        } else {
            let key_rep = g.gather_rows(out, &[0])?;
            Ok(TvmOutput {
                key_rep,
                states: Some(out),
            })
        }
    }

    /// Key representation in evaluation mode (no dropout, no DropHead).
    pub fn key_representation<T: Real>(
        &self,
        store: &ParamStore<T>,
        key: &str,
        tokens: &[usize],
    ) -> Result<KeyRepresentation<T>> {
        let mut g = Graph::inference(store);
        let out = self.encode::<T, rand_chacha::ChaCha8Rng>(&mut g, tokens, None, None, true)?;
        let v = g.value(out.key_rep).clone();
        let d = v.numel();
        Ok(KeyRepresentation {
            key: key.to_string(),
            vector: v.reshaped(vec![d])?,
        })
    }

    /// Logits over the vocabulary at `positions`, tied to the token table.
    pub fn mlm_head<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        states: Var,
        positions: &[usize],
    ) -> Result<Var> {
        mlm_head(g, states, positions, self.tok_emb, self.mlm_bias)
    }

    pub fn attention_layers_mut(&mut self) -> impl Iterator<Item = &mut MultiHeadAttentionLayer> {
        self.stack.blocks.iter_mut().map(|b| &mut b.attn)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        ids.extend(self.stack.param_ids());
        ids.push(self.mlm_bias);
        ids
    }
}

/// Masked-token logits: selected states times the embedding table, plus bias.
pub fn mlm_head<T: Real>(
    g: &mut Graph<'_, T>,
    states: Var,
    positions: &[usize],
    table: ParamId,
    bias: ParamId,
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Contract("mlm_head needs at least one masked position".into()));
    }
    let len = g.shape(states)[0];
    if let Some(&bad) = positions.iter().find(|&&p| p >= len) {
        return Err(Error::Index {
            op: "mlm_head",
            index: bad,
            bound: len,
        });
    }
    let rows = g.gather_rows(states, positions)?;
    let emb = g.param(table);
    let logits = g.matmul_nt(rows, emb)?;
    let b = g.param(bias);
    g.add_row(logits, b)
}

/// Single linear map from a pooled embedding to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let w = store.add(format!("{prefix}.W"), xavier(d_model, classes, rng))?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[classes]))?;
        Ok(ClassifierHead { w, b, classes })
    }

    /// `embedding` is `1×d_model` (or `B×d_model`); returns `·×classes`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, embedding: Var) -> Result<Var> {
        let w = g.param(self.w);
        let z = g.matmul(embedding, w)?;
        let b = g.param(self.b);
        g.add_row(z, b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Set encoder over key representations. A learned aggregation token is
/// prepended and no positional information is added, so the output is
/// invariant to the order of the input set.
#[derive(Clone, Debug)]
pub struct KeyAggregator {
    pub cfg: EncoderConfig,
    pub agg_token: ParamId,
    pub stack: EncoderStack,
    pub head: ClassifierHead,
}

impl KeyAggregator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &EncoderConfig,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let agg_token = store.add(
            format!("{prefix}.agg_token"),
            uniform(&[1, cfg.d_model], 0.5, rng),
        )?;
        let stack = EncoderStack::new(store, prefix, cfg, rng)?;
        let head = ClassifierHead::new(store, &format!("{prefix}.cls"), cfg.d_model, classes, rng)?;
        Ok(KeyAggregator {
            cfg: cfg.clone(),
            agg_token,
            stack,
            head,
        })
    }

    /// Sequence embedding (`1×d_model`) from a set of `1×d` or `d` key representations.
    pub fn encode<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        reps: &[Var],
        rng: Option<&mut R>,
    ) -> Result<Var> {
        if reps.is_empty() {
            return Err(Error::Contract("key aggregator needs at least one key representation".into()));
        }
        let agg = g.param(self.agg_token);
        let mut rows = Vec::with_capacity(reps.len() + 1);
        rows.push(agg);
        rows.extend_from_slice(reps);
        let x = g.concat_rows(&rows)?;
        self.stack.forward(g, x, None, rng, true)
    }

    /// Convenience: encode frozen key representations in evaluation mode.
    pub fn embed<T: Real>(
        &self,
        store: &ParamStore<T>,
        reps: &[Tensor<T>],
    ) -> Result<SequenceEmbedding<T>> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = reps.iter().map(|r| g.input(r.clone())).collect();
        let e = self.encode::<T, rand_chacha::ChaCha8Rng>(&mut g, &vars, None)?;
        let v = g.value(e).clone();
        let d = v.numel();
        Ok(SequenceEmbedding {
            vector: v.reshaped(vec![d])?,
        })
    }

    pub fn attention_layers_mut(&mut self) -> impl Iterator<Item = &mut MultiHeadAttentionLayer> {
        self.stack.blocks.iter_mut().map(|b| &mut b.attn)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.agg_token];
        ids.extend(self.stack.param_ids());
        ids.extend(self.head.param_ids());
        ids
    }
}

/// A value modeler and a key aggregator whose first `shared_heads` head
/// projections are tied layer by layer.
#[derive(Clone, Debug)]
pub struct TvmKa {
    pub tvm: TemporalValueModeler,
    pub ka: KeyAggregator,
}

impl TvmKa {
    /// Registers parameters under `tvm.*` and `ka.*` and binds the shared heads.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        classes: usize,
        drophead: DropHeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        drophead.validate()?;
        let mut tvm = TemporalValueModeler::new(store, "tvm", cfg, rng)?;
        let mut ka = KeyAggregator::new(store, "ka", cfg, classes, rng)?;
        for (a, b) in tvm.attention_layers_mut().zip(ka.attention_layers_mut()) {
            bind_shared_heads(store, a, b, cfg.shared_heads)?;
        }
        tvm.set_drophead(drophead);
        Ok(TvmKa { tvm, ka })
    }

    pub fn tvm_params(&self) -> Vec<ParamId> {
        self.tvm.param_ids()
    }

    pub fn ka_params(&self) -> Vec<ParamId> {
        self.ka.param_ids()
    }

    /// Class logits for one sequence given its per-key token ids, all
    /// computed on one graph so gradients reach both networks.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        value_sequences: &[Vec<usize>],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let reps = value_sequences
            .iter()
            .map(|ids| {
                self.tvm
                    .encode(g, ids, None, rng.as_deref_mut(), true)
                    .map(|o| o.key_rep)
            })
            .collect::<Result<Vec<_>>>()?;
        let e = self.ka.encode(g, &reps, rng)?;
        self.ka.head.forward(g, e)
    }
}
