//! Multi-head attention whose first `p` head projections can be hard-shared
//! with a layer of another network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{xavier, Graph, Mask, ParamId, ParamStore, Real, Var};

/// Query/key/value projections of one head, each `d_model×d_head`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadProjection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl HeadProjection {
    pub fn ids(&self) -> [ParamId; 3] {
        [self.wq, self.wk, self.wv]
    }
}

/// DropHead on the shared heads. `enabled` turns it on for training-mode
/// forwards; evaluation forwards never drop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropHeadConfig {
    pub probability: f64,
    pub enabled: bool,
}

impl Default for DropHeadConfig {
    fn default() -> Self {
        DropHeadConfig {
            probability: 0.0,
            enabled: false,
        }
    }
}

impl DropHeadConfig {
    pub fn new(probability: f64) -> Result<Self> {
        let cfg = DropHeadConfig {
            probability,
            enabled: probability > 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "drophead probability must be in [0,1], got {}",
                self.probability
            )));
        }
        Ok(())
    }
}

/// One attention sublayer: `h` heads, the first `shared` of which may alias
/// another network's heads, plus a private output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttentionLayer {
    pub prefix: String,
    pub d_model: usize,
    pub heads: Vec<HeadProjection>,
    /// Number of leading heads bound to a partner layer.
    pub shared: usize,
    pub wo: ParamId,
    pub drophead: DropHeadConfig,
}

impl MultiHeadAttentionLayer {
    /// Registers `{prefix}.head{m}.Wq|Wk|Wv` and `{prefix}.Wo`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if h == 0 || d_model % h != 0 {
            return Err(Error::Config(format!(
                "head count {h} must divide d_model {d_model}"
            )));
        }
        let d_head = d_model / h;
        let mut heads = Vec::with_capacity(h);
        for m in 0..h {
            let mut mk = |w: &str, rng: &mut R| {
                store.add(format!("{prefix}.head{m}.{w}"), xavier(d_model, d_head, rng))
            };
            let wq = mk("Wq", rng)?;
            let wk = mk("Wk", rng)?;
            let wv = mk("Wv", rng)?;
            heads.push(HeadProjection { wq, wk, wv });
        }
        let wo = store.add(format!("{prefix}.Wo"), xavier(d_model, d_model, rng))?;
        Ok(MultiHeadAttentionLayer {
            prefix: prefix.to_string(),
            d_model,
            heads,
            shared: 0,
            wo,
            drophead: DropHeadConfig::default(),
        })
    }

    pub fn h(&self) -> usize {
        self.heads.len()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads.len()
    }

    pub fn shared_heads(&self) -> &[HeadProjection] {
        &self.heads[..self.shared]
    }

    pub fn private_heads(&self) -> &[HeadProjection] {
        &self.heads[self.shared..]
    }

    /// All parameter ids, shared head projections first.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.iter().flat_map(|h| h.ids()).collect();
        ids.push(self.wo);
        ids
    }

    /// Concatenated head outputs (after DropHead, when it applies) times `Wo`.
    ///
    /// `x_q` supplies the query rows and `x_kv` the key/value rows; pass the
    /// same var for self-attention. A `rng` marks a training-mode forward.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_, T>,
        x_q: Var,
        x_kv: Var,
        mask: Option<&Mask>,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.h());
        for head in &self.heads {
            outs.push(attend_head(g, x_q, x_kv, head, mask)?);
        }
        if let Some(rng) = rng {
            if self.drophead.enabled && self.drophead.probability > 0.0 && self.shared > 0 {
                outs = drophead_apply(g, outs, self.shared, &self.drophead, rng)?;
            }
        }
        let cat = g.concat_cols(&outs)?;
        let wo = g.param(self.wo);
        g.matmul(cat, wo)
    }
}

/// `softmax(x_q Wq (x_kv Wk)ᵀ / √d_head) x_kv Wv`, forbidden positions get zero weight.
pub fn attend_head<T: Real>(
    g: &mut Graph<'_, T>,
    x_q: Var,
    x_kv: Var,
    proj: &HeadProjection,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (wq, wk, wv) = (g.param(proj.wq), g.param(proj.wk), g.param(proj.wv));
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let d = g.shape(q)[1] as f64;
    g.attention(q, k, v, mask, T::lit(1.0 / d.sqrt()))
}

/// Ties the first `p` head projections of `ka_layer` to those of
/// `tvm_layer`. Output projections and the remaining heads stay private.
pub fn bind_shared_heads<T: Real>(
    store: &mut ParamStore<T>,
    tvm_layer: &mut MultiHeadAttentionLayer,
    ka_layer: &mut MultiHeadAttentionLayer,
    p: usize,
) -> Result<()> {
    let h = tvm_layer.h();
    if ka_layer.h() != h {
        return Err(Error::Config(format!(
            "cannot pair layers with {h} and {} heads",
            ka_layer.h()
        )));
    }
    if p > h {
        return Err(Error::Config(format!("shared heads {p} exceed head count {h}")));
    }
    if tvm_layer.d_model != ka_layer.d_model {
        return Err(Error::Config(format!(
            "cannot pair layers of width {} and {}",
            tvm_layer.d_model, ka_layer.d_model
        )));
    }
    for m in 0..p {
        let (src, dst) = (&tvm_layer.heads[m], &ka_layer.heads[m]);
        for (s, d) in src.ids().into_iter().zip(dst.ids()) {
            let handle = format!("shared:{}", store.param(s).name);
            store.alias(d, s, &handle)?;
        }
    }
    tvm_layer.shared = p;
    ka_layer.shared = p;
    Ok(())
}

/// Chooses which heads DropHead removes. Only the first `p` (shared) heads
/// are candidates; a draw that would remove every head is redrawn.
pub fn draw_drophead<R: Rng + ?Sized>(
    h: usize,
    p: usize,
    cfg: &DropHeadConfig,
    rng: &mut R,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    if p > h {
        return Err(Error::Config(format!("shared heads {p} exceed head count {h}")));
    }
    if p == h && cfg.probability >= 1.0 {
        return Err(Error::Config(
            "drophead probability 1 with every head shared would drop the whole layer".into(),
        ));
    }
    loop {
        let dropped: Vec<bool> = (0..h)
            .map(|m| m < p && rng.gen::<f64>() < cfg.probability)
            .collect();
        if dropped.iter().filter(|&&d| d).count() < h {
            return Ok(dropped);
        }
    }
}

/// Zeroes the dropped shared heads and rescales the survivors by `h/(h - dropped)`.
pub fn drophead_apply<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<'_, T>,
    head_outputs: Vec<Var>,
    p: usize,
    cfg: &DropHeadConfig,
    rng: &mut R,
) -> Result<Vec<Var>> {
    let h = head_outputs.len();
    let dropped = draw_drophead(h, p, cfg, rng)?;
    let n = dropped.iter().filter(|&&d| d).count();
    if n == 0 {
        return Ok(head_outputs);
    }
    let keep = T::lit(h as f64 / (h - n) as f64);
    Ok(head_outputs
        .into_iter()
        .zip(dropped)
        .map(|(v, d)| g.scale(v, if d { T::zero() } else { keep }))
        .collect())
}
