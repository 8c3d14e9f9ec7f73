use std::collections::HashMap;

use rand::Rng;

use super::dense::Tensor;
use super::kernels;
use super::params::{ParamGrads, ParamId, ParamStore, StorageId};
use super::real::Real;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim(
                "mask",
                format!("{rows}x{cols} mask needs {} entries, got {}", rows * cols, allowed.len()),
            ));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Every query may attend to every non-padding key.
    pub fn from_key_padding(rows: usize, key_valid: &[bool]) -> Self {
        let cols = key_valid.len();
        let mut allowed = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            allowed.extend_from_slice(key_valid);
        }
        Mask {
            rows,
            cols,
            allowed,
        }
    }

    /// Each query attends only to itself.
    pub fn identity(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n + i] = true;
        }
        Mask {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Keeps only the given query rows.
    pub fn select_rows(&self, rows: &[usize]) -> Mask {
        let mut allowed = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            allowed.extend_from_slice(self.row(r));
        }
        Mask {
            rows: rows.len(),
            cols: self.cols,
            allowed,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        scale: T,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Transpose(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax_rows",
            Op::Gather { .. } => "embedding_lookup",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::Dropout { .. } => "dropout",
            Op::Transpose(_) => "transpose",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of differentiable operations.
///
/// Forward ops append nodes in execution order; [`Graph::backward`] walks
/// them in exact reverse. Parameters are read from a borrowed
/// [`ParamStore`], so any number of graphs can evaluate against the same
/// store concurrently and their gradients are merged afterwards.
pub struct Graph<'s, T: Real> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<StorageId, Var>,
    grad_enabled: bool,
}

impl<'s, T: Real> Default for Graph<'s, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// A graph with no parameter store (inputs only).
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Inference graph: nothing requires grad and no backward caches are kept.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is retained by [`Graph::backward`].
    pub fn input_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Aliased parameters resolve to the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self
            .store
            .expect("Graph::param needs a graph built with a parameter store");
        let storage = store.storage(id);
        if let Some(&v) = self.param_vars.get(&storage) {
            return v;
        }
        let value = store.storage_value(storage).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(storage, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("lhs {:?} and rhs {:?} have mismatched inner extents", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("lhs {:?} and rhs-transposed {:?} mismatch", [m, k], [n, k2]),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a row vector to every last-axis slice of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).cols();
        if self.value(bias).numel() != c {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} vs rows of width {c}", self.shape(bias)),
            ));
        }
        let mut t = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for r in 0..t.rows() {
            for (x, &y) in t.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "width {d} vs gain {:?} / bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::lit(eps);
        let xv = self.value(x);
        let rows = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let orow = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                orow[j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let keep = ng && self.grad_enabled;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.push(out, op, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() == 0 || xv.shape().is_empty() {
            return Err(Error::dim("softmax_rows", "empty last axis"));
        }
        let mut t = xv.clone();
        for r in 0..t.rows() {
            kernels::softmax_row(t.row_mut(r));
        }
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Row gather; the backward pass scatters into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(Error::dim("concat_rows", format!("widths {cols} vs {}", pv.cols())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Mean over rows, giving a `1×cols` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(Error::dim("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            kernels::axpy(T::one(), xv.row(i), &mut out);
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("{b} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).clone();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            kernels::softmax_row(row);
            loss -= row[t].ln();
        }
        loss /= T::lit(b as f64);
        // -ln(0) would only appear for saturated logits; recompute those rows in log space.
        if !loss.is_finite() {
            loss = T::zero();
            let lv = self.value(logits);
            for (r, &t) in targets.iter().enumerate() {
                let row = lv.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                loss += lse - row[t];
            }
            loss /= T::lit(b as f64);
        }
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: if ng { probs.into_data() } else { Vec::new() },
        };
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    /// Fused scaled dot-product attention: `softmax(q kᵀ · scale) v`, with
    /// forbidden positions receiving zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        scale: T,
    ) -> Result<Var> {
        let (lq, dk) = self.dims2(q, "attention")?;
        let (lk, dk2) = self.dims2(k, "attention")?;
        let (lv, dv) = self.dims2(v, "attention")?;
        if dk != dk2 || lk != lv {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", [lq, dk], [lk, dk2], [lv, dv]),
            ));
        }
        if let Some(m) = mask {
            if m.shape() != (lq, lk) {
                return Err(Error::dim(
                    "attention",
                    format!("mask {:?} vs scores {:?}", m.shape(), (lq, lk)),
                ));
            }
            for i in 0..lq {
                if !m.row(i).iter().any(|&a| a) {
                    return Err(Error::Masking { row: i });
                }
            }
        }
        let qd = self.value(q).data();
        let kt = kernels::transpose(self.value(k).data(), lk, dk);
        let vt = kernels::transpose(self.value(v).data(), lk, dv);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let keep = ng && self.grad_enabled;
        let mut probs = if keep { vec![T::zero(); lq * lk] } else { Vec::new() };
        let mut row = vec![T::zero(); lk];
        let mut out = vec![T::zero(); lq * dv];
        for i in 0..lq {
            row.iter_mut().for_each(|x| *x = T::zero());
            for c in 0..dk {
                kernels::axpy(qd[i * dk + c] * scale, &kt[c * lk..(c + 1) * lk], &mut row);
            }
            match mask {
                Some(m) => kernels::masked_softmax_row(&mut row, m.row(i)),
                None => kernels::softmax_row(&mut row),
            }
            for c in 0..dv {
                out[i * dv + c] = kernels::dot(&row, &vt[c * lk..(c + 1) * lk]);
            }
            if keep {
                probs[i * lk..(i + 1) * lk].copy_from_slice(&row);
            }
        }
        Ok(self.push(
            Tensor::new(vec![lq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            ng,
        ))
    }

    /// Inverted dropout. A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let s = T::lit(1.0 / (1.0 - rate));
        let keep: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { s })
            .collect();
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().zip(&keep).for_each(|(a, &m)| *a *= m);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, keep }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let t = Tensor::new(vec![c, r], kernels::transpose(self.value(x).data(), r, c))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Transpose(x), ng))
    }

    /// First node at or before `upto` holding a non-finite value.
    pub fn first_non_finite(&self, upto: Var) -> Option<(Var, &'static str)> {
        self.nodes[..=upto.0]
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    /// Scalar value of `loss`, or a numeric error naming the first op that
    /// produced a non-finite value.
    pub fn loss_value(&self, loss: Var) -> Result<T> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                v.shape()
            )));
        }
        if let Some((_, op)) = self.first_non_finite(loss) {
            return Err(Error::Numeric {
                op: op.to_string(),
                step: None,
            });
        }
        Ok(v.item())
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.loss_value(loss)?;
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                op => self.backprop(op, &node.value, &g, &mut grads),
            }
        }
        let params = self
            .param_vars
            .iter()
            .map(|(&s, &v)| (s, v))
            .collect::<Vec<_>>();
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &mut |da| kernels::matmul_nt_acc(g, val(*b).data(), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn_acc(val(*a).data(), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                acc(*a, &mut |da| kernels::matmul_acc(g, val(*b).data(), da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn_acc(g, val(*a).data(), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| kernels::axpy(T::one(), g, da));
                acc(*b, &mut |db| kernels::axpy(T::one(), g, db));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| kernels::axpy(T::one(), g, da));
                acc(*b, &mut |db| kernels::axpy(-T::one(), g, db));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gi * bi;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |da| kernels::axpy(T::one(), g, da));
                let c = out.cols();
                acc(*bias, &mut |db| {
                    for r in 0..out.rows() {
                        kernels::axpy(T::one(), &g[r * c..(r + 1) * c], db);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| kernels::axpy(*c, g, da)),
            Op::Gelu(a) => acc(*a, &mut |da| {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(val(*a).data()) {
                    *d += gi * gelu_grad(x);
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gv = val(*gain).data();
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        kernels::axpy(T::one(), &g[r * d..(r + 1) * d], db);
                    }
                });
                acc(*x, &mut |dx| {
                    let dn = T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.cols();
                acc(*x, &mut |dx| {
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = kernels::dot(gr, y);
                        for j in 0..c {
                            dx[r * c + j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            kernels::axpy(
                                T::one(),
                                &g[r * total + off..r * total + off + w],
                                &mut dp[r * w..(r + 1) * w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |dp| kernels::axpy(T::one(), &g[off..off + n], dp));
                    off += n;
                }
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let inv = T::one() / T::lit(r as f64);
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        kernels::axpy(inv, g, &mut dx[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = val(*logits).cols();
                let b = targets.len();
                let s = g[0] / T::lit(b as f64);
                acc(*logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => self.attention_backward(*q, *k, *v, probs, *scale, g, grads),
            Op::Dropout { x, keep } => acc(*x, &mut |dx| {
                for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(keep) {
                    *d += gi * m;
                }
            }),
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let gt = kernels::transpose(g, c, r);
                acc(*x, &mut |dx| kernels::axpy(T::one(), &gt, dx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        probs: &[T],
        scale: T,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (lq, dk) = (qv.shape()[0], qv.shape()[1]);
        let lk = kv.shape()[0];
        let dv = vv.shape()[1];
        let kt = kernels::transpose(kv.data(), lk, dk);
        let vt = kernels::transpose(vv.data(), lk, dv);

        let mut dvt = vec![T::zero(); dv * lk];
        let mut dkt = vec![T::zero(); dk * lk];
        let mut dq = vec![T::zero(); lq * dk];
        let mut ds = vec![T::zero(); lk];
        for i in 0..lq {
            let p = &probs[i * lk..(i + 1) * lk];
            let gi = &g[i * dv..(i + 1) * dv];
            ds.iter_mut().for_each(|x| *x = T::zero());
            for c in 0..dv {
                kernels::axpy(gi[c], &vt[c * lk..(c + 1) * lk], &mut ds);
                kernels::axpy(gi[c], p, &mut dvt[c * lk..(c + 1) * lk]);
            }
            let s = kernels::dot(&ds, p);
            for (d, &pj) in ds.iter_mut().zip(p) {
                *d = pj * (*d - s) * scale;
            }
            let qi = &qv.data()[i * dk..(i + 1) * dk];
            for c in 0..dk {
                dq[i * dk + c] = kernels::dot(&ds, &kt[c * lk..(c + 1) * lk]);
                kernels::axpy(qi[c], &ds, &mut dkt[c * lk..(c + 1) * lk]);
            }
        }
        let mut put = |var: Var, data: Vec<T>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); data.len()]);
            kernels::axpy(T::one(), &data, slot);
        };
        put(q, dq);
        put(k, kernels::transpose(&dkt, dk, lk));
        put(v, kernels::transpose(&dvt, dv, lk));
    }
}

/// Result of [`Graph::backward`]: gradients of every leaf that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(StorageId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf. `None` if the leaf does
    /// not require grad or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Parameter gradients keyed by storage; unreachable parameters get zeros.
    pub fn into_param_grads(self) -> ParamGrads<T> {
        let Gradients {
            shapes,
            mut grads,
            mut params,
        } = self;
        params.sort_by_key(|(s, _)| *s);
        let entries = params
            .into_iter()
            .map(|(s, v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); shapes[v.0].iter().product()]);
                (s, g)
            })
            .collect();
        ParamGrads { entries }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh_fast())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh_fast();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
