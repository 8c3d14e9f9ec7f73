//! Minibatch optimisation and batched inference over independent items.
//!
//! Each item gets its own graph. Items of a batch are evaluated in parallel
//! against read-only parameters and their gradients are summed in item order,
//! so results do not depend on thread scheduling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RunRng;
use crate::tensor::{Adam, Graph, ParamGrads, ParamStore, Real, Var};

/// Draws item indices epoch by epoch: every item once per pass, in a fresh
/// shuffled order each pass.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    pub epochs_started: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
            epochs_started: 0,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
                self.epochs_started += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean loss of one step plus its gradients.
fn batch_gradients<T, F>(
    store: &ParamStore<T>,
    items: &[(usize, u64)],
    step: usize,
    loss_fn: &F,
) -> Result<(f64, ParamGrads<T>)>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>, usize, &mut RunRng) -> Result<Var> + Sync,
{
    let parts: Vec<(f64, ParamGrads<T>)> = items
        .par_iter()
        .map(|&(item, seed)| {
            let mut rng = RunRng::seed_from_u64(seed);
            let mut g = Graph::with_params(store);
            let loss = loss_fn(&mut g, item, &mut rng)?;
            let value = g.loss_value(loss).map_err(|e| with_step(e, step))?;
            let grads = g.backward(loss)?.into_param_grads();
            Ok((value.as_f64(), grads))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mean = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let mut grads = ParamGrads::sum(parts.into_iter().map(|p| p.1).collect());
    grads.scale(T::lit(1.0 / n));
    Ok((mean, grads))
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { op, .. } => Error::Numeric {
            op,
            step: Some(step),
        },
        other => other,
    }
}

/// Runs `steps` optimizer updates. `loss_fn` builds the loss of one item on
/// a fresh graph; the per-item rng is seeded from `rng`. Returns the mean
/// batch loss of every step.
pub fn train_steps<T, F>(
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    sampler: &mut EpochSampler,
    steps: usize,
    batch_size: usize,
    rng: &mut RunRng,
    loss_fn: F,
) -> Result<Vec<f64>>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>, usize, &mut RunRng) -> Result<Var> + Sync,
{
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<(usize, u64)> = sampler
            .next_batch(batch_size, rng)
            .into_iter()
            .map(|i| (i, rng.gen()))
            .collect();
        if batch.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let (loss, grads) = batch_gradients(store, &batch, step, &loss_fn)?;
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store);
        if (step + 1) % 50 == 0 {
            log::debug!("step {}/{steps} loss {loss:.4}", step + 1);
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Evaluation-mode outputs for items `0..n`, as `f64` rows.
pub fn predict<T, F>(store: &ParamStore<T>, n: usize, forward: F) -> Result<Vec<Vec<f64>>>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>, usize) -> Result<Var> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::inference(store);
            let out = forward(&mut g, i)?;
            Ok(g.value(out).data().iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}
