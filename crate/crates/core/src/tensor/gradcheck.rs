use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::real::{DType, Real};
use crate::error::{Error, Result};

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Denominator floor for relative errors: gradients smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients against central finite differences.
///
/// `loss_fn` rebuilds the scalar loss on a fresh graph each call. At most
/// `max_coords` randomly chosen coordinates are probed per distinct storage
/// (all of them when the parameter is smaller). Only 64-bit stores are
/// accepted.
pub fn grad_check<T, F, R>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    h: f64,
    max_coords: usize,
    rng: &mut R,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
    R: Rng + ?Sized,
{
    if T::DTYPE != DType::F64 {
        return Err(Error::Contract(
            "gradient checking requires 64-bit precision".into(),
        ));
    }
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    let analytic = {
        let mut g = Graph::with_params(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?.into_param_grads()
    };
    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = loss_fn(&mut g)?;
        Ok(g.loss_value(loss)?.as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let mut seen = Vec::new();
    for &p in params {
        let storage = store.storage(p);
        if seen.contains(&storage) {
            continue;
        }
        seen.push(storage);
        let n = store.value(p).numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(storage);
        for i in coords {
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + T::lit(h);
            let up = eval(store)?;
            store.value_mut(p).data_mut()[i] = orig - T::lit(h);
            let down = eval(store)?;
            store.value_mut(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g[i].as_f64());
            let rel = relative_error(a, numeric);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.param(p).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
