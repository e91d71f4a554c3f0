//! Central finite-difference gradient checking.

use rayon::prelude::*;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Analytic and central-difference gradients of a scalar function of several
/// tensor inputs. Returns `(analytic, numeric)` flattened over all inputs.
pub fn gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok((analytic, numeric))
}

/// Maximum-over-inputs convenience wrapper around [`gradients`].
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (a, n) = gradients(inputs, h, f)?;
    Ok(relative_error(&a, &n))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-tensor and overall norm-wise errors of a parameter-store check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub per_tensor: Vec<(String, f64)>,
    pub overall: f64,
}

impl ParamCheck {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|p| p.1).fold(self.overall, f64::max)
    }
}

/// Checks the gradient of `f` with respect to every scalar in `store`.
/// Finite differences run in parallel, one store copy per worker.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<ParamCheck>
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Result<Var<'t>> + Sync,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?.params(store);

    let slots: Vec<(usize, usize)> = store
        .values()
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let eval = |ps: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, ps)?.item())
    };
    let numeric: Vec<f64> = slots
        .par_iter()
        .map_init(
            || store.clone(),
            |ws, &(i, j)| -> Result<f64> {
                let x0 = ws.values()[i].data()[j];
                ws.values_mut()[i].data_mut()[j] = x0 + h;
                let fp = eval(ws)?;
                ws.values_mut()[i].data_mut()[j] = x0 - h;
                let fm = eval(ws)?;
                ws.values_mut()[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            },
        )
        .collect::<Result<_>>()?;

    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    // Tensors whose true gradient vanishes (e.g. attention key biases) are
    // compared on the scale of the whole gradient, not their own noise.
    let floor = 1e-4 * norm(&analytic).max(norm(&numeric));
    let mut per_tensor = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (id, g) in store.ids().zip(&grads) {
        let num = &numeric[offset..offset + g.numel()];
        let diff: Vec<f64> = g.data().iter().zip(num).map(|(a, b)| a - b).collect();
        let err = norm(&diff) / norm(g.data()).max(norm(num)).max(floor).max(1e-12);
        per_tensor.push((store.name(id).to_string(), err));
        offset += g.numel();
    }
    Ok(ParamCheck {
        per_tensor,
        overall: relative_error(&analytic, &numeric),
    })
}
