//! Central finite-difference check of reverse-mode gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, loss_fn: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let v = loss_fn(&mut g)?;
    Ok(g.scalar(v))
}

/// Compares the reverse-mode gradient of `loss_fn` against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` for every element of every trainable
/// parameter. `loss_fn` must build a scalar on the graph it is handed and be
/// deterministic; two disagreeing evaluations at the same point are reported
/// as [`Error::OracleInvalid`].
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var> + Sync,
{
    let (base, grads) = {
        let mut g = Graph::new(store);
        let v = loss_fn(&mut g)?;
        (g.scalar(v), g.backward(v)?)
    };
    let again = evaluate(store, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let params = ids
        .par_iter()
        .map(|&id| -> Result<ParamCheck> {
            let mut local = store.clone();
            let numel = store.tensor(id).numel();
            let analytic = grads.get(id);
            let mut worst: f64 = 0.0;
            for i in 0..numel {
                let orig = store.tensor(id).data()[i];
                local.tensor_mut(id).data_mut()[i] = orig + eps;
                let plus = evaluate(&local, &loss_fn)?;
                local.tensor_mut(id).data_mut()[i] = orig - eps;
                let minus = evaluate(&local, &loss_fn)?;
                local.tensor_mut(id).data_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let a = analytic.map_or(0.0, |g| g[i]);
                worst = worst.max(rel_err(a, fd));
            }
            Ok(ParamCheck {
                name: store.name(id).to_string(),
                numel,
                max_rel_err: worst,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { params })
}
