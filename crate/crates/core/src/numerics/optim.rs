use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW moments for every parameter of a store plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.tensor.numel()])
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One decoupled-weight-decay Adam step.
    ///
    /// `lr_of` gives the learning rate of each parameter, or `None` to leave
    /// it untouched. Parameters without a gradient entry are skipped. All
    /// gradients are checked for finiteness before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr_of: impl Fn(ParamId) -> Option<f64>,
    ) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::structural(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.iter() {
            if id.index() >= store.len() || g.len() != store.tensor(id).numel() {
                return Err(Error::structural(format!(
                    "gradient for `{}` has {} elements, parameter has {}",
                    store.name(id),
                    g.len(),
                    store.tensor(id).numel()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }

        self.t += 1;
        let cfg = self.cfg;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let eps = T::lit(cfg.eps);
        for (id, g) in grads.iter() {
            if !store.param(id).trainable {
                continue;
            }
            let Some(lr) = lr_of(id) else { continue };
            let decay = T::lit(1.0 - lr * cfg.weight_decay);
            let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
            let lr = T::lit(lr);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] *= decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
