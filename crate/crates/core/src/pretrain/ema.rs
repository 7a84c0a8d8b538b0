use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real};

/// `target ← m·target + (1−m)·online` for each paired tensor.
pub fn ema_update<T: Real>(store: &mut ParamStore<T>, target: &[ParamId], online: &[ParamId], momentum: f64) -> Result<()> {
    if target.len() != online.len() {
        return Err(Error::structural(format!(
            "EMA pairs {} target tensors with {} online tensors",
            target.len(),
            online.len()
        )));
    }
    for (&t, &o) in target.iter().zip(online) {
        if store.tensor(t).shape() != store.tensor(o).shape() {
            return Err(Error::structural(format!(
                "EMA shape mismatch between `{}` and `{}`",
                store.name(t),
                store.name(o)
            )));
        }
    }
    for (&t, &o) in target.iter().zip(online) {
        let src: Vec<f64> = store.tensor(o).data().iter().map(|x| x.f64()).collect();
        for (dst, s) in store.tensor_mut(t).data_mut().iter_mut().zip(src) {
            *dst = T::lit(momentum * dst.f64() + (1.0 - momentum) * s);
        }
    }
    Ok(())
}
