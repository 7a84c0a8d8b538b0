use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenizer::normal_tensor;

pub const PREDICTOR_LAYERS: usize = 5;

/// Five width-preserving linear layers. Every layer is followed by GeLU;
/// the three hidden layers are additionally followed by dropout.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub d_model: usize,
    pub dropout: f64,
    layers: Vec<(ParamId, ParamId)>,
}

impl Predictor {
    pub fn new<R: Rng>(d_model: usize, dropout: f64, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (d_model as f64).sqrt();
        let layers = (0..PREDICTOR_LAYERS)
            .map(|l| {
                Ok((
                    store.add(format!("{prefix}.layer{l}.weight"), normal_tensor(rng, vec![d_model, d_model], std), true)?,
                    store.add(format!("{prefix}.layer{l}.bias"), Tensor::zeros(vec![d_model]), true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d_model, dropout, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Predicted tokens for embeddings `z[rows, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::structural(format!(
                "predictor expects width {}, got {shape:?}",
                self.d_model
            )));
        }
        let mut x = z;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            x = g.linear(x, w, b)?;
            x = g.gelu(x)?;
            if (1..PREDICTOR_LAYERS - 1).contains(&l) {
                x = g.dropout(x, self.dropout)?;
            }
        }
        Ok(x)
    }
}
