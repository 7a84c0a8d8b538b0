//! Pre-norm transformer over the interleaved patch-by-channel token
//! sequence, with rotary embeddings keyed on the temporal patch index.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenizer::normal_tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Every token attends to every token of the sequence.
    Interleaved,
    /// First half of the layers attend within a channel across patches, the
    /// second half within a patch across channels.
    Separated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub attention: AttentionMode,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 12,
            n_heads: 4,
            d_model: 64,
            ffn_mult: 4,
            dropout: 0.1,
            attention: AttentionMode::Interleaved,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head width {} must be even for rotary embeddings",
                self.d_model / self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Sequence slot of token `(i, j)` for `c` channels: `i·c + j` (0-based).
pub fn slot(i: usize, j: usize, c: usize) -> usize {
    i * c + j
}

/// Row-major `[n, C, d]` grid to the interleaved `[n·C, d]` order. Both are
/// the same buffer: slot `i·C + j` is row `(i, j)` of the grid.
pub fn interleave(grid: &[f32], n: usize, c: usize, d: usize) -> Result<Vec<f32>> {
    if grid.len() != n * c * d {
        return Err(Error::structural(format!("grid of {} values is not {n}x{c}x{d}", grid.len())));
    }
    Ok(grid.to_vec())
}

pub fn deinterleave(seq: &[f32], n: usize, c: usize, d: usize) -> Result<Vec<f32>> {
    interleave(seq, n, c, d)
}

/// RoPE rotation of a single head vector (reference implementation).
pub fn rope_rotate(v: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::structural(format!("rotary embedding needs an even width, got {}", v.len())));
    }
    let hd = v.len() as f64;
    let mut out = v.to_vec();
    for k in 0..v.len() / 2 {
        let angle = position as f64 * base.powf(-2.0 * k as f64 / hd);
        let (s, c) = angle.sin_cos();
        out[2 * k] = v[2 * k] * c - v[2 * k + 1] * s;
        out[2 * k + 1] = v[2 * k] * s + v[2 * k + 1] * c;
    }
    Ok(out)
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)` (reference implementation).
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| g * v * r).collect()
}

#[derive(Clone, Debug)]
struct Layer {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ffn_norm: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    layers: Vec<Layer>,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let f = cfg.ffn_mult * d;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("{prefix}.layer{l}");
            let mut w = |name: &str, shape: Vec<usize>, std: f64| {
                store.add(format!("{p}.{name}"), normal_tensor(rng, shape, std), true)
            };
            let wq = w("attn.wq", vec![d, d], std_d)?;
            let wk = w("attn.wk", vec![d, d], std_d)?;
            let wv = w("attn.wv", vec![d, d], std_d)?;
            let wo = w("attn.wo", vec![d, d], std_d)?;
            let w1 = w("ffn.w1", vec![d, f], std_d)?;
            let w2 = w("ffn.w2", vec![f, d], std_f)?;
            layers.push(Layer {
                attn_norm: store.add(format!("{p}.attn_norm.gain"), Tensor::full(vec![d], 1.0), true)?,
                wq,
                wk,
                wv,
                wo,
                bo: store.add(format!("{p}.attn.bo"), Tensor::zeros(vec![d]), true)?,
                ffn_norm: store.add(format!("{p}.ffn_norm.gain"), Tensor::full(vec![d], 1.0), true)?,
                w1,
                b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![f]), true)?,
                w2,
                b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]), true)?,
            });
        }
        Ok(Self { cfg: cfg.clone(), layers })
    }

    /// Attention groups used by layer `l` for an `n × c` sequence.
    pub fn groups(&self, l: usize, n: usize, c: usize) -> Arc<Vec<Vec<usize>>> {
        let temporal_layers = self.cfg.n_layers / 2;
        Arc::new(match self.cfg.attention {
            AttentionMode::Interleaved => vec![(0..n * c).collect()],
            AttentionMode::Separated if l < temporal_layers => {
                (0..c).map(|j| (0..n).map(|i| slot(i, j, c)).collect()).collect()
            }
            AttentionMode::Separated => (0..n).map(|i| (0..c).map(|j| slot(i, j, c)).collect()).collect(),
        })
    }

    /// Runs layers `range` over `x[n·c, d]`; patch `i` sits at rotary
    /// position `first_position + i`.
    pub fn forward_layers<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        n: usize,
        c: usize,
        range: std::ops::Range<usize>,
        first_position: usize,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        if g.shape(x) != [n * c, d] {
            return Err(Error::structural(format!(
                "encoder expects [{}, {d}] for n={n}, C={c}, got {:?}",
                n * c,
                g.shape(x)
            )));
        }
        let h = self.cfg.n_heads;
        let positions: Vec<usize> = (0..n * c).map(|s| first_position + s / c).collect();
        let mut x = x;
        let split = self.cfg.n_layers / 2;
        let first = self.groups(0, n, c);
        let second = self.groups(self.cfg.n_layers.saturating_sub(1), n, c);
        for l in range {
            let layer = &self.layers[l];
            let groups = if l < split { first.clone() } else { second.clone() };
            let gain = g.param(layer.attn_norm);
            let hn = g.rms_norm(x, gain, self.cfg.norm_eps)?;
            let (wq, wk, wv) = (g.param(layer.wq), g.param(layer.wk), g.param(layer.wv));
            let q = g.matmul(hn, wq)?;
            let k = g.matmul(hn, wk)?;
            let v = g.matmul(hn, wv)?;
            let q = g.rope(q, h, &positions, self.cfg.rope_base)?;
            let k = g.rope(k, h, &positions, self.cfg.rope_base)?;
            let a = g.attention(q, k, v, h, groups)?;
            let (wo, bo) = (g.param(layer.wo), g.param(layer.bo));
            let o = g.linear(a, wo, bo)?;
            let o = g.dropout(o, self.cfg.dropout)?;
            x = g.add(x, o)?;

            let gain = g.param(layer.ffn_norm);
            let hn = g.rms_norm(x, gain, self.cfg.norm_eps)?;
            let (w1, b1, w2, b2) = (g.param(layer.w1), g.param(layer.b1), g.param(layer.w2), g.param(layer.b2));
            let f = g.linear(hn, w1, b1)?;
            let f = g.gelu(f)?;
            let f = g.linear(f, w2, b2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Embeddings `Z[n·c, d]` for the spatially encoded sequence `x[n·c, d]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, n: usize, c: usize) -> Result<Var> {
        self.forward_layers(g, x, n, c, 0..self.layers.len(), 0)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}
