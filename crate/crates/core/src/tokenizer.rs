//! Patch tokenizer: a stack of dilated 1-D convolution blocks over each patch
//! followed by a linear projection to the model width.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerVariant {
    DilatedCnn,
    LinearProjection,
    SingleCnn,
}

/// Normalization inside each convolution block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockNorm {
    /// Over the whole channel-by-position extent of the block output, with
    /// per-channel gain and bias.
    Layer,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub variant: TokenizerVariant,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub block_norm: BlockNorm,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            variant: TokenizerVariant::DilatedCnn,
            patch_len: 512,
            d_model: 64,
            n_blocks: 5,
            kernel: 3,
            hidden: 5,
            block_norm: BlockNorm::Layer,
        }
    }
}

impl TokenizerConfig {
    /// `(c_in, c_out, dilation)` of every convolution block.
    pub fn blocks(&self) -> Vec<(usize, usize, usize)> {
        match self.variant {
            TokenizerVariant::LinearProjection => Vec::new(),
            TokenizerVariant::SingleCnn => vec![(1, 1, 1)],
            TokenizerVariant::DilatedCnn => (0..self.n_blocks)
                .map(|i| {
                    let c_in = if i == 0 { 1 } else { self.hidden };
                    let c_out = if i + 1 == self.n_blocks { 1 } else { self.hidden };
                    (c_in, c_out, 1usize << i)
                })
                .collect(),
        }
    }

    /// Samples of input that can influence one output position:
    /// `1 + (kernel − 1) · Σ dilation`.
    pub fn receptive_field(&self) -> Result<usize> {
        if self.variant == TokenizerVariant::LinearProjection {
            return Err(Error::UnsupportedVariant(
                "the linear-projection tokenizer has no convolutional receptive field".into(),
            ));
        }
        let dil: usize = self.blocks().iter().map(|b| b.2).sum();
        Ok(1 + (self.kernel - 1) * dil)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.d_model == 0 {
            return Err(Error::Config("patch length and model width must be positive".into()));
        }
        if self.variant != TokenizerVariant::LinearProjection && self.kernel % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel must be odd, got {}", self.kernel)));
        }
        if self.variant == TokenizerVariant::DilatedCnn && (self.n_blocks == 0 || self.hidden == 0) {
            return Err(Error::Config("dilated tokenizer needs at least one block of positive width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    dilation: usize,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    blocks: Vec<ConvBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Tokenizer {
    /// Registers freshly initialized parameters under `prefix`.
    pub fn new<R: Rng>(cfg: &TokenizerConfig, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        for (i, (c_in, c_out, dilation)) in cfg.blocks().into_iter().enumerate() {
            let fan_in = (c_in * cfg.kernel) as f64;
            let weight = store.add(
                format!("{prefix}.conv{i}.weight"),
                normal_tensor(rng, vec![c_out, c_in, cfg.kernel], 1.0 / fan_in.sqrt()),
                true,
            )?;
            let bias = store.add(format!("{prefix}.conv{i}.bias"), Tensor::zeros(vec![c_out]), true)?;
            let norm = match cfg.block_norm {
                BlockNorm::None => None,
                BlockNorm::Layer => Some((
                    store.add(format!("{prefix}.norm{i}.gain"), Tensor::full(vec![c_out], 1.0), true)?,
                    store.add(format!("{prefix}.norm{i}.bias"), Tensor::zeros(vec![c_out]), true)?,
                )),
            };
            blocks.push(ConvBlock {
                weight,
                bias,
                norm,
                dilation,
            });
        }
        let proj_w = store.add(
            format!("{prefix}.proj.weight"),
            normal_tensor(rng, vec![cfg.patch_len, cfg.d_model], 1.0 / (cfg.patch_len as f64).sqrt()),
            true,
        )?;
        let proj_b = store.add(format!("{prefix}.proj.bias"), Tensor::zeros(vec![cfg.d_model]), true)?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            proj_w,
            proj_b,
        })
    }

    /// Registers a copy of this tokenizer's current tensors under `prefix`.
    pub fn duplicate(&self, store: &mut ParamStore<f32>, prefix: &str, trainable: bool) -> Result<Self> {
        let mut map = |id: ParamId| -> Result<ParamId> {
            let name = store.name(id);
            let suffix = &name[name.find('.').map_or(0, |k| k + 1)..];
            let tensor = store.tensor(id).clone();
            store.add(format!("{prefix}.{suffix}"), tensor, trainable)
        };
        let mut blocks = Vec::new();
        for b in &self.blocks {
            blocks.push(ConvBlock {
                weight: map(b.weight)?,
                bias: map(b.bias)?,
                norm: match b.norm {
                    Some((g, bb)) => Some((map(g)?, map(bb)?)),
                    None => None,
                },
                dilation: b.dilation,
            });
        }
        Ok(Self {
            cfg: self.cfg.clone(),
            blocks,
            proj_w: map(self.proj_w)?,
            proj_b: map(self.proj_b)?,
        })
    }

    /// Parameter ids in a fixed order shared by every tokenizer of the same config.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend([b.weight, b.bias]);
            if let Some((g, bb)) = b.norm {
                ids.extend([g, bb]);
            }
        }
        ids.extend([self.proj_w, self.proj_b]);
        ids
    }

    /// Convolution stack applied to `patches[N, L]`; output `[N, L]`.
    pub fn temporal_encode<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let shape = g.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.patch_len {
            return Err(Error::structural(format!(
                "tokenizer expects [patches, {}], got {shape:?}",
                self.cfg.patch_len
            )));
        }
        if self.blocks.is_empty() {
            return Ok(patches);
        }
        let (n, l) = (shape[0], shape[1]);
        let mut x = g.reshape(patches, vec![n, 1, l])?;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let (w, bias) = (g.param(b.weight), g.param(b.bias));
            x = g.conv1d(x, w, bias, b.dilation)?;
            if let Some((gain, nb)) = b.norm {
                let (gain, nb) = (g.param(gain), g.param(nb));
                x = g.layer_norm(x, gain, nb, 1e-5)?;
            }
            if i < last {
                x = g.gelu(x)?;
            }
        }
        g.reshape(x, vec![n, l])
    }

    /// Tokens `[N, d]` for `patches[N, L]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        let h = self.temporal_encode(g, patches)?;
        let (w, b) = (g.param(self.proj_w), g.param(self.proj_b));
        g.linear(h, w, b)
    }

    /// Tokens for raw patch rows, evaluated without recording gradients.
    pub fn tokenize(&self, store: &ParamStore<f32>, patches: &[f32]) -> Result<Vec<f32>> {
        let n = patches.len() / self.cfg.patch_len;
        let mut g = Graph::inference(store);
        let x = g.input(vec![n, self.cfg.patch_len], patches.to_vec())?;
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).to_vec())
    }
}
