use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PatchGrid, Scale, SpatialVocab};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{assemble_masked, MaskPlan};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Var};
use crate::pretrain::Predictor;
use crate::spatial::{add_spatial, SpatialEmbedding, SpatialIndex, SPATIAL_INIT_STD};
use crate::tokenizer::{normal_tensor, Tokenizer, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub predictor_dropout: f64,
    pub encode_scale: Scale,
    pub mask_scale: Scale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            predictor_dropout: 0.1,
            encode_scale: Scale::Parcels,
            mask_scale: Scale::Channels,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokenizer.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "tokenizer width {} differs from encoder width {}",
                self.tokenizer.d_model, self.encoder.d_model
            )));
        }
        self.tokenizer.validate()?;
        self.encoder.validate()
    }
}

/// Online and target tokenizers, spatial tables, encoder, predictor and
/// mask token. Parameters live in a separate [`ParamStore`] so the same
/// model can drive `f32` training and `f64` gradient checks.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub target: Tokenizer,
    pub spatial: SpatialEmbedding,
    pub encoder: Encoder,
    pub predictor: Predictor,
    pub mask_token: ParamId,
}

/// Row-major patch rows `[slots, L]` for the given sequence slots.
pub fn patch_rows(grid: &PatchGrid, slots: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(slots.len() * grid.l);
    for &s in slots {
        out.extend_from_slice(grid.patch(s / grid.c, s % grid.c));
    }
    out
}

fn input_rows<T: Real>(g: &mut Graph<'_, T>, rows: &[f32], width: usize) -> Result<Var> {
    let data = rows.iter().map(|&x| T::lit(x as f64)).collect();
    g.input(vec![rows.len() / width, width], data)
}

impl Model {
    /// Fresh model whose target tokenizer starts as a copy of the online one.
    pub fn new(cfg: &ModelConfig, vocab: SpatialVocab, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        if vocab.scale != cfg.encode_scale {
            return Err(Error::Config(format!(
                "vocabulary is at {} scale but the model encodes at {} scale",
                vocab.scale, cfg.encode_scale
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model();
        let tokenizer = Tokenizer::new(&cfg.tokenizer, &mut store, "tokenizer", &mut rng)?;
        let target = tokenizer.duplicate(&mut store, "target_tokenizer", false)?;
        let spatial = SpatialEmbedding::new(vocab, d, &mut store, "spatial", &mut rng)?;
        let encoder = Encoder::new(&cfg.encoder, &mut store, "encoder", &mut rng)?;
        let predictor = Predictor::new(d, cfg.predictor_dropout, &mut store, "predictor", &mut rng)?;
        let mask_token = store.add("mask_token", normal_tensor(&mut rng, vec![d], SPATIAL_INIT_STD), true)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                tokenizer,
                target,
                spatial,
                encoder,
                predictor,
                mask_token,
            },
            store,
        ))
    }

    /// Embeddings `Z[n·C, d]` of the masked sequence: observed patches are
    /// tokenized by `tokenizer`, masked slots become `mask + E_j`.
    pub fn embed_masked<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        tokenizer: &Tokenizer,
        grid: &PatchGrid,
        index: &SpatialIndex,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let (n, c) = (grid.n, grid.c);
        if index.n_channels() != c || plan.n_channels != c {
            return Err(Error::structural(format!(
                "grid has {c} channels, spatial index {} and mask plan {}",
                index.n_channels(),
                plan.n_channels
            )));
        }
        let obs_slots = plan.observed_slots(n);
        let rows = patch_rows(grid, &obs_slots);
        let patches = input_rows(g, &rows, grid.l)?;
        let b_obs = tokenizer.forward(g, patches)?;
        let e = self.spatial.encode(g, index)?;
        let e_obs = g.gather_rows(e, obs_slots.iter().map(|s| s % c).collect())?;
        let s_obs = g.add(b_obs, e_obs)?;
        let m = g.param(self.mask_token);
        let seq = assemble_masked(g, s_obs, plan, n, m, e)?;
        self.encoder.forward(g, seq, n, c)
    }

    /// Embeddings of the full unmasked sequence built from precomputed
    /// tokens `tokens[n·C, d]`.
    pub fn embed_tokens<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, index: &SpatialIndex, n: usize) -> Result<Var> {
        let e = self.spatial.encode(g, index)?;
        let s = add_spatial(g, tokens, e)?;
        self.encoder.forward(g, s, n, index.n_channels())
    }

    /// Target tokens `B̃` of the given slots under the target tokenizer;
    /// no gradient reaches the target tokenizer.
    pub fn target_tokens<T: Real>(&self, g: &mut Graph<'_, T>, grid: &PatchGrid, slots: &[usize]) -> Result<Var> {
        let rows = patch_rows(grid, slots);
        let patches = input_rows(g, &rows, grid.l)?;
        self.target.forward(g, patches)
    }

    /// Mean squared token error over masked slots for one segment.
    pub fn masked_latent_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        grid: &PatchGrid,
        index: &SpatialIndex,
        plan: &MaskPlan,
    ) -> Result<Var> {
        if plan.is_empty() {
            return Err(Error::LossUndefined("mask plan selects no tokens".into()));
        }
        let z = self.embed_masked(g, &self.tokenizer, grid, index, plan)?;
        let masked = plan.masked_slots(grid.n);
        let z_m = g.gather_rows(z, masked.clone())?;
        let pred = self.predictor.forward(g, z_m)?;
        let target = self.target_tokens(g, grid, &masked)?;
        masked_latent_loss(g, pred, target)
    }
}

/// `1/|targets| · Σ ‖target − predicted‖²` over index-aligned token rows.
pub fn masked_latent_loss<T: Real>(g: &mut Graph<'_, T>, predicted: Var, target: Var) -> Result<Var> {
    if g.value(predicted).is_empty() {
        return Err(Error::LossUndefined("no masked tokens".into()));
    }
    g.mse_rows(predicted, target)
}
