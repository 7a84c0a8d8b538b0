//! Masked channel reconstruction in the observation space: predicted
//! tokens of masked slots are mapped back to raw patches by a linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, PatchGrid, Scale};
use crate::downstream::finetune::{fit, FinetuneCfg, FitReport, LrGroup};
use crate::downstream::metrics::{mse, r_squared};
use crate::downstream::probe::{downstream_index, is_backbone};
use crate::error::{Error, Result};
use crate::masking::{select_targets, MaskPlan};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::pretrain::{derive_seed, patch_rows, Model};
use crate::spatial::SpatialIndex;
use crate::tokenizer::normal_tensor;

#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub channels: Vec<ChannelMeta>,
    pub index: SpatialIndex,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

/// Loss terms of one segment under one plan.
pub struct ReconLoss {
    pub total: Var,
    pub target: Var,
    pub observed: Option<Var>,
}

impl Reconstructor {
    /// Adds a fresh `d → L` head to a copy of the model parameters.
    pub fn new(model: &Model, store: &ParamStore<f32>, channels: &[ChannelMeta], cfg: &FinetuneCfg) -> Result<Self> {
        let has_predictor = model
            .predictor
            .param_ids()
            .into_iter()
            .all(|id| id.index() < store.len() && store.name(id).starts_with("predictor."));
        if !has_predictor {
            return Err(Error::Config("reconstruction needs the pretrained predictor, which the parameters lack".into()));
        }
        let index = downstream_index(model, channels)?;
        let (d, l) = (model.cfg.d_model(), model.cfg.tokenizer.patch_len);
        let mut store = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let head_weight = store.add("recon_head.weight", normal_tensor(&mut rng, vec![d, l], 1.0 / (d as f64).sqrt()), true)?;
        let head_bias = store.add("recon_head.bias", Tensor::zeros(vec![l]), true)?;
        for id in model.target.param_ids() {
            store.set_trainable(id, !cfg.freeze_tokenizer);
        }
        Ok(Self {
            model: model.clone(),
            store,
            channels: channels.to_vec(),
            index,
            head_weight,
            head_bias,
        })
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.c != self.channels.len() || grid.l != self.model.cfg.tokenizer.patch_len {
            return Err(Error::structural(format!(
                "reconstructor built for {} channels of length {}, segment has {} of length {}",
                self.channels.len(),
                self.model.cfg.tokenizer.patch_len,
                grid.c,
                grid.l
            )));
        }
        Ok(())
    }

    /// Reconstructed patches `[slots, L]` of the given sequence slots from
    /// the encoder embeddings `z`.
    fn decode<'p>(&self, g: &mut Graph<'p, f32>, z: Var, slots: &[usize]) -> Result<Var> {
        let zs = g.gather_rows(z, slots.to_vec())?;
        let h = self.model.predictor.forward(g, zs)?;
        let (w, b) = (g.param(self.head_weight), g.param(self.head_bias));
        g.linear(h, w, b)
    }

    /// `L_target + α·L_obs`. The observed term is skipped entirely when
    /// `alpha` is zero or nothing is observed.
    pub fn loss<'p>(&self, g: &mut Graph<'p, f32>, grid: &PatchGrid, plan: &MaskPlan, alpha: f64) -> Result<ReconLoss> {
        self.check_grid(grid)?;
        if plan.is_empty() {
            return Err(Error::LossUndefined("mask plan selects no tokens".into()));
        }
        let z = self.model.embed_masked(g, &self.model.target, grid, &self.index, plan)?;
        let masked = plan.masked_slots(grid.n);
        let pred = self.decode(g, z, &masked)?;
        let truth = g.input(vec![masked.len(), grid.l], patch_rows(grid, &masked))?;
        let target = g.mse_rows(pred, truth)?;
        let observed_slots = plan.observed_slots(grid.n);
        if alpha == 0.0 || observed_slots.is_empty() {
            return Ok(ReconLoss {
                total: target,
                target,
                observed: None,
            });
        }
        let pred = self.decode(g, z, &observed_slots)?;
        let truth = g.input(vec![observed_slots.len(), grid.l], patch_rows(grid, &observed_slots))?;
        let observed = g.mse_rows(pred, truth)?;
        let weighted = g.scale(observed, alpha as f32)?;
        let total = g.add(target, weighted)?;
        Ok(ReconLoss {
            total,
            target,
            observed: Some(observed),
        })
    }

    /// Reconstructions `[masked slots, L]` of the masked channels of `grid`,
    /// computed without the masked channels' own patches.
    pub fn reconstruct(&self, grid: &PatchGrid, plan: &MaskPlan) -> Result<Vec<f32>> {
        self.check_grid(grid)?;
        let mut g = Graph::inference(&self.store);
        let z = self.model.embed_masked(&mut g, &self.model.target, grid, &self.index, plan)?;
        let y = self.decode(&mut g, z, &plan.masked_slots(grid.n))?;
        Ok(g.value(y).to_vec())
    }

    fn plan(&self, seed: u64, fraction: f64) -> Result<MaskPlan> {
        select_targets(
            &self.channels,
            self.model.cfg.mask_scale,
            fraction,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }
}

/// Finetunes predictor, encoder, spatial tables and mask token (backbone
/// rate) with a new linear head (head rate) on `L_target + α·L_obs`, with
/// plans at the model's masking scale. Early stopping uses the negated
/// validation loss under fixed plans.
pub fn recon_finetune(
    model: &Model,
    store: &ParamStore<f32>,
    channels: &[ChannelMeta],
    train: &[&PatchGrid],
    valid: &[&PatchGrid],
    cfg: &FinetuneCfg,
) -> Result<(Reconstructor, FitReport)> {
    let mut rec = Reconstructor::new(model, store, channels, cfg)?;
    let mut params = std::mem::take(&mut rec.store);
    let pretrained_extra: Vec<ParamId> = model
        .predictor
        .param_ids()
        .into_iter()
        .chain([model.mask_token])
        .collect();
    let groups: Vec<Option<LrGroup>> = params
        .ids()
        .map(|id| {
            if id == rec.head_weight || id == rec.head_bias {
                Some(LrGroup::Head)
            } else if pretrained_extra.contains(&id) || is_backbone(model, &params, id, cfg.freeze_tokenizer) {
                Some(LrGroup::Backbone)
            } else {
                None
            }
        })
        .collect();
    let valid_plans = valid
        .iter()
        .enumerate()
        .map(|(i, _)| rec.plan(derive_seed(cfg.seed, u64::MAX, i as u64), cfg.mask_fraction))
        .collect::<Result<Vec<_>>>()?;

    let report = {
        let r = &rec;
        fit(
            &mut params,
            cfg,
            train.len(),
            |g, item, epoch| {
                let plan = r.plan(derive_seed(cfg.seed, epoch as u64, item as u64), cfg.mask_fraction)?;
                if plan.is_empty() {
                    return Ok(None);
                }
                Ok(Some(r.loss(g, train[item], &plan, cfg.alpha(epoch))?.total))
            },
            |params, epoch| {
                let alpha = cfg.alpha(epoch);
                let losses = valid
                    .par_iter()
                    .zip(&valid_plans)
                    .filter(|(_, p)| !p.is_empty())
                    .map(|(grid, plan)| {
                        let mut g = Graph::inference(params);
                        let l = r.loss(&mut g, grid, plan, alpha)?;
                        Ok(g.scalar(l.total) as f64)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                if losses.is_empty() {
                    return Ok(0.0);
                }
                Ok(-losses.iter().sum::<f64>() / losses.len() as f64)
            },
            |id| groups[id.index()],
        )?
    };
    rec.store = params;
    Ok((rec, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel_id: String,
    pub mse: f64,
    /// NaN when the channel's true patches are constant.
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconEval {
    pub channels: Vec<ChannelScore>,
    pub mean_mse: f64,
    /// Mean over channels with a defined R².
    pub mean_r2: f64,
}

/// Masks one channel at a time across every patch of every segment and
/// scores its reconstruction against the true z-scored patches.
pub fn recon_eval(rec: &Reconstructor, grids: &[&PatchGrid]) -> Result<ReconEval> {
    if grids.is_empty() {
        return Err(Error::validation("reconstruction evaluation needs at least one segment"));
    }
    let c = rec.channels.len();
    let channels = (0..c)
        .into_par_iter()
        .map(|j| {
            let plan = MaskPlan::channels(Scale::Channels, c, vec![j])?;
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for grid in grids {
                pred.extend(rec.reconstruct(grid, &plan)?.into_iter().map(f64::from));
                truth.extend(patch_rows(grid, &plan.masked_slots(grid.n)).into_iter().map(f64::from));
            }
            Ok(ChannelScore {
                channel_id: rec.channels[j].channel_id.clone(),
                mse: mse(&pred, &truth)?,
                r2: r_squared(&pred, &truth).unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_mse = channels.iter().map(|s| s.mse).sum::<f64>() / c as f64;
    let defined: Vec<f64> = channels.iter().map(|s| s.r2).filter(|r| r.is_finite()).collect();
    let mean_r2 = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(ReconEval {
        channels,
        mean_mse,
        mean_r2,
    })
}
