use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{alpha_schedule, AdamWConfig, Gradients, Graph, OptimState, ParamId, ParamStore, ScheduleCfg, Var};
use crate::pretrain::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneCfg {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Learning rate of pretrained parts (spatial tables, encoder, and for
    /// reconstruction the predictor and mask token).
    pub lr_backbone: f64,
    /// Learning rate of the freshly initialized head.
    pub lr_head: f64,
    pub warmup_epochs: usize,
    pub decay_gamma: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub freeze_tokenizer: bool,
    pub alpha_flat_epochs: usize,
    /// Target masked fraction of reconstruction finetuning plans.
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for FinetuneCfg {
    fn default() -> Self {
        Self::probe()
    }
}

impl FinetuneCfg {
    pub fn probe() -> Self {
        Self {
            epochs: 30,
            patience: 15,
            batch_size: 128,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            warmup_epochs: 5,
            decay_gamma: 0.99,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            freeze_tokenizer: true,
            alpha_flat_epochs: 10,
            mask_fraction: 0.30,
            seed: 0,
        }
    }

    pub fn reconstruction() -> Self {
        Self {
            epochs: 20,
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            ..Self::probe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("finetuning needs at least one epoch and a non-empty batch".into()));
        }
        if !(self.lr_backbone >= 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config(format!(
                "invalid finetuning learning rates {} / {}",
                self.lr_backbone, self.lr_head
            )));
        }
        Ok(())
    }

    /// Schedule multiplier for `epoch` (warmup then exponential decay).
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        ScheduleCfg {
            target_lr: 1.0,
            warmup_epochs: self.warmup_epochs,
            decay_gamma: self.decay_gamma,
        }
        .lr(epoch)
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        alpha_schedule(epoch, self.epochs, self.alpha_flat_epochs)
    }
}

/// Which learning rate a parameter trains at, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub train_loss: Vec<f64>,
    pub valid_score: Vec<f64>,
}

/// Mini-batch AdamW over `n_train` items with early stopping on
/// `valid_score` (higher is better). Parameters are restored to the best
/// epoch before returning.
///
/// `item_loss(graph, item, epoch)` builds the loss of one training item on
/// a graph in training mode, or `None` to skip the item. Gradients are
/// averaged over the items that produced a loss.
pub(crate) fn fit<L, V, G>(
    store: &mut ParamStore<f32>,
    cfg: &FinetuneCfg,
    n_train: usize,
    item_loss: L,
    mut valid_score: V,
    group: G,
) -> Result<FitReport>
where
    L: for<'p> Fn(&mut Graph<'p, f32>, usize, usize) -> Result<Option<Var>> + Sync,
    V: FnMut(&ParamStore<f32>, usize) -> Result<f64>,
    G: Fn(ParamId) -> Option<LrGroup>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::EmptyTrainingSet("no finetuning segments".into()));
    }
    let mut opt = OptimState::new(
        store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let groups: Vec<Option<LrGroup>> = store.ids().map(&group).collect();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut report = FitReport {
        epochs_run: 0,
        best_epoch: 0,
        best_score: f64::NEG_INFINITY,
        train_loss: Vec::new(),
        valid_score: Vec::new(),
    };
    let width = rayon::current_num_threads().max(1);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        let factor = cfg.lr_factor(epoch);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut total = Gradients::empty(store.len());
            let mut used = 0usize;
            let frozen: &ParamStore<f32> = store;
            for (c, chunk) in batch.chunks(width).enumerate() {
                let results = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(k, &item)| {
                        let seed = derive_seed(cfg.seed ^ 0x5EED, step, (c * width + k) as u64);
                        let mut g = Graph::training(frozen, seed);
                        match item_loss(&mut g, item, epoch)? {
                            Some(loss) => Ok(Some((g.scalar(loss) as f64, g.backward(loss)?))),
                            None => Ok(None),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (l, grads) in results.into_iter().flatten() {
                    loss_sum += l;
                    loss_n += 1;
                    total.accumulate(&grads, 1.0);
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            total.scale(1.0 / used as f32);
            total.clip_global_norm(cfg.grad_clip);
            opt.step(store, &total, |id| {
                groups[id.index()].map(|g| {
                    factor
                        * match g {
                            LrGroup::Backbone => cfg.lr_backbone,
                            LrGroup::Head => cfg.lr_head,
                        }
                })
            })?;
            step += 1;
        }
        report.train_loss.push(loss_sum / loss_n.max(1) as f64);
        let score = valid_score(store, epoch)?;
        report.valid_score.push(score);
        report.epochs_run = epoch + 1;
        log::debug!("finetune epoch {epoch}: train loss {:.5}, valid {score:.5}", loss_sum / loss_n.max(1) as f64);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, store.clone()));
        } else if best.as_ref().is_some_and(|(e, _, _)| epoch - e >= cfg.patience) {
            break;
        }
    }
    if let Some((epoch, score, params)) = best {
        *store = params;
        report.best_epoch = epoch;
        report.best_score = score;
    }
    Ok(report)
}
