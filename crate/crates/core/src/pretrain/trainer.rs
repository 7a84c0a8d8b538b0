use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, PatchGrid};
use crate::error::{Error, Result};
use crate::masking::select_targets;
use crate::numerics::{ema_momentum, AdamWConfig, Gradients, OptimState, ParamStore, ScheduleCfg};
use crate::pretrain::{ema_update, Model};
use crate::spatial::SpatialIndex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCfg {
    pub mask_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleCfg,
    pub weight_decay: f64,
    pub ema_target: f64,
    pub ema_warmup_epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        Self {
            mask_fraction: 0.30,
            epochs: 70,
            batch_size: 128,
            schedule: ScheduleCfg::default(),
            weight_decay: 1e-2,
            ema_target: 0.996,
            ema_warmup_epochs: 10,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Segments of one session available for pretraining.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub session_id: String,
    pub channels: Vec<ChannelMeta>,
    pub index: SpatialIndex,
    pub grids: Vec<PatchGrid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub achieved_mask_fraction: f64,
    pub lr: f64,
    pub ema_momentum: f64,
}

/// Mixes a seed with step and item counters into an independent stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model, parameters, optimizer state and position in the epoch sequence.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub opt: OptimState<f32>,
    pub cfg: PretrainCfg,
    pub epoch: usize,
    pub step: u64,
    pub batch_in_epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, store: ParamStore<f32>, cfg: PretrainCfg) -> Self {
        let opt = OptimState::new(
            &store,
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Self {
            model,
            store,
            opt,
            cfg,
            epoch: 0,
            step: 0,
            batch_in_epoch: 0,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Batches of `epoch` as `(session, segment indices)`, each drawn from a
    /// single session, in a seed-determined order.
    pub fn epoch_batches(&self, data: &[TrainSession], epoch: usize) -> Vec<(usize, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64, u64::MAX));
        let bs = self.cfg.batch_size.max(1);
        let mut batches = Vec::new();
        for (s, sess) in data.iter().enumerate() {
            let mut idx: Vec<usize> = (0..sess.grids.len()).collect();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(bs).map(|c| (s, c.to_vec())));
        }
        batches.shuffle(&mut rng);
        batches
    }

    /// Loss gradient of one segment under a freshly sampled mask plan;
    /// `None` when the plan masks nothing.
    fn item_gradient(&self, sess: &TrainSession, grid: &PatchGrid, item_seed: u64) -> Result<(f64, Option<(f64, Gradients<f32>)>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let plan = select_targets(&sess.channels, self.model.cfg.mask_scale, self.cfg.mask_fraction, &mut rng)?;
        let frac = plan.achieved_fraction();
        if plan.is_empty() {
            return Ok((frac, None));
        }
        let mut g = crate::numerics::Graph::training(&self.store, rng.random());
        let loss = self.model.masked_latent_loss(&mut g, grid, &sess.index, &plan)?;
        let value = g.scalar(loss) as f64;
        Ok((frac, Some((value, g.backward(loss)?))))
    }

    /// One optimizer update on `batch` of session `s`, followed by the EMA
    /// update of the target tokenizer.
    pub fn train_step(&mut self, data: &[TrainSession], s: usize, batch: &[usize]) -> Result<StepRecord> {
        let sess = &data[s];
        let width = rayon::current_num_threads().max(1);
        let mut total = Gradients::empty(self.store.len());
        let (mut loss_sum, mut frac_sum, mut used) = (0.0, 0.0, 0usize);
        for (c, chunk) in batch.chunks(width).enumerate() {
            let results = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let item = (c * width + k) as u64;
                    self.item_gradient(sess, &sess.grids[i], derive_seed(self.cfg.seed, self.step, item))
                })
                .collect::<Result<Vec<_>>>()?;
            for (frac, r) in results {
                frac_sum += frac;
                if let Some((loss, grads)) = r {
                    loss_sum += loss;
                    used += 1;
                    total.accumulate(&grads, 1.0);
                }
            }
        }

        let lr = self.cfg.schedule.lr(self.epoch);
        let momentum = ema_momentum(self.epoch, self.cfg.ema_target, self.cfg.ema_warmup_epochs);
        let loss = if used > 0 { loss_sum / used as f64 } else { f64::NAN };
        if used > 0 {
            total.scale(1.0 / used as f32);
            total.clip_global_norm(self.cfg.grad_clip);
            self.opt.step(&mut self.store, &total, |_| Some(lr))?;
            let (t, o) = (self.model.target.param_ids(), self.model.tokenizer.param_ids());
            ema_update(&mut self.store, &t, &o, momentum)?;
        } else {
            log::warn!("step {}: every mask plan in the batch was empty; no update", self.step);
        }
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch,
            loss,
            achieved_mask_fraction: frac_sum / batch.len() as f64,
            lr,
            ema_momentum: momentum,
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until the configured epoch count or `max_steps` further
    /// updates, whichever comes first, calling `on_step` after each update.
    pub fn run(
        &mut self,
        data: &[TrainSession],
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if data.iter().all(|s| s.grids.is_empty()) {
            return Err(Error::EmptyTrainingSet("no pretraining segments".into()));
        }
        let mut records = Vec::new();
        let mut cached: Option<(usize, Vec<(usize, Vec<usize>)>)> = None;
        while !self.is_finished() && max_steps.is_none_or(|m| (records.len() as u64) < m) {
            if cached.as_ref().is_none_or(|(e, _)| *e != self.epoch) {
                cached = Some((self.epoch, self.epoch_batches(data, self.epoch)));
            }
            let batches = &cached.as_ref().expect("cached above").1;
            let (s, batch) = batches[self.batch_in_epoch].clone();
            let rec = self.train_step(data, s, &batch)?;
            on_step(&rec)?;
            records.push(rec);
            self.batch_in_epoch += 1;
            if self.batch_in_epoch >= batches.len() {
                self.batch_in_epoch = 0;
                self.epoch += 1;
            }
        }
        Ok(records)
    }
}

/// Writes `metrics.csv`: `#`-prefixed header comment lines, then the column
/// header and one row per step.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, comments: &[String], append: bool) -> Result<Self> {
        let exists = append && path.is_file();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        let mut out = std::io::BufWriter::new(file);
        if !exists {
            for c in comments {
                for line in c.lines() {
                    writeln!(out, "# {line}")?;
                }
            }
            writeln!(out, "step,epoch,loss,achieved_mask_fraction,lr,ema_momentum")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.loss, r.achieved_mask_fraction, r.lr, r.ema_momentum
        )?;
        self.out.flush()?;
        Ok(())
    }
}
