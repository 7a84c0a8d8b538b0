//! Linear probe: a learned weighted sum over all token embeddings of a
//! segment followed by a logistic head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ChannelMeta, PatchGrid};
use crate::downstream::finetune::{fit, FinetuneCfg, FitReport, LrGroup};
use crate::downstream::metrics::auc;
use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::pretrain::{patch_rows, Model};
use crate::spatial::SpatialIndex;
use crate::tokenizer::normal_tensor;

/// Segments with binary labels.
#[derive(Clone, Debug, Default)]
pub struct Labeled<'a> {
    pub grids: Vec<&'a PatchGrid>,
    pub labels: Vec<u8>,
}

impl<'a> Labeled<'a> {
    pub fn new(grids: Vec<&'a PatchGrid>, labels: Vec<u8>) -> Result<Self> {
        if grids.len() != labels.len() {
            return Err(Error::structural(format!("{} segments with {} labels", grids.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::validation(format!("labels must be 0 or 1, found {l}")));
        }
        Ok(Self { grids, labels })
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}

/// `Σ_s w[s] · z[s]` for token embeddings `z[n·C, d]`.
pub fn pooled_embedding(z: &[f32], w: &[f32], d: usize) -> Result<Vec<f32>> {
    if d == 0 || z.len() != w.len() * d {
        return Err(Error::structural(format!(
            "{} pooling weights for {} embedding values of width {d}",
            w.len(),
            z.len()
        )));
    }
    let mut out = vec![0.0f32; d];
    for (row, &ws) in z.chunks_exact(d).zip(w) {
        out.iter_mut().zip(row).for_each(|(o, &v)| *o += ws * v);
    }
    Ok(out)
}

/// Spatial index of a session's channels; channels missing from the
/// model's vocabulary are a configuration problem downstream.
pub(crate) fn downstream_index(model: &Model, channels: &[ChannelMeta]) -> Result<SpatialIndex> {
    model.spatial.index(channels).map_err(|e| match e {
        Error::Vocabulary { .. } => Error::Config(format!("model vocabulary does not cover the session: {e}")),
        other => other,
    })
}

/// Pretrained parts updated during finetuning: spatial tables and encoder,
/// plus the target tokenizer when it is not frozen.
pub(crate) fn is_backbone(model: &Model, store: &ParamStore<f32>, id: ParamId, freeze_tokenizer: bool) -> bool {
    let name = store.name(id);
    name.starts_with("spatial.")
        || name.starts_with("encoder.")
        || (!freeze_tokenizer && model.target.param_ids().contains(&id))
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub index: SpatialIndex,
    pub n_patches: usize,
    pub pool: ParamId,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub freeze_tokenizer: bool,
}

impl Probe {
    /// Attaches fresh pooling weights (uniform `1/(n·C)`) and a logistic
    /// head to a copy of the model parameters.
    pub fn new(model: &Model, store: &ParamStore<f32>, channels: &[ChannelMeta], n_patches: usize, cfg: &FinetuneCfg) -> Result<Self> {
        let index = downstream_index(model, channels)?;
        let slots = n_patches * channels.len();
        if slots == 0 {
            return Err(Error::structural("probe needs at least one patch and one channel"));
        }
        let d = model.cfg.d_model();
        let mut store = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = store.add("probe.pool", Tensor::full(vec![slots], 1.0 / slots as f32), true)?;
        let head_weight = store.add("probe.head.weight", normal_tensor(&mut rng, vec![d, 1], 1.0 / (d as f64).sqrt()), true)?;
        let head_bias = store.add("probe.head.bias", Tensor::zeros(vec![1]), true)?;
        for id in model.target.param_ids() {
            store.set_trainable(id, !cfg.freeze_tokenizer);
        }
        Ok(Self {
            model: model.clone(),
            store,
            index,
            n_patches,
            pool,
            head_weight,
            head_bias,
            freeze_tokenizer: cfg.freeze_tokenizer,
        })
    }

    pub fn pool_weights(&self) -> &[f32] {
        self.store.tensor(self.pool).data()
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.n != self.n_patches || grid.c != self.index.n_channels() {
            return Err(Error::structural(format!(
                "probe built for {}x{} patches, segment has {}x{}",
                self.n_patches,
                self.index.n_channels(),
                grid.n,
                grid.c
            )));
        }
        Ok(())
    }

    /// Target-tokenizer tokens `[n·C, d]` of every slot of `grid`.
    pub fn tokens(&self, store: &ParamStore<f32>, grid: &PatchGrid) -> Result<Vec<f32>> {
        self.check_grid(grid)?;
        let slots: Vec<usize> = (0..grid.n * grid.c).collect();
        self.model.target.tokenize(store, &patch_rows(grid, &slots))
    }

    /// Logit `[1, 1]` of one segment. `tokens` are precomputed target tokens
    /// when the tokenizer is frozen; otherwise the tokenizer runs in-graph.
    pub fn logit<'p>(&self, g: &mut Graph<'p, f32>, grid: &PatchGrid, tokens: Option<&[f32]>) -> Result<Var> {
        self.check_grid(grid)?;
        let d = self.model.cfg.d_model();
        let slots = grid.n * grid.c;
        let b = match tokens {
            Some(t) => g.input(vec![slots, d], t.to_vec())?,
            None => {
                let all: Vec<usize> = (0..slots).collect();
                let p = g.input(vec![slots, grid.l], patch_rows(grid, &all))?;
                self.model.target.forward(g, p)?
            }
        };
        let z = self.model.embed_tokens(g, b, &self.index, grid.n)?;
        let w = g.param(self.pool);
        let w = g.reshape(w, vec![1, slots])?;
        let pooled = g.matmul(w, z)?;
        let (hw, hb) = (g.param(self.head_weight), g.param(self.head_bias));
        g.linear(pooled, hw, hb)
    }

    /// Inference-mode logits of `grids`.
    pub fn logits(&self, grids: &[&PatchGrid]) -> Result<Vec<f64>> {
        self.logits_with(&self.store, grids)
    }

    fn logits_with(&self, store: &ParamStore<f32>, grids: &[&PatchGrid]) -> Result<Vec<f64>> {
        grids
            .par_iter()
            .map(|grid| {
                let mut g = Graph::inference(store);
                let y = self.logit(&mut g, grid, None)?;
                Ok(g.scalar(y) as f64)
            })
            .collect()
    }

    /// Sigmoid scores of `grids`.
    pub fn scores(&self, grids: &[&PatchGrid]) -> Result<Vec<f64>> {
        Ok(self.logits(grids)?.into_iter().map(sigmoid).collect())
    }
}

fn check_labels(set: &Labeled, what: &str) -> Result<()> {
    let pos = set.labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == set.len() {
        return Err(Error::DegenerateLabels(format!(
            "{what} set of {} segments has a single class",
            set.len()
        )));
    }
    Ok(())
}

fn mean_bce(logits: &[f64], labels: &[u8]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - y as f64 * z + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / logits.len().max(1) as f64
}

/// Trains pooling weights and head (head rate) together with the spatial
/// tables and encoder (backbone rate) on binary cross-entropy, keeping the
/// parameters of the epoch with the best validation AUC.
///
/// When the validation set holds a single class its AUC is undefined and
/// the negated validation cross-entropy is used instead.
pub fn probe_train(
    model: &Model,
    store: &ParamStore<f32>,
    channels: &[ChannelMeta],
    train: &Labeled,
    valid: &Labeled,
    cfg: &FinetuneCfg,
) -> Result<(Probe, FitReport)> {
    check_labels(train, "training")?;
    let n = train.grids[0].n;
    let mut probe = Probe::new(model, store, channels, n, cfg)?;
    let cache: Option<Vec<Vec<f32>>> = if probe.freeze_tokenizer {
        Some(
            train
                .grids
                .par_iter()
                .map(|g| probe.tokens(&probe.store, g))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let valid_auc_defined = !valid.is_empty() && check_labels(valid, "validation").is_ok();
    let frozen = probe.freeze_tokenizer;
    let mut params = std::mem::take(&mut probe.store);
    let groups: Vec<Option<LrGroup>> = params
        .ids()
        .map(|id| {
            if [probe.pool, probe.head_weight, probe.head_bias].contains(&id) {
                Some(LrGroup::Head)
            } else if is_backbone(model, &params, id, frozen) {
                Some(LrGroup::Backbone)
            } else {
                None
            }
        })
        .collect();

    let report = {
        let p = &probe;
        fit(
            &mut params,
            cfg,
            train.len(),
            |g, item, _epoch| {
                let tokens = cache.as_ref().map(|c| c[item].as_slice());
                let z = p.logit(g, train.grids[item], tokens)?;
                g.bce_with_logits(z, vec![train.labels[item] as f32]).map(Some)
            },
            |params, _epoch| {
                if valid.is_empty() {
                    return Ok(0.0);
                }
                let logits = p.logits_with(params, &valid.grids)?;
                if valid_auc_defined {
                    auc(&logits, &valid.labels)
                } else {
                    Ok(-mean_bce(&logits, &valid.labels))
                }
            },
            |id| groups[id.index()],
        )?
    };
    probe.store = params;
    Ok((probe, report))
}

/// ROC-AUC of the probe's sigmoid scores on `test`.
pub fn probe_eval(probe: &Probe, test: &Labeled) -> Result<f64> {
    auc(&probe.scores(&test.grids)?, &test.labels)
}
