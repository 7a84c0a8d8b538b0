//! Learnable spatial embedding tables. A channel's encoding is the sum of
//! one row per vocabulary dimension.

use rand::Rng;

use crate::data::{ChannelMeta, SpatialVocab};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Var};
use crate::tokenizer::normal_tensor;

pub const SPATIAL_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct SpatialEmbedding {
    pub vocab: SpatialVocab,
    pub d_model: usize,
    tables: Vec<ParamId>,
}

/// Row index of every channel in every table: `rows[dim][channel]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialIndex {
    pub rows: Vec<Vec<usize>>,
}

impl SpatialIndex {
    pub fn n_channels(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Same index with channels reordered: new channel `k` is old `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            rows: self.rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect(),
        }
    }
}

impl SpatialEmbedding {
    pub fn new<R: Rng>(vocab: SpatialVocab, d_model: usize, store: &mut ParamStore<f32>, prefix: &str, rng: &mut R) -> Result<Self> {
        let tables = (0..vocab.n_dims())
            .map(|dim| {
                store.add(
                    format!("{prefix}.{}.table{dim}", vocab.scale),
                    normal_tensor(rng, vec![vocab.size(dim), d_model], SPATIAL_INIT_STD),
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vocab, d_model, tables })
    }

    pub fn tables(&self) -> &[ParamId] {
        &self.tables
    }

    pub fn index(&self, channels: &[ChannelMeta]) -> Result<SpatialIndex> {
        let mut rows = vec![Vec::with_capacity(channels.len()); self.vocab.n_dims()];
        for ch in channels {
            for (dim, r) in self.vocab.lookup(ch)?.into_iter().enumerate() {
                rows[dim].push(r);
            }
        }
        Ok(SpatialIndex { rows })
    }

    /// Per-channel encodings `[C, d]`.
    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, index: &SpatialIndex) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (table, rows) in self.tables.iter().zip(&index.rows) {
            let t = g.param(*table);
            let e = g.gather_rows(t, rows.clone())?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        acc.ok_or_else(|| Error::structural("spatial embedding has no tables"))
    }

    /// Encoding of a single channel, read directly from the store.
    pub fn encode_channel(&self, store: &ParamStore<f32>, ch: &ChannelMeta) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; self.d_model];
        for (table, r) in self.tables.iter().zip(self.vocab.lookup(ch)?) {
            let row = &store.tensor(*table).data()[r * self.d_model..(r + 1) * self.d_model];
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        Ok(out)
    }
}

/// `S = B + E`, with tokens `[n·C, d]` in patch-major order and encodings
/// `[C, d]`: every token of channel `j` receives row `j`.
pub fn add_spatial<T: Real>(g: &mut Graph<'_, T>, tokens: Var, encodings: Var) -> Result<Var> {
    let (ts, es) = (g.shape(tokens).to_vec(), g.shape(encodings).to_vec());
    if ts.len() != 2 || es.len() != 2 || ts[1] != es[1] || ts[0] % es[0] != 0 {
        return Err(Error::structural(format!(
            "cannot add encodings {es:?} to tokens {ts:?}"
        )));
    }
    let c = es[0];
    let tiled = g.gather_rows(encodings, (0..ts[0]).map(|s| s % c).collect())?;
    g.add(tokens, tiled)
}
