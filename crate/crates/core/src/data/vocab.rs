use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, Scale, SessionMeta, LPI_MAX};
use crate::error::{Error, Result};

/// Per-dimension category lists of one spatial scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialVocab {
    pub scale: Scale,
    /// Parcel or lobe ids, sorted. Empty at channel scale, whose three
    /// dimensions are the coordinate values `0..=200`.
    pub categories: Vec<String>,
}

impl SpatialVocab {
    /// Number of embedding tables.
    pub fn n_dims(&self) -> usize {
        match self.scale {
            Scale::Channels => 3,
            _ => 1,
        }
    }

    /// Table size of dimension `dim`.
    pub fn size(&self, dim: usize) -> usize {
        match self.scale {
            Scale::Channels => {
                debug_assert!(dim < 3);
                LPI_MAX as usize + 1
            }
            _ => self.categories.len(),
        }
    }

    /// Row index in each dimension's table for `ch`.
    pub fn lookup(&self, ch: &ChannelMeta) -> Result<Vec<usize>> {
        match self.scale {
            Scale::Channels => ch
                .lpi
                .iter()
                .enumerate()
                .map(|(dim, &c)| {
                    if (0..=LPI_MAX).contains(&c) {
                        Ok(c as usize)
                    } else {
                        Err(self.missing(ch, dim))
                    }
                })
                .collect(),
            scale => {
                let key = ch.category(scale);
                self.categories
                    .binary_search_by(|c| c.as_str().cmp(key))
                    .map(|i| vec![i])
                    .map_err(|_| self.missing(ch, 0))
            }
        }
    }

    fn missing(&self, ch: &ChannelMeta, dim: usize) -> Error {
        Error::Vocabulary {
            channel: ch.channel_id.clone(),
            dim,
            scale: self.scale.to_string(),
        }
    }
}

pub fn build_spatial_vocab(sessions: &[&SessionMeta], scale: Scale) -> Result<SpatialVocab> {
    if sessions.is_empty() {
        return Err(Error::validation("spatial vocabulary needs at least one session"));
    }
    for s in sessions {
        s.validate()?;
    }
    let categories = match scale {
        Scale::Channels => Vec::new(),
        _ => sessions
            .iter()
            .flat_map(|s| s.channels.iter().map(|c| c.category(scale).to_string()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    Ok(SpatialVocab { scale, categories })
}
