use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible LPI coordinate; coordinates live in `0..=LPI_MAX`.
pub const LPI_MAX: i32 = 200;

/// Granularity at which spatial categories are defined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Channels,
    Parcels,
    Lobes,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Channels, Scale::Parcels, Scale::Lobes];

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Channels => "channels",
            Scale::Parcels => "parcels",
            Scale::Lobes => "lobes",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channels" | "channel" => Ok(Scale::Channels),
            "parcels" | "parcel" => Ok(Scale::Parcels),
            "lobes" | "lobe" => Ok(Scale::Lobes),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (expected channels, parcels or lobes)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub channel_id: String,
    /// Integer (left, posterior, inferior) position, each in `0..=200`.
    pub lpi: [i32; 3],
    pub parcel_id: String,
    pub lobe_id: String,
}

impl ChannelMeta {
    /// Category of this channel when masking at `scale`. At channel scale
    /// each channel is its own category.
    pub fn category(&self, scale: Scale) -> &str {
        match scale {
            Scale::Channels => &self.channel_id,
            Scale::Parcels => &self.parcel_id,
            Scale::Lobes => &self.lobe_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub subject_id: String,
    pub session_id: String,
    pub sample_rate_hz: f64,
    /// Canonical channel order for every array of this session.
    pub channels: Vec<ChannelMeta>,
}

impl SessionMeta {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(Error::validation(format!(
                "session `{}`: sample rate must be positive, got {}",
                self.session_id, self.sample_rate_hz
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::validation(format!("session `{}` has no channels", self.session_id)));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if !seen.insert(ch.channel_id.as_str()) {
                return Err(Error::validation(format!(
                    "session `{}`: duplicate channel id `{}`",
                    self.session_id, ch.channel_id
                )));
            }
            if ch.lpi.iter().any(|&c| !(0..=LPI_MAX).contains(&c)) {
                return Err(Error::validation(format!(
                    "channel `{}`: LPI coordinates {:?} outside [0, {LPI_MAX}]",
                    ch.channel_id, ch.lpi
                )));
            }
            if ch.parcel_id.is_empty() || ch.lobe_id.is_empty() {
                return Err(Error::validation(format!(
                    "channel `{}`: parcel and lobe ids must be non-empty",
                    ch.channel_id
                )));
            }
        }
        Ok(())
    }
}

/// Channel-major multichannel recording: all samples of channel 0, then
/// channel 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub n_channels: usize,
    pub n_samples: usize,
    pub data: Vec<f32>,
}

impl Signal {
    pub fn new(n_channels: usize, n_samples: usize, data: Vec<f32>) -> Result<Self> {
        if n_channels * n_samples != data.len() {
            return Err(Error::structural(format!(
                "signal of {n_channels} x {n_samples} needs {} values, got {}",
                n_channels * n_samples,
                data.len()
            )));
        }
        Ok(Self {
            n_channels,
            n_samples,
            data,
        })
    }

    pub fn channel(&self, j: usize) -> &[f32] {
        &self.data[j * self.n_samples..(j + 1) * self.n_samples]
    }
}
