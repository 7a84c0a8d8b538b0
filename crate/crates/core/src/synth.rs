//! Synthetic multiregional recordings with a lobe → parcel → channel latent
//! hierarchy and amplitude-modulated binary events.
//!
//! Each lobe carries a slow latent (sum of sinusoids in the lobe band). A
//! parcel's latent is its lobe's latent plus a parcel-band oscillation; during
//! events the latents of the event parcels are multiplied by `event_gain`. A
//! channel is its parcel latent times a per-channel gain, plus a channel-band
//! oscillation, plus white noise scaled to the requested SNR.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, Segment, SessionMeta, Signal, LPI_MAX};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub subject_id: String,
    pub session_id: String,
    pub n_channels: usize,
    pub n_parcels: usize,
    pub n_lobes: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub seed: u64,
    /// Structured-signal power over noise power, in dB. `+inf` disables noise.
    pub snr_db: f64,
    /// Parcels whose latent amplitude is scaled during events; `None` selects
    /// the parcels of lobe 0.
    pub event_parcels: Option<Vec<usize>>,
    pub event_gain: f64,
    /// Range of event (and inter-event) durations in seconds.
    pub event_duration_s: (f64, f64),
    pub lobe_band_hz: (f64, f64),
    pub parcel_band_hz: (f64, f64),
    pub channel_band_hz: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            subject_id: "sub-00".into(),
            session_id: "sess-00".into(),
            n_channels: 64,
            n_parcels: 8,
            n_lobes: 4,
            sample_rate_hz: 2048.0,
            duration_s: 180.0,
            seed: 0,
            snr_db: 6.0,
            event_parcels: None,
            event_gain: 2.0,
            event_duration_s: (3.0, 9.0),
            lobe_band_hz: (1.0, 4.0),
            parcel_band_hz: (4.0, 12.0),
            channel_band_hz: (12.0, 40.0),
        }
    }
}

impl GenConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn lobe_of_parcel(&self, p: usize) -> usize {
        p * self.n_lobes / self.n_parcels
    }

    pub fn resolved_event_parcels(&self) -> Vec<usize> {
        match &self.event_parcels {
            Some(p) => p.clone(),
            None => (0..self.n_parcels).filter(|&p| self.lobe_of_parcel(p) == 0).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if self.n_lobes == 0 || self.n_lobes > self.n_parcels || self.n_parcels > self.n_channels {
            return fail(format!(
                "need 1 <= n_lobes ({}) <= n_parcels ({}) <= n_channels ({})",
                self.n_lobes, self.n_parcels, self.n_channels
            ));
        }
        if self.n_parcels > 64 {
            return fail(format!("at most 64 parcels fit the placement lattice, got {}", self.n_parcels));
        }
        if !(self.sample_rate_hz > 0.0) || !(self.duration_s > 0.0) || self.n_samples() == 0 {
            return fail("sample rate and duration must be positive".into());
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return fail(format!("snr_db must be a number or +inf, got {}", self.snr_db));
        }
        if !(self.event_gain > 0.0 && self.event_gain.is_finite()) {
            return fail(format!("event_gain must be positive, got {}", self.event_gain));
        }
        let (lo, hi) = self.event_duration_s;
        if !(lo > 0.0 && hi >= lo) {
            return fail(format!("event duration range {lo}..{hi} is invalid"));
        }
        if let Some(p) = &self.event_parcels {
            if p.iter().any(|&x| x >= self.n_parcels) {
                return fail(format!("event parcel index out of range: {p:?}"));
            }
        }
        let nyquist = self.sample_rate_hz / 2.0;
        for (name, (a, b)) in [
            ("lobe", self.lobe_band_hz),
            ("parcel", self.parcel_band_hz),
            ("channel", self.channel_band_hz),
        ] {
            if !(a > 0.0 && b >= a && b < nyquist) {
                return fail(format!("{name} band {a}..{b} Hz invalid at {} Hz sampling", self.sample_rate_hz));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub channel_parcel: Vec<usize>,
    pub channel_lobe: Vec<usize>,
    pub parcel_lobe: Vec<usize>,
    pub event_parcels: Vec<usize>,
    /// Half-open sample ranges during which the event is active.
    pub event_intervals: Vec<(usize, usize)>,
    #[serde(skip)]
    pub lobe_latents: Vec<Vec<f32>>,
    #[serde(skip)]
    pub parcel_latents: Vec<Vec<f32>>,
}

impl GroundTruth {
    /// Fraction of samples in `[start, start+len)` covered by an event.
    pub fn activity(&self, start: usize, len: usize) -> f64 {
        let end = start + len;
        let covered: usize = self
            .event_intervals
            .iter()
            .map(|&(a, b)| b.min(end).saturating_sub(a.max(start)))
            .sum();
        covered as f64 / len as f64
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.event_intervals.iter().any(|&(a, b)| a <= t && t < b)
    }
}

fn lattice_site(p: usize) -> [i32; 3] {
    let p = p as i32;
    [30 + 40 * (p % 4), 30 + 40 * ((p / 4) % 4), 30 + 40 * (p / 16)]
}

/// Sum of `k` sinusoids with frequencies drawn from `band`, scaled to `rms`.
fn oscillation(rng: &mut ChaCha8Rng, band: (f64, f64), k: usize, rms: f64, n: usize, fs: f64) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64)> = (0..k)
        .map(|_| {
            let f = rng.random_range(band.0..=band.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.5..1.0);
            (f, phase, amp)
        })
        .collect();
    let mut x: Vec<f64> = (0..n)
        .map(|t| {
            let tt = t as f64 / fs;
            comps.iter().map(|&(f, ph, a)| a * (2.0 * PI * f * tt + ph).sin()).sum()
        })
        .collect();
    let cur = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if cur > 0.0 {
        x.iter_mut().for_each(|v| *v *= rms / cur);
    }
    x
}

fn event_schedule(rng: &mut ChaCha8Rng, cfg: &GenConfig, n: usize) -> Vec<(usize, usize)> {
    // Off and on phases come in pairs of equal length, so the duty cycle over
    // a full session is one half up to the final truncated pair.
    let fs = cfg.sample_rate_hz;
    let (lo, hi) = cfg.event_duration_s;
    let on_first = rng.random_bool(0.5);
    let mut intervals = Vec::new();
    let mut t = 0usize;
    while t < n {
        let d = ((rng.random_range(lo..=hi)) * fs).round().max(1.0) as usize;
        let (on_start, next) = if on_first { (t, t + 2 * d) } else { (t + d, t + 2 * d) };
        if on_start < n {
            intervals.push((on_start, (on_start + d).min(n)));
        }
        t = next;
    }
    intervals
}

pub fn generate_session(cfg: &GenConfig) -> Result<(SessionMeta, Signal, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_samples();
    let fs = cfg.sample_rate_hz;
    let c = cfg.n_channels;

    let parcel_lobe: Vec<usize> = (0..cfg.n_parcels).map(|p| cfg.lobe_of_parcel(p)).collect();
    let mut channel_parcel: Vec<usize> = (0..c).map(|k| k * cfg.n_parcels / c).collect();
    for i in (1..c).rev() {
        let j = rng.random_range(0..=i);
        channel_parcel.swap(i, j);
    }
    let channel_lobe: Vec<usize> = channel_parcel.iter().map(|&p| parcel_lobe[p]).collect();

    let channels: Vec<ChannelMeta> = (0..c)
        .map(|j| {
            let site = lattice_site(channel_parcel[j]);
            let mut lpi = [0; 3];
            for (d, s) in site.iter().enumerate() {
                lpi[d] = (s + rng.random_range(-3..=3)).clamp(0, LPI_MAX);
            }
            ChannelMeta {
                channel_id: format!("ch-{j:03}"),
                lpi,
                parcel_id: format!("parcel-{:02}", channel_parcel[j]),
                lobe_id: format!("lobe-{:02}", channel_lobe[j]),
            }
        })
        .collect();

    let intervals = event_schedule(&mut rng, cfg, n);
    let mut indicator = vec![false; n];
    for &(a, b) in &intervals {
        indicator[a..b].iter_mut().for_each(|x| *x = true);
    }
    let event_parcels = cfg.resolved_event_parcels();

    let lobe_lat: Vec<Vec<f64>> = (0..cfg.n_lobes)
        .map(|_| oscillation(&mut rng, cfg.lobe_band_hz, 3, 1.0, n, fs))
        .collect();
    let parcel_lat: Vec<Vec<f64>> = (0..cfg.n_parcels)
        .map(|p| {
            let osc = oscillation(&mut rng, cfg.parcel_band_hz, 2, 0.7, n, fs);
            let gain_on = if event_parcels.contains(&p) { cfg.event_gain } else { 1.0 };
            osc.iter()
                .zip(&lobe_lat[parcel_lobe[p]])
                .zip(&indicator)
                .map(|((o, l), &on)| (o + l) * if on { gain_on } else { 1.0 })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(c * n);
    for j in 0..c {
        let gain = rng.random_range(0.5..1.5);
        let osc = oscillation(&mut rng, cfg.channel_band_hz, 2, 0.5, n, fs);
        let structured: Vec<f64> = parcel_lat[channel_parcel[j]]
            .iter()
            .zip(&osc)
            .map(|(p, o)| gain * p + o)
            .collect();
        let power = structured.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let noise_std = if cfg.snr_db.is_infinite() {
            0.0
        } else {
            (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt()
        };
        data.extend(structured.iter().map(|&s| (s + noise_std * noise.sample(&mut rng)) as f32));
    }

    let meta = SessionMeta {
        subject_id: cfg.subject_id.clone(),
        session_id: cfg.session_id.clone(),
        sample_rate_hz: fs,
        channels,
    };
    let to_f32 = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect();
    let truth = GroundTruth {
        channel_parcel,
        channel_lobe,
        parcel_lobe,
        event_parcels,
        event_intervals: intervals,
        lobe_latents: lobe_lat.iter().map(to_f32).collect(),
        parcel_latents: parcel_lat.iter().map(to_f32).collect(),
    };
    Ok((meta, Signal::new(c, n, data)?, truth))
}

/// Optional rule for discarding ambiguous segments: a segment whose event
/// activity lies strictly between `low` and `high` is dropped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purity {
    pub low: f64,
    pub high: f64,
}

impl Default for Purity {
    fn default() -> Self {
        Self { low: 0.2, high: 0.8 }
    }
}

/// Labels each segment 1 when the event covers more than half its samples.
pub fn label_segments(truth: &GroundTruth, segments: Vec<Segment>, purity: Option<Purity>) -> Vec<Segment> {
    segments
        .into_iter()
        .filter_map(|mut s| {
            let a = truth.activity(s.start_sample, s.len);
            if let Some(p) = purity {
                if a > p.low && a < p.high {
                    return None;
                }
            }
            s.label = Some(u8::from(a > 0.5));
            Some(s)
        })
        .collect()
}
