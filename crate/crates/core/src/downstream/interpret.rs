use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ChannelMeta;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelWeight {
    pub patch_index: usize,
    pub parcel_id: String,
    pub normalized_weight: f64,
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order
/// statistics at position `q/100 · (k − 1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return Err(Error::validation(format!(
            "percentile {q} of {} values",
            values.len()
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Per-(patch, parcel) importance from pooling weights `w[n·C]`: absolute
/// weights of a parcel's channels pooled by their 75th percentile, then
/// min-max normalized over the whole table (all ones when constant).
/// Rows are ordered by patch, then parcel id.
pub fn interpret_weights(w: &[f64], n_patches: usize, channels: &[ChannelMeta]) -> Result<Vec<ParcelWeight>> {
    let c = channels.len();
    if c == 0 || w.len() != n_patches * c {
        return Err(Error::structural(format!(
            "{} pooling weights for {n_patches} patches of {c} channels",
            w.len()
        )));
    }
    let mut parcels: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, ch) in channels.iter().enumerate() {
        parcels.entry(ch.parcel_id.as_str()).or_default().push(j);
    }
    let mut rows = Vec::with_capacity(n_patches * parcels.len());
    for i in 0..n_patches {
        for (parcel, members) in &parcels {
            let vals: Vec<f64> = members.iter().map(|&j| w[i * c + j].abs()).collect();
            rows.push(ParcelWeight {
                patch_index: i,
                parcel_id: parcel.to_string(),
                normalized_weight: percentile(&vals, 75.0)?,
            });
        }
    }
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.normalized_weight), hi.max(r.normalized_weight))
        });
    for r in &mut rows {
        r.normalized_weight = if hi > lo {
            (r.normalized_weight - lo) / (hi - lo)
        } else {
            1.0
        };
    }
    Ok(rows)
}

/// Combines per-session tables, weighting each session by its score (for
/// example its classification AUC). Entries present in only some sessions
/// average over those sessions.
pub fn weighted_mean_maps(maps: &[(f64, &[ParcelWeight])]) -> Vec<ParcelWeight> {
    let mut acc: BTreeMap<(usize, &str), (f64, f64)> = BTreeMap::new();
    for (weight, table) in maps {
        for r in table.iter() {
            let e = acc.entry((r.patch_index, r.parcel_id.as_str())).or_default();
            e.0 += weight * r.normalized_weight;
            e.1 += weight;
        }
    }
    acc.into_iter()
        .map(|((patch_index, parcel), (num, den))| ParcelWeight {
            patch_index,
            parcel_id: parcel.to_string(),
            normalized_weight: if den != 0.0 { num / den } else { f64::NAN },
        })
        .collect()
}
