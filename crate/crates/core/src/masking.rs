//! Spatially atomic masking: whole categories (channel, parcel or lobe) are
//! hidden across every patch, and their slots are refilled with a shared
//! mask token plus the channel's spatial encoding.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{ChannelMeta, Scale};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub scale: Scale,
    /// Masked categories in the order they were accepted.
    pub target_categories: Vec<String>,
    /// Indices of masked channels, ascending.
    pub masked_channels: Vec<usize>,
    pub n_channels: usize,
}

impl MaskPlan {
    /// Plan masking exactly the given channels.
    pub fn channels(scale: Scale, n_channels: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.iter().any(|&j| j >= n_channels) {
            return Err(Error::structural(format!(
                "mask plan references channel outside 0..{n_channels}"
            )));
        }
        Ok(Self {
            scale,
            target_categories: Vec::new(),
            masked_channels: masked,
            n_channels,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.masked_channels.is_empty()
    }

    /// `|masked tokens| / (n·C)`; independent of `n` because whole channels
    /// are masked.
    pub fn achieved_fraction(&self) -> f64 {
        self.masked_channels.len() as f64 / self.n_channels as f64
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.masked_channels.binary_search(&j).is_ok()
    }

    /// Masked sequence slots `i·C + j` for `n` patches, ascending.
    pub fn masked_slots(&self, n: usize) -> Vec<usize> {
        let c = self.n_channels;
        (0..n)
            .flat_map(|i| self.masked_channels.iter().map(move |&j| i * c + j))
            .collect()
    }

    pub fn observed_slots(&self, n: usize) -> Vec<usize> {
        let c = self.n_channels;
        (0..n * c).filter(|s| !self.is_masked(s % c)).collect()
    }
}

/// Channels grouped by category at `scale`, in first-appearance order.
pub fn group_channels(channels: &[ChannelMeta], scale: Scale) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (j, ch) in channels.iter().enumerate() {
        let key = ch.category(scale);
        match groups.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => v.push(j),
            None => groups.push((key.to_string(), vec![j])),
        }
    }
    groups
}

/// Samples target categories in random order. Sampling stops as soon as
/// the masked fraction reaches the target. A category is accepted when
/// doing so leaves the fraction no further from the target than skipping
/// it (ties accept), unless it would leave no category observed.
pub fn select_targets<R: Rng>(channels: &[ChannelMeta], scale: Scale, target_fraction: f64, rng: &mut R) -> Result<MaskPlan> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(Error::validation(format!(
            "mask fraction must be in (0, 1), got {target_fraction}"
        )));
    }
    let mut groups = group_channels(channels, scale);
    if groups.len() < 2 {
        return Err(Error::MaskingInfeasible(format!(
            "{} {scale} categor{} present; at least one must stay observed",
            groups.len(),
            if groups.len() == 1 { "y" } else { "ies" }
        )));
    }
    groups.shuffle(rng);
    let c = channels.len() as f64;
    let target = target_fraction * c;
    let total = groups.len();
    let mut masked: Vec<usize> = Vec::new();
    let mut categories = Vec::new();
    for (key, members) in groups {
        let count = masked.len() as f64;
        if count >= target {
            break;
        }
        if categories.len() + 1 == total {
            continue;
        }
        let accept = (count + members.len() as f64 - target).abs() <= (count - target).abs() + 1e-9;
        if accept {
            masked.extend(members);
            categories.push(key);
        }
    }
    let mut plan = MaskPlan::channels(scale, channels.len(), masked)?;
    plan.target_categories = categories;
    Ok(plan)
}

/// Builds the masked sequence `[n·C, d]` from the already encoded observed
/// tokens `s_observed` (rows in `plan.observed_slots(n)` order): masked slots
/// hold `mask + encodings[j]`.
pub fn assemble_masked<T: Real>(
    g: &mut Graph<'_, T>,
    s_observed: Var,
    plan: &MaskPlan,
    n: usize,
    mask: Var,
    encodings: Var,
) -> Result<Var> {
    let c = plan.n_channels;
    if g.shape(encodings)[0] != c {
        return Err(Error::structural(format!(
            "{} encodings for a plan over {c} channels",
            g.shape(encodings)[0]
        )));
    }
    let obs = plan.observed_slots(n);
    let placed_obs = g.scatter_rows(s_observed, obs, n * c)?;
    if plan.is_empty() {
        return Ok(placed_obs);
    }
    let masked = plan.masked_slots(n);
    let e = g.gather_rows(encodings, masked.iter().map(|s| s % c).collect())?;
    let filled = g.add_row(e, mask)?;
    let placed_mask = g.scatter_rows(filled, masked, n * c)?;
    g.add(placed_obs, placed_mask)
}

/// Replaces the masked slots of a full spatially encoded sequence
/// `s[n·C, d]` with `mask + encodings[j]`.
pub fn apply_mask<T: Real>(g: &mut Graph<'_, T>, s: Var, plan: &MaskPlan, mask: Var, encodings: Var) -> Result<Var> {
    if plan.is_empty() {
        return Ok(s);
    }
    let c = plan.n_channels;
    let rows = g.shape(s)[0];
    if rows % c != 0 {
        return Err(Error::structural(format!("{rows} tokens do not tile {c} channels")));
    }
    let n = rows / c;
    let observed = g.gather_rows(s, plan.observed_slots(n))?;
    assemble_masked(g, observed, plan, n, mask, encodings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chans(lobes: &[usize]) -> Vec<ChannelMeta> {
        lobes
            .iter()
            .enumerate()
            .map(|(j, &l)| ChannelMeta {
                channel_id: format!("c{j}"),
                lpi: [0, 0, 0],
                parcel_id: format!("p{j}"),
                lobe_id: format!("l{l}"),
            })
            .collect()
    }

    #[test]
    fn unit_categories_hit_target() {
        let ch = chans(&[0; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = select_targets(&ch, Scale::Channels, 0.3, &mut rng).unwrap();
        assert_eq!(plan.masked_channels.len(), 3);
        let ch = chans(&[0; 100]);
        let plan = select_targets(&ch, Scale::Channels, 0.3, &mut rng).unwrap();
        assert_eq!(plan.achieved_fraction(), 0.30);
    }

    #[test]
    fn coarse_category_accepted_when_closer() {
        // lobes of sizes 5, 3, 2; find a seed whose first draw is the size-5 lobe
        let ch = chans(&[0, 0, 0, 0, 0, 1, 1, 1, 2, 2]);
        let mut found = false;
        for seed in 0..64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut groups = group_channels(&ch, Scale::Lobes);
            groups.shuffle(&mut rng);
            if groups[0].1.len() != 5 {
                continue;
            }
            let plan = select_targets(&ch, Scale::Lobes, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(plan.target_categories, ["l0"]);
            assert_eq!(plan.achieved_fraction(), 0.5);
            found = true;
            break;
        }
        assert!(found);
    }

    #[test]
    fn single_category_is_infeasible() {
        let ch = chans(&[0, 0, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_targets(&ch, Scale::Lobes, 0.3, &mut rng),
            Err(Error::MaskingInfeasible(_))
        ));
    }

    #[test]
    fn slots_partition_the_sequence() {
        let plan = MaskPlan::channels(Scale::Channels, 4, vec![2, 0]).unwrap();
        assert_eq!(plan.masked_slots(2), vec![0, 2, 4, 6]);
        assert_eq!(plan.observed_slots(2), vec![1, 3, 5, 7]);
        assert!(MaskPlan::channels(Scale::Channels, 4, vec![4]).is_err());
    }
}
