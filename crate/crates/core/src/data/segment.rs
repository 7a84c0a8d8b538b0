use crate::data::Signal;
use crate::error::{Error, Result};

/// Floor applied to a channel's standard deviation before dividing.
pub const ZSCORE_EPS: f64 = 1e-8;

/// A window of a recording, z-scored per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub session_id: String,
    pub start_sample: usize,
    pub n_channels: usize,
    pub len: usize,
    /// `n_channels × len`, channel-major.
    pub values: Vec<f32>,
    pub label: Option<u8>,
}

impl Segment {
    pub fn channel(&self, j: usize) -> &[f32] {
        &self.values[j * self.len..(j + 1) * self.len]
    }
}

/// Standardizes each row of a row-major `rows × len` array in place to zero
/// mean and unit (population) standard deviation.
pub fn zscore_rows(values: &mut [f32], len: usize) {
    for row in values.chunks_mut(len) {
        let n = row.len() as f64;
        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(ZSCORE_EPS);
        for x in row.iter_mut() {
            *x = ((*x as f64 - mean) / std) as f32;
        }
    }
}

/// Cuts windows of `seg_len` samples starting every `stride` samples and
/// z-scores each channel of each window. A trailing partial window is dropped.
pub fn segment_recording(session_id: &str, signal: &Signal, seg_len: usize, stride: usize) -> Result<Vec<Segment>> {
    if seg_len == 0 || stride == 0 {
        return Err(Error::validation("segment length and stride must be positive"));
    }
    if seg_len > signal.n_samples {
        log::warn!(
            "session `{session_id}`: segment length {seg_len} exceeds recording length {}; no segments",
            signal.n_samples
        );
        return Ok(Vec::new());
    }
    let c = signal.n_channels;
    let starts = (0..=signal.n_samples - seg_len).step_by(stride);
    Ok(starts
        .map(|start| {
            let mut values = Vec::with_capacity(c * seg_len);
            for j in 0..c {
                values.extend_from_slice(&signal.channel(j)[start..start + seg_len]);
            }
            zscore_rows(&mut values, seg_len);
            Segment {
                session_id: session_id.to_string(),
                start_sample: start,
                n_channels: c,
                len: seg_len,
                values,
                label: None,
            }
        })
        .collect())
}

/// `n × C × L` temporal patches of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub data: Vec<f32>,
}

impl PatchGrid {
    /// Patch `i` of channel `j`.
    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        let off = (i * self.c + j) * self.l;
        &self.data[off..off + self.l]
    }

    /// Inverse of [`patchify`]: channel-major `C × (n·L)` values.
    pub fn reassemble(&self) -> Vec<f32> {
        let t = self.n * self.l;
        let mut out = vec![0.0; self.c * t];
        for i in 0..self.n {
            for j in 0..self.c {
                out[j * t + i * self.l..j * t + (i + 1) * self.l].copy_from_slice(self.patch(i, j));
            }
        }
        out
    }
}

/// Splits every channel of `segment` into `T/L` contiguous patches, stored
/// patch-major (all channels of patch 0, then patch 1, ...).
pub fn patchify(segment: &Segment, l: usize) -> Result<PatchGrid> {
    if l == 0 || segment.len % l != 0 {
        return Err(Error::structural(format!(
            "segment length {} is not divisible by patch length {l}",
            segment.len
        )));
    }
    let (n, c) = (segment.len / l, segment.n_channels);
    let mut data = Vec::with_capacity(n * c * l);
    for i in 0..n {
        for j in 0..c {
            data.extend_from_slice(&segment.channel(j)[i * l..(i + 1) * l]);
        }
    }
    Ok(PatchGrid { n, c, l, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_signal(c: usize, t: usize) -> Signal {
        let data = (0..c * t).map(|k| ((k * 37) % 101) as f32).collect();
        Signal::new(c, t, data).unwrap()
    }

    #[test]
    fn exact_division_and_trailing_drop() {
        let s = ramp_signal(2, 12288);
        assert_eq!(segment_recording("s", &s, 6144, 6144).unwrap().len(), 2);
        let s = ramp_signal(2, 12300);
        let segs = segment_recording("s", &s, 6144, 6144).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].start_sample, 6144);
        // overlapping windows
        assert_eq!(segment_recording("s", &s, 6144, 3072).unwrap().len(), 3);
    }

    #[test]
    fn too_long_window_gives_no_segments() {
        let s = ramp_signal(1, 100);
        assert!(segment_recording("s", &s, 101, 101).unwrap().is_empty());
    }

    #[test]
    fn flat_channel_becomes_zeros() {
        let mut data = vec![3.5f32; 64];
        data.extend((0..64).map(|x| x as f32));
        let s = Signal::new(2, 64, data).unwrap();
        let seg = &segment_recording("s", &s, 64, 64).unwrap()[0];
        assert!(seg.channel(0).iter().all(|&x| x == 0.0));
        let row = seg.channel(1);
        let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / 64.0;
        let var: f64 = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-4 && (var.sqrt() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn patch_counts() {
        let seg = Segment {
            session_id: "s".into(),
            start_sample: 0,
            n_channels: 2,
            len: 1024,
            values: (0..2048).map(|x| x as f32).collect(),
            label: None,
        };
        let g = patchify(&seg, 512).unwrap();
        assert_eq!((g.n, g.c, g.l), (2, 2, 512));
        assert_eq!(g.patch(1, 0)[0], 512.0);
        assert_eq!(g.patch(0, 1)[0], 1024.0);
        assert_eq!(g.reassemble(), seg.values);

        let seg = Segment { len: 1000, values: vec![0.0; 2000], ..seg };
        let err = patchify(&seg, 512).unwrap_err().to_string();
        assert!(err.contains("1000") && err.contains("512"));
    }
}
