use std::collections::HashMap;
use std::path::Path;

use crate::data::{load_session, patchify, read_labels, segment_recording, PatchGrid, SessionMeta, Signal};
use crate::error::{Error, Result};
use crate::synth::GroundTruth;

/// How recordings are cut into segments and patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segmentation {
    pub seg_len: usize,
    pub stride: usize,
    pub patch_len: usize,
}

/// A session cut into z-scored segments and patched, ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedSession {
    pub meta: SessionMeta,
    pub starts: Vec<usize>,
    pub labels: Vec<Option<u8>>,
    pub grids: Vec<PatchGrid>,
}

impl PreparedSession {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    /// Labels of all segments, or an error naming the session when any is missing.
    pub fn binary_labels(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|l| {
                l.ok_or_else(|| {
                    Error::validation(format!("session `{}` has unlabeled segments", self.meta.session_id))
                })
            })
            .collect()
    }
}

pub fn prepare_session(meta: SessionMeta, signal: &Signal, seg: Segmentation) -> Result<PreparedSession> {
    let segments = segment_recording(&meta.session_id, signal, seg.seg_len, seg.stride)?;
    let grids = segments
        .iter()
        .map(|s| patchify(s, seg.patch_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSession {
        starts: segments.iter().map(|s| s.start_sample).collect(),
        labels: vec![None; segments.len()],
        meta,
        grids,
    })
}

/// Loads an archive and attaches labels: from `labels.csv` rows whose
/// `start_sample` matches a segment, else from the event intervals in
/// `ground_truth.json` when present.
pub fn load_prepared(dir: &Path, seg: Segmentation) -> Result<PreparedSession> {
    let (meta, signal) = load_session(dir)?;
    let mut s = prepare_session(meta, &signal, seg)?;
    let labels_path = dir.join("labels.csv");
    let truth_path = dir.join("ground_truth.json");
    let mut from_csv = false;
    if labels_path.is_file() {
        let by_start: HashMap<usize, u8> = read_labels(&labels_path)?
            .into_iter()
            .map(|r| (r.start_sample, r.label))
            .collect();
        if s.starts.iter().all(|st| by_start.contains_key(st)) {
            s.labels = s.starts.iter().map(|st| by_start.get(st).copied()).collect();
            from_csv = true;
        }
    }
    if !from_csv && truth_path.is_file() {
        let truth: GroundTruth = serde_json::from_str(&std::fs::read_to_string(&truth_path)?)?;
        s.labels = s
            .starts
            .iter()
            .map(|&st| Some(u8::from(truth.activity(st, seg.seg_len) > 0.5)))
            .collect();
    }
    Ok(s)
}
