use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, SessionMeta, Signal};
use crate::error::{Error, Result};

const META_FILE: &str = "meta.json";
const SIGNAL_FILE: &str = "signal.bin";

#[derive(Serialize, Deserialize)]
struct MetaFile {
    subject_id: String,
    session_id: String,
    sample_rate_hz: f64,
    n_samples: usize,
    channels: Vec<ChannelMeta>,
}

/// Writes `meta.json` and `signal.bin` (little-endian f32, channel-major)
/// into `dir`, creating it if needed.
pub fn save_session(dir: &Path, meta: &SessionMeta, signal: &Signal) -> Result<()> {
    meta.validate()?;
    if signal.n_channels != meta.n_channels() {
        return Err(Error::structural(format!(
            "signal has {} channels, metadata lists {}",
            signal.n_channels,
            meta.n_channels()
        )));
    }
    fs::create_dir_all(dir)?;
    let file = MetaFile {
        subject_id: meta.subject_id.clone(),
        session_id: meta.session_id.clone(),
        sample_rate_hz: meta.sample_rate_hz,
        n_samples: signal.n_samples,
        channels: meta.channels.clone(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&file)? + "\n")?;
    let mut bytes = Vec::with_capacity(signal.data.len() * 4);
    for x in &signal.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(dir.join(SIGNAL_FILE))?;
    f.write_all(&bytes)?;
    Ok(())
}

fn read_meta_file(dir: &Path) -> Result<(SessionMeta, usize)> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    let file: MetaFile = serde_json::from_str(&text)?;
    let meta = SessionMeta {
        subject_id: file.subject_id,
        session_id: file.session_id,
        sample_rate_hz: file.sample_rate_hz,
        channels: file.channels,
    };
    meta.validate()?;
    Ok((meta, file.n_samples))
}

/// Metadata of an archive without reading its signal.
pub fn load_meta(dir: &Path) -> Result<SessionMeta> {
    Ok(read_meta_file(dir)?.0)
}

pub fn load_session(dir: &Path) -> Result<(SessionMeta, Signal)> {
    let (meta, n_samples) = read_meta_file(dir)?;
    let bytes = fs::read(dir.join(SIGNAL_FILE))?;
    let expected = meta.n_channels() * n_samples * 4;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % 4) as u64,
            msg: format!(
                "{} truncated: {} bytes present, {expected} expected for {} channels x {} samples",
                SIGNAL_FILE,
                bytes.len(),
                meta.n_channels(),
                n_samples
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            msg: format!(
                "{} has {} trailing bytes beyond the {} channels x {} samples in {META_FILE}",
                SIGNAL_FILE,
                bytes.len() - expected,
                meta.n_channels(),
                n_samples
            ),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let signal = Signal::new(meta.n_channels(), n_samples, data)?;
    Ok((meta, signal))
}

/// Session archive directories directly under `root`, sorted by name.
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub segment_index: usize,
    pub start_sample: usize,
    pub label: u8,
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<LabelRow>, _>>()?;
    Ok(rows)
}
