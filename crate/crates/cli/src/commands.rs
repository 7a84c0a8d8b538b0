use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptx_core::data::{
    build_spatial_vocab, list_sessions, load_meta, load_prepared, make_splits, save_session, segment_recording,
    write_labels, LabelRow, PatchGrid, PreparedSession, Scale, SessionMeta, Split,
};
use sptx_core::downstream::{
    interpret_weights, probe_eval, probe_train, read_results, recon_eval, recon_finetune, weighted_mean_maps,
    write_interpret, write_results, Labeled, ParcelWeight, ResultRow,
};
use sptx_core::numerics::ParamStore;
use sptx_core::pretrain::{load_model, save_checkpoint, MetricsWriter, Model, TrainSession, Trainer};
use sptx_core::synth::{generate_session, label_segments};
use sptx_core::Error;

use crate::config::RunConfig;
use crate::UsageError;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const INTERPRET_FILE: &str = "interpret.csv";
pub const GRID_FILE: &str = "grid.csv";

fn config_comment(cfg: &RunConfig) -> String {
    format!("config {}", serde_json::to_string(cfg).expect("config serializes"))
}

/// Writes `cfg.n_sessions` synthetic sessions under `cfg.out`, one archive
/// directory per session, plus `labels.csv` and `ground_truth.json`.
/// Every generator config is validated before anything is written.
pub fn generate(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let gens: Vec<_> = (0..cfg.n_sessions).map(|i| cfg.gen_config(i)).collect();
    for g in &gens {
        g.validate()?;
    }
    let seg = cfg.segmentation(cfg.patch_len);
    if (cfg.duration_s * cfg.sample_rate_hz).round() < seg.seg_len as f64 {
        return Err(UsageError(format!(
            "sessions of {} s at {} Hz are shorter than one {}-sample segment",
            cfg.duration_s, cfg.sample_rate_hz, seg.seg_len
        ))
        .into());
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.json"), cfg.to_json() + "\n")?;
    let mut dirs = Vec::new();
    for g in &gens {
        let (meta, signal, truth) = generate_session(g)?;
        let dir = cfg.out.join(&g.session_id);
        save_session(&dir, &meta, &signal).with_context(|| format!("writing {}", dir.display()))?;
        fs::write(dir.join("ground_truth.json"), serde_json::to_string(&truth)? + "\n")?;
        let segments = segment_recording(&meta.session_id, &signal, seg.seg_len, seg.stride)?;
        let rows: Vec<LabelRow> = label_segments(&truth, segments, None)
            .iter()
            .enumerate()
            .map(|(i, s)| LabelRow {
                segment_index: i,
                start_sample: s.start_sample,
                label: s.label.unwrap_or(0),
            })
            .collect();
        write_labels(&dir.join("labels.csv"), &rows)?;
        info!("wrote {} ({} segments)", dir.display(), rows.len());
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Session directories and metadata under `data`.
pub fn session_metas(data: &Path) -> anyhow::Result<Vec<(PathBuf, SessionMeta)>> {
    let dirs = list_sessions(data).with_context(|| format!("listing sessions in {}", data.display()))?;
    if dirs.is_empty() {
        return Err(UsageError(format!("no session archives in {}", data.display())).into());
    }
    dirs.into_iter()
        .map(|d| {
            let m = load_meta(&d).with_context(|| format!("reading {}", d.display()))?;
            Ok((d, m))
        })
        .collect()
}

/// Indices of sessions, added in a seed-determined random order until
/// their segments reach `fraction` of the total. Returned in index order.
pub fn select_by_fraction(counts: &[usize], fraction: f64, seed: u64) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if fraction >= 1.0 {
        return (0..counts.len()).collect();
    }
    let goal = fraction * total as f64 - 1e-9;
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = Vec::new();
    let mut have = 0usize;
    for i in order {
        if have as f64 >= goal {
            break;
        }
        have += counts[i];
        picked.push(i);
    }
    picked.sort_unstable();
    picked
}

/// Update steps of one epoch over sessions of `counts` segments, with
/// single-session batches.
pub fn steps_per_epoch(counts: &[usize], batch_size: usize) -> usize {
    counts.iter().map(|&n| n.div_ceil(batch_size.max(1))).sum()
}

/// Epoch count that keeps the total number of updates close to
/// `epochs` epochs of `full_steps`.
pub fn scaled_epochs(epochs: usize, full_steps: usize, subset_steps: usize) -> usize {
    if subset_steps == 0 {
        return epochs;
    }
    ((epochs * full_steps) as f64 / subset_steps as f64).round().max(1.0) as usize
}

pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub sessions: Vec<String>,
    pub epochs: usize,
    pub steps: u64,
}

/// Pretrains on every session outside `test_sessions` and the held-out
/// subject, subset to `data_fraction`, and writes the checkpoint and
/// `metrics.csv` under `cfg.out`.
pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<PretrainOutcome> {
    let metas = session_metas(&cfg.data)?;
    let all: Vec<&SessionMeta> = metas.iter().map(|(_, m)| m).collect();
    let vocab = build_spatial_vocab(&all, cfg.encode_scale)?;
    let eligible: Vec<&(PathBuf, SessionMeta)> = metas
        .iter()
        .filter(|(_, m)| !cfg.test_sessions.contains(&m.session_id))
        .filter(|(_, m)| cfg.held_out_subject.as_ref() != Some(&m.subject_id))
        .collect();
    if eligible.is_empty() {
        return Err(Error::EmptyTrainingSet(format!(
            "no pretraining sessions remain after excluding test sessions {:?} and held-out subject {:?}",
            cfg.test_sessions, cfg.held_out_subject
        ))
        .into());
    }
    let seg = cfg.segmentation(cfg.patch_len);
    let prepared: Vec<PreparedSession> = eligible
        .iter()
        .map(|(d, _)| load_prepared(d, seg).with_context(|| format!("loading {}", d.display())))
        .collect::<anyhow::Result<_>>()?;
    let counts: Vec<usize> = prepared.iter().map(|p| p.len()).collect();
    let picked = select_by_fraction(&counts, cfg.data_fraction, cfg.seed);
    let picked_counts: Vec<usize> = picked.iter().map(|&i| counts[i]).collect();
    let full_steps = steps_per_epoch(&counts, cfg.batch_size);
    let subset_steps = steps_per_epoch(&picked_counts, cfg.batch_size);
    let epochs = if cfg.data_fraction < 1.0 {
        scaled_epochs(cfg.epochs, full_steps, subset_steps)
    } else {
        cfg.epochs
    };

    let mut pre = cfg.pretrain_config();
    pre.epochs = epochs;
    let (model, store) = Model::new(&cfg.model_config(), vocab, cfg.seed)?;
    let data: Vec<TrainSession> = picked
        .iter()
        .map(|&i| {
            let p = &prepared[i];
            Ok(TrainSession {
                session_id: p.meta.session_id.clone(),
                channels: p.meta.channels.clone(),
                index: model.spatial.index(&p.meta.channels)?,
                grids: p.grids.clone(),
            })
        })
        .collect::<sptx_core::Result<_>>()?;

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut comments = vec![config_comment(cfg)];
    for &i in &picked {
        let p = &prepared[i];
        comments.push(format!(
            "session {} subject {} segments {}",
            p.meta.session_id,
            p.meta.subject_id,
            p.len()
        ));
    }
    comments.push(format!(
        "epochs {epochs} steps_per_epoch {subset_steps} full_data_steps {}",
        cfg.epochs * full_steps
    ));
    let mut metrics = MetricsWriter::create(&cfg.out.join(METRICS_FILE), &comments, false)?;
    let mut trainer = Trainer::new(model, store, pre);
    let records = trainer.run(&data, None, |r| {
        if r.step % 50 == 0 {
            info!("step {} epoch {} loss {:.5}", r.step, r.epoch, r.loss);
        }
        metrics.write(r)
    })?;
    let checkpoint = cfg.out.join(CHECKPOINT_DIR);
    save_checkpoint(&trainer, &checkpoint, serde_json::to_value(cfg)?)?;
    info!("saved {} after {} steps", checkpoint.display(), records.len());
    Ok(PretrainOutcome {
        checkpoint,
        sessions: data.iter().map(|s| s.session_id.clone()).collect(),
        epochs,
        steps: records.len() as u64,
    })
}

/// Model and parameters for downstream runs: fresh weights in random-init
/// mode (vocabulary built from the data directory), otherwise the checkpoint.
pub fn backbone(cfg: &RunConfig, metas: &[(PathBuf, SessionMeta)]) -> anyhow::Result<(Model, ParamStore<f32>, String)> {
    if cfg.random_init {
        let all: Vec<&SessionMeta> = metas.iter().map(|(_, m)| m).collect();
        let vocab = build_spatial_vocab(&all, cfg.encode_scale)?;
        let (m, s) = Model::new(&cfg.model_config(), vocab, cfg.seed)?;
        return Ok((m, s, format!("random-init seed {}", cfg.seed)));
    }
    let dir = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| UsageError("a --checkpoint is required unless --random-init is set".into()))?;
    let (m, s, manifest) = load_model(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok((m, s, format!("checkpoint {} sha256 {}", dir.display(), manifest.sha256)))
}

/// A test session with its train/valid/test split.
pub struct EvalSession {
    pub data: PreparedSession,
    pub labels: Vec<u8>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl EvalSession {
    pub fn grids(&self, idx: &[usize]) -> Vec<&PatchGrid> {
        idx.iter().map(|&i| &self.data.grids[i]).collect()
    }

    pub fn labeled(&self, idx: &[usize]) -> sptx_core::Result<Labeled<'_>> {
        Labeled::new(self.grids(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Test sessions named in the config, or every session when none are named.
pub fn eval_sessions(cfg: &RunConfig, metas: &[(PathBuf, SessionMeta)], patch_len: usize, labeled: bool) -> anyhow::Result<Vec<EvalSession>> {
    let chosen: Vec<&(PathBuf, SessionMeta)> = if cfg.test_sessions.is_empty() {
        metas.iter().collect()
    } else {
        cfg.test_sessions
            .iter()
            .map(|id| {
                metas
                    .iter()
                    .find(|(_, m)| &m.session_id == id)
                    .ok_or_else(|| UsageError(format!("test session `{id}` not found in {}", cfg.data.display())))
            })
            .collect::<Result<_, _>>()?
    };
    let seg = cfg.segmentation(patch_len);
    chosen
        .into_iter()
        .map(|(d, _)| {
            let data = load_prepared(d, seg).with_context(|| format!("loading {}", d.display()))?;
            let labels = if labeled {
                data.binary_labels()?
            } else {
                vec![0; data.len()]
            };
            let split = make_splits(data.len(), cfg.split_ratios, cfg.split_mode, cfg.seed)?;
            Ok(EvalSession {
                train: split.indices(Split::Train),
                valid: split.indices(Split::Valid),
                test: split.indices(Split::Test),
                data,
                labels,
            })
        })
        .collect()
}

fn header(cfg: &RunConfig, source: &str) -> Vec<String> {
    vec![config_comment(cfg), format!("model {source}")]
}

pub struct ProbeRun {
    pub rows: Vec<ResultRow>,
    /// Per session: mean test AUC and mean |pooling weights| over seeds.
    pub weights: Vec<(String, f64, Vec<f64>, usize)>,
}

fn run_probes(cfg: &RunConfig, model: &Model, store: &ParamStore<f32>, sessions: &[EvalSession], task: &str) -> anyhow::Result<ProbeRun> {
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    for s in sessions {
        let id = &s.data.meta.session_id;
        let (train, valid, test) = (s.labeled(&s.train)?, s.labeled(&s.valid)?, s.labeled(&s.test)?);
        let mut w_sum: Vec<f64> = Vec::new();
        let mut aucs = Vec::new();
        for &seed in &cfg.finetune_seeds {
            let (probe, report) = probe_train(model, store, &s.data.meta.channels, &train, &valid, &cfg.probe_config(seed))
                .with_context(|| format!("probe on session {id}"))?;
            let auc = probe_eval(&probe, &test).with_context(|| format!("test AUC on session {id}"))?;
            info!("{task} {id} seed {seed}: AUC {auc:.4} (best epoch {})", report.best_epoch);
            rows.push(ResultRow::new(id, task, seed, "auc", auc));
            let w = probe.pool_weights();
            w_sum.resize(w.len(), 0.0);
            w_sum.iter_mut().zip(w).for_each(|(a, &b)| *a += (b as f64).abs());
            aucs.push(auc);
        }
        let k = cfg.finetune_seeds.len() as f64;
        w_sum.iter_mut().for_each(|v| *v /= k);
        weights.push((id.clone(), aucs.iter().sum::<f64>() / k, w_sum, s.data.grids[0].n));
    }
    Ok(ProbeRun { rows, weights })
}

fn prepare_downstream(cfg: &RunConfig, labeled: bool) -> anyhow::Result<(Model, ParamStore<f32>, String, Vec<EvalSession>)> {
    let metas = session_metas(&cfg.data)?;
    let (model, store, source) = backbone(cfg, &metas)?;
    let sessions = eval_sessions(cfg, &metas, model.cfg.tokenizer.patch_len, labeled)?;
    Ok((model, store, source, sessions))
}

/// Linear-probe AUC per (test session, finetune seed) into `results.csv`.
pub fn probe(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let (model, store, source, sessions) = prepare_downstream(cfg, true)?;
    let run = run_probes(cfg, &model, &store, &sessions, "probe")?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(RESULTS_FILE);
    write_results(&path, &header(cfg, &source), &run.rows)?;
    Ok(path)
}

/// Probes as in [`probe`], then writes per-(patch, parcel) importance from
/// the seed-averaged pooling weights of each session to `interpret.csv`,
/// followed by an AUC-weighted combination across sessions (session `all`).
pub fn interpret(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let (model, store, source, sessions) = prepare_downstream(cfg, true)?;
    let run = run_probes(cfg, &model, &store, &sessions, "probe")?;
    let mut tables: Vec<(String, Vec<ParcelWeight>)> = Vec::new();
    for ((id, _, w, n), s) in run.weights.iter().zip(&sessions) {
        tables.push((id.clone(), interpret_weights(w, *n, &s.data.meta.channels)?));
    }
    let weighted: Vec<(f64, &[ParcelWeight])> = run
        .weights
        .iter()
        .zip(&tables)
        .map(|((_, auc, _, _), (_, t))| (*auc, t.as_slice()))
        .collect();
    let combined = weighted_mean_maps(&weighted);
    tables.push((sptx_core::downstream::SUMMARY_SESSION.to_string(), combined));
    fs::create_dir_all(&cfg.out)?;
    let comments = header(cfg, &source);
    write_results(&cfg.out.join(RESULTS_FILE), &comments, &run.rows)?;
    let path = cfg.out.join(INTERPRET_FILE);
    write_interpret(&path, &comments, &tables)?;
    Ok(path)
}

/// Masked channel reconstruction: finetune per (session, seed) on the
/// train split, then score single-channel masking on the test split.
pub fn reconstruct(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let (model, store, source, sessions) = prepare_downstream(cfg, false)?;
    let mut rows = Vec::new();
    for s in &sessions {
        let id = &s.data.meta.session_id;
        for &seed in &cfg.finetune_seeds {
            let (rec, _) = recon_finetune(
                &model,
                &store,
                &s.data.meta.channels,
                &s.grids(&s.train),
                &s.grids(&s.valid),
                &cfg.recon_config(seed),
            )
            .with_context(|| format!("reconstruction finetuning on session {id}"))?;
            let eval = recon_eval(&rec, &s.grids(&s.test))?;
            info!("reconstruct {id} seed {seed}: MSE {:.4} R2 {:.4}", eval.mean_mse, eval.mean_r2);
            rows.push(ResultRow::new(id, "reconstruct", seed, "mse", eval.mean_mse));
            rows.push(ResultRow::new(id, "reconstruct", seed, "r2", eval.mean_r2));
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(RESULTS_FILE);
    write_results(&path, &header(cfg, &source), &rows)?;
    Ok(path)
}

/// Mean AUC of `rows`.
fn mean_auc(rows: &[ResultRow]) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.metric == "auc").map(|r| r.value).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Pretrains every encode × mask scale pair, probes each checkpoint, and
/// writes `grid.csv` with one row per encoding scale, one column per
/// masking scale and, when enabled, a random-init column.
pub fn grid(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let metas = session_metas(&cfg.data)?;
    let mut table: BTreeMap<(Scale, Option<Scale>), f64> = BTreeMap::new();
    let mut rows = Vec::new();
    for enc in Scale::ALL {
        for mask in Scale::ALL {
            let mut cell = cfg.clone();
            cell.encode_scale = enc;
            cell.mask_scale = mask;
            cell.random_init = false;
            cell.out = cfg.out.join("grid").join(format!("{enc}-{mask}"));
            info!("grid cell encode={enc} mask={mask}");
            let outcome = pretrain(&cell)?;
            cell.checkpoint = Some(outcome.checkpoint);
            let (model, store, _) = backbone(&cell, &metas)?;
            let sessions = eval_sessions(&cell, &metas, model.cfg.tokenizer.patch_len, true)?;
            let run = run_probes(&cell, &model, &store, &sessions, &format!("{enc}-{mask}"))?;
            table.insert((enc, Some(mask)), mean_auc(&run.rows));
            rows.extend(run.rows);
        }
        if cfg.grid_random_init {
            let mut cell = cfg.clone();
            cell.encode_scale = enc;
            cell.random_init = true;
            let (model, store, _) = backbone(&cell, &metas)?;
            let sessions = eval_sessions(&cell, &metas, model.cfg.tokenizer.patch_len, true)?;
            let run = run_probes(&cell, &model, &store, &sessions, &format!("{enc}-random"))?;
            table.insert((enc, None), mean_auc(&run.rows));
            rows.extend(run.rows);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let comments = header(cfg, "grid");
    write_results(&cfg.out.join(RESULTS_FILE), &comments, &rows)?;
    let path = cfg.out.join(GRID_FILE);
    let mut out = String::new();
    for c in &comments {
        out.push_str(&format!("# {c}\n"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut head = vec!["encode_scale".to_string()];
    head.extend(Scale::ALL.iter().map(|m| format!("mask_{m}")));
    if cfg.grid_random_init {
        head.push("random_init".into());
    }
    w.write_record(&head)?;
    for enc in Scale::ALL {
        let mut rec = vec![enc.to_string()];
        rec.extend(Scale::ALL.iter().map(|&m| table[&(enc, Some(m))].to_string()));
        if cfg.grid_random_init {
            rec.push(table[&(enc, None)].to_string());
        }
        w.write_record(&rec)?;
    }
    out.push_str(std::str::from_utf8(&w.into_inner()?)?);
    fs::write(&path, out)?;
    Ok(path)
}

/// Merges per-run `results.csv` files into one, recomputing summaries.
pub fn eval(cfg: &RunConfig, inputs: &[PathBuf]) -> anyhow::Result<PathBuf> {
    if inputs.is_empty() {
        return Err(UsageError("eval needs at least one results file".into()).into());
    }
    let mut rows = Vec::new();
    let mut comments = vec![config_comment(cfg)];
    for p in inputs {
        let r = read_results(p).with_context(|| format!("reading {}", p.display()))?;
        rows.extend(r.into_iter().filter(|r| !r.is_summary()));
        comments.push(format!("source {}", p.display()));
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(RESULTS_FILE);
    write_results(&path, &comments, &rows)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_of_eight_equal_sessions_is_two() {
        for seed in 0..20 {
            assert_eq!(select_by_fraction(&[100; 8], 0.25, seed).len(), 2);
        }
        assert_eq!(select_by_fraction(&[100; 8], 1.0, 0), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn fraction_reaches_goal_minimally() {
        let counts = [30, 70, 10, 55, 5, 80];
        for seed in 0..20 {
            let p = select_by_fraction(&counts, 0.3, seed);
            let got: usize = p.iter().map(|&i| counts[i]).sum();
            assert!(got as f64 >= 0.3 * 250.0);
        }
    }

    #[test]
    fn scaled_steps_within_ten_percent() {
        let counts = [100usize; 8];
        for frac in [0.05, 0.1, 0.25, 0.5, 0.75] {
            let picked = select_by_fraction(&counts, frac, 1);
            let sub: Vec<usize> = picked.iter().map(|&i| counts[i]).collect();
            let (full, part) = (steps_per_epoch(&counts, 16), steps_per_epoch(&sub, 16));
            let e = scaled_epochs(70, full, part);
            let ratio = (e * part) as f64 / (70 * full) as f64;
            assert!((ratio - 1.0).abs() <= 0.1, "fraction {frac}: ratio {ratio}");
        }
    }
}
