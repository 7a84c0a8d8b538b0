mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sptx_core::data::Scale;
use sptx_core::encoder::rope_rotate;
use sptx_core::masking::select_targets;
use sptx_core::numerics::Graph;
use sptx_core::pretrain::{
    ema_update, load_checkpoint, load_model, read_manifest, save_checkpoint, MetricsWriter, PretrainCfg, Trainer,
};
use sptx_core::Error;

use common::{micro_model, micro_session, train_session};

proptest! {
    #[test]
    fn rope_preserves_norm(v in prop::collection::vec(-10.0f64..10.0, 1..16), p in 0usize..5000) {
        let mut v = v;
        if v.len() % 2 == 1 {
            v.push(0.5);
        }
        let r = rope_rotate(&v, p, 10000.0).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum();
        let n1: f64 = r.iter().map(|x| x * x).sum();
        prop_assert!((n0 - n1).abs() < 1e-9 * n0.max(1.0));
    }
}

#[test]
fn rope_at_position_zero_is_identity() {
    let v = [0.3, -1.2, 4.0, 0.0];
    assert_eq!(rope_rotate(&v, 0, 10000.0).unwrap(), v.to_vec());
    assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10000.0).is_err());
}

#[test]
fn ema_extremes() {
    let s = micro_session(1, 6.0);
    let (model, store) = micro_model(Scale::Channels, Scale::Channels, &[&s], 2);
    let (target, online) = (model.target.param_ids(), model.tokenizer.param_ids());
    let mut shifted = store.clone();
    for &id in &online {
        shifted.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x += 1.0);
    }
    let mut keep = shifted.clone();
    ema_update(&mut keep, &target, &online, 1.0).unwrap();
    for &id in &target {
        assert_eq!(keep.tensor(id).data(), store.tensor(id).data());
    }
    let mut copy = shifted.clone();
    ema_update(&mut copy, &target, &online, 0.0).unwrap();
    for (&t, &o) in target.iter().zip(&online) {
        assert_eq!(copy.tensor(t).data(), shifted.tensor(o).data());
    }
}

#[test]
fn target_tokenizer_gets_no_gradient() {
    let s = micro_session(2, 6.0);
    let (model, store) = micro_model(Scale::Parcels, Scale::Channels, &[&s], 3);
    let index = model.spatial.index(&s.meta.channels).unwrap();
    let plan = select_targets(&s.meta.channels, Scale::Channels, 0.3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::training(&store, 1);
    let loss = model.masked_latent_loss(&mut g, &s.grids[0], &index, &plan).unwrap();
    let grads = g.backward(loss).unwrap();
    for id in model.target.param_ids() {
        assert!(grads.get(id).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
    }
    assert!(model
        .tokenizer
        .param_ids()
        .iter()
        .any(|&id| grads.get(id).is_some_and(|v| v.iter().any(|&x| x != 0.0))));
}

#[test]
fn training_is_reproducible() {
    let s = micro_session(3, 20.0);
    let run = || {
        let (model, store) = micro_model(Scale::Parcels, Scale::Channels, &[&s], 4);
        let data = vec![train_session(&model, &s, 10)];
        let cfg = PretrainCfg {
            batch_size: 4,
            epochs: 2,
            ..PretrainCfg::default()
        };
        let mut t = Trainer::new(model, store, cfg);
        let recs = t.run(&data, None, |_| Ok(())).unwrap();
        (recs, t.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|r| r.loss.is_finite()));
    for ((_, pa), (_, pb)) in sa.iter().zip(sb.iter()) {
        assert_eq!(pa.tensor.data(), pb.tensor.data());
    }
}

#[test]
fn step_records_follow_schedules() {
    let s = micro_session(4, 20.0);
    let (model, store) = micro_model(Scale::Channels, Scale::Channels, &[&s], 5);
    let data = vec![train_session(&model, &s, 8)];
    let cfg = PretrainCfg {
        batch_size: 4,
        epochs: 3,
        ..PretrainCfg::default()
    };
    let mut t = Trainer::new(model, store, cfg.clone());
    let recs = t.run(&data, None, |_| Ok(())).unwrap();
    for r in &recs {
        assert_eq!(r.lr, cfg.schedule.lr(r.epoch));
        assert_eq!(r.ema_momentum, sptx_core::numerics::ema_momentum(r.epoch, 0.996, 10));
        assert_eq!(r.achieved_mask_fraction, 0.25);
    }
    assert!(t.is_finished());
}

#[test]
fn empty_training_data_is_an_error() {
    let s = micro_session(5, 6.0);
    let (model, store) = micro_model(Scale::Channels, Scale::Channels, &[&s], 6);
    let mut t = Trainer::new(model, store, PretrainCfg::default());
    assert!(matches!(t.run(&[], None, |_| Ok(())), Err(Error::EmptyTrainingSet(_))));
}

fn saved_trainer(dir: &std::path::Path) -> Trainer {
    let s = micro_session(6, 12.0);
    let (model, store) = micro_model(Scale::Lobes, Scale::Parcels, &[&s], 7);
    let data = vec![train_session(&model, &s, 4)];
    let mut t = Trainer::new(
        model,
        store,
        PretrainCfg {
            batch_size: 2,
            ..PretrainCfg::default()
        },
    );
    t.run(&data, Some(3), |_| Ok(())).unwrap();
    save_checkpoint(&t, dir, serde_json::json!({"note": "test"})).unwrap();
    t
}

#[test]
fn checkpoint_restores_model_for_inference() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    let t = saved_trainer(&dir);
    let (model, store, manifest) = load_model(&dir).unwrap();
    assert_eq!(manifest.step, 3);
    assert_eq!(manifest.run["note"], "test");
    assert_eq!(model.cfg, t.model.cfg);
    for ((_, a), (_, b)) in store.iter().zip(t.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.trainable, b.trainable);
    }
    // overwriting an existing checkpoint replaces it
    save_checkpoint(&t, &dir, serde_json::json!({})).unwrap();
    assert_eq!(read_manifest(&dir).unwrap().run, serde_json::json!({}));
}

#[test]
fn corrupted_payload_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    saved_trainer(&dir);
    let path = dir.join("tensors.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[17] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&dir), Err(Error::Corruption(_))));
}

#[test]
fn unknown_version_is_incompatible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ck");
    saved_trainer(&dir);
    let path = dir.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["format_version"] = serde_json::json!(99);
    std::fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(load_checkpoint(&dir), Err(Error::Incompatible { found: 99, .. })));
}

#[test]
fn metrics_file_has_one_row_per_step() {
    let s = micro_session(8, 12.0);
    let (model, store) = micro_model(Scale::Channels, Scale::Channels, &[&s], 9);
    let data = vec![train_session(&model, &s, 8)];
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("metrics.csv");
    let mut w = MetricsWriter::create(&path, &["cfg".to_string()], false).unwrap();
    let mut t = Trainer::new(
        model,
        store,
        PretrainCfg {
            batch_size: 4,
            epochs: 2,
            ..PretrainCfg::default()
        },
    );
    t.run(&data, None, |r| w.write(r)).unwrap();
    drop(w);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# cfg");
    assert_eq!(lines.len(), 2 + 4);
}
