use proptest::prelude::*;
use sptx_core::data::{
    build_spatial_vocab, load_prepared, load_session, make_splits, patchify, save_session, segment_recording,
    write_labels, LabelRow, Scale, Segmentation, Signal, Split, SplitMode,
};
use sptx_core::synth::{generate_session, label_segments, GenConfig, Purity};
use sptx_core::Error;

fn signal(c: usize, t: usize, seed: u64) -> Signal {
    let data = (0..c * t)
        .map(|k| (((k as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32) / 100.0 - 5.0)
        .collect();
    Signal::new(c, t, data).unwrap()
}

#[test]
fn default_geometry_gives_twelve_patches() {
    let s = signal(3, 6144 * 3 + 100, 1);
    let segs = segment_recording("s", &s, 6144, 6144).unwrap();
    assert_eq!(segs.len(), 3);
    let grid = patchify(&segs[0], 512).unwrap();
    assert_eq!((grid.n, grid.c, grid.l), (12, 3, 512));
    assert!(matches!(patchify(&segs[0], 500), Err(Error::Structural(_))));
}

#[test]
fn short_recording_yields_no_segments() {
    let s = signal(2, 100, 0);
    assert!(segment_recording("s", &s, 200, 200).unwrap().is_empty());
}

#[test]
fn constant_channel_standardizes_to_zero() {
    let mut s = signal(2, 64, 3);
    s.data[..64].fill(7.5);
    let seg = &segment_recording("s", &s, 64, 64).unwrap()[0];
    assert!(seg.channel(0).iter().all(|&x| x == 0.0));
}

proptest! {
    #[test]
    fn patchify_reassemble_round_trip(c in 1usize..6, n in 1usize..6, l in 1usize..17, seed in any::<u64>()) {
        let s = signal(c, n * l, seed);
        let seg = &segment_recording("s", &s, n * l, n * l).unwrap()[0];
        let grid = patchify(seg, l).unwrap();
        prop_assert_eq!(grid.reassemble(), seg.values.clone());
        for i in 0..n {
            for j in 0..c {
                prop_assert_eq!(grid.patch(i, j), &seg.channel(j)[i * l..(i + 1) * l]);
            }
        }
    }

    #[test]
    fn segments_are_standardized(c in 1usize..4, len in 8usize..64, stride in 1usize..64, seed in any::<u64>()) {
        let t = len * 3 + 5;
        let s = signal(c, t, seed);
        let segs = segment_recording("s", &s, len, stride).unwrap();
        prop_assert_eq!(segs.len(), (t - len) / stride + 1);
        for seg in &segs {
            for j in 0..c {
                let row = seg.channel(j);
                let mean = row.iter().map(|&x| x as f64).sum::<f64>() / len as f64;
                let var = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / len as f64;
                prop_assert!(mean.abs() < 1e-4);
                prop_assert!(var < 1e-9 || (var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn splits_partition_every_segment(n in 3usize..400, seed in any::<u64>(), chrono in any::<bool>()) {
        let mode = if chrono { SplitMode::Chronological } else { SplitMode::Random };
        let spec = make_splits(n, [0.8, 0.1, 0.1], mode, seed).unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Valid, Split::Test]
            .iter()
            .flat_map(|&s| spec.indices(s))
            .collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(!spec.indices(Split::Valid).is_empty() && !spec.indices(Split::Test).is_empty());
        prop_assert_eq!(&spec, &make_splits(n, [0.8, 0.1, 0.1], mode, seed).unwrap());
        if chrono {
            let (tr, va, te) = (spec.indices(Split::Train), spec.indices(Split::Valid), spec.indices(Split::Test));
            prop_assert!(tr.last() < va.first() && va.last() < te.first());
        }
    }
}

#[test]
fn splits_reject_bad_ratios() {
    assert!(make_splits(2, [0.8, 0.1, 0.1], SplitMode::Random, 0).unwrap_err().is_validation());
    assert!(make_splits(10, [0.5, 0.1, 0.1], SplitMode::Random, 0).unwrap_err().is_validation());
    assert!(make_splits(10, [1.0, 0.0, 0.0], SplitMode::Random, 0).unwrap_err().is_validation());
}

fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        n_channels: 12,
        n_parcels: 4,
        n_lobes: 2,
        sample_rate_hz: 128.0,
        duration_s: 20.0,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn archive_round_trip_is_exact() {
    let (meta, sig, _) = generate_session(&small_gen(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_session(dir.path(), &meta, &sig).unwrap();
    let (meta2, sig2) = load_session(dir.path()).unwrap();
    assert_eq!(meta, meta2);
    assert_eq!(sig, sig2);
}

#[test]
fn truncated_signal_is_rejected() {
    let (meta, sig, _) = generate_session(&small_gen(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_session(dir.path(), &meta, &sig).unwrap();
    let path = dir.path().join("signal.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_session(dir.path()).is_err());
}

#[test]
fn prepared_session_reads_labels() {
    let (meta, sig, truth) = generate_session(&small_gen(6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_session(dir.path(), &meta, &sig).unwrap();
    let seg = Segmentation {
        seg_len: 256,
        stride: 256,
        patch_len: 64,
    };
    let segments = label_segments(&truth, segment_recording(&meta.session_id, &sig, 256, 256).unwrap(), None);
    let rows: Vec<LabelRow> = segments
        .iter()
        .enumerate()
        .map(|(i, s)| LabelRow {
            segment_index: i,
            start_sample: s.start_sample,
            label: s.label.unwrap(),
        })
        .collect();
    write_labels(&dir.path().join("labels.csv"), &rows).unwrap();
    let p = load_prepared(dir.path(), seg).unwrap();
    assert_eq!(p.len(), segments.len());
    assert_eq!(p.grids[0].n, 4);
    let want: Vec<u8> = segments.iter().map(|s| s.label.unwrap()).collect();
    assert_eq!(p.binary_labels().unwrap(), want);
}

#[test]
fn purity_drops_ambiguous_segments() {
    let (meta, sig, truth) = generate_session(&small_gen(7)).unwrap();
    let segs = segment_recording(&meta.session_id, &sig, 256, 256).unwrap();
    let all = label_segments(&truth, segs.clone(), None);
    let pure = label_segments(&truth, segs, Some(Purity::default()));
    assert_eq!(all.len(), 10);
    assert!(pure.len() <= all.len());
    for s in &pure {
        let a = truth.activity(s.start_sample, s.len);
        assert!(a <= 0.2 || a >= 0.8);
        assert_eq!(s.label, Some(u8::from(a > 0.5)));
    }
}

#[test]
fn vocabulary_rows_follow_scale() {
    let (a, _, _) = generate_session(&small_gen(8)).unwrap();
    let mut g = small_gen(9);
    g.subject_id = "sub-09".into();
    let (b, _, _) = generate_session(&g).unwrap();
    let v = build_spatial_vocab(&[&a, &b], Scale::Parcels).unwrap();
    assert_eq!(v.n_dims(), 1);
    assert_eq!(v.size(0), 4);
    let v = build_spatial_vocab(&[&a, &b], Scale::Channels).unwrap();
    assert_eq!(v.n_dims(), 3);
    for ch in &a.channels {
        assert_eq!(v.lookup(ch).unwrap(), ch.lpi.iter().map(|&x| x as usize).collect::<Vec<_>>());
    }
}
