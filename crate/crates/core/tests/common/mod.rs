#![allow(dead_code)]

use sptx_core::data::{build_spatial_vocab, prepare_session, PreparedSession, Scale, Segmentation};
use sptx_core::encoder::EncoderConfig;
use sptx_core::pretrain::{Model, ModelConfig, TrainSession};
use sptx_core::synth::{generate_session, GenConfig};
use sptx_core::tokenizer::TokenizerConfig;

/// d=8, 2 layers, 2 heads, L=32.
pub fn micro_model_cfg(encode: Scale, mask: Scale) -> ModelConfig {
    ModelConfig {
        tokenizer: TokenizerConfig {
            patch_len: 32,
            d_model: 8,
            ..Default::default()
        },
        encoder: EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            ..Default::default()
        },
        predictor_dropout: 0.1,
        encode_scale: encode,
        mask_scale: mask,
    }
}

/// C=4 channels in 2 parcels of one lobe, 128 Hz.
pub fn micro_gen(seed: u64, duration_s: f64) -> GenConfig {
    GenConfig {
        n_channels: 4,
        n_parcels: 2,
        n_lobes: 1,
        sample_rate_hz: 128.0,
        duration_s,
        seed,
        session_id: format!("sess-{seed:02}"),
        subject_id: format!("sub-{seed:02}"),
        ..Default::default()
    }
}

/// n=3 patches of 32 samples per segment.
pub const MICRO_SEG: Segmentation = Segmentation {
    seg_len: 96,
    stride: 96,
    patch_len: 32,
};

pub fn micro_session(seed: u64, duration_s: f64) -> PreparedSession {
    let (meta, signal, _) = generate_session(&micro_gen(seed, duration_s)).unwrap();
    prepare_session(meta, &signal, MICRO_SEG).unwrap()
}

pub fn train_session(model: &Model, s: &PreparedSession, take: usize) -> TrainSession {
    TrainSession {
        session_id: s.meta.session_id.clone(),
        channels: s.meta.channels.clone(),
        index: model.spatial.index(&s.meta.channels).unwrap(),
        grids: s.grids.iter().take(take).cloned().collect(),
    }
}

pub fn micro_model(encode: Scale, mask: Scale, sessions: &[&PreparedSession], seed: u64) -> (Model, sptx_core::numerics::ParamStore<f32>) {
    let metas: Vec<_> = sessions.iter().map(|s| &s.meta).collect();
    let vocab = build_spatial_vocab(&metas, encode).unwrap();
    Model::new(&micro_model_cfg(encode, mask), vocab, seed).unwrap()
}
