//! Flat JSON run configuration shared by every command. Command-line flags
//! override values read from `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sptx_core::data::{Scale, Segmentation, SplitMode};
use sptx_core::downstream::FinetuneCfg;
use sptx_core::encoder::{AttentionMode, EncoderConfig};
use sptx_core::numerics::ScheduleCfg;
use sptx_core::pretrain::{ModelConfig, PretrainCfg};
use sptx_core::synth::GenConfig;
use sptx_core::tokenizer::{BlockNorm, TokenizerConfig, TokenizerVariant};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,

    // generation
    pub n_sessions: usize,
    pub sessions_per_subject: usize,
    pub n_channels: usize,
    pub n_parcels: usize,
    pub n_lobes: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub snr_db: f64,
    pub event_gain: f64,
    pub event_parcels: Option<Vec<usize>>,

    // segmentation
    pub patch_len: usize,
    pub n_patches: usize,
    /// Segment stride in samples; `None` gives non-overlapping segments.
    pub stride: Option<usize>,

    // model
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub predictor_dropout: f64,
    pub tokenizer: TokenizerVariant,
    pub block_norm: BlockNorm,
    pub attention: AttentionMode,
    pub encode_scale: Scale,
    pub mask_scale: Scale,

    // pretraining
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub decay_gamma: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub mask_fraction: f64,
    pub ema_target: f64,
    pub ema_warmup_epochs: usize,
    pub data_fraction: f64,
    pub held_out_subject: Option<String>,
    /// Sessions reserved for downstream evaluation and excluded from
    /// pretraining. Empty means every session is used by both.
    pub test_sessions: Vec<String>,

    // downstream
    pub finetune_seeds: Vec<u64>,
    pub finetune_epochs: usize,
    pub recon_epochs: usize,
    pub patience: usize,
    pub finetune_batch_size: usize,
    pub probe_lr_backbone: f64,
    pub probe_lr_head: f64,
    pub recon_lr_backbone: f64,
    pub recon_lr_head: f64,
    pub freeze_tokenizer: bool,
    pub alpha_flat_epochs: usize,
    pub split_ratios: [f64; 3],
    pub split_mode: SplitMode,
    pub random_init: bool,
    /// Adds a randomly initialized probe per encoding scale to `grid`.
    pub grid_random_init: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pre = PretrainCfg::default();
        let probe = FinetuneCfg::probe();
        let recon = FinetuneCfg::reconstruction();
        let gen = GenConfig::default();
        let model = ModelConfig::default();
        Self {
            data: "data".into(),
            out: "out".into(),
            checkpoint: None,
            seed: 0,
            n_sessions: 4,
            sessions_per_subject: 1,
            n_channels: gen.n_channels,
            n_parcels: gen.n_parcels,
            n_lobes: gen.n_lobes,
            sample_rate_hz: gen.sample_rate_hz,
            duration_s: gen.duration_s,
            snr_db: gen.snr_db,
            event_gain: gen.event_gain,
            event_parcels: None,
            patch_len: model.tokenizer.patch_len,
            n_patches: 12,
            stride: None,
            d_model: model.encoder.d_model,
            n_layers: model.encoder.n_layers,
            n_heads: model.encoder.n_heads,
            dropout: model.encoder.dropout,
            predictor_dropout: model.predictor_dropout,
            tokenizer: model.tokenizer.variant,
            block_norm: model.tokenizer.block_norm,
            attention: model.encoder.attention,
            encode_scale: model.encode_scale,
            mask_scale: model.mask_scale,
            epochs: pre.epochs,
            batch_size: pre.batch_size,
            lr: pre.schedule.target_lr,
            warmup_epochs: pre.schedule.warmup_epochs,
            decay_gamma: pre.schedule.decay_gamma,
            weight_decay: pre.weight_decay,
            grad_clip: pre.grad_clip,
            mask_fraction: pre.mask_fraction,
            ema_target: pre.ema_target,
            ema_warmup_epochs: pre.ema_warmup_epochs,
            data_fraction: 1.0,
            held_out_subject: None,
            test_sessions: Vec::new(),
            finetune_seeds: (0..5).collect(),
            finetune_epochs: probe.epochs,
            recon_epochs: recon.epochs,
            patience: probe.patience,
            finetune_batch_size: probe.batch_size,
            probe_lr_backbone: probe.lr_backbone,
            probe_lr_head: probe.lr_head,
            recon_lr_backbone: recon.lr_backbone,
            recon_lr_head: recon.lr_head,
            freeze_tokenizer: probe.freeze_tokenizer,
            alpha_flat_epochs: probe.alpha_flat_epochs,
            split_ratios: [0.8, 0.1, 0.1],
            split_mode: SplitMode::Random,
            random_init: false,
            grid_random_init: true,
        }
    }
}

/// Values given on the command line; each one replaces the config value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_scale)]
    pub encode_scale: Option<Scale>,
    #[arg(long, global = true, value_parser = parse_scale)]
    pub mask_scale: Option<Scale>,
    #[arg(long, global = true)]
    pub data_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub held_out_subject: Option<String>,
    /// Skip the checkpoint and finetune freshly initialized weights.
    #[arg(long, global = true)]
    pub random_init: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory of session archives.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse().map_err(|e: sptx_core::Error| e.to_string())
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }

    /// The config file (or defaults) with command-line overrides applied.
    pub fn resolve(o: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.encode_scale {
            cfg.encode_scale = v;
        }
        if let Some(v) = o.mask_scale {
            cfg.mask_scale = v;
        }
        if let Some(v) = o.data_fraction {
            cfg.data_fraction = v;
        }
        if let Some(v) = &o.held_out_subject {
            cfg.held_out_subject = Some(v.clone());
        }
        if o.random_init {
            cfg.random_init = true;
        }
        if let Some(v) = &o.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &o.data {
            cfg.data = v.clone();
        }
        if let Some(v) = &o.checkpoint {
            cfg.checkpoint = Some(v.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(UsageError(format!("data_fraction must be in (0, 1], got {}", self.data_fraction)));
        }
        if self.n_patches == 0 || self.patch_len == 0 {
            return Err(UsageError("n_patches and patch_len must be positive".into()));
        }
        if self.stride == Some(0) {
            return Err(UsageError("stride must be positive".into()));
        }
        if self.sessions_per_subject == 0 {
            return Err(UsageError("sessions_per_subject must be positive".into()));
        }
        if self.finetune_seeds.is_empty() {
            return Err(UsageError("finetune_seeds is empty".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self, index: usize) -> GenConfig {
        GenConfig {
            subject_id: format!("sub-{:02}", index / self.sessions_per_subject),
            session_id: format!("sess-{index:02}"),
            n_channels: self.n_channels,
            n_parcels: self.n_parcels,
            n_lobes: self.n_lobes,
            sample_rate_hz: self.sample_rate_hz,
            duration_s: self.duration_s,
            seed: sptx_core::pretrain::derive_seed(self.seed, index as u64, 0),
            snr_db: self.snr_db,
            event_parcels: self.event_parcels.clone(),
            event_gain: self.event_gain,
            ..GenConfig::default()
        }
    }

    /// Segmentation for a model whose patches are `patch_len` samples.
    pub fn segmentation(&self, patch_len: usize) -> Segmentation {
        let seg_len = self.n_patches * patch_len;
        Segmentation {
            seg_len,
            stride: self.stride.unwrap_or(seg_len),
            patch_len,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                variant: self.tokenizer,
                patch_len: self.patch_len,
                d_model: self.d_model,
                block_norm: self.block_norm,
                ..TokenizerConfig::default()
            },
            encoder: EncoderConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                dropout: self.dropout,
                attention: self.attention,
                ..EncoderConfig::default()
            },
            predictor_dropout: self.predictor_dropout,
            encode_scale: self.encode_scale,
            mask_scale: self.mask_scale,
        }
    }

    pub fn pretrain_config(&self) -> PretrainCfg {
        PretrainCfg {
            mask_fraction: self.mask_fraction,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: ScheduleCfg {
                target_lr: self.lr,
                warmup_epochs: self.warmup_epochs,
                decay_gamma: self.decay_gamma,
            },
            weight_decay: self.weight_decay,
            ema_target: self.ema_target,
            ema_warmup_epochs: self.ema_warmup_epochs,
            grad_clip: self.grad_clip,
            seed: self.seed,
        }
    }

    fn finetune_common(&self, base: FinetuneCfg, seed: u64) -> FinetuneCfg {
        FinetuneCfg {
            patience: self.patience,
            batch_size: self.finetune_batch_size,
            warmup_epochs: self.warmup_epochs,
            decay_gamma: self.decay_gamma,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            freeze_tokenizer: self.freeze_tokenizer,
            alpha_flat_epochs: self.alpha_flat_epochs,
            mask_fraction: self.mask_fraction,
            seed,
            ..base
        }
    }

    pub fn probe_config(&self, seed: u64) -> FinetuneCfg {
        self.finetune_common(
            FinetuneCfg {
                epochs: self.finetune_epochs,
                lr_backbone: self.probe_lr_backbone,
                lr_head: self.probe_lr_head,
                ..FinetuneCfg::probe()
            },
            seed,
        )
    }

    pub fn recon_config(&self, seed: u64) -> FinetuneCfg {
        self.finetune_common(
            FinetuneCfg {
                epochs: self.recon_epochs,
                lr_backbone: self.recon_lr_backbone,
                lr_head: self.recon_lr_head,
                ..FinetuneCfg::reconstruction()
            },
            seed,
        )
    }

    /// Pretty JSON, used as the config echo in output headers.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_size_setup() {
        let c = RunConfig::default();
        assert_eq!((c.d_model, c.n_layers, c.n_heads, c.patch_len, c.n_patches), (64, 12, 4, 512, 12));
        assert_eq!((c.epochs, c.finetune_epochs), (70, 30));
        assert_eq!(c.mask_fraction, 0.30);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"d_modle": 3}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"d_model": 32, "encode_scale": "lobes"}"#).unwrap();
        assert_eq!((c.d_model, c.encode_scale), (32, Scale::Lobes));
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "mask_scale": "parcels"}"#).unwrap();
        let o = Overrides {
            config: Some(p),
            seed: Some(9),
            ..Default::default()
        };
        let c = RunConfig::resolve(&o).unwrap();
        assert_eq!((c.seed, c.mask_scale), (9, Scale::Parcels));
    }
}
