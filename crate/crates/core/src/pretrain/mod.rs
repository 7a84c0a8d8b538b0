//! Masked latent reconstruction pretraining.

mod checkpoint;
mod ema;
mod model;
mod predictor;
mod trainer;

pub use checkpoint::{load_checkpoint, load_model, read_manifest, save_checkpoint, Manifest, TensorEntry, CHECKPOINT_VERSION};
pub use ema::ema_update;
pub use model::{masked_latent_loss, patch_rows, Model, ModelConfig};
pub use predictor::{Predictor, PREDICTOR_LAYERS};
pub use trainer::{derive_seed, MetricsWriter, PretrainCfg, StepRecord, TrainSession, Trainer};
