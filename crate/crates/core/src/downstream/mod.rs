//! Finetuning heads and evaluation on top of a pretrained model.

mod finetune;
mod interpret;
mod metrics;
mod probe;
mod recon;
mod results;

pub use finetune::{FinetuneCfg, FitReport, LrGroup};
pub use interpret::{interpret_weights, percentile, weighted_mean_maps, ParcelWeight};
pub use metrics::{auc, mean_sem, mse, r_squared};
pub use probe::{pooled_embedding, probe_eval, probe_train, Labeled, Probe};
pub use recon::{recon_eval, recon_finetune, ChannelScore, ReconEval, ReconLoss, Reconstructor};
pub use results::{
    read_comments, read_interpret, read_results, summary_rows, write_interpret, write_results, InterpretRow, ResultRow,
    SUMMARY_SESSION,
};
