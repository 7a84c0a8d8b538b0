//! Session metadata, segmentation, patching, spatial vocabularies, splits
//! and the on-disk session archive.

mod archive;
mod corpus;
mod meta;
mod segment;
mod split;
mod vocab;

pub use archive::{list_sessions, load_meta, load_session, read_labels, save_session, write_labels, LabelRow};
pub use corpus::{load_prepared, prepare_session, PreparedSession, Segmentation};
pub use meta::{ChannelMeta, Scale, SessionMeta, Signal, LPI_MAX};
pub use segment::{patchify, segment_recording, zscore_rows, PatchGrid, Segment, ZSCORE_EPS};
pub use split::{make_splits, Split, SplitMode, SplitSpec};
pub use vocab::{build_spatial_vocab, SpatialVocab};
