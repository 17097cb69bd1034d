//! Dataset ingestion, file formats, batch assembly and synthetic data.

mod batch;
mod clip;
mod feat;
mod manifest;
mod norm;
pub mod synth;

pub use batch::{clip_target, condition_for, frame_weight, history_from_clip, make_batch, make_item, masked_frame};
pub use clip::{MotionClip, KEYPOINTS, KEYPOINT_NAMES, MCLIP_MAGIC, MCLIP_VERSION};
pub use feat::{align_audio, FeatMatrix, FEAT_MAGIC};
pub use manifest::{ChainEntry, ClipEntry, Dataset, Manifest, Sample};
pub use norm::{Normalizer, STD_FLOOR};
pub use synth::{swap_permutation, synth_dataset, to_dataset, write_dataset, SynthClip, SynthSpec};
