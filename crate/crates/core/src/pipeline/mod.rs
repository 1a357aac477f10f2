//! Frame coding, training and diagnostics on top of the model walk.

mod codec;
mod diag;
pub mod frame;
mod train;

pub use codec::{compress, compress_tree, compress_with_stats, decompress, decompress_voxels, measure, reconstructed_latents, EncodeStats, SegmentStats};
pub use frame::{CompressedFrame, FrameHeader};
pub use train::{train, train_examples, EpochReport, Example, TrainConfig, TrainFile};
pub use diag::{bit_breakdown, order0_bits, visualize_features};
