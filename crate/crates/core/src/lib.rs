//! Training-free ensembling of image-restoration outputs.
//!
//! Predictions of several restoration models are partitioned by intensity
//! range into bin sets. For each bin set a Gaussian mixture with fixed means
//! is fitted to the ground truth of a small reference set; the mixture
//! weights become ensemble weights, stored in a [`WeightLut`] and applied
//! per pixel at test time by [`fuse_with_lut`].

pub mod binning;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod lut;
pub mod metrics;
pub mod mpem;
pub mod synth;
pub mod tensor;

pub use binning::{
    partition_prediction, partition_reference, BinGroup, BinSetKey, BinSpace, DEFAULT_BIN_WIDTH,
};
pub use error::{Error, Result};
pub use fusion::{fuse_average, fuse_global, fuse_with_lut, fuse_zzpm, GlobalWeights};
pub use lut::{deserialize_lut, estimate_lut, serialize_lut, EntrySource, LutEntry, WeightLut};
pub use metrics::{evaluate_set, psnr, ssim, ChannelMode, MetricReport};
pub use mpem::{init_priors, run_mpem, EmConfig, GmmBinModel, InitMode};
pub use synth::{gen_set, grid_search_oracle, SynthSpec};
pub use tensor::{load_image, rgb_to_y, save_image, ImageTensor, Plane, ReferenceBatch};
