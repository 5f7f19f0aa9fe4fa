//! End-to-end pipeline: data synthesis and preprocessing, patch sampling,
//! the refinement forward pass, losses, training, and sliding-window
//! inference.

pub mod data;
pub mod infer;
pub mod loss;
pub mod sample;
pub mod train;

pub use data::{preprocess, synth_dataset, LabeledVolume, PreprocessInfo, SynthOptions};
pub use infer::{sliding_window_infer, InferOptions};
pub use loss::dice_focal_loss;
pub use sample::{sample_patches, Polarity, Sample, Stage, TrainConfig};
pub use train::{gradient_audit, lr_at, train, TrainReport};
