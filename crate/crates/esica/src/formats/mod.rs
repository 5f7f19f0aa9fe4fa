//! On-disk formats: ESV1 volumes, ESCK checkpoints, dataset directories.

pub mod dataset;
pub mod esck;
pub mod esv1;

pub use dataset::{read_dataset, write_dataset, DatasetManifest};
pub use esck::{load_checkpoint, read_checkpoint_raw, save_checkpoint};
pub use esv1::{read_esv1, write_esv1, Esv1Payload, Esv1Volume};
