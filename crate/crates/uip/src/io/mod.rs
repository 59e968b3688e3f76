//! Bit-exact binary formats (datasets, checkpoints, gradient vectors) and
//! plain-text image dumps.

mod checkpoint;
mod dataset_bin;
mod image;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};
pub use dataset_bin::{load_grad_bin, load_image_bin, save_grad_bin, save_image_bin};
pub use image::write_image;
