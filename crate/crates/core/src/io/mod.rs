//! File formats: checkpoints and binary PPM images.

pub(crate) mod bytes;
mod checkpoint;
pub mod ppm;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
