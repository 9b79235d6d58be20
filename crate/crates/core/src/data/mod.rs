//! Synthetic training data: clean scenes, moiré degradation, the Bayer
//! sensor model, and the clip file format.

pub mod clip;
pub mod synth;

pub use clip::{generate_clip, read_clip, write_clip, ClipMeta, VideoClip};
pub use synth::{apply_moire, demosaic_bilinear, mosaic_bayer, render_clean, MoireParams, Scene};
