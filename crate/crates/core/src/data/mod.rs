//! Dataset files: netpbm images and masks, manifests, and the synthetic generator.

pub mod manifest;
pub mod pnm;
pub mod synth;

pub use manifest::{DatasetManifest, ManifestKind, ManifestRecord, Split};
pub use pnm::{load_image, load_mask, GrayImage, RgbImage};
pub use synth::{generate_synthetic, SynthConfig};
