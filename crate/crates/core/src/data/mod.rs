//! Manifests, score rescaling, image preprocessing, batching and the
//! synthetic toy benchmark.

pub mod image_io;
pub mod loader;
pub mod manifest;
pub mod toy;

pub use image_io::{preprocess, save_png, CropMode, CropWindow, LoadedImage, Normalization};
pub use loader::{paired_epoch, sequential_batches, single_epoch, Batch, Dataset};
pub use manifest::{rescale_scores, write_manifest, Manifest, Record, ScoreConvention, ScoreScale};
pub use toy::{generate_toy_domains, ToyOutput};
