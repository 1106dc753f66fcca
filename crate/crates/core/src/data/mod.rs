//! Images, the synthetic occluded-identity corpus, augmentation, PK batch
//! sampling and the on-disk dataset layout.

pub mod augment;
pub mod dataset;
pub mod image_io;
pub mod sampler;
pub mod synth;

pub use augment::{augment, AugmentConfig, AugmentPlan};
pub use dataset::{Dataset, DatasetError, Split};
pub use image_io::{load_pgm, load_ppm, save_pgm, save_ppm, ImageError};
pub use sampler::PkSampler;
pub use synth::{synth_generate, Rect, SynthConfig, SynthRegions};

use crate::tensor::Tensor;

/// One person image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonImage {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub identity: usize,
    pub camera: usize,
    pub occluded: bool,
    /// Generator ground truth; `None` for images read from disk.
    pub regions: Option<SynthRegions>,
}

impl PersonImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}
