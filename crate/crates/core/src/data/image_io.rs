use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::tensor::Tensor;

/// A decoded 8-bit RGB image with the path it came from.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub path: PathBuf,
    pub pixels: RgbImage,
}

impl LoadedImage {
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            pixels: img.to_rgb8(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }
}

pub fn save_png(path: &Path, pixels: &RgbImage) -> Result<()> {
    pixels
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Train,
    Test,
}

/// Crop placement and flip decision for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    /// Uniform crop position and a fair-coin horizontal flip (train), or the
    /// exact center without flip (test).
    pub fn choose<R: Rng>(image: &LoadedImage, mode: CropMode, crop: usize, rng: &mut R) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if crop == 0 || h < crop || w < crop {
            return Err(input_err!(
                "{} is {w}x{h}, smaller than crop {crop}",
                image.path.display()
            ));
        }
        Ok(match mode {
            CropMode::Train => {
                let top = rng.random_range(0..=h - crop);
                let left = rng.random_range(0..=w - crop);
                let flip = rng.random_bool(0.5);
                Self {
                    top,
                    left,
                    size: crop,
                    flip,
                }
            }
            CropMode::Test => Self {
                top: (h - crop) / 2,
                left: (w - crop) / 2,
                size: crop,
                flip: false,
            },
        })
    }
}

/// Per-channel standardization `(x - mean) / std` applied after scaling
/// pixels to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const TOY: Self = Self {
        mean: [0.5; 3],
        std: [0.5; 3],
    };
    pub const IMAGENET: Self = Self {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
    pub const IDENTITY: Self = Self {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// Writes the cropped, optionally flipped window as normalized CHW floats into
/// `out` (length `3 * size * size`).
pub fn write_window(image: &LoadedImage, win: CropWindow, norm: &Normalization, out: &mut [f32]) {
    let s = win.size;
    debug_assert_eq!(out.len(), 3 * s * s);
    let scale: [f32; 3] = std::array::from_fn(|c| 1.0 / (255.0 * norm.std[c]));
    let shift: [f32; 3] = std::array::from_fn(|c| norm.mean[c] / norm.std[c]);
    for y in 0..s {
        for x in 0..s {
            let sx = if win.flip { win.left + s - 1 - x } else { win.left + x };
            let p = image.pixels.get_pixel(sx as u32, (win.top + y) as u32).0;
            for c in 0..3 {
                out[(c * s + y) * s + x] = f32::from(p[c]) * scale[c] - shift[c];
            }
        }
    }
}

/// One preprocessed sample as a `(3, crop, crop)` tensor with values in
/// `[0, 1]`.
pub fn preprocess<R: Rng>(image: &LoadedImage, mode: CropMode, crop: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let win = CropWindow::choose(image, mode, crop, rng)?;
    let mut data = vec![0.0f32; 3 * crop * crop];
    write_window(image, win, &Normalization::IDENTITY, &mut data);
    Tensor::new(&[3, crop, crop], data)
}

/// Reverses the width axis of a `(C, H, W)` tensor.
pub fn flip_horizontal(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let &[c, h, w] = t.shape() else {
        return Err(input_err!("expected a (C, H, W) image, got {:?}", t.shape()));
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for plane in 0..c * h {
        for x in 0..w {
            out[plane * w + x] = src[plane * w + w - 1 - x];
        }
    }
    Tensor::new(&[c, h, w], out)
}
