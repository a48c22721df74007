//! Deterministic synthetic two-domain benchmark.
//!
//! Pristine images are procedural textures. The source domain is degraded by
//! Gaussian blur or additive Gaussian noise, the target domain by block
//! pixelation. Labels are the PSNR of the degraded image against its pristine
//! version, computed on the 8-bit data, clipped to `[15, 45]` dB and mapped
//! linearly to `[0, 5]`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::save_png;
use super::manifest::{write_manifest, MAX_SCORE};
use crate::error::{input_err, Error, Result};

pub const TOY_SIZE: usize = 64;
pub const PSNR_FLOOR: f64 = 15.0;
pub const PSNR_CEIL: f64 = 45.0;

pub const BLUR_SIGMAS: [f64; 5] = [0.6, 1.0, 1.6, 2.5, 4.0];
pub const NOISE_SIGMAS: [f64; 5] = [3.0, 7.0, 14.0, 26.0, 45.0];
/// `(block size, blend weight)`: the pixelated image is blended with the
/// pristine one at the given weight.
pub const PIXEL_LEVELS: [(usize, f64); 5] = [(2, 0.3), (2, 0.65), (3, 1.0), (5, 1.0), (10, 1.0)];

pub const SOURCE_MANIFEST: &str = "source.csv";
pub const TARGET_MANIFEST: &str = "target.csv";
pub const TARGET_SCORES: &str = "target_scores.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    Blur(u8),
    Noise(u8),
    Pixelate(u8),
}

/// Paths written by [`generate_toy_domains`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutput {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    /// Eval-only target labels.
    pub target_scores: PathBuf,
    pub degradations: Vec<(String, Degradation)>,
}

/// Maps PSNR in dB to a quality label in `[0, 5]`.
pub fn psnr_to_label(psnr: f64) -> f64 {
    let p = if psnr.is_nan() { PSNR_CEIL } else { psnr.clamp(PSNR_FLOOR, PSNR_CEIL) };
    (p - PSNR_FLOOR) / (PSNR_CEIL - PSNR_FLOOR) * MAX_SCORE
}

/// PSNR of two equally sized 8-bit images; infinite when identical.
pub fn psnr_u8(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(input_err!("psnr of {:?} vs {:?} images", a.dimensions(), b.dimensions()));
    }
    let n = a.as_raw().len() as f64;
    let se: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / (se / n)).log10())
}

type Planes = [Vec<f64>; 3];

fn to_image(p: &Planes, size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let i = y as usize * size + x as usize;
        Rgb(std::array::from_fn(|c| p[c][i].round().clamp(0.0, 255.0) as u8))
    })
}

fn from_image(img: &RgbImage) -> Planes {
    let mut p: Planes = Default::default();
    for c in 0..3 {
        p[c] = img.pixels().map(|px| f64::from(px.0[c])).collect();
    }
    p
}

/// Sum of oriented sinusoids plus soft Gaussian blobs, stretched to
/// `[20, 235]` per image.
pub fn pristine_texture<R: Rng>(size: usize, rng: &mut R) -> RgbImage {
    let mut p: Planes = std::array::from_fn(|_| vec![0.0; size * size]);
    let waves = rng.random_range(3..=6);
    for _ in 0..waves {
        let freq = rng.random_range(0.5..7.0) / size as f64;
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.3..1.0);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..1.0));
        let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
        for y in 0..size {
            for x in 0..size {
                let v = amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).sin();
                for c in 0..3 {
                    p[c][y * size + x] += color[c] * v;
                }
            }
        }
    }
    let blobs = rng.random_range(2..=5);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(3.0..14.0);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = (-d2 / (2.0 * r * r)).exp();
                for c in 0..3 {
                    p[c][y * size + x] += color[c] * g;
                }
            }
        }
    }
    let (lo, hi) = p
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-9);
    for v in p.iter_mut().flatten() {
        *v = 20.0 + 215.0 * (*v - lo) / span;
    }
    to_image(&p, size)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let size = img.width() as usize;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let src = from_image(img);
    let mut out: Planes = Default::default();
    for c in 0..3 {
        let mut tmp = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                tmp[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * src[c][y * size + reflect(x as isize + k as isize - radius, size)])
                    .sum::<f64>()
                    / norm;
            }
        }
        let mut res = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                res[y * size + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - radius, size) * size + x])
                    .sum::<f64>()
                    / norm;
            }
        }
        out[c] = res;
    }
    to_image(&out, size)
}

pub fn add_noise<R: Rng>(img: &RgbImage, sigma: f64, rng: &mut R) -> RgbImage {
    let size = img.width() as usize;
    let normal = Normal::new(0.0, sigma).expect("noise sigma is positive");
    let mut p = from_image(img);
    for y in 0..size {
        for x in 0..size {
            for plane in p.iter_mut() {
                plane[y * size + x] += normal.sample(rng);
            }
        }
    }
    to_image(&p, size)
}

/// Replaces each `block x block` cell (partial cells at the border included)
/// by its mean color.
pub fn pixelate(img: &RgbImage, block: usize) -> RgbImage {
    let size = img.width() as usize;
    let src = from_image(img);
    let mut out: Planes = std::array::from_fn(|_| vec![0.0; size * size]);
    for by in (0..size).step_by(block) {
        for bx in (0..size).step_by(block) {
            let ys = by..(by + block).min(size);
            let xs = bx..(bx + block).min(size);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..3 {
                let mean = ys
                    .clone()
                    .flat_map(|y| xs.clone().map(move |x| (y, x)))
                    .map(|(y, x)| src[c][y * size + x])
                    .sum::<f64>()
                    / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        out[c][y * size + x] = mean;
                    }
                }
            }
        }
    }
    to_image(&out, size)
}

/// `(1 - w) * a + w * b`, rounded back to 8 bits.
pub fn blend(a: &RgbImage, b: &RgbImage, w: f64) -> RgbImage {
    let (pa, pb) = (from_image(a), from_image(b));
    let mixed: Planes = std::array::from_fn(|c| pa[c].iter().zip(&pb[c]).map(|(x, y)| (1.0 - w) * x + w * y).collect());
    to_image(&mixed, a.width() as usize)
}

fn degrade<R: Rng>(img: &RgbImage, d: Degradation, rng: &mut R) -> RgbImage {
    match d {
        Degradation::Blur(l) => gaussian_blur(img, BLUR_SIGMAS[l as usize]),
        Degradation::Noise(l) => {
            let jitter = rng.random_range(0.85..1.15);
            add_noise(img, NOISE_SIGMAS[l as usize] * jitter, rng)
        }
        Degradation::Pixelate(l) => {
            let (block, weight) = PIXEL_LEVELS[l as usize];
            blend(img, &pixelate(img, block), weight)
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the benchmark under `out_dir`: degraded images in `source/` and
/// `target/`, their pristine versions under `pristine/`, and the three
/// manifests. Identical arguments produce byte-identical files.
pub fn generate_toy_domains(out_dir: &Path, n_source: usize, n_target: usize, seed: u64) -> Result<ToyOutput> {
    if n_source == 0 || n_target == 0 {
        return Err(input_err!("toy domains need at least one image each"));
    }
    for sub in ["source", "target", "pristine/source", "pristine/target"] {
        create_dir(&out_dir.join(sub))?;
    }
    let mut degradations = Vec::new();
    let mut source_rows = Vec::new();
    let mut target_rows = Vec::new();
    let mut score_rows = Vec::new();
    for (domain, count) in [("source", n_source), ("target", n_target)] {
        let domain_id: u64 = if domain == "source" { 1 } else { 2 };
        for i in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((domain_id << 32) | i as u64);
            let pristine = pristine_texture(TOY_SIZE, &mut rng);
            let level = rng.random_range(0..5u8);
            let d = if domain == "source" {
                if rng.random_bool(0.5) {
                    Degradation::Blur(level)
                } else {
                    Degradation::Noise(level)
                }
            } else {
                Degradation::Pixelate(level)
            };
            let degraded = degrade(&pristine, d, &mut rng);
            let label = psnr_to_label(psnr_u8(&degraded, &pristine)?);
            let rel = format!("{domain}/{}{i:04}.png", &domain[..1]);
            save_png(&out_dir.join(&rel), &degraded)?;
            save_png(&out_dir.join("pristine").join(&rel), &pristine)?;
            degradations.push((rel.clone(), d));
            if domain == "source" {
                source_rows.push((rel, Some(label)));
            } else {
                target_rows.push((rel.clone(), None));
                score_rows.push((rel, Some(label)));
            }
        }
    }
    let out = ToyOutput {
        source_manifest: out_dir.join(SOURCE_MANIFEST),
        target_manifest: out_dir.join(TARGET_MANIFEST),
        target_scores: out_dir.join(TARGET_SCORES),
        degradations,
    };
    write_manifest(&out.source_manifest, &source_rows)?;
    write_manifest(&out.target_manifest, &target_rows)?;
    write_manifest(&out.target_scores, &score_rows)?;
    Ok(out)
}

/// Location of the pristine reference written for a degraded toy image.
pub fn pristine_path(out_dir: &Path, image: &Path) -> Option<PathBuf> {
    let rel = image.strip_prefix(out_dir).ok()?;
    Some(out_dir.join("pristine").join(rel))
}
