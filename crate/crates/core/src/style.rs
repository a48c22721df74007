//! Feature styles: channel-wise spatial mean and standard deviation of a
//! feature map, their mixing, and AdaIN re-normalization.
//!
//! The "variance" half of a style is a standard deviation (square root of the
//! population variance), floored by [`STYLE_EPS`] inside the root.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, input_err, shape_err, Result};
use crate::kernels;
use crate::tensor::{Float, Tensor};

/// Variance floor inside the standard-deviation square root.
pub const STYLE_EPS: f64 = 1e-6;

/// Style of one feature map: per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StyleVector {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(shape_err!("style mean has {} channels, std has {}", mean.len(), std.len()));
        }
        if std.iter().any(|&s| s < 0.0) {
            return Err(input_err!("style standard deviations must be non-negative"));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `concat(mean, std)`, length `2C`.
    pub fn concat(&self) -> Vec<f64> {
        concat_style(&self.mean, &self.std).expect("lengths agree by construction")
    }

    /// Inverse of [`StyleVector::concat`].
    pub fn split(f: &[f64]) -> Result<Self> {
        if f.len() % 2 != 0 {
            return Err(shape_err!("style vector length {} is odd", f.len()));
        }
        let c = f.len() / 2;
        Self::new(f[..c].to_vec(), f[c..].to_vec())
    }
}

/// Per-sample styles of a `(B, C, H, W)` feature map.
pub fn extract_style<T: Float>(features: &Tensor<T>) -> Result<Vec<StyleVector>> {
    let (b, c, h, w) = features.dims4()?;
    if h * w == 0 {
        return Err(shape_err!("empty spatial extent in {:?}", features.shape()));
    }
    let means = kernels::plane_means(features.data(), h * w);
    let stds = kernels::plane_stds(features.data(), &means, h * w, T::cst(STYLE_EPS));
    Ok((0..b)
        .map(|i| StyleVector {
            mean: means[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect(),
            std: stds[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect(),
        })
        .collect())
}

pub fn concat_style(mean: &[f64], std: &[f64]) -> Result<Vec<f64>> {
    if mean.len() != std.len() {
        return Err(shape_err!("cannot concatenate mean of length {} with std of length {}", mean.len(), std.len()));
    }
    let mut f = Vec::with_capacity(2 * mean.len());
    f.extend_from_slice(mean);
    f.extend_from_slice(std);
    Ok(f)
}

/// Concatenated forms of a mixed source style and a target style.
pub fn mixed_style_concat(mixed: &StyleVector, target: &StyleVector) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        concat_style(&mixed.mean, &mixed.std)?,
        concat_style(&target.mean, &target.std)?,
    ))
}

/// How many mixing coefficients one draw produces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One coefficient per sample.
    #[default]
    PerSample,
    /// One coefficient shared by the whole batch.
    PerBatch,
}

/// Mixing coefficients drawn from `Beta(alpha, alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDraw {
    pub lambdas: Vec<f64>,
    pub alpha: f64,
}

pub fn sample_mix<R: Rng>(alpha: f64, batch: usize, mode: LambdaMode, rng: &mut R) -> Result<MixDraw> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(config_err!("alpha must be a positive real, got {alpha}"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| config_err!("Beta({alpha}, {alpha}): {e}"))?;
    let mut draw = || beta.sample(rng).clamp(0.0, 1.0);
    let lambdas = match mode {
        LambdaMode::PerSample => (0..batch).map(|_| draw()).collect(),
        LambdaMode::PerBatch => vec![draw(); batch],
    };
    Ok(MixDraw { lambdas, alpha })
}

/// Uniformly random mixing partner for every sample (self-pairing allowed).
pub fn sample_partners<R: Rng>(batch: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    perm
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(input_err!("mixing coefficient {lambda} outside [0, 1]"));
    }
    Ok(())
}

fn lerp(lambda: f64, a: f64, b: f64) -> f64 {
    lambda * a + (1.0 - lambda) * b
}

/// Convex combination of two styles and their quality labels with one
/// coefficient.
pub fn mix_styles_and_labels(
    a: &StyleVector,
    b: &StyleVector,
    ya: f64,
    yb: f64,
    lambda: f64,
) -> Result<(StyleVector, f64)> {
    check_lambda(lambda)?;
    if a.channels() != b.channels() {
        return Err(shape_err!("cannot mix styles with {} and {} channels", a.channels(), b.channels()));
    }
    let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(&x, &y)| lerp(lambda, x, y)).collect();
    Ok((
        StyleVector {
            mean: mix(&a.mean, &b.mean),
            std: mix(&a.std, &b.std),
        },
        lerp(lambda, ya, yb),
    ))
}

/// Re-normalizes each sample of `features` to carry `targets[b]`.
pub fn adain_transfer<T: Float>(features: &Tensor<T>, targets: &[StyleVector]) -> Result<Tensor<T>> {
    let (b, c, _, _) = features.dims4()?;
    if targets.len() != b || targets.iter().any(|t| t.channels() != c) {
        return Err(shape_err!(
            "need {} target styles with {} channels for feature map {:?}",
            b,
            c,
            features.shape()
        ));
    }
    let flat = |pick: fn(&StyleVector) -> &Vec<f64>| -> Result<Tensor<T>> {
        let data: Vec<f64> = targets.iter().flat_map(|t| pick(t).iter().copied()).collect();
        Tensor::from_f64(&[b, c], &data)
    };
    let g = Graph::new();
    let x = g.constant(features.clone());
    let mean = g.constant(flat(|t| &t.mean)?);
    let std = g.constant(flat(|t| &t.std)?);
    let out = x.adain(mean, std, T::cst(STYLE_EPS))?;
    Ok((*out.value()).clone())
}

/// Feature-level mixup: `lambda * a + (1 - lambda) * b` for maps and labels.
pub fn feature_mixup<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ya: &[f64],
    yb: &[f64],
    lambda: f64,
) -> Result<(Tensor<T>, Vec<f64>)> {
    check_lambda(lambda)?;
    if a.shape() != b.shape() {
        return Err(shape_err!("cannot mix feature maps {:?} and {:?}", a.shape(), b.shape()));
    }
    if ya.len() != yb.len() {
        return Err(shape_err!("label counts {} and {} differ", ya.len(), yb.len()));
    }
    let l = T::cst(lambda);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&u, &v)| l * u + (T::one() - l) * v)
        .collect();
    let labels = ya.iter().zip(yb).map(|(&u, &v)| lerp(lambda, u, v)).collect();
    Ok((Tensor::new(a.shape(), data)?, labels))
}

/// Style of a batch as graph variables, `(B, C)` each.
#[derive(Clone, Copy, Debug)]
pub struct StyleVars<'g, T: Float> {
    pub mean: Var<'g, T>,
    pub std: Var<'g, T>,
}

impl<'g, T: Float> StyleVars<'g, T> {
    pub fn of(features: Var<'g, T>) -> Result<Self> {
        Ok(Self {
            mean: features.spatial_mean()?,
            std: features.spatial_std(T::cst(STYLE_EPS))?,
        })
    }

    /// `(B, 2C)` concatenated style.
    pub fn concat(&self) -> Result<Var<'g, T>> {
        self.mean.concat_cols(self.std)
    }

    /// Per-sample convex combination with partner rows `perm`.
    pub fn mix(&self, perm: &[usize], lambdas: &[f64]) -> Result<Self> {
        let l: Vec<T> = lambdas.iter().map(|&v| T::cst(v)).collect();
        Ok(Self {
            mean: self.mean.mix_rows(perm, &l)?,
            std: self.std.mix_rows(perm, &l)?,
        })
    }

    /// `features` re-normalized to this style.
    pub fn transfer(&self, features: Var<'g, T>) -> Result<Var<'g, T>> {
        features.adain(self.mean, self.std, T::cst(STYLE_EPS))
    }
}

/// Label counterpart of [`StyleVars::mix`].
pub fn mix_labels(labels: &[f64], perm: &[usize], lambdas: &[f64]) -> Vec<f64> {
    perm.iter()
        .zip(lambdas)
        .enumerate()
        .map(|(i, (&j, &l))| lerp(l, labels[i], labels[j]))
        .collect()
}
