//! Convolutional feature extractor with per-stage taps.
//!
//! Stage `k` (1-based) halves the spatial resolution `k` times, so a
//! `(B, 3, S, S)` input yields `(B, C_k, S / 2^k, S / 2^k)` at tap `k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, Forward};
use super::params::ParamStore;
use crate::autograd::Var;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    /// Four conv-bn-relu stages of widths 16/32/64/128, trainable from
    /// scratch at desk scale.
    Toy,
    /// ResNet-18 without its classifier; five taps (stem, layer1..layer4)
    /// of widths 64/64/128/256/512. Weights come from a checkpoint.
    Full,
}

impl BackboneMode {
    pub fn stage_widths(self) -> Vec<usize> {
        match self {
            BackboneMode::Toy => vec![16, 32, 64, 128],
            BackboneMode::Full => vec![64, 64, 128, 256, 512],
        }
    }

    pub fn final_width(self) -> usize {
        *self.stage_widths().last().expect("non-empty")
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Float, R: Rng>(
        store: &mut ParamStore<T>,
        conv_name: &str,
        bn_name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, conv_name, in_ch, out_ch, kernel, stride, pad, rng),
            bn: BatchNorm2d::new(store, bn_name, out_ch),
        }
    }

    fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.bn.forward(f, self.conv.forward(f, x)?)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn forward<'g, T: Float>(&self, f: &Forward<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.first.forward(f, x)?.relu();
        let h = self.second.forward(f, h)?;
        let skip = match &self.downsample {
            Some(ds) => ds.forward(f, x)?,
            None => x,
        };
        Ok(h.add(skip)?.relu())
    }
}

#[derive(Clone, Debug)]
enum Stage {
    /// conv3x3/2 -> bn -> relu -> conv3x3 -> bn -> relu
    Toy(ConvBn, ConvBn),
    /// ResNet stem: conv7x7/2 -> bn -> relu
    Stem(ConvBn),
    /// Optional 3x3/2 max pool, then residual blocks.
    Residual { pool: bool, blocks: Vec<BasicBlock> },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    mode: BackboneMode,
    widths: Vec<usize>,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new<T: Float, R: Rng>(store: &mut ParamStore<T>, mode: BackboneMode, rng: &mut R) -> Self {
        let widths = mode.stage_widths();
        let stages = match mode {
            BackboneMode::Toy => {
                let mut in_ch = 3;
                widths
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let p = format!("backbone.stage{}", k + 1);
                        let a = ConvBn::new(
                            store,
                            &format!("{p}.conv1"),
                            &format!("{p}.bn1"),
                            in_ch,
                            w,
                            3,
                            2,
                            1,
                            rng,
                        );
                        let b = ConvBn::new(
                            store,
                            &format!("{p}.conv2"),
                            &format!("{p}.bn2"),
                            w,
                            w,
                            3,
                            1,
                            1,
                            rng,
                        );
                        in_ch = w;
                        Stage::Toy(a, b)
                    })
                    .collect()
            }
            BackboneMode::Full => resnet18_stages(store, rng),
        };
        Self {
            mode,
            widths,
            stages,
        }
    }

    pub fn mode(&self) -> BackboneMode {
        self.mode
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    /// Checks an input shape against tap `tap` (1-based).
    pub fn validate_input(&self, shape: &[usize], tap: usize) -> Result<()> {
        if tap == 0 || tap > self.stages.len() {
            return Err(config_err!(
                "tap {} out of range 1..={}",
                tap,
                self.stages.len()
            ));
        }
        match shape {
            [b, 3, h, w] if *b > 0 && h == w && *h > 0 && h % (1 << tap) == 0 => Ok(()),
            _ => Err(shape_err!(
                "backbone expects (B, 3, S, S) with S divisible by {}, got {:?}",
                1 << tap,
                shape
            )),
        }
    }

    /// Feature maps of stages `1..=deepest`.
    pub fn forward_taps<'g, T: Float>(
        &self,
        f: &Forward<'g, '_, T>,
        images: Var<'g, T>,
        deepest: usize,
    ) -> Result<Vec<Var<'g, T>>> {
        self.validate_input(&images.shape(), deepest)?;
        let mut outs = Vec::with_capacity(deepest);
        let mut h = images;
        for stage in &self.stages[..deepest] {
            h = match stage {
                Stage::Toy(a, b) => {
                    let h = a.forward(f, h)?.relu();
                    b.forward(f, h)?.relu()
                }
                Stage::Stem(cb) => cb.forward(f, h)?.relu(),
                Stage::Residual { pool, blocks } => {
                    let mut h = if *pool { h.max_pool(3, 2, 1)? } else { h };
                    for block in blocks {
                        h = block.forward(f, h)?;
                    }
                    h
                }
            };
            outs.push(h);
        }
        Ok(outs)
    }

    /// Feature map at tap `tap` (1-based).
    pub fn forward<'g, T: Float>(
        &self,
        f: &Forward<'g, '_, T>,
        images: Var<'g, T>,
        tap: usize,
    ) -> Result<Var<'g, T>> {
        Ok(*self
            .forward_taps(f, images, tap)?
            .last()
            .expect("tap >= 1"))
    }
}

/// Parameter names follow the torchvision layout under a `backbone.` prefix
/// so converted weights load by name.
fn resnet18_stages<T: Float, R: Rng>(store: &mut ParamStore<T>, rng: &mut R) -> Vec<Stage> {
    let stem = ConvBn::new(store, "backbone.conv1", "backbone.bn1", 3, 64, 7, 2, 3, rng);
    let mut stages = vec![Stage::Stem(stem)];
    let mut in_ch = 64;
    for (layer, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        let mut blocks = Vec::new();
        for b in 0..2 {
            let p = format!("backbone.layer{}.{}", layer + 1, b);
            let stride = if layer > 0 && b == 0 { 2 } else { 1 };
            let first = ConvBn::new(
                store,
                &format!("{p}.conv1"),
                &format!("{p}.bn1"),
                in_ch,
                width,
                3,
                stride,
                1,
                rng,
            );
            let second = ConvBn::new(
                store,
                &format!("{p}.conv2"),
                &format!("{p}.bn2"),
                width,
                width,
                3,
                1,
                1,
                rng,
            );
            let downsample = (stride != 1 || in_ch != width).then(|| {
                ConvBn::new(
                    store,
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    in_ch,
                    width,
                    1,
                    stride,
                    0,
                    rng,
                )
            });
            blocks.push(BasicBlock {
                first,
                second,
                downsample,
            });
            in_ch = width;
        }
        stages.push(Stage::Residual {
            pool: layer == 0,
            blocks,
        });
    }
    stages
}
