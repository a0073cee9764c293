//! Three-scale feature extraction (1/4, 1/2 and full resolution).
//!
//! The fixed extractor computes four channels per scale: intensity,
//! horizontal and vertical central-difference gradients and a 5x5 local mean,
//! on a 2x2 box-averaged image pyramid with replicate borders. The trainable
//! variant appends one 3x3 convolution and a leaky rectifier per scale.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::{read_float_dump, write_float_dump, GrayImage};
use crate::nn::{leaky_relu, leaky_relu_backward, Conv3x3, Tensor4};

pub const FIXED_CHANNELS: usize = 4;
pub const DEFAULT_TRAINABLE_CHANNELS: usize = 8;

/// Channel-planar feature map: `data[(c * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_tensor(&self) -> Tensor4 {
        Tensor4 {
            n: 1,
            c: self.channels,
            h: self.height,
            w: self.width,
            data: self.data.clone(),
        }
    }

    fn from_tensor(t: Tensor4) -> Self {
        Self {
            width: t.w,
            height: t.h,
            channels: t.c,
            data: t.data,
        }
    }

    /// Debug dump: "FMAP", u32 W, H, Cf, then f32 LE channel planes.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        write_float_dump(
            path,
            b"FMAP",
            [self.width as u32, self.height as u32, self.channels as u32],
            &self.data,
        )
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let ([w, h, c], data) = read_float_dump(path, b"FMAP")?;
        Ok(Self {
            width: w as usize,
            height: h as usize,
            channels: c as usize,
            data: data.into_iter().map(f64::from).collect(),
        })
    }
}

/// One 3x3 convolution per scale, ordered quarter, half, full.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWeights {
    pub convs: [Conv3x3; 3],
}

impl FeatureWeights {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            convs: std::array::from_fn(|_| Conv3x3::he_init(FIXED_CHANNELS, channels, rng)),
        }
    }

    pub fn channels(&self) -> usize {
        self.convs[0].cout
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv3x3::param_count).sum()
    }

    /// Flattened parameters: per scale, kernel then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for c in &self.convs {
            out.extend(&c.weight);
            out.extend(&c.bias);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch("feature parameter vector".into()));
        }
        let mut off = 0;
        for c in &mut self.convs {
            let nw = c.weight.len();
            c.weight.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = c.bias.len();
            c.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Stored as a "FEAT" float dump of the flattened parameters.
    pub fn write(&self, path: &Path) -> Result<()> {
        let p = self.params();
        write_float_dump(
            path,
            b"FEAT",
            [self.channels() as u32, 3, p.len() as u32],
            &p,
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let ([channels, _, _], data) = read_float_dump(path, b"FEAT")?;
        let mut w = Self {
            convs: std::array::from_fn(|_| Conv3x3::zeros(FIXED_CHANNELS, channels as usize)),
        };
        let p: Vec<f64> = data.into_iter().map(f64::from).collect();
        w.set_params(&p)?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Default)]
pub enum FeatureExtractor {
    #[default]
    Fixed,
    Trainable(FeatureWeights),
}

impl FeatureExtractor {
    pub fn channels(&self) -> usize {
        match self {
            FeatureExtractor::Fixed => FIXED_CHANNELS,
            FeatureExtractor::Trainable(w) => w.channels(),
        }
    }
}

/// Features ordered coarse to fine: `[quarter, half, full]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn quarter(&self) -> &FeatureMap {
        &self.levels[0]
    }
    pub fn half(&self) -> &FeatureMap {
        &self.levels[1]
    }
    pub fn full(&self) -> &FeatureMap {
        &self.levels[2]
    }
}

/// Intermediate values kept for the trainable head's backward pass.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    fixed: [Tensor4; 3],
    pre: [Tensor4; 3],
}

pub fn box_downsample(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    GrayImage::from_fn(w, h, |x, y| {
        0.25 * (img.get(2 * x, 2 * y)
            + img.get(2 * x + 1, 2 * y)
            + img.get(2 * x, 2 * y + 1)
            + img.get(2 * x + 1, 2 * y + 1))
    })
}

/// Intensity, x/y central-difference gradients and 5x5 mean, replicate-padded.
pub fn fixed_channels(img: &GrayImage) -> FeatureMap {
    let (w, h) = (img.width(), img.height());
    let at = |x: i64, y: i64| {
        *img.get(
            x.clamp(0, w as i64 - 1) as usize,
            y.clamp(0, h as i64 - 1) as usize,
        )
    };
    let mut f = FeatureMap::zeros(w, h, FIXED_CHANNELS);
    let n = w * h;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            f.data[i] = at(x, y);
            f.data[n + i] = 0.5 * (at(x + 1, y) - at(x - 1, y));
            f.data[2 * n + i] = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let mut s = 0.0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    s += at(x + dx, y + dy);
                }
            }
            f.data[3 * n + i] = s / 25.0;
        }
    }
    f
}

fn fixed_pyramid(image: &GrayImage) -> Result<[FeatureMap; 3]> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
        return Err(Error::BadDimensions {
            width: w,
            height: h,
        });
    }
    let half = box_downsample(image);
    let quarter = box_downsample(&half);
    Ok([
        fixed_channels(&quarter),
        fixed_channels(&half),
        fixed_channels(image),
    ])
}

pub fn extract_pyramid(image: &GrayImage, extractor: &FeatureExtractor) -> Result<FeaturePyramid> {
    match extractor {
        FeatureExtractor::Fixed => Ok(FeaturePyramid {
            levels: fixed_pyramid(image)?,
        }),
        FeatureExtractor::Trainable(w) => Ok(extract_trainable(image, w)?.0),
    }
}

pub fn extract_trainable(
    image: &GrayImage,
    weights: &FeatureWeights,
) -> Result<(FeaturePyramid, FeatureCache)> {
    let fixed = fixed_pyramid(image)?.map(|f| f.to_tensor());
    let mut pre_list = Vec::with_capacity(3);
    let mut levels = Vec::with_capacity(3);
    for (conv, input) in weights.convs.iter().zip(&fixed) {
        let pre = conv.forward(input)?;
        levels.push(FeatureMap::from_tensor(leaky_relu(&pre)));
        pre_list.push(pre);
    }
    let levels: [FeatureMap; 3] = levels.try_into().expect("three levels");
    let pre: [Tensor4; 3] = pre_list.try_into().expect("three levels");
    Ok((FeaturePyramid { levels }, FeatureCache { fixed, pre }))
}

/// Parameter gradients (same layout as [`FeatureWeights::params`]) given
/// gradients with respect to each output level.
pub fn feature_backward(
    weights: &FeatureWeights,
    cache: &FeatureCache,
    grads: &[FeatureMap; 3],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(weights.param_count());
    for ((conv, (fixed, pre)), g) in weights
        .convs
        .iter()
        .zip(cache.fixed.iter().zip(&cache.pre))
        .zip(grads)
    {
        let dy = g.to_tensor();
        if !dy.same_shape(pre) {
            return Err(Error::StaleCache);
        }
        let dpre = leaky_relu_backward(pre, &dy);
        let mut dw = vec![0.0; conv.weight.len()];
        let mut db = vec![0.0; conv.bias.len()];
        conv.backward(fixed, &dpre, &mut dw, &mut db)?;
        out.extend(dw);
        out.extend(db);
    }
    Ok(out)
}
