//! Training and evaluation losses, each paired with its (sub)gradient.
//!
//! - landmark loss: squared L2 distance of stacked coordinates;
//! - pixel loss: L1 image difference normalized by the mask size;
//! - style loss: L1 distance of masked-region Gram matrices;
//! - synthesis loss: weighted pixel + style;
//! - geometric loss: L1 on bump values and their forward differences.
//!
//! L1 terms use `sign(0) = 0` as the subgradient.

pub mod features;
pub mod gradcheck;

use nalgebra::DMatrix;
use thiserror::Error;

pub use features::{FeatureExtractor, FeatureMap};
pub use gradcheck::{finite_difference_check, finite_difference_check_l1, GradientReport};

use crate::image::{Image, ImageError};
use crate::landmarks::Landmarks;
use crate::occlusion::OcclusionMask;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0} vs {1} elements")]
    Shape(usize, usize),
    #[error("mask is empty; pixel loss normalization is undefined")]
    EmptyMask,
    #[error("feature stack expects {expected} input channels, found {found}")]
    Channels { expected: usize, found: usize },
    #[error("image {width}x{height} is smaller than the feature stack minimum side {min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pixe: f64,
    pub lambda_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pixe: 1.0,
            lambda_style: 250.0,
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_mask(image: &Image, mask: &OcclusionMask) -> Result<(), LossError> {
    if image.width() != mask.width || image.height() != mask.height {
        return Err(LossError::Shape(image.pixel_count(), mask.width * mask.height));
    }
    Ok(())
}

/// `‖pred − gt‖²` over all 2×68 coordinates.
pub fn lmk_loss(pred: &Landmarks, gt: &Landmarks) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::Shape(pred.len(), gt.len()));
    }
    Ok(pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(a, b)| (a - b).norm_squared())
        .sum())
}

/// Gradient of [`lmk_loss`] with respect to the flattened prediction.
pub fn lmk_loss_gradient(pred: &Landmarks, gt: &Landmarks) -> Result<Vec<f64>, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::Shape(pred.len(), gt.len()));
    }
    Ok(pred
        .to_flat()
        .iter()
        .zip(gt.to_flat())
        .map(|(p, g)| 2.0 * (p - g))
        .collect())
}

/// Mask size `M_s`: masked pixels times channels.
pub fn mask_size(mask: &OcclusionMask, channels: usize) -> usize {
    mask.count() * channels
}

/// `(1/M_s) · Σ |i1 − i0|` over every pixel and channel.
pub fn pixel_loss(i1: &Image, i0: &Image, mask: &OcclusionMask) -> Result<f64, LossError> {
    i1.same_shape(i0)?;
    check_mask(i1, mask)?;
    let ms = mask_size(mask, i1.channels());
    if ms == 0 {
        return Err(LossError::EmptyMask);
    }
    let sum: f64 = i1.data().iter().zip(i0.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / ms as f64)
}

/// Subgradient of [`pixel_loss`] with respect to `i1`'s samples.
pub fn pixel_loss_gradient(i1: &Image, i0: &Image, mask: &OcclusionMask) -> Result<Vec<f64>, LossError> {
    i1.same_shape(i0)?;
    check_mask(i1, mask)?;
    let ms = mask_size(mask, i1.channels());
    if ms == 0 {
        return Err(LossError::EmptyMask);
    }
    Ok(i1
        .data()
        .iter()
        .zip(i0.data())
        .map(|(a, b)| sign(a - b) / ms as f64)
        .collect())
}

/// `φᵀφ` with `φ` flattened to `(H·W) × R`.
pub fn gram(layer: &FeatureMap) -> DMatrix<f64> {
    let r = layer.channels;
    let mut g = DMatrix::zeros(r, r);
    for a in 0..r {
        let fa = layer.plane(a);
        for b in a..r {
            let v: f64 = fa.iter().zip(layer.plane(b)).map(|(x, y)| x * y).sum();
            g[(a, b)] = v;
            g[(b, a)] = v;
        }
    }
    g
}

/// Image times mask, as channel-major planes for the feature stack.
fn masked_input(image: &Image, mask: &OcclusionMask) -> FeatureMap {
    let planes = image.planes();
    let mut data = Vec::with_capacity(image.channels() * image.pixel_count());
    for plane in planes {
        data.extend(
            plane
                .iter()
                .zip(mask.as_slice())
                .map(|(&v, &m)| if m { v } else { 0.0 }),
        );
    }
    FeatureMap {
        channels: image.channels(),
        height: image.height(),
        width: image.width(),
        data,
    }
}

/// Normalizer `1 / (R² · R·H·W)` of one layer's Gram difference.
fn style_weight(layer: &FeatureMap) -> f64 {
    let r = layer.channels as f64;
    1.0 / (r * r * r * layer.height as f64 * layer.width as f64)
}

/// Style distance between the masked regions of `i1` and `i0`.
pub fn style_loss(
    i1: &Image,
    i0: &Image,
    mask: &OcclusionMask,
    extractor: &FeatureExtractor,
) -> Result<f64, LossError> {
    i1.same_shape(i0)?;
    check_mask(i1, mask)?;
    let f1 = extractor.extract(masked_input(i1, mask))?;
    let f0 = extractor.extract(masked_input(i0, mask))?;
    Ok(f1
        .iter()
        .zip(&f0)
        .map(|(a, b)| {
            let diff = gram(a) - gram(b);
            style_weight(a) * diff.iter().map(|v| v.abs()).sum::<f64>()
        })
        .sum())
}

/// Subgradient of [`style_loss`] with respect to `i1`'s samples
/// (row-major, channel-interleaved like [`Image::data`]).
pub fn style_loss_gradient(
    i1: &Image,
    i0: &Image,
    mask: &OcclusionMask,
    extractor: &FeatureExtractor,
) -> Result<Vec<f64>, LossError> {
    i1.same_shape(i0)?;
    check_mask(i1, mask)?;
    let cache = extractor.forward(masked_input(i1, mask))?;
    let f0 = extractor.extract(masked_input(i0, mask))?;
    let grads: Vec<FeatureMap> = cache
        .features
        .iter()
        .zip(&f0)
        .map(|(a, b)| {
            let w = style_weight(a);
            let s = (gram(a) - gram(b)).map(|v| w * sign(v));
            // dL/dφ_a = Σ_b (S_ab + S_ba) φ_b = 2 Σ_b S_ab φ_b (S symmetric)
            let mut g = FeatureMap::zeros(a.channels, a.height, a.width);
            let n = a.height * a.width;
            for ca in 0..a.channels {
                for cb in 0..a.channels {
                    let coeff = 2.0 * s[(ca, cb)];
                    if coeff == 0.0 {
                        continue;
                    }
                    let src = a.plane(cb);
                    for (dst, v) in g.data[ca * n..(ca + 1) * n].iter_mut().zip(src) {
                        *dst += coeff * v;
                    }
                }
            }
            g
        })
        .collect();
    let grad_input = extractor.backward(&cache, &grads);

    let c = i1.channels();
    let n = i1.pixel_count();
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        let plane = grad_input.plane(ch);
        for p in 0..n {
            if mask.as_slice()[p] {
                out[p * c + ch] = plane[p];
            }
        }
    }
    Ok(out)
}

/// Quantities of [`style_loss`] whose sign changes are kinks: Gram
/// differences and the pre-activations of `i1`'s features. Exact zeros are
/// left out; they come from fully masked-out neighborhoods and do not move
/// with `i1`.
pub fn style_loss_residuals(
    i1: &Image,
    i0: &Image,
    mask: &OcclusionMask,
    extractor: &FeatureExtractor,
) -> Result<Vec<f64>, LossError> {
    i1.same_shape(i0)?;
    check_mask(i1, mask)?;
    let cache = extractor.forward(masked_input(i1, mask))?;
    let f0 = extractor.extract(masked_input(i0, mask))?;
    let mut out = Vec::new();
    for (a, b) in cache.features.iter().zip(&f0) {
        out.extend((gram(a) - gram(b)).iter().copied());
    }
    for z in cache.pre_activations() {
        out.extend_from_slice(&z.data);
    }
    out.retain(|&v| v != 0.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisLoss {
    pub pixel: f64,
    pub style: f64,
    pub total: f64,
}

/// `λ_pixe · pixel + λ_style · style`.
pub fn synthesis_loss(
    i1: &Image,
    i0: &Image,
    mask: &OcclusionMask,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
) -> Result<SynthesisLoss, LossError> {
    let pixel = pixel_loss(i1, i0, mask)?;
    let style = style_loss(i1, i0, mask, extractor)?;
    Ok(SynthesisLoss {
        pixel,
        style,
        total: weights.lambda_pixe * pixel + weights.lambda_style * style,
    })
}

pub fn synthesis_loss_gradient(
    i1: &Image,
    i0: &Image,
    mask: &OcclusionMask,
    weights: &LossWeights,
    extractor: &FeatureExtractor,
) -> Result<Vec<f64>, LossError> {
    let gp = pixel_loss_gradient(i1, i0, mask)?;
    let gs = style_loss_gradient(i1, i0, mask, extractor)?;
    Ok(gp
        .iter()
        .zip(&gs)
        .map(|(p, s)| weights.lambda_pixe * p + weights.lambda_style * s)
        .collect())
}

/// Forward differences along x and y; the last column (row) is zero.
pub fn forward_differences(values: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; width * height];
    let mut dy = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                dx[i] = values[i + 1] - values[i];
            }
            if y + 1 < height {
                dy[i] = values[i + width] - values[i];
            }
        }
    }
    (dx, dy)
}

fn check_grid(bump: &[f64], gt: &[f64], width: usize, height: usize) -> Result<(), LossError> {
    if bump.len() != width * height {
        return Err(LossError::Shape(bump.len(), width * height));
    }
    if gt.len() != bump.len() {
        return Err(LossError::Shape(bump.len(), gt.len()));
    }
    Ok(())
}

/// `‖Φ̃ − Φ‖₁ + ‖∂ₓΦ̃ − ∂ₓΦ‖₁ + ‖∂ᵧΦ̃ − ∂ᵧΦ‖₁`.
pub fn geo_loss(bump: &[f64], bump_gt: &[f64], width: usize, height: usize) -> Result<f64, LossError> {
    check_grid(bump, bump_gt, width, height)?;
    let (dx, dy) = forward_differences(bump, width, height);
    let (gx, gy) = forward_differences(bump_gt, width, height);
    let value: f64 = bump.iter().zip(bump_gt).map(|(a, b)| (a - b).abs()).sum();
    let grad_x: f64 = dx.iter().zip(&gx).map(|(a, b)| (a - b).abs()).sum();
    let grad_y: f64 = dy.iter().zip(&gy).map(|(a, b)| (a - b).abs()).sum();
    Ok(value + grad_x + grad_y)
}

/// Residuals of [`geo_loss`] that can change sign: value differences and
/// the forward differences that are not pinned to zero at the boundary.
pub fn geo_loss_residuals(bump: &[f64], bump_gt: &[f64], width: usize, height: usize) -> Vec<f64> {
    let (dx, dy) = forward_differences(bump, width, height);
    let (gx, gy) = forward_differences(bump_gt, width, height);
    let mut out: Vec<f64> = bump.iter().zip(bump_gt).map(|(a, b)| a - b).collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                out.push(dx[i] - gx[i]);
            }
            if y + 1 < height {
                out.push(dy[i] - gy[i]);
            }
        }
    }
    out
}

/// Subgradient of [`geo_loss`] with respect to `bump`.
pub fn geo_loss_gradient(bump: &[f64], bump_gt: &[f64], width: usize, height: usize) -> Result<Vec<f64>, LossError> {
    check_grid(bump, bump_gt, width, height)?;
    let (dx, dy) = forward_differences(bump, width, height);
    let (gx, gy) = forward_differences(bump_gt, width, height);
    let mut grad: Vec<f64> = bump.iter().zip(bump_gt).map(|(a, b)| sign(a - b)).collect();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if x + 1 < width {
                let s = sign(dx[i] - gx[i]);
                grad[i + 1] += s;
                grad[i] -= s;
            }
            if y + 1 < height {
                let s = sign(dy[i] - gy[i]);
                grad[i + width] += s;
                grad[i] -= s;
            }
        }
    }
    Ok(grad)
}
