//! Bump maps: encoded per-pixel displacement between detailed and base depth.
//!
//! The codec is the symmetric affine map
//! `φ(d) = clamp((d + δ)/(2δ), 0, 1) · (levels − 1)`, so zero displacement
//! sits at the midpoint `(levels − 1)/2`. Pixels the face does not cover
//! hold exactly `φ(0)` and are flagged invalid.

use std::path::Path;

use thiserror::Error;

use crate::camera::{back_project, CameraPose};
use crate::harmonic::{HarmonicConfig, HarmonicError, HarmonicStencil};
use crate::io::{FormatError, KeyValues, Pnm};
use crate::model::Mesh;
use crate::occlusion::OcclusionMask;
use crate::raster::{sidecar_path, DepthMap, RasterError};

#[derive(Debug, Error)]
pub enum BumpError {
    #[error("codec needs delta_max > 0 and levels >= 2 (got {0}, {1})")]
    InvalidCodec(f64, u32),
    #[error("encoded value {0} is outside [0, {1}]")]
    OutOfRange(f64, f64),
    #[error("size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("mask covers every valid bump pixel; nothing to extrapolate from")]
    NoSupport,
    #[error("only {0} valid depth pixels; at least 3 are needed")]
    TooFewPixels(usize),
    #[error("no 2x2 block of valid depth pixels to triangulate")]
    NoQuad,
    #[error(transparent)]
    Harmonic(#[from] HarmonicError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpCodec {
    /// Displacement half-range, millimeters.
    pub delta_max: f64,
    pub levels: u32,
}

impl BumpCodec {
    pub fn new(delta_max: f64, levels: u32) -> Result<Self, BumpError> {
        if !(delta_max > 0.0 && delta_max.is_finite()) || levels < 2 {
            return Err(BumpError::InvalidCodec(delta_max, levels));
        }
        Ok(Self { delta_max, levels })
    }

    /// 256 levels.
    pub fn eight_bit(delta_max: f64) -> Result<Self, BumpError> {
        Self::new(delta_max, 256)
    }

    pub fn top(&self) -> f64 {
        (self.levels - 1) as f64
    }

    /// `φ(d)`; out-of-range displacements clamp.
    pub fn encode(&self, displacement: f64) -> f64 {
        ((displacement + self.delta_max) / (2.0 * self.delta_max)).clamp(0.0, 1.0) * self.top()
    }

    /// `φ⁻¹(v)`.
    pub fn decode(&self, encoded: f64) -> Result<f64, BumpError> {
        if !(0.0..=self.top()).contains(&encoded) {
            return Err(BumpError::OutOfRange(encoded, self.top()));
        }
        Ok(self.decode_unchecked(encoded))
    }

    fn decode_unchecked(&self, encoded: f64) -> f64 {
        encoded / self.top() * 2.0 * self.delta_max - self.delta_max
    }

    pub fn zero(&self) -> f64 {
        self.encode(0.0)
    }

    /// Nearest storable integer level.
    pub fn quantize(&self, encoded: f64) -> f64 {
        encoded.round().clamp(0.0, self.top())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BumpMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    pub codec: BumpCodec,
}

impl BumpMap {
    /// Builds a map; invalid pixels are forced to `φ(0)` and valid values
    /// are clamped into the code range.
    pub fn new(
        width: usize,
        height: usize,
        mut values: Vec<f64>,
        valid: Vec<bool>,
        codec: BumpCodec,
    ) -> Result<Self, BumpError> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(BumpError::SizeMismatch(width, height, values.len(), valid.len()));
        }
        let zero = codec.zero();
        for (v, &ok) in values.iter_mut().zip(&valid) {
            *v = if ok { v.clamp(0.0, codec.top()) } else { zero };
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
            codec,
        })
    }

    /// Map of zero displacement over `valid`.
    pub fn flat(width: usize, height: usize, valid: Vec<bool>, codec: BumpCodec) -> Result<Self, BumpError> {
        Self::new(width, height, vec![codec.zero(); width * height], valid, codec)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    /// Copy with every value rounded to an integer level.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let zero = self.codec.zero();
        for (v, &ok) in out.values.iter_mut().zip(&self.valid) {
            *v = if ok { self.codec.quantize(*v) } else { zero };
        }
        out
    }

    /// Writes an 8-bit PGM (values rounded) and a `<path>.txt` sidecar with
    /// the codec parameters.
    pub fn save_pgm(&self, path: &Path) -> Result<(), BumpError> {
        if self.codec.levels > 256 {
            return Err(FormatError::Pnm("8-bit export needs levels <= 256".into()).into());
        }
        Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            maxval: 255,
            samples: self.values.iter().map(|&v| self.codec.quantize(v) as u16).collect(),
        }
        .save(path)?;
        let mut side = KeyValues::new();
        side.set("kind", "bump");
        side.set_f64("delta_max_mm", self.codec.delta_max);
        side.set("levels", self.codec.levels.to_string());
        side.save(&sidecar_path(path))?;
        Ok(())
    }

    /// Reads a map written by [`BumpMap::save_pgm`]; `valid` marks the face
    /// pixels (the file itself does not carry validity).
    pub fn load_pgm(path: &Path, valid: Vec<bool>) -> Result<Self, BumpError> {
        let pnm = Pnm::load(path)?;
        let side = KeyValues::load(&sidecar_path(path))?;
        let codec = BumpCodec::new(side.parse_value("delta_max_mm")?, side.parse_value("levels")?)?;
        Self::new(
            pnm.width,
            pnm.height,
            pnm.samples.iter().map(|&s| s as f64).collect(),
            valid,
            codec,
        )
    }

    pub fn load_codec(path: &Path) -> Result<BumpCodec, BumpError> {
        let side = KeyValues::load(&sidecar_path(path))?;
        BumpCodec::new(side.parse_value("delta_max_mm")?, side.parse_value("levels")?)
    }
}

/// `Φ(b) = φ(d′(b) − d(b))` where both maps are valid, `φ(0)` elsewhere.
pub fn compute_bump(codec: &BumpCodec, detailed: &DepthMap, base: &DepthMap) -> Result<BumpMap, BumpError> {
    if detailed.width != base.width || detailed.height != base.height {
        return Err(BumpError::SizeMismatch(
            detailed.width,
            detailed.height,
            base.width,
            base.height,
        ));
    }
    let valid: Vec<bool> = detailed.valid.iter().zip(&base.valid).map(|(&a, &b)| a && b).collect();
    let values = detailed
        .depth
        .iter()
        .zip(&base.depth)
        .zip(&valid)
        .map(|((&dd, &d), &ok)| if ok { codec.encode(dd - d) } else { codec.zero() })
        .collect();
    BumpMap::new(base.width, base.height, values, valid, *codec)
}

/// `d′(b) = d(b) + φ⁻¹(Φ(b))` on the base's valid pixels.
pub fn apply_bump(bump: &BumpMap, base: &DepthMap) -> Result<DepthMap, BumpError> {
    if bump.width != base.width || bump.height != base.height {
        return Err(BumpError::SizeMismatch(
            bump.width,
            bump.height,
            base.width,
            base.height,
        ));
    }
    let mut out = base.clone();
    for (i, d) in out.depth.iter_mut().enumerate() {
        if base.valid[i] {
            *d += bump.codec.decode(bump.values[i])?;
        }
    }
    Ok(out)
}

/// Replaces bump values under `mask` (restricted to valid pixels) by the
/// harmonic fill of the surrounding values.
pub fn extrapolate_bump(bump: &BumpMap, mask: &OcclusionMask, config: &HarmonicConfig) -> Result<BumpMap, BumpError> {
    if mask.width != bump.width || mask.height != bump.height {
        return Err(BumpError::SizeMismatch(
            bump.width,
            bump.height,
            mask.width,
            mask.height,
        ));
    }
    let region: Vec<bool> = mask.as_slice().iter().zip(&bump.valid).map(|(&m, &v)| m && v).collect();
    if !region.iter().any(|&r| r) {
        return Ok(bump.clone());
    }
    let support = bump.valid.iter().zip(&region).filter(|(&v, &r)| v && !r).count();
    if support == 0 {
        return Err(BumpError::NoSupport);
    }
    let stencil = HarmonicStencil::new(bump.width, bump.height, &region)?;
    let mut values = bump.values.clone();
    stencil.solve(&mut values, config)?;
    BumpMap::new(bump.width, bump.height, values, bump.valid.clone(), bump.codec)
}

/// Back-projects each valid pixel center and triangulates fully valid 2×2
/// pixel blocks (counter-clockwise as seen from the camera).
pub fn depth_to_mesh(depth: &DepthMap, pose: &CameraPose) -> Result<Mesh, BumpError> {
    let count = depth.valid_count();
    if count < 3 {
        return Err(BumpError::TooFewPixels(count));
    }
    let (w, h) = (depth.width, depth.height);
    let mut index = vec![u32::MAX; w * h];
    let mut vertices = Vec::with_capacity(count);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if depth.valid[i] {
                index[i] = vertices.len() as u32;
                vertices.push(back_project(pose, x as f64 + 0.5, y as f64 + 0.5, depth.depth[i], w, h));
            }
        }
    }
    let mut triangles = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let a = index[y * w + x];
            let b = index[y * w + x + 1];
            let c = index[(y + 1) * w + x];
            let d = index[(y + 1) * w + x + 1];
            if [a, b, c, d].contains(&u32::MAX) {
                continue;
            }
            triangles.push([a, c, d]);
            triangles.push([a, d, b]);
        }
    }
    if triangles.is_empty() {
        return Err(BumpError::NoQuad);
    }
    Ok(Mesh::new(vertices, triangles))
}
