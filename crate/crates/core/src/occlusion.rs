//! Occlusion identification and face completion (stage one).
//!
//! The occlusion mask is the set of pixels whose parsing label is an occluder
//! class *and* that lie inside the landmark face region (the convex hull of
//! the 68 landmarks grown by a margin). Occluders elsewhere in the frame are
//! irrelevant to the face and ignored.

use std::path::Path;

use nalgebra::Point2;
use thiserror::Error;

use crate::harmonic::{HarmonicConfig, HarmonicError, HarmonicStencil};
use crate::image::{extension, Image, ImageError};
use crate::io::{read_file, FormatError, Pnm};
use crate::landmarks::Landmarks;

pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const BROWS: u8 = 2;
    pub const EYES: u8 = 3;
    pub const NOSE: u8 = 4;
    pub const LIPS: u8 = 5;
    pub const HAIR: u8 = 6;
    pub const OCCLUDER: u8 = 7;
    /// Largest valid label id.
    pub const MAX: u8 = OCCLUDER;
}

#[derive(Debug, Error)]
pub enum OcclusionError {
    #[error("label {label} at pixel {index} is not a known class")]
    UnknownLabel { index: usize, label: u8 },
    #[error("size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("landmarks are degenerate (hull area {0}); valid landmarks are required")]
    DegenerateLandmarks(f64),
    #[error("landmarks contain non-finite coordinates")]
    NonFiniteLandmarks,
    #[error("mask has no boundary data to fill from: {0}")]
    NoBoundary(#[from] HarmonicError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Per-pixel semantic labels `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsingMap {
    pub width: usize,
    pub height: usize,
    labels: Vec<u8>,
}

impl ParsingMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self, OcclusionError> {
        if labels.len() != width * height || width == 0 || height == 0 {
            return Err(OcclusionError::SizeMismatch(width, height, labels.len(), 1));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > labels::MAX) {
            return Err(OcclusionError::UnknownLabel { index, label });
        }
        Ok(Self { width, height, labels })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Reads an 8-bit grayscale PNG or PGM whose sample values are label ids.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OcclusionError> {
        let path = path.as_ref();
        match extension(path).as_deref() {
            Some("png") => {
                let bytes = read_file(path)?;
                let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                    .map_err(|e| FormatError::Codec(e.to_string()))?
                    .to_luma8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                Self::new(w, h, img.into_raw())
            }
            Some("pgm") => {
                let pnm = Pnm::load(path)?;
                if pnm.channels != 1 || pnm.maxval > 255 {
                    return Err(FormatError::Pnm("parsing map must be 8-bit gray".into()).into());
                }
                Self::new(pnm.width, pnm.height, pnm.samples.iter().map(|&s| s as u8).collect())
            }
            _ => Err(FormatError::Extension(path.display().to_string()).into()),
        }
    }

    /// Writes an 8-bit PGM with maxval 255.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OcclusionError> {
        Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            maxval: 255,
            samples: self.labels.iter().map(|&l| l as u16).collect(),
        }
        .save(path.as_ref())?;
        Ok(())
    }
}

/// Binary mask `I_m`; `true` marks occluded pixels to remove.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    pub width: usize,
    pub height: usize,
    mask: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self, OcclusionError> {
        if mask.len() != width * height {
            return Err(OcclusionError::SizeMismatch(width, height, mask.len(), 1));
        }
        Ok(Self { width, height, mask })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            mask: vec![true; width * height],
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &OcclusionMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.mask.iter().zip(&other.mask) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn check_image(&self, image: &Image) -> Result<(), OcclusionError> {
        if image.width() != self.width || image.height() != self.height {
            return Err(OcclusionError::SizeMismatch(
                self.width,
                self.height,
                image.width(),
                image.height(),
            ));
        }
        Ok(())
    }

    /// 8-bit PGM, 255 = occluded.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OcclusionError> {
        Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            maxval: 255,
            samples: self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }
        .save(path.as_ref())?;
        Ok(())
    }

    /// Any nonzero sample counts as occluded.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, OcclusionError> {
        let pnm = Pnm::load(path.as_ref())?;
        if pnm.channels != 1 {
            return Err(FormatError::Pnm("mask must be single-channel".into()).into());
        }
        Self::new(pnm.width, pnm.height, pnm.samples.iter().map(|&s| s != 0).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionConfig {
    pub occluder_labels: Vec<u8>,
    /// Growth of the landmark hull, pixels.
    pub margin: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            occluder_labels: vec![labels::HAIR, labels::OCCLUDER],
            margin: 8.0,
        }
    }
}

/// Convex polygon in counter-clockwise order (with respect to the
/// `cross > 0` orientation of the coordinate frame).
#[derive(Debug, Clone)]
pub struct FaceRegion {
    hull: Vec<Point2<f64>>,
    margin: f64,
}

fn cross(o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

impl FaceRegion {
    pub fn from_landmarks(landmarks: &Landmarks, margin: f64) -> Result<Self, OcclusionError> {
        if !landmarks.is_finite() {
            return Err(OcclusionError::NonFiniteLandmarks);
        }
        let hull = convex_hull(landmarks.points());
        let area = polygon_area(&hull);
        if hull.len() < 3 || area < 1e-6 {
            return Err(OcclusionError::DegenerateLandmarks(area));
        }
        Ok(Self { hull, margin })
    }

    pub fn hull(&self) -> &[Point2<f64>] {
        &self.hull
    }

    /// Inside the undilated hull (edges inclusive).
    pub fn contains_strict(&self, p: &Point2<f64>) -> bool {
        let n = self.hull.len();
        (0..n).all(|i| cross(&self.hull[i], &self.hull[(i + 1) % n], p) >= 0.0)
    }

    /// Inside the hull or within `margin` of it.
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        if self.contains_strict(p) {
            return true;
        }
        let n = self.hull.len();
        (0..n).any(|i| segment_distance(p, &self.hull[i], &self.hull[(i + 1) % n]) <= self.margin)
    }

    /// Pixel-center membership over a `width × height` grid.
    pub fn rasterize(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                out.push(self.contains(&Point2::new(x as f64 + 0.5, y as f64 + 0.5)));
            }
        }
        out
    }
}

fn segment_distance(p: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Andrew's monotone chain; returns the hull with positive orientation.
pub fn convex_hull(points: &[Point2<f64>]) -> Vec<Point2<f64>> {
    let mut pts: Vec<Point2<f64>> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn polygon_area(poly: &[Point2<f64>]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// `I_m`: occluder-labelled pixels inside the landmark face region.
pub fn compute_occlusion_mask(
    q: &ParsingMap,
    landmarks: &Landmarks,
    config: &OcclusionConfig,
) -> Result<OcclusionMask, OcclusionError> {
    let region = FaceRegion::from_landmarks(landmarks, config.margin)?;
    let mut mask = vec![false; q.width * q.height];
    for y in 0..q.height {
        for x in 0..q.width {
            let i = y * q.width + x;
            if config.occluder_labels.contains(&q.labels[i])
                && region.contains(&Point2::new(x as f64 + 0.5, y as f64 + 0.5))
            {
                mask[i] = true;
            }
        }
    }
    OcclusionMask::new(q.width, q.height, mask)
}

/// `I_inco`: masked pixels zeroed in every channel.
pub fn hollow_out(i0: &Image, mask: &OcclusionMask) -> Result<Image, OcclusionError> {
    mask.check_image(i0)?;
    let c = i0.channels();
    let mut data = i0.data().to_vec();
    for (p, &m) in mask.as_slice().iter().enumerate() {
        if m {
            data[p * c..(p + 1) * c].fill(0.0);
        }
    }
    Ok(Image::from_vec(i0.width(), i0.height(), c, data)?)
}

/// Deterministic completion: harmonic fill of every masked pixel from the
/// surrounding unmasked values, per channel. Unmasked pixels are untouched.
///
/// The landmarks are accepted for interface parity with learned completion
/// backends; the harmonic fill does not need them.
pub fn complete_baseline(
    inco: &Image,
    mask: &OcclusionMask,
    _landmarks: &Landmarks,
    config: &HarmonicConfig,
) -> Result<Image, OcclusionError> {
    mask.check_image(inco)?;
    if mask.is_empty() {
        return Ok(inco.clone());
    }
    let stencil = HarmonicStencil::new(mask.width, mask.height, mask.as_slice())?;
    let mut planes = inco.planes();
    for plane in &mut planes {
        stencil.solve(plane, config)?;
    }
    // Fill values are convex combinations of in-range data; clamp guards
    // only against last-ulp rounding.
    for plane in &mut planes {
        for v in plane.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Image::from_planes(inco.width(), inco.height(), &planes)?)
}

/// Merges an externally completed image: external values inside the mask,
/// `inco` everywhere else.
pub fn merge_external_completion(
    external: &Image,
    mask: &OcclusionMask,
    inco: &Image,
) -> Result<Image, OcclusionError> {
    external.same_shape(inco)?;
    mask.check_image(inco)?;
    let c = inco.channels();
    let mut data = inco.data().to_vec();
    for (p, &m) in mask.as_slice().iter().enumerate() {
        if m {
            data[p * c..(p + 1) * c].copy_from_slice(&external.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(Image::from_vec(inco.width(), inco.height(), c, data)?)
}

pub fn load_external_completion(
    path: impl AsRef<Path>,
    mask: &OcclusionMask,
    inco: &Image,
) -> Result<Image, OcclusionError> {
    let external = Image::load(path)?;
    merge_external_completion(&external, mask, inco)
}
