//! Synthetic scenes with complete ground truth.
//!
//! A small face-like model (a 25×20 vertex cap) stands in for a scanned
//! morphable model. Each scene draws coefficients, pose and lighting from a
//! seed, renders the face, composites an optional occluder over the lower
//! face, and adds a band-limited ground-truth bump to the rendered depth.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bump::{apply_bump, BumpCodec, BumpError, BumpMap};
use crate::camera::{project_landmarks, CameraPose};
use crate::illumination::ShCoefficients;
use crate::image::{Image, ImageError};
use crate::io::{FormatError, KeyValues};
use crate::landmarks::{LandmarkError, Landmarks};
use crate::losses::{geo_loss, synthesis_loss, FeatureExtractor, LossError, LossWeights, SynthesisLoss};
use crate::model::{CoefficientVector, ModelError, MorphableModel, LANDMARK_COUNT};
use crate::occlusion::{labels, FaceRegion, OcclusionError, OcclusionMask, ParsingMap};
use crate::raster::{rasterize, DepthMap, RasterError};

pub const GRID_COLS: usize = 25;
pub const GRID_ROWS: usize = 20;
pub const IDENTITY_MODES: usize = 10;
pub const EXPRESSION_MODES: usize = 5;
pub const DEFAULT_MODEL_SEED: u64 = 1;
const ALBEDO_SEED: u64 = 0x0a1b_ed00;
const HALF_WIDTH_MM: f64 = 65.0;
const HALF_HEIGHT_MM: f64 = 85.0;
const HAIR_VALUE: f64 = 0.12;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown difficulty `{0}` (expected none, small or large)")]
    Difficulty(String),
    #[error("scene manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Bump(#[from] BumpError),
    #[error(transparent)]
    Occlusion(#[from] OcclusionError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Landmark(#[from] LandmarkError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Grid vertex position of the mean face before any mode is applied.
fn mean_vertex(col: usize, row: usize) -> Vector3<f64> {
    let x = -HALF_WIDTH_MM + 2.0 * HALF_WIDTH_MM * col as f64 / (GRID_COLS - 1) as f64;
    let y = -HALF_HEIGHT_MM + 2.0 * HALF_HEIGHT_MM * row as f64 / (GRID_ROWS - 1) as f64;
    let cap = (1.0 - (x / 90.0).powi(2) - (y / 115.0).powi(2)).max(0.0).sqrt();
    let nose = 18.0 * (-(x / 11.0).powi(2) - ((y + 2.0) / 20.0).powi(2)).exp();
    let sockets = -5.0
        * ((-((x - 28.0) / 10.0).powi(2) - ((y - 20.0) / 7.0).powi(2)).exp()
            + (-((x + 28.0) / 10.0).powi(2) - ((y - 20.0) / 7.0).powi(2)).exp());
    Vector3::new(x, y, 60.0 * cap + nose + sockets - 40.0)
}

fn grid_triangles() -> Vec<[u32; 3]> {
    let idx = |c: usize, r: usize| (r * GRID_COLS + c) as u32;
    let mut tris = Vec::with_capacity(2 * (GRID_COLS - 1) * (GRID_ROWS - 1));
    for r in 0..GRID_ROWS - 1 {
        for c in 0..GRID_COLS - 1 {
            // Counter-clockwise seen from +z (the camera side).
            tris.push([idx(c, r), idx(c + 1, r), idx(c + 1, r + 1)]);
            tris.push([idx(c, r), idx(c + 1, r + 1), idx(c, r + 1)]);
        }
    }
    tris
}

/// Nominal 68-point layout in model millimeters: jaw, brows, nose, eyes,
/// outer and inner lips.
fn landmark_layout() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..17 {
        let t = std::f64::consts::PI * (1.0 + i as f64 / 16.0);
        pts.push((58.0 * t.cos(), -5.0 + 72.0 * t.sin()));
    }
    for i in 0..10 {
        let k = (i % 5) as f64;
        let x = if i < 5 { -48.0 + 8.0 * k } else { 16.0 + 8.0 * k };
        pts.push((x, 38.0 + 4.0 * (1.0 - ((k - 2.0) / 2.0).powi(2))));
    }
    for i in 0..4 {
        pts.push((0.0, 28.0 - 9.0 * i as f64));
    }
    for i in 0..5 {
        pts.push((
            -14.0 + 7.0 * i as f64,
            -12.0 - 2.0 * (1.0 - ((i as f64 - 2.0) / 2.0).powi(2)),
        ));
    }
    for cx in [-28.0, 28.0] {
        for i in 0..6 {
            let t = std::f64::consts::PI * (1.0 - i as f64 / 3.0);
            pts.push((cx + 11.0 * t.cos(), 20.0 + 5.0 * t.sin()));
        }
    }
    for i in 0..12 {
        let t = std::f64::consts::PI * (1.0 - i as f64 / 6.0);
        pts.push((24.0 * t.cos(), -45.0 + 11.0 * t.sin()));
    }
    for i in 0..8 {
        let t = std::f64::consts::PI * (1.0 - i as f64 / 4.0);
        pts.push((13.0 * t.cos(), -45.0 + 5.0 * t.sin()));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

/// Nearest unused grid vertex for each nominal landmark, in order.
fn landmark_vertices() -> Vec<u32> {
    let mut used = vec![false; GRID_COLS * GRID_ROWS];
    landmark_layout()
        .into_iter()
        .map(|(x, y)| {
            let mut best = (f64::INFINITY, 0usize);
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    let i = r * GRID_COLS + c;
                    let v = mean_vertex(c, r);
                    let d = (v.x - x).powi(2) + (v.y - y).powi(2);
                    if !used[i] && d < best.0 {
                        best = (d, i);
                    }
                }
            }
            used[best.1] = true;
            best.1 as u32
        })
        .collect()
}

/// Smooth seeded identity mode: polynomial and cosine terms in normalized
/// coordinates, mostly along depth, scaled to a 6 mm peak.
fn identity_mode(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let basis = |u: f64, v: f64| {
        [
            u * u,
            v * v,
            u * v,
            u * u * v,
            u * v * v,
            (std::f64::consts::PI * u).cos() * (std::f64::consts::FRAC_PI_2 * v).cos(),
            (std::f64::consts::PI * v).sin(),
        ]
    };
    let weights: Vec<[f64; 3]> = (0..7)
        .map(|_| [0.3 * normal(rng), 0.3 * normal(rng), normal(rng)])
        .collect();
    let mut out = Vec::with_capacity(3 * GRID_COLS * GRID_ROWS);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let p = mean_vertex(c, r);
            let b = basis(p.x / HALF_WIDTH_MM, p.y / HALF_HEIGHT_MM);
            for axis in 0..3 {
                out.push(b.iter().zip(&weights).map(|(bv, w)| bv * w[axis]).sum::<f64>());
            }
        }
    }
    normalize_peak(&mut out, 6.0);
    out
}

/// Localized expression modes: jaw drop, smile, brow raise, cheek puff,
/// lip pucker.
fn expression_mode(k: usize) -> Vec<f64> {
    let bump = |p: &Vector3<f64>, cx: f64, cy: f64, rx: f64, ry: f64| {
        (-((p.x - cx) / rx).powi(2) - ((p.y - cy) / ry).powi(2)).exp()
    };
    let mut out = Vec::with_capacity(3 * GRID_COLS * GRID_ROWS);
    for r in 0..GRID_ROWS {
        for c in 0..GRID_COLS {
            let p = mean_vertex(c, r);
            let d = match k {
                0 => Vector3::new(0.0, -1.0, -0.3) * bump(&p, 0.0, -60.0, 45.0, 25.0),
                1 => {
                    let w = bump(&p, -25.0, -42.0, 12.0, 10.0) + bump(&p, 25.0, -42.0, 12.0, 10.0);
                    Vector3::new(0.3 * p.x.signum(), 1.0, 0.4) * w
                }
                2 => Vector3::new(0.0, 1.0, 0.2) * (bump(&p, -28.0, 38.0, 16.0, 9.0) + bump(&p, 28.0, 38.0, 16.0, 9.0)),
                3 => {
                    Vector3::new(0.0, 0.0, 1.0)
                        * (bump(&p, -38.0, -15.0, 14.0, 16.0) + bump(&p, 38.0, -15.0, 14.0, 16.0))
                }
                _ => Vector3::new(0.0, 0.0, 1.0) * bump(&p, 0.0, -45.0, 18.0, 10.0),
            };
            out.extend_from_slice(&[d.x, d.y, d.z]);
        }
    }
    normalize_peak(&mut out, 5.0);
    out
}

fn normalize_peak(values: &mut [f64], peak: f64) {
    let max = values
        .chunks_exact(3)
        .map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt())
        .fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v *= peak / max);
    }
}

/// Face-like model with `N = 500`, `K_id = 10`, `K_exp = 5`.
pub fn synthetic_model(seed: u64) -> MorphableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = GRID_COLS * GRID_ROWS;
    let mean: Vec<f64> = (0..GRID_ROWS)
        .flat_map(|r| (0..GRID_COLS).map(move |c| mean_vertex(c, r)))
        .flat_map(|v| [v.x, v.y, v.z])
        .collect();
    let mut shape = DMatrix::zeros(3 * n, IDENTITY_MODES);
    for k in 0..IDENTITY_MODES {
        shape.set_column(k, &DVector::from_vec(identity_mode(&mut rng)));
    }
    let mut expr = DMatrix::zeros(3 * n, EXPRESSION_MODES);
    for k in 0..EXPRESSION_MODES {
        expr.set_column(k, &DVector::from_vec(expression_mode(k)));
    }
    let shape_sigma = DVector::from_fn(IDENTITY_MODES, |k, _| 0.9f64.powi(k as i32));
    let expr_sigma = DVector::from_fn(EXPRESSION_MODES, |k, _| 1.0 - 0.1 * k as f64);
    MorphableModel::new(
        DVector::from_vec(mean),
        shape,
        expr,
        grid_triangles(),
        landmark_vertices(),
        shape_sigma,
        expr_sigma,
    )
    .expect("generated model satisfies its invariants")
}

/// Fixed per-vertex albedo: a gentle gradient plus low-frequency variation
/// from a constant seed, so that fitting and rendering always agree.
pub fn reference_albedo(model: &MorphableModel) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(ALBEDO_SEED);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    model
        .mean_shape()
        .as_slice()
        .chunks_exact(3)
        .map(|p| {
            let mut a = 0.7 + 0.1 * p[0] / HALF_WIDTH_MM - 0.08 * p[1] / HALF_HEIGHT_MM;
            for &(freq, dir, phase) in &waves {
                a += 0.04 * (freq * (p[0] * dir.cos() + p[1] * dir.sin()) + phase).sin();
            }
            a.clamp(0.45, 0.9)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    None,
    Small,
    Large,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::None => "none",
            Difficulty::Small => "small",
            Difficulty::Large => "large",
        })
    }
}

impl FromStr for Difficulty {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Difficulty::None),
            "small" => Ok(Difficulty::Small),
            "large" => Ok(Difficulty::Large),
            other => Err(SynthError::Difficulty(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub camera_distance: f64,
    pub scale_range: (f64, f64),
    /// Pitch and yaw bound, degrees.
    pub max_pitch_yaw_deg: f64,
    pub max_roll_deg: f64,
    /// Bump half-range as a fraction of the face's depth extent.
    pub bump_fraction: f64,
    pub levels: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            camera_distance: 500.0,
            scale_range: (0.45, 0.55),
            max_pitch_yaw_deg: 20.0,
            max_roll_deg: 10.0,
            bump_fraction: 0.02,
            levels: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub coeffs: CoefficientVector,
    pub pose: CameraPose,
    pub gamma: ShCoefficients,
    /// Rendered face without the occluder.
    pub clean: Image,
    /// `I₀`: the clean render with the occluder composited.
    pub image: Image,
    pub parsing: ParsingMap,
    pub landmarks: Landmarks,
    /// Ground-truth occluder pixels (label 7).
    pub occluder: OcclusionMask,
    pub depth_base: DepthMap,
    /// `Φ̃`, integer levels.
    pub bump: BumpMap,
    pub depth_detailed: DepthMap,
}

impl SyntheticScene {
    pub fn width(&self) -> usize {
        self.clean.width()
    }

    pub fn height(&self) -> usize {
        self.clean.height()
    }

    pub fn coverage(&self) -> &[bool] {
        &self.depth_base.valid
    }
}

/// Pixels inside an ellipse scaled by `k`, intersected with `allowed`.
fn ellipse_pixels(
    width: usize,
    height: usize,
    center: Point2<f64>,
    axes: (f64, f64),
    angle: f64,
    k: f64,
    allowed: &[bool],
) -> Vec<bool> {
    let (s, c) = angle.sin_cos();
    let mut out = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !allowed[i] {
                continue;
            }
            let dx = x as f64 + 0.5 - center.x;
            let dy = y as f64 + 0.5 - center.y;
            let a = (c * dx + s * dy) / (k * axes.0);
            let b = (-s * dx + c * dy) / (k * axes.1);
            out[i] = a * a + b * b <= 1.0;
        }
    }
    out
}

fn polygon_mask(points: &[Point2<f64>], margin: f64, width: usize, height: usize) -> Vec<bool> {
    match FaceRegion::from_landmarks(&Landmarks::new(points.to_vec()), margin) {
        Ok(region) => region.rasterize(width, height),
        Err(_) => vec![false; width * height],
    }
}

fn parsing_labels(lm: &Landmarks, covered: &[bool], dilated: &[bool], width: usize, height: usize) -> Vec<u8> {
    let pts = lm.points();
    let near = |range: std::ops::Range<usize>, radius: f64| {
        let mut m = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                m[y * width + x] = pts[range.clone()].iter().any(|q| (q - p).norm() <= radius);
            }
        }
        m
    };
    let brows = near(17..27, 2.5);
    let nose = near(27..36, 2.5);
    let eyes_l = polygon_mask(&pts[36..42], 0.5, width, height);
    let eyes_r = polygon_mask(&pts[42..48], 0.5, width, height);
    let lips = polygon_mask(&pts[48..60], 0.0, width, height);

    let top = covered.iter().position(|&c| c).map_or(0, |i| i / width);
    let (mut left, mut right) = (width, 0);
    for (i, &c) in covered.iter().enumerate() {
        if c {
            left = left.min(i % width);
            right = right.max(i % width);
        }
    }
    (0..width * height)
        .map(|i| {
            let (x, y) = (i % width, i / width);
            if covered[i] {
                if eyes_l[i] || eyes_r[i] {
                    labels::EYES
                } else if lips[i] {
                    labels::LIPS
                } else if brows[i] {
                    labels::BROWS
                } else if nose[i] {
                    labels::NOSE
                } else {
                    labels::SKIN
                }
            } else if !dilated[i] && y + 10 >= top && y <= top + 10 && x >= left && x <= right {
                labels::HAIR
            } else {
                labels::BACKGROUND
            }
        })
        .collect()
}

/// Renders a fully known scene from `seed`.
pub fn generate_scene(
    model: &MorphableModel,
    seed: u64,
    difficulty: Difficulty,
    config: &SceneConfig,
) -> Result<SyntheticScene, SynthError> {
    let (w, h) = (config.width, config.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = DVector::from_fn(model.identity_modes(), |k, _| model.shape_sigma()[k] * normal(&mut rng));
    let beta = DVector::from_fn(model.expression_modes(), |k, _| {
        model.expr_sigma()[k] * normal(&mut rng)
    });
    let coeffs = CoefficientVector::new(alpha, beta);
    let py = config.max_pitch_yaw_deg.to_radians();
    let rl = config.max_roll_deg.to_radians();
    let rotation = Vector3::new(
        rng.random_range(-py..=py),
        rng.random_range(-py..=py),
        rng.random_range(-rl..=rl),
    );
    let translation = Vector3::new(
        rng.random_range(-5.0..=5.0),
        rng.random_range(-5.0..=5.0),
        -config.camera_distance,
    );
    let scale = rng.random_range(config.scale_range.0..=config.scale_range.1);
    let pose = CameraPose::new(rotation, translation, scale);
    let mut g = [0.0; 9];
    g[0] = rng.random_range(2.2..=2.6);
    for v in &mut g[1..4] {
        *v = rng.random_range(-0.25..=0.25);
    }
    for v in &mut g[4..] {
        *v = rng.random_range(-0.05..=0.05);
    }
    let gamma = ShCoefficients(g);

    let mesh = model.evaluate_geometry(&coeffs)?.with_albedo(reference_albedo(model));
    let raster = rasterize(&mesh, &pose, &gamma, w, h)?;
    let covered = raster.depth.valid.clone();
    let landmarks = project_landmarks(model, &coeffs, &pose, w, h)?;
    let hull = FaceRegion::from_landmarks(&landmarks, 0.0)?.rasterize(w, h);
    let dilated =
        FaceRegion::from_landmarks(&landmarks, crate::occlusion::OcclusionConfig::default().margin)?.rasterize(w, h);
    let mut label_map = parsing_labels(&landmarks, &covered, &dilated, w, h);

    let mut clean = vec![0.0; w * h];
    for i in 0..w * h {
        if covered[i] {
            clean[i] = raster.intensity[i].clamp(0.0, 1.0);
        } else if label_map[i] == labels::HAIR {
            clean[i] = HAIR_VALUE;
        }
    }

    // Occluder: an ellipse over the mouth, clipped to covered pixels inside
    // the undilated landmark hull so that label-based masking is exact.
    let allowed: Vec<bool> = covered.iter().zip(&hull).map(|(&c, &h)| c && h).collect();
    let target_fraction = match difficulty {
        Difficulty::None => 0.0,
        Difficulty::Small => rng.random_range(0.04..=0.06),
        Difficulty::Large => rng.random_range(0.20..=0.25),
    };
    let mouth = landmarks.points()[48..68]
        .iter()
        .fold(Vector3::zeros(), |a, p| a + p.coords.push(0.0))
        / 20.0;
    let center = Point2::new(
        mouth.x + rng.random_range(-3.0..=3.0),
        mouth.y + rng.random_range(-3.0..=3.0),
    );
    let axes = (rng.random_range(1.2..=1.8), 1.0);
    let angle = rng.random_range(-0.3..=0.3);
    let occluder_color = rng.random_range(0.25..=0.6);
    let mut occluder = vec![false; w * h];
    if target_fraction > 0.0 {
        let target = (target_fraction * covered.iter().filter(|&&c| c).count() as f64).round() as usize;
        let (mut lo, mut hi) = (0.0, w.max(h) as f64 * 2.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let n = ellipse_pixels(w, h, center, axes, angle, mid, &allowed)
                .iter()
                .filter(|&&b| b)
                .count();
            if n >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        occluder = ellipse_pixels(w, h, center, axes, angle, hi, &allowed);
    }
    let mut image = clean.clone();
    for i in 0..w * h {
        if occluder[i] {
            label_map[i] = labels::OCCLUDER;
            image[i] = (occluder_color + 0.03 * normal(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let gray = |v: &[f64]| Image::from_vec(w, h, 3, v.iter().flat_map(|&x| [x, x, x]).collect());

    // Ground-truth bump: eight seeded sinusoids in pixel space.
    let (lo, hi) = raster.depth.depth_range().unwrap_or((0.0, 0.0));
    let delta_max = (config.bump_fraction * (hi - lo)).max(1e-6);
    let codec = BumpCodec::new(delta_max, config.levels)?;
    let raw: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            (
                rng.random_range(0.5..=1.0),
                rng.random_range(12.0..=40.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let total: f64 = raw.iter().map(|r| r.0).sum();
    let budget = 0.5 * delta_max * rng.random_range(0.8..=1.0);
    let mut values = vec![codec.zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !covered[i] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let disp: f64 = raw
                .iter()
                .map(|&(a, lambda, dir, phase)| {
                    budget * a / total
                        * (std::f64::consts::TAU * (px * dir.cos() + py * dir.sin()) / lambda + phase).sin()
                })
                .sum();
            values[i] = codec.quantize(codec.encode(disp));
        }
    }
    let bump = BumpMap::new(w, h, values, covered.clone(), codec)?;
    let depth_detailed = apply_bump(&bump, &raster.depth)?;

    Ok(SyntheticScene {
        seed,
        difficulty,
        coeffs,
        pose,
        gamma,
        clean: gray(&clean)?,
        image: gray(&image)?,
        parsing: ParsingMap::new(w, h, label_map)?,
        landmarks,
        occluder: OcclusionMask::new(w, h, occluder)?,
        depth_base: raster.depth,
        bump,
        depth_detailed,
    })
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("scene_{seed}"))
}

/// File names inside a scene directory.
pub mod files {
    pub const IMAGE: &str = "image.png";
    pub const CLEAN: &str = "clean.png";
    pub const PARSING: &str = "parsing.pgm";
    pub const LANDMARKS: &str = "landmarks.txt";
    pub const DEPTH_BASE: &str = "depth_base.pgm";
    pub const BUMP_GT: &str = "bump_gt.pgm";
    pub const MANIFEST: &str = "manifest.txt";
}

pub fn scene_manifest(scene: &SyntheticScene) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("seed", scene.seed.to_string());
    kv.set("difficulty", scene.difficulty.to_string());
    kv.set("width", scene.width().to_string());
    kv.set("height", scene.height().to_string());
    kv.set_indexed_f64s("alpha", scene.coeffs.alpha.as_slice());
    kv.set_indexed_f64s("beta", scene.coeffs.beta.as_slice());
    kv.set_f64s("pose", &scene.pose.to_array());
    kv.set_indexed_f64s("gamma", &scene.gamma.0);
    kv.set_f64("delta_max_mm", scene.bump.codec.delta_max);
    kv.set("levels", scene.bump.codec.levels.to_string());
    kv.set("occluder_pixels", scene.occluder.count().to_string());
    kv.set("coverage_pixels", scene.depth_base.valid_count().to_string());
    kv
}

/// Writes `scene_<seed>/` under `root` and returns its path.
pub fn write_scene(scene: &SyntheticScene, root: &Path) -> Result<PathBuf, SynthError> {
    let dir = scene_dir(root, scene.seed);
    std::fs::create_dir_all(&dir).map_err(|source| FormatError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    scene.image.save(dir.join(files::IMAGE))?;
    scene.clean.save(dir.join(files::CLEAN))?;
    scene.parsing.save(dir.join(files::PARSING))?;
    scene.landmarks.save(dir.join(files::LANDMARKS))?;
    scene.depth_base.save_pgm(&dir.join(files::DEPTH_BASE))?;
    scene.bump.save_pgm(&dir.join(files::BUMP_GT))?;
    scene_manifest(scene).save(&dir.join(files::MANIFEST))?;
    Ok(dir)
}

/// Writes the model as `model.ofmm` and one scene directory per seed under
/// `root`, generating scenes in parallel. Returns the scene paths in seed
/// order.
pub fn write_suite(
    model_seed: u64,
    seeds: &[u64],
    difficulty: Difficulty,
    cfg: &SceneConfig,
    root: &Path,
) -> Result<Vec<PathBuf>, SynthError> {
    let model = synthetic_model(model_seed);
    std::fs::create_dir_all(root).map_err(|source| FormatError::Io {
        path: root.display().to_string(),
        source,
    })?;
    model.save(root.join(crate::pipeline::MODEL_FILE))?;
    seeds
        .par_iter()
        .map(|&seed| {
            let scene = generate_scene(&model, seed, difficulty, cfg)?;
            write_scene(&scene, root)
        })
        .collect()
}

/// Ground-truth parameters stored in a scene manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub coeffs: CoefficientVector,
    pub pose: CameraPose,
    pub gamma: ShCoefficients,
}

pub fn read_scene_truth(dir: &Path) -> Result<SceneTruth, SynthError> {
    let kv = KeyValues::load(&dir.join(files::MANIFEST))?;
    let pose: [f64; 7] = kv
        .f64s("pose")?
        .try_into()
        .map_err(|_| SynthError::Manifest("pose needs 7 values".into()))?;
    let gamma: [f64; 9] = kv
        .indexed_f64s("gamma")?
        .try_into()
        .map_err(|_| SynthError::Manifest("gamma needs 9 values".into()))?;
    Ok(SceneTruth {
        seed: kv.parse_value("seed")?,
        difficulty: kv.require("difficulty")?.parse()?,
        coeffs: CoefficientVector::new(
            DVector::from_vec(kv.indexed_f64s("alpha")?),
            DVector::from_vec(kv.indexed_f64s("beta")?),
        ),
        pose: CameraPose::from_array(pose),
        gamma: ShCoefficients(gamma),
    })
}

/// Pipeline artifacts to score; any may be absent.
#[derive(Debug, Clone, Default)]
pub struct SceneOutputs {
    pub landmarks: Option<Landmarks>,
    pub detailed_depth: Option<DepthMap>,
    pub bump: Option<BumpMap>,
    pub completed: Option<Image>,
    pub mask: Option<OcclusionMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneScore {
    pub landmark_rmse_px: Option<f64>,
    pub depth_rmse_inside_mm: Option<f64>,
    pub depth_rmse_outside_mm: Option<f64>,
    pub bump_l1: Option<f64>,
    pub pixel_loss: Option<f64>,
    pub style_loss: Option<f64>,
    pub synthesis_loss: Option<f64>,
    pub mask_iou: Option<f64>,
    pub missing: Vec<String>,
}

fn rmse(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Depth RMSE inside and outside `region` over pixels valid in both maps.
pub fn depth_rmse_split(pred: &DepthMap, truth: &DepthMap, region: &[bool]) -> (Option<f64>, Option<f64>) {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for (i, &inside) in region.iter().enumerate().take(truth.depth.len()) {
        if !(pred.valid[i] && truth.valid[i]) {
            continue;
        }
        let e = (pred.depth[i] - truth.depth[i]).powi(2);
        if inside {
            si += e;
            ni += 1;
        } else {
            so += e;
            no += 1;
        }
    }
    (rmse(si, ni), rmse(so, no))
}

/// Compares pipeline outputs against the scene's ground truth.
///
/// A missing bump is scored as the flat `φ(0)` map.
pub fn score_scene(scene: &SyntheticScene, outputs: &SceneOutputs) -> Result<SceneScore, SynthError> {
    let mut missing = Vec::new();
    let landmark_rmse_px = match &outputs.landmarks {
        Some(lm) => Some(lm.rmse(&scene.landmarks)),
        None => {
            missing.push("landmarks".to_string());
            None
        }
    };
    let (depth_rmse_inside_mm, depth_rmse_outside_mm) = match &outputs.detailed_depth {
        Some(d) => {
            scene.depth_detailed.same_size(d)?;
            depth_rmse_split(d, &scene.depth_detailed, scene.occluder.as_slice())
        }
        None => {
            missing.push("detailed_depth".to_string());
            (None, None)
        }
    };
    let flat;
    let bump = match &outputs.bump {
        Some(b) => b,
        None => {
            missing.push("bump".to_string());
            flat = BumpMap::flat(
                scene.width(),
                scene.height(),
                scene.bump.valid().to_vec(),
                scene.bump.codec,
            )?;
            &flat
        }
    };
    let bump_l1 =
        Some(geo_loss(bump.values(), scene.bump.values(), scene.width(), scene.height()).map_err(loss_error)?);
    let mut losses: Option<SynthesisLoss> = None;
    match &outputs.completed {
        Some(i1) if !scene.occluder.is_empty() => {
            let fx = FeatureExtractor::standard(i1.channels());
            losses = Some(
                synthesis_loss(i1, &scene.clean, &scene.occluder, &LossWeights::default(), &fx).map_err(loss_error)?,
            );
        }
        Some(_) => {}
        None => missing.push("completed".to_string()),
    }
    let mask_iou = match &outputs.mask {
        Some(m) => Some(m.iou(&scene.occluder)),
        None => {
            missing.push("mask".to_string());
            None
        }
    };
    Ok(SceneScore {
        landmark_rmse_px,
        depth_rmse_inside_mm,
        depth_rmse_outside_mm,
        bump_l1,
        pixel_loss: losses.map(|l| l.pixel),
        style_loss: losses.map(|l| l.style),
        synthesis_loss: losses.map(|l| l.total),
        mask_iou,
        missing,
    })
}

fn loss_error(e: LossError) -> SynthError {
    SynthError::Manifest(format!("scoring failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_dimensions() {
        let m = synthetic_model(DEFAULT_MODEL_SEED);
        assert_eq!(m.vertex_count(), 500);
        assert_eq!(m.identity_modes(), 10);
        assert_eq!(m.expression_modes(), 5);
        let mut lm = m.landmark_indices().to_vec();
        lm.sort_unstable();
        lm.dedup();
        assert_eq!(lm.len(), 68);
    }

    #[test]
    fn grid_faces_the_camera() {
        let m = synthetic_model(DEFAULT_MODEL_SEED);
        let mesh = m.evaluate_geometry(&CoefficientVector::zeros(&m)).unwrap();
        let normals = crate::model::vertex_normals(&mesh);
        let center = normals[10 * GRID_COLS + 12].unwrap();
        assert!(center.z > 0.5, "{center:?}");
    }

    #[test]
    fn albedo_in_range() {
        let m = synthetic_model(DEFAULT_MODEL_SEED);
        let a = reference_albedo(&m);
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|v| (0.45..=0.9).contains(v)));
    }

    #[test]
    fn difficulty_parses() {
        assert_eq!("large".parse::<Difficulty>().unwrap(), Difficulty::Large);
        assert!("huge".parse::<Difficulty>().is_err());
        assert_eq!(Difficulty::Small.to_string(), "small");
    }
}
