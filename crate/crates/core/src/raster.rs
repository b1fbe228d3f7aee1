//! Z-buffered scan conversion of a posed mesh into depth, normal and shading
//! channels.
//!
//! Pixels are sampled at their centers `(x + 0.5, y + 0.5)`. A center on a
//! shared edge belongs to exactly one triangle by the top-left rule. Depth,
//! normals and albedo are interpolated with screen-space barycentrics, which
//! is exact under weak perspective.

use std::path::Path;

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{project_camera_points, transform_points, CameraPose};
use crate::illumination::{sh_basis_unchecked, ShCoefficients};
use crate::io::{FormatError, KeyValues, Pnm};
use crate::model::{vertex_normals, Mesh};

/// Depth stored at pixels the face does not cover.
pub const INVALID_DEPTH: f64 = 0.0;
/// Triangle id stored at uncovered pixels.
pub const NO_TRIANGLE: u32 = u32::MAX;

const BAND_ROWS: usize = 16;
const DEPTH_TIE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("image must be at least 1x1, got {0}x{1}")]
    EmptyImage(usize, usize),
    #[error("depth maps differ in size: {0}x{1} vs {2}x{3}")]
    Mismatch(usize, usize, usize, usize),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Per-pixel camera depth `d(b)` in millimeters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![INVALID_DEPTH; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Fully valid map with the given depths.
    pub fn from_depths(width: usize, height: usize, depth: Vec<f64>) -> Self {
        assert_eq!(depth.len(), width * height);
        Self {
            width,
            height,
            depth,
            valid: vec![true; width * height],
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn same_size(&self, other: &DepthMap) -> Result<(), RasterError> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(RasterError::Mismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ))
        }
    }

    /// Range of valid depths, if any pixel is valid.
    pub fn depth_range(&self) -> Option<(f64, f64)> {
        self.depth
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .fold(None, |acc, (&d, _)| match acc {
                None => Some((d, d)),
                Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
            })
    }

    /// Writes a 16-bit PGM plus `<path>.txt` holding the affine mapping
    /// `depth_mm = offset_mm + scale_mm · value`; value 0 marks invalid pixels.
    pub fn save_pgm(&self, path: &Path) -> Result<(), RasterError> {
        let (lo, hi) = self.depth_range().unwrap_or((0.0, 0.0));
        let scale = if hi > lo { (hi - lo) / 65534.0 } else { 1e-6 };
        let offset = lo - scale;
        let samples = self
            .depth
            .iter()
            .zip(&self.valid)
            .map(|(&d, &v)| {
                if v {
                    ((d - offset) / scale).round().clamp(1.0, 65535.0) as u16
                } else {
                    0
                }
            })
            .collect();
        Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            maxval: 65535,
            samples,
        }
        .save(path)?;
        let mut side = KeyValues::new();
        side.set("kind", "depth");
        side.set_f64("offset_mm", offset);
        side.set_f64("scale_mm", scale);
        side.set("sentinel", "0");
        side.save(&sidecar_path(path))?;
        Ok(())
    }

    pub fn load_pgm(path: &Path) -> Result<Self, RasterError> {
        let pnm = Pnm::load(path)?;
        if pnm.channels != 1 {
            return Err(FormatError::Pnm("depth map must be single-channel".into()).into());
        }
        let side = KeyValues::load(&sidecar_path(path))?;
        let offset: f64 = side.parse_value("offset_mm")?;
        let scale: f64 = side.parse_value("scale_mm")?;
        let sentinel: u16 = side.parse_value("sentinel")?;
        let valid: Vec<bool> = pnm.samples.iter().map(|&s| s != sentinel).collect();
        let depth = pnm
            .samples
            .iter()
            .zip(&valid)
            .map(|(&s, &v)| if v { offset + scale * s as f64 } else { INVALID_DEPTH })
            .collect();
        Ok(Self {
            width: pnm.width,
            height: pnm.height,
            depth,
            valid,
        })
    }
}

/// Sidecar file next to an exported map: `<path>.txt`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterOutput {
    pub depth: DepthMap,
    /// Camera-space unit normals; zero at uncovered pixels.
    pub normals: Vec<Vector3<f64>>,
    /// Interpolated albedo; zero at uncovered pixels.
    pub albedo: Vec<f64>,
    /// SH-shaded intensity; zero at uncovered pixels.
    pub intensity: Vec<f64>,
    pub triangle_id: Vec<u32>,
    /// Weights of the winning triangle's vertices, in mesh vertex order.
    pub barycentric: Vec<[f64; 3]>,
}

impl RasterOutput {
    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }
}

pub fn coverage_mask(raster: &RasterOutput) -> Vec<bool> {
    raster.depth.valid.clone()
}

/// Screen-space setup of one non-degenerate triangle.
#[derive(Debug, Clone, Copy)]
struct Setup {
    id: u32,
    /// Screen positions ordered so the signed area is positive.
    p: [Point2<f64>; 3],
    depth: [f64; 3],
    /// Mesh vertex slot that each `p[k]` came from.
    slot: [usize; 3],
    area: f64,
    top_left: [bool; 3],
    x_range: (usize, usize),
    y_range: (usize, usize),
}

#[inline]
fn edge(a: &Point2<f64>, b: &Point2<f64>, p: &Point2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn is_top_left(a: &Point2<f64>, b: &Point2<f64>) -> bool {
    let dy = b.y - a.y;
    let dx = b.x - a.x;
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Pixel-center index range covered by `[lo, hi]` along one axis.
fn pixel_span(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(size as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize))
}

fn setup_triangle(id: u32, screen: [Point2<f64>; 3], depth: [f64; 3], width: usize, height: usize) -> Option<Setup> {
    let mut p = screen;
    let mut d = depth;
    let mut slot = [0, 1, 2];
    let mut area = edge(&p[0], &p[1], &p[2]);
    if !area.is_finite() || area == 0.0 {
        return None;
    }
    if area < 0.0 {
        p.swap(1, 2);
        d.swap(1, 2);
        slot.swap(1, 2);
        area = -area;
    }
    let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
    let x_range = pixel_span(min_x, max_x, width)?;
    let y_range = pixel_span(min_y, max_y, height)?;
    Some(Setup {
        id,
        p,
        depth: d,
        slot,
        area,
        // edge k is opposite vertex k: (p1,p2), (p2,p0), (p0,p1)
        top_left: [
            is_top_left(&p[1], &p[2]),
            is_top_left(&p[2], &p[0]),
            is_top_left(&p[0], &p[1]),
        ],
        x_range,
        y_range,
    })
}

/// Coverage test and barycentrics (in setup order) for one sample.
#[inline]
fn sample(s: &Setup, c: &Point2<f64>) -> Option<[f64; 3]> {
    let e = [
        edge(&s.p[1], &s.p[2], c),
        edge(&s.p[2], &s.p[0], c),
        edge(&s.p[0], &s.p[1], c),
    ];
    for (&ek, &top_left) in e.iter().zip(&s.top_left) {
        if !(ek > 0.0 || (ek == 0.0 && top_left)) {
            return None;
        }
    }
    Some([e[0] / s.area, e[1] / s.area, e[2] / s.area])
}

struct Fragment {
    depth: f64,
    id: u32,
    weights: [f64; 3],
}

/// Renders `mesh` under `pose` with SH lighting `gamma`.
///
/// Vertices without an albedo channel default to albedo 1.
pub fn rasterize(
    mesh: &Mesh,
    pose: &CameraPose,
    gamma: &ShCoefficients,
    width: usize,
    height: usize,
) -> Result<RasterOutput, RasterError> {
    if mesh.triangles.is_empty() {
        return Err(RasterError::EmptyMesh);
    }
    if width == 0 || height == 0 {
        return Err(RasterError::EmptyImage(width, height));
    }

    let camera = transform_points(pose, &mesh.vertices);
    let projected = project_camera_points(pose.scale, &camera, width, height);
    let rot = pose.rotation_matrix();
    let normals: Vec<Option<Vector3<f64>>> = vertex_normals(mesh).into_iter().map(|n| n.map(|n| rot * n)).collect();

    let setups: Vec<Setup> = mesh
        .triangles
        .iter()
        .enumerate()
        .filter_map(|(id, tri)| {
            let screen = tri.map(|i| projected[i as usize].pixel());
            let depth = tri.map(|i| projected[i as usize].depth);
            setup_triangle(id as u32, screen, depth, width, height)
        })
        .collect();

    // Each band owns a disjoint run of rows, so bands need no synchronization.
    let mut fragments: Vec<Option<Fragment>> = (0..width * height).map(|_| None).collect();
    fragments
        .par_chunks_mut(BAND_ROWS * width)
        .enumerate()
        .for_each(|(band, buf)| {
            let y0 = band * BAND_ROWS;
            let y1 = y0 + buf.len() / width;
            for s in &setups {
                let ys = s.y_range.0.max(y0);
                let ye = s.y_range.1.min(y1 - 1);
                if s.y_range.1 < y0 || s.y_range.0 >= y1 || ys > ye {
                    continue;
                }
                for y in ys..=ye {
                    for x in s.x_range.0..=s.x_range.1 {
                        let c = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                        let Some(w) = sample(s, &c) else { continue };
                        let depth = w[0] * s.depth[0] + w[1] * s.depth[1] + w[2] * s.depth[2];
                        let slot = &mut buf[(y - y0) * width + x];
                        let wins = match slot {
                            None => true,
                            Some(f) => depth < f.depth - DEPTH_TIE,
                        };
                        if wins {
                            let mut weights = [0.0; 3];
                            for k in 0..3 {
                                weights[s.slot[k]] = w[k];
                            }
                            *slot = Some(Fragment {
                                depth,
                                id: s.id,
                                weights,
                            });
                        }
                    }
                }
            }
        });

    let mut out = RasterOutput {
        depth: DepthMap::invalid(width, height),
        normals: vec![Vector3::zeros(); width * height],
        albedo: vec![0.0; width * height],
        intensity: vec![0.0; width * height],
        triangle_id: vec![NO_TRIANGLE; width * height],
        barycentric: vec![[0.0; 3]; width * height],
    };
    for (i, frag) in fragments.into_iter().enumerate() {
        let Some(frag) = frag else { continue };
        let tri = mesh.triangles[frag.id as usize];
        let (normal, albedo) = surface_sample(mesh, &camera, &normals, tri, &frag.weights);
        out.depth.depth[i] = frag.depth;
        out.depth.valid[i] = true;
        out.normals[i] = normal;
        out.albedo[i] = albedo;
        out.intensity[i] = (albedo * gamma.irradiance(&sh_basis_unchecked(&normal))).max(0.0);
        out.triangle_id[i] = frag.id;
        out.barycentric[i] = frag.weights;
    }
    Ok(out)
}

/// Interpolated unit normal and albedo at a point on triangle `tri`.
///
/// Falls back to the face normal when the interpolated normal vanishes.
pub(crate) fn surface_sample(
    mesh: &Mesh,
    camera: &[Vector3<f64>],
    normals: &[Option<Vector3<f64>>],
    tri: [u32; 3],
    weights: &[f64; 3],
) -> (Vector3<f64>, f64) {
    let mut n = Vector3::zeros();
    let mut albedo = 0.0;
    for k in 0..3 {
        let vi = tri[k] as usize;
        if let Some(vn) = normals[vi] {
            n += weights[k] * vn;
        }
        albedo += weights[k] * mesh.albedo.as_ref().map_or(1.0, |a| a[vi]);
    }
    let len = n.norm();
    let normal = if len > 1e-12 {
        n / len
    } else {
        let [a, b, c] = tri.map(|i| camera[i as usize]);
        (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vector3::z)
    };
    (normal, albedo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_triangle(depth: f64, pts: [(f64, f64); 3]) -> Mesh {
        // Identity pose, scale 1: pixel u = x + w/2, v = h/2 − y, depth = −z.
        Mesh::new(
            pts.iter().map(|&(x, y)| Vector3::new(x, y, -depth)).collect(),
            vec![[0, 1, 2]],
        )
    }

    #[test]
    fn offscreen_mesh_covers_nothing() {
        let mesh = flat_triangle(100.0, [(100.0, 100.0), (110.0, 100.0), (100.0, 110.0)]);
        let out = rasterize(&mesh, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap();
        assert!(coverage_mask(&out).iter().all(|&v| !v));
        assert!(out.triangle_id.iter().all(|&t| t == NO_TRIANGLE));
        assert!(out.depth.depth.iter().all(|&d| d == INVALID_DEPTH));
    }

    #[test]
    fn axis_aligned_triangle_covers_known_pixels() {
        // Screen vertices (2,2), (10,2), (2,10) on a 16x16 image.
        let mesh = flat_triangle(100.0, [(-6.0, 6.0), (2.0, 6.0), (-6.0, -2.0)]);
        let out = rasterize(&mesh, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = cx > 2.0 && cy > 2.0 && (cx - 2.0) + (cy - 2.0) < 8.0;
                let i = y * 16 + x;
                assert_eq!(out.depth.valid[i], inside, "pixel ({x},{y})");
                if inside {
                    assert!((out.depth.depth[i] - 100.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        let far = flat_triangle(100.0, [(-6.0, 6.0), (6.0, 6.0), (-6.0, -6.0)]);
        let near = flat_triangle(50.0, [(-4.0, 4.0), (6.0, 4.0), (-4.0, -6.0)]);
        let mut vertices = far.vertices.clone();
        vertices.extend(near.vertices.iter().copied());
        let both = Mesh::new(vertices, vec![[0, 1, 2], [3, 4, 5]]);
        let out = rasterize(&both, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap();
        let solo_near = rasterize(&near, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap();
        for i in 0..256 {
            if solo_near.depth.valid[i] {
                assert_eq!(out.depth.depth[i], 50.0);
                assert_eq!(out.triangle_id[i], 1);
            }
        }
    }

    #[test]
    fn equal_depth_tie_goes_to_lower_index() {
        let a = flat_triangle(80.0, [(-6.0, 6.0), (6.0, 6.0), (-6.0, -6.0)]);
        let mut vertices = a.vertices.clone();
        vertices.extend(a.vertices.iter().copied());
        let mesh = Mesh::new(vertices, vec![[0, 1, 2], [3, 4, 5]]);
        let out = rasterize(&mesh, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap();
        assert!(out.depth.valid.iter().any(|&v| v));
        assert!(out.triangle_id.iter().all(|&t| t == 0 || t == NO_TRIANGLE));
    }

    #[test]
    fn shared_edge_pixels_are_owned_once() {
        // Square split along its diagonal, diagonal passing through pixel centers.
        let mesh = Mesh::new(
            vec![
                Vector3::new(-4.0, 4.0, -10.0),
                Vector3::new(4.0, 4.0, -10.0),
                Vector3::new(4.0, -4.0, -10.0),
                Vector3::new(-4.0, -4.0, -10.0),
            ],
            vec![[0, 3, 2], [0, 2, 1]],
        );
        let single = |tri: [u32; 3]| {
            let m = Mesh::new(mesh.vertices.clone(), vec![tri]);
            rasterize(&m, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 16, 16).unwrap()
        };
        let a = single([0, 3, 2]);
        let b = single([0, 2, 1]);
        for i in 0..256 {
            assert!(!(a.depth.valid[i] && b.depth.valid[i]), "pixel {i} double-covered");
        }
        let count = a.depth.valid_count() + b.depth.valid_count();
        assert_eq!(count, 64);
    }

    #[test]
    fn normals_face_camera_and_shade() {
        let mesh = flat_triangle(20.0, [(-6.0, 6.0), (-6.0, -6.0), (6.0, -6.0)]).with_albedo(vec![0.5; 3]);
        let out = rasterize(&mesh, &CameraPose::identity(1.0), &ShCoefficients::ambient(0.8), 16, 16).unwrap();
        for i in 0..256 {
            if out.depth.valid[i] {
                assert!((out.normals[i] - Vector3::z()).norm() < 1e-12);
                assert!((out.intensity[i] - 0.4).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_pgm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = DepthMap::invalid(4, 3);
        for i in 0..12 {
            if i % 3 != 0 {
                map.valid[i] = true;
                map.depth[i] = 480.0 + i as f64 * 1.37;
            }
        }
        let path = dir.path().join("d.pgm");
        map.save_pgm(&path).unwrap();
        let back = DepthMap::load_pgm(&path).unwrap();
        assert_eq!(back.valid, map.valid);
        let step = (11.0 * 1.37) / 65534.0;
        for i in 0..12 {
            assert!((back.depth[i] - map.depth[i]).abs() <= step);
        }
    }

    #[test]
    fn rejects_empty_inputs() {
        let mesh = Mesh::new(vec![Vector3::zeros()], vec![]);
        assert!(matches!(
            rasterize(&mesh, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 4, 4),
            Err(RasterError::EmptyMesh)
        ));
        let tri = flat_triangle(1.0, [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert!(rasterize(&tri, &CameraPose::identity(1.0), &ShCoefficients::ambient(1.0), 0, 4).is_err());
    }
}
