//! Linear morphable face model: mean shape plus identity and expression bases.
//!
//! Vertices are stored flattened as `[x0, y0, z0, x1, y1, z1, ...]`, so a
//! basis column is a full-length displacement field.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

/// Number of landmark vertices every model carries.
pub const LANDMARK_COUNT: usize = 68;

const MAGIC: &[u8; 5] = b"OFMM1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected OFMM1")]
    BadMagic,
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("index out of range in `{field}`[{position}]: {value} >= {limit}")]
    IndexOutOfRange {
        field: &'static str,
        position: usize,
        value: u32,
        limit: usize,
    },
    #[error("invalid dimension `{field}` = {value}: must be at least {min}")]
    TooSmall {
        field: &'static str,
        value: usize,
        min: usize,
    },
    #[error("`{field}`[{position}] = {value} is not strictly positive")]
    NonPositiveSigma {
        field: &'static str,
        position: usize,
        value: f64,
    },
    #[error("triangle {0} repeats a vertex")]
    DegenerateTriangle(usize),
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
}

/// Identity and expression weights for one face.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

impl CoefficientVector {
    pub fn zeros(model: &MorphableModel) -> Self {
        Self {
            alpha: DVector::zeros(model.identity_modes()),
            beta: DVector::zeros(model.expression_modes()),
        }
    }

    pub fn new(alpha: DVector<f64>, beta: DVector<f64>) -> Self {
        Self { alpha, beta }
    }
}

/// A triangle mesh. Triangles are shared with the model that produced it.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Arc<Vec<[u32; 3]>>,
    /// Per-vertex reflectance in `[0, 1]`.
    pub albedo: Option<Vec<f64>>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Self {
        Self {
            vertices,
            triangles: Arc::new(triangles),
            albedo: None,
        }
    }

    pub fn with_albedo(mut self, albedo: Vec<f64>) -> Self {
        debug_assert_eq!(albedo.len(), self.vertices.len());
        self.albedo = Some(albedo);
        self
    }

    pub fn translated(&self, offset: Vector3<f64>) -> Self {
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v += offset;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    shape_basis: DMatrix<f64>,
    expr_basis: DMatrix<f64>,
    triangles: Arc<Vec<[u32; 3]>>,
    landmark_indices: Vec<u32>,
    shape_sigma: DVector<f64>,
    expr_sigma: DVector<f64>,
}

impl MorphableModel {
    /// Builds a model, checking every structural invariant.
    pub fn new(
        mean_shape: DVector<f64>,
        shape_basis: DMatrix<f64>,
        expr_basis: DMatrix<f64>,
        triangles: Vec<[u32; 3]>,
        landmark_indices: Vec<u32>,
        shape_sigma: DVector<f64>,
        expr_sigma: DVector<f64>,
    ) -> Result<Self, ModelError> {
        if !mean_shape.len().is_multiple_of(3) {
            return Err(ModelError::DimensionMismatch {
                field: "mean_shape",
                expected: 3 * (mean_shape.len() / 3),
                found: mean_shape.len(),
            });
        }
        let n = mean_shape.len() / 3;
        check_min("N", n, 3)?;
        check_min("K_id", shape_basis.ncols(), 1)?;
        check_min("K_exp", expr_basis.ncols(), 1)?;
        check_min("T", triangles.len(), 1)?;
        check_len("shape_basis", 3 * n, shape_basis.nrows())?;
        check_len("expr_basis", 3 * n, expr_basis.nrows())?;
        check_len("shape_sigma", shape_basis.ncols(), shape_sigma.len())?;
        check_len("expr_sigma", expr_basis.ncols(), expr_sigma.len())?;
        check_len("landmark_indices", LANDMARK_COUNT, landmark_indices.len())?;

        for (field, values) in [
            ("mean_shape", mean_shape.as_slice()),
            ("shape_basis", shape_basis.as_slice()),
            ("expr_basis", expr_basis.as_slice()),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(field));
            }
        }
        for (field, sigma) in [("shape_sigma", &shape_sigma), ("expr_sigma", &expr_sigma)] {
            for (position, &value) in sigma.iter().enumerate() {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(ModelError::NonPositiveSigma { field, position, value });
                }
            }
        }
        for (t, tri) in triangles.iter().enumerate() {
            for (k, &value) in tri.iter().enumerate() {
                if value as usize >= n {
                    return Err(ModelError::IndexOutOfRange {
                        field: "triangles",
                        position: 3 * t + k,
                        value,
                        limit: n,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(ModelError::DegenerateTriangle(t));
            }
        }
        for (position, &value) in landmark_indices.iter().enumerate() {
            if value as usize >= n {
                return Err(ModelError::IndexOutOfRange {
                    field: "landmark_indices",
                    position,
                    value,
                    limit: n,
                });
            }
        }

        Ok(Self {
            mean_shape,
            shape_basis,
            expr_basis,
            triangles: Arc::new(triangles),
            landmark_indices,
            shape_sigma,
            expr_sigma,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn identity_modes(&self) -> usize {
        self.shape_basis.ncols()
    }

    pub fn expression_modes(&self) -> usize {
        self.expr_basis.ncols()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn shape_basis(&self) -> &DMatrix<f64> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &DMatrix<f64> {
        &self.expr_basis
    }

    pub fn triangles(&self) -> &Arc<Vec<[u32; 3]>> {
        &self.triangles
    }

    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    pub fn shape_sigma(&self) -> &DVector<f64> {
        &self.shape_sigma
    }

    pub fn expr_sigma(&self) -> &DVector<f64> {
        &self.expr_sigma
    }

    /// Same model with the landmark vertices reassigned.
    pub fn with_landmark_indices(&self, landmark_indices: Vec<u32>) -> Result<Self, ModelError> {
        Self::new(
            self.mean_shape.clone(),
            self.shape_basis.clone(),
            self.expr_basis.clone(),
            self.triangles.as_ref().clone(),
            landmark_indices,
            self.shape_sigma.clone(),
            self.expr_sigma.clone(),
        )
    }

    /// `S̄ + Σ αᵢ sᵢ`, flattened.
    pub fn evaluate_shape(&self, alpha: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("alpha", self.identity_modes(), alpha.len())?;
        let mut shape = self.mean_shape.clone();
        shape.gemv(1.0, &self.shape_basis, alpha, 1.0);
        Ok(shape)
    }

    /// `Σ βᵢ eᵢ`, flattened. Zero weights give a zero offset.
    pub fn evaluate_expression(&self, beta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_len("beta", self.expression_modes(), beta.len())?;
        Ok(&self.expr_basis * beta)
    }

    pub fn evaluate_geometry(&self, coeffs: &CoefficientVector) -> Result<Mesh, ModelError> {
        let mut flat = self.evaluate_shape(&coeffs.alpha)?;
        flat += self.evaluate_expression(&coeffs.beta)?;
        Ok(Mesh {
            vertices: unflatten(&flat),
            triangles: Arc::clone(&self.triangles),
            albedo: None,
        })
    }

    /// Restriction of the model to its landmark vertices, for fast repeated
    /// evaluation during landmark fitting.
    pub fn landmark_submodel(&self) -> LandmarkSubmodel {
        let k_id = self.identity_modes();
        let k_exp = self.expression_modes();
        let rows = 3 * LANDMARK_COUNT;
        let mut mean = DVector::zeros(rows);
        let mut shape = DMatrix::zeros(rows, k_id);
        let mut expr = DMatrix::zeros(rows, k_exp);
        for (l, &vi) in self.landmark_indices.iter().enumerate() {
            for axis in 0..3 {
                let src = 3 * vi as usize + axis;
                let dst = 3 * l + axis;
                mean[dst] = self.mean_shape[src];
                shape.row_mut(dst).copy_from(&self.shape_basis.row(src));
                expr.row_mut(dst).copy_from(&self.expr_basis.row(src));
            }
        }
        LandmarkSubmodel { mean, shape, expr }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Serializes into the `OFMM1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.vertex_count();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for dim in [n, self.identity_modes(), self.expression_modes(), self.triangles.len()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        // nalgebra storage is column-major, matching the container layout.
        for block in [
            self.mean_shape.as_slice(),
            self.shape_basis.as_slice(),
            self.expr_basis.as_slice(),
            self.shape_sigma.as_slice(),
            self.expr_sigma.as_slice(),
        ] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for tri in self.triangles.iter() {
            for idx in tri {
                out.extend_from_slice(&idx.to_le_bytes());
            }
        }
        for idx in &self.landmark_indices {
            out.extend_from_slice(&idx.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut reader = ByteReader {
            bytes,
            pos: MAGIC.len(),
        };
        let n = reader.u32("header")? as usize;
        let k_id = reader.u32("header")? as usize;
        let k_exp = reader.u32("header")? as usize;
        let t = reader.u32("header")? as usize;

        let expected =
            MAGIC.len() + 16 + 8 * (3 * n + 3 * n * k_id + 3 * n * k_exp + k_id + k_exp) + 4 * (3 * t + LANDMARK_COUNT);
        if bytes.len() != expected {
            return Err(ModelError::DimensionMismatch {
                field: "payload",
                expected,
                found: bytes.len(),
            });
        }

        let mean_shape = DVector::from_vec(reader.f64s("mean_shape", 3 * n)?);
        let shape_basis = DMatrix::from_vec(3 * n, k_id, reader.f64s("shape_basis", 3 * n * k_id)?);
        let expr_basis = DMatrix::from_vec(3 * n, k_exp, reader.f64s("expr_basis", 3 * n * k_exp)?);
        let shape_sigma = DVector::from_vec(reader.f64s("shape_sigma", k_id)?);
        let expr_sigma = DVector::from_vec(reader.f64s("expr_sigma", k_exp)?);
        let flat_tris = reader.u32s("triangles", 3 * t)?;
        let triangles = flat_tris.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let landmark_indices = reader.u32s("landmark_indices", LANDMARK_COUNT)?;

        Self::new(
            mean_shape,
            shape_basis,
            expr_basis,
            triangles,
            landmark_indices,
            shape_sigma,
            expr_sigma,
        )
    }
}

/// Landmark rows of a [`MorphableModel`].
#[derive(Debug, Clone)]
pub struct LandmarkSubmodel {
    mean: DVector<f64>,
    shape: DMatrix<f64>,
    expr: DMatrix<f64>,
}

impl LandmarkSubmodel {
    pub fn evaluate(&self, coeffs: &CoefficientVector) -> Vec<Vector3<f64>> {
        let mut flat = self.mean.clone();
        flat.gemv(1.0, &self.shape, &coeffs.alpha, 1.0);
        flat.gemv(1.0, &self.expr, &coeffs.beta, 1.0);
        unflatten(&flat)
    }
}

/// Result of [`vertex_normals`]: `None` marks a vertex whose incident
/// triangles are all degenerate.
pub type VertexNormals = Vec<Option<Vector3<f64>>>;

/// Area-weighted vertex normals. Triangle winding is counter-clockwise
/// around the outward normal.
pub fn vertex_normals(mesh: &Mesh) -> VertexNormals {
    let mut accum = vec![Vector3::zeros(); mesh.vertices.len()];
    for tri in mesh.triangles.iter() {
        let [a, b, c] = tri.map(|i| mesh.vertices[i as usize]);
        // Cross product length is twice the area, so this is area-weighted.
        let n = (b - a).cross(&(c - a));
        for &i in tri {
            accum[i as usize] += n;
        }
    }
    accum
        .into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 1e-300 && len.is_finite() {
                Some(n / len)
            } else {
                None
            }
        })
        .collect()
}

/// The model's 68 landmark vertices taken from `mesh`, in landmark order.
pub fn landmark_positions(mesh: &Mesh, model: &MorphableModel) -> Vec<Vector3<f64>> {
    model
        .landmark_indices()
        .iter()
        .map(|&i| mesh.vertices[i as usize])
        .collect()
}

pub(crate) fn unflatten(flat: &DVector<f64>) -> Vec<Vector3<f64>> {
    flat.as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

fn check_len(field: &'static str, expected: usize, found: usize) -> Result<(), ModelError> {
    if expected == found {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { field, expected, found })
    }
}

fn check_min(field: &'static str, value: usize, min: usize) -> Result<(), ModelError> {
    if value >= min {
        Ok(())
    } else {
        Err(ModelError::TooSmall { field, value, min })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, field: &'static str, len: usize) -> Result<&[u8], ModelError> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(ModelError::DimensionMismatch {
                field,
                expected: end,
                found: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, ModelError> {
        let b = self.take(field, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32s(&mut self, field: &'static str, count: usize) -> Result<Vec<u32>, ModelError> {
        let b = self.take(field, 4 * count)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f64s(&mut self, field: &'static str, count: usize) -> Result<Vec<f64>, ModelError> {
        let b = self.take(field, 8 * count)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> MorphableModel {
        // Four vertices, two triangles, every landmark on vertex 0..3.
        let mean = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.5]);
        let shape = DMatrix::from_fn(12, 2, |r, c| (r + 3 * c) as f64 * 0.1);
        let expr = DMatrix::from_fn(12, 1, |r, _| if r % 3 == 2 { 1.0 } else { 0.0 });
        let landmarks = (0..LANDMARK_COUNT as u32).map(|i| i % 4).collect();
        MorphableModel::new(
            mean,
            shape,
            expr,
            vec![[0, 1, 2], [1, 3, 2]],
            landmarks,
            DVector::from_vec(vec![1.0, 0.5]),
            DVector::from_vec(vec![0.3]),
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let model = tiny_model();
        let shape = model.evaluate_shape(&DVector::zeros(2)).unwrap();
        assert_eq!(shape, *model.mean_shape());
        let expr = model.evaluate_expression(&DVector::zeros(1)).unwrap();
        assert!(expr.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_coefficient_selects_basis_column() {
        let model = tiny_model();
        let shape = model.evaluate_shape(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(shape, model.mean_shape() + model.shape_basis().column(0));
        let expr = model.evaluate_expression(&DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(expr, model.expr_basis().column(0).into_owned());
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let model = tiny_model();
        assert!(matches!(
            model.evaluate_shape(&DVector::zeros(3)),
            Err(ModelError::DimensionMismatch { field: "alpha", .. })
        ));
        assert!(matches!(
            model.evaluate_expression(&DVector::zeros(2)),
            Err(ModelError::DimensionMismatch { field: "beta", .. })
        ));
    }

    #[test]
    fn geometry_is_additive_in_expression() {
        let model = tiny_model();
        let alpha = DVector::from_vec(vec![0.4, -1.2]);
        let beta = DVector::from_vec(vec![2.0]);
        let full = model
            .evaluate_geometry(&CoefficientVector::new(alpha.clone(), beta.clone()))
            .unwrap();
        let neutral = model
            .evaluate_geometry(&CoefficientVector::new(alpha, DVector::zeros(1)))
            .unwrap();
        let offset = unflatten(&model.evaluate_expression(&beta).unwrap());
        for ((f, n), o) in full.vertices.iter().zip(&neutral.vertices).zip(&offset) {
            assert!((f - n - o).norm() < 1e-15);
        }
    }

    #[test]
    fn planar_triangle_normals() {
        let ccw = Mesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        for n in vertex_normals(&ccw) {
            assert_eq!(n.unwrap(), Vector3::new(0.0, 0.0, 1.0));
        }
        let cw = Mesh::new(ccw.vertices.clone(), vec![[0, 2, 1]]);
        for n in vertex_normals(&cw) {
            assert_eq!(n.unwrap(), Vector3::new(0.0, 0.0, -1.0));
        }
    }

    #[test]
    fn degenerate_incident_triangles_flag_normal_invalid() {
        let mesh = Mesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(2.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        );
        let normals = vertex_normals(&mesh);
        assert!(normals.iter().all(Option::is_none));
    }

    #[test]
    fn landmarks_follow_indices_and_translation() {
        let model = tiny_model();
        let mesh = model.evaluate_geometry(&CoefficientVector::zeros(&model)).unwrap();
        let lm = landmark_positions(&mesh, &model);
        assert_eq!(lm[5], mesh.vertices[1]);

        let t = Vector3::new(3.0, -2.0, 7.5);
        let moved = landmark_positions(&mesh.translated(t), &model);
        for (a, b) in lm.iter().zip(&moved) {
            assert!((b - a - t).norm() < 1e-12);
        }

        let reversed: Vec<u32> = model.landmark_indices().iter().rev().copied().collect();
        let permuted = model.with_landmark_indices(reversed).unwrap();
        let lm_rev = landmark_positions(&mesh, &permuted);
        for (i, p) in lm_rev.iter().enumerate() {
            assert_eq!(*p, lm[LANDMARK_COUNT - 1 - i]);
        }
    }

    #[test]
    fn submodel_matches_full_evaluation() {
        let model = tiny_model();
        let coeffs = CoefficientVector::new(DVector::from_vec(vec![0.7, -0.3]), DVector::from_vec(vec![1.5]));
        let mesh = model.evaluate_geometry(&coeffs).unwrap();
        let full = landmark_positions(&mesh, &model);
        let fast = model.landmark_submodel().evaluate(&coeffs);
        for (a, b) in full.iter().zip(&fast) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn invariant_violations_are_named() {
        let model = tiny_model();
        let mut bytes = model.to_bytes();
        // Corrupt the first triangle index (N = 4, so 5 = N + 1 is out of range).
        let tri_offset = bytes.len() - 4 * (LANDMARK_COUNT + 6);
        bytes[tri_offset..tri_offset + 4].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            MorphableModel::from_bytes(&bytes),
            Err(ModelError::IndexOutOfRange {
                field: "triangles",
                value: 5,
                ..
            })
        ));

        let truncated = &model.to_bytes()[..100];
        assert!(matches!(
            MorphableModel::from_bytes(truncated),
            Err(ModelError::DimensionMismatch { field: "payload", .. })
        ));

        assert!(matches!(
            MorphableModel::from_bytes(b"NOPE1"),
            Err(ModelError::BadMagic)
        ));
    }

    #[test]
    fn repeated_vertex_triangle_is_rejected() {
        let model = tiny_model();
        let err = MorphableModel::new(
            model.mean_shape().clone(),
            model.shape_basis().clone(),
            model.expr_basis().clone(),
            vec![[0, 1, 1]],
            model.landmark_indices().to_vec(),
            model.shape_sigma().clone(),
            model.expr_sigma().clone(),
        );
        assert!(matches!(err, Err(ModelError::DegenerateTriangle(0))));
    }

    #[test]
    fn non_positive_sigma_is_rejected() {
        let model = tiny_model();
        let err = MorphableModel::new(
            model.mean_shape().clone(),
            model.shape_basis().clone(),
            model.expr_basis().clone(),
            model.triangles().as_ref().clone(),
            model.landmark_indices().to_vec(),
            DVector::from_vec(vec![1.0, 0.0]),
            model.expr_sigma().clone(),
        );
        assert!(matches!(
            err,
            Err(ModelError::NonPositiveSigma {
                field: "shape_sigma",
                position: 1,
                ..
            })
        ));
    }
}
