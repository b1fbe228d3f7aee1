//! Analysis-by-synthesis estimation of coefficients, pose and lighting.
//!
//! Both fits are damped Gauss-Newton (Levenberg-Marquardt) over the packed
//! parameter vector `[α, β, pitch, yaw, roll, t_x, t_y, s]` with central
//! difference Jacobians. Depth translation `t_z` has no effect on a weak
//! perspective image and is carried through unchanged.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{project, project_camera_points, transform_points, CameraPose};
use crate::illumination::{sh_basis_unchecked, ShCoefficients, SH_COUNT};
use crate::image::Image;
use crate::io::{FormatError, KeyValues};
use crate::landmarks::Landmarks;
use crate::model::{vertex_normals, CoefficientVector, Mesh, ModelError, MorphableModel};
use crate::raster::{rasterize, surface_sample, RasterError, RasterOutput, NO_TRIANGLE};

const POSE_PARAMS: usize = 6;
const MAX_DAMPING: f64 = 1e16;
const IRLS_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit configuration: {0}")]
    Config(String),
    #[error("landmarks must be 68 finite points")]
    BadLandmarks,
    #[error("cost is not finite at the initial estimate ({0})")]
    NonFiniteCost(f64),
    #[error("rendered face covers no pixel")]
    NoCoverage,
    #[error("image is {0}x{1} but the fit expects {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("albedo has {0} entries for {1} vertices")]
    Albedo(usize, usize),
    #[error("lighting system is rank deficient")]
    SingularLighting,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub landmark_weight: f64,
    pub photo_weight: f64,
    pub prior_weight: f64,
    /// Relative cost decrease below which an accepted step ends the fit.
    pub convergence_tol: f64,
    pub damping_init: f64,
    /// Central-difference step for every parameter.
    pub jacobian_step: f64,
    /// `−t_z` of estimates built without an explicit init, millimeters.
    pub camera_distance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            landmark_weight: 1.0,
            photo_weight: 10.0,
            prior_weight: 1e-3,
            convergence_tol: 1e-9,
            damping_init: 1e-3,
            jacobian_step: 1e-5,
            camera_distance: 500.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.into()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        for (name, v) in [
            ("landmark_weight", self.landmark_weight),
            ("photo_weight", self.photo_weight),
            ("prior_weight", self.prior_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FitError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive");
        }
        if !(self.damping_init > 0.0 && self.damping_init.is_finite()) {
            return bad("damping_init must be positive");
        }
        if !(self.jacobian_step > 0.0) {
            return bad("jacobian_step must be positive");
        }
        if !(self.camera_distance.is_finite()) {
            return bad("camera_distance must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStage {
    Landmark,
    Photometric,
}

impl FitStage {
    fn name(self) -> &'static str {
        match self {
            FitStage::Landmark => "landmark",
            FitStage::Photometric => "photometric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Levenberg-Marquardt trial step.
    Damped,
    /// Closed-form lighting update.
    Lighting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub stage: FitStage,
    pub kind: StepKind,
    /// Cost of the trial point.
    pub cost: f64,
    /// Damping used for the trial (0 for lighting updates).
    pub damping: f64,
    pub accepted: bool,
}

/// Cost terms at the current estimate.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Costs {
    /// `landmark_weight · lmk_loss`.
    pub landmark: f64,
    /// `prior_weight · (Σ(α/σ)² + Σ(β/σ)²)`.
    pub prior: f64,
    /// `photo_weight · mean |intensity − luminance|` over covered pixels.
    pub photo: f64,
}

impl Costs {
    pub fn total(&self) -> f64 {
        self.landmark + self.prior + self.photo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionState {
    pub coeffs: CoefficientVector,
    pub pose: CameraPose,
    pub gamma: ShCoefficients,
    pub costs: Costs,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
}

impl ReconstructionState {
    /// Zero coefficients, zero rotation, and scale/translation that match the
    /// mean-shape landmarks' centroid and spread to `landmarks`.
    pub fn initial(
        model: &MorphableModel,
        landmarks: &Landmarks,
        width: usize,
        height: usize,
        camera_distance: f64,
    ) -> Self {
        let coeffs = CoefficientVector::zeros(model);
        let pts = model.landmark_submodel().evaluate(&coeffs);
        let n = pts.len() as f64;
        let mean3 = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
        let mean2 = landmarks
            .points()
            .iter()
            .fold(nalgebra::Vector2::zeros(), |a, p| a + p.coords)
            / n;
        let spread3: f64 = pts.iter().map(|p| (p.xy() - mean3.xy()).norm_squared()).sum();
        let spread2: f64 = landmarks
            .points()
            .iter()
            .map(|p| (p.coords - mean2).norm_squared())
            .sum();
        let scale = if spread3 > 0.0 && spread2 > 0.0 {
            (spread2 / spread3).sqrt()
        } else {
            1.0
        };
        let tx = (mean2.x - width as f64 / 2.0) / scale - mean3.x;
        let ty = (height as f64 / 2.0 - mean2.y) / scale - mean3.y;
        Self {
            coeffs,
            pose: CameraPose::new(Vector3::zeros(), Vector3::new(tx, ty, -camera_distance), scale),
            gamma: ShCoefficients::ambient(1.0),
            costs: Costs::default(),
            trace: Vec::new(),
            converged: false,
        }
    }

    /// Whether accepted costs never increase within each stage.
    pub fn accepted_costs_monotone(&self) -> bool {
        [FitStage::Landmark, FitStage::Photometric].iter().all(|&stage| {
            let costs: Vec<f64> = self
                .trace
                .iter()
                .filter(|r| r.stage == stage && r.accepted)
                .map(|r| r.cost)
                .collect();
            costs.windows(2).all(|w| w[1] <= w[0])
        })
    }

    pub fn accepted_steps(&self, stage: FitStage) -> usize {
        self.trace.iter().filter(|r| r.stage == stage && r.accepted).count()
    }

    pub fn mesh(&self, model: &MorphableModel) -> Result<Mesh, FitError> {
        Ok(model.evaluate_geometry(&self.coeffs)?)
    }

    pub fn landmarks(&self, model: &MorphableModel, width: usize, height: usize) -> Landmarks {
        let pts = model.landmark_submodel().evaluate(&self.coeffs);
        Landmarks::new(
            project(&self.pose, &pts, width, height)
                .iter()
                .map(|p| p.pixel())
                .collect(),
        )
    }

    /// Key=value manifest of the estimate and its costs.
    pub fn to_manifest(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set_indexed_f64s("alpha", self.coeffs.alpha.as_slice());
        kv.set_indexed_f64s("beta", self.coeffs.beta.as_slice());
        kv.set_f64s("pose", &self.pose.to_array());
        kv.set_indexed_f64s("gamma", &self.gamma.0);
        kv.set_f64("cost_landmark", self.costs.landmark);
        kv.set_f64("cost_prior", self.costs.prior);
        kv.set_f64("cost_photo", self.costs.photo);
        kv.set_f64("cost_total", self.costs.total());
        kv.set("iterations", self.trace.len().to_string());
        kv.set("converged", self.converged.to_string());
        kv
    }

    /// Inverse of [`ReconstructionState::to_manifest`]; the trace is not
    /// stored and comes back empty.
    pub fn from_manifest(kv: &KeyValues) -> Result<Self, FitError> {
        let pose: Vec<f64> = kv.f64s("pose")?;
        let pose: [f64; 7] = pose.try_into().map_err(|_| FormatError::BadValue {
            key: "pose".into(),
            value: "expected 7 values".into(),
        })?;
        let gamma: [f64; SH_COUNT] = kv
            .indexed_f64s("gamma")?
            .try_into()
            .map_err(|_| FormatError::BadValue {
                key: "gamma".into(),
                value: "expected 9 values".into(),
            })?;
        Ok(Self {
            coeffs: CoefficientVector::new(
                DVector::from_vec(kv.indexed_f64s("alpha")?),
                DVector::from_vec(kv.indexed_f64s("beta")?),
            ),
            pose: CameraPose::from_array(pose),
            gamma: ShCoefficients(gamma),
            costs: Costs {
                landmark: kv.parse_value("cost_landmark")?,
                prior: kv.parse_value("cost_prior")?,
                photo: kv.parse_value("cost_photo")?,
            },
            trace: Vec::new(),
            converged: kv.parse_value("converged")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FitError> {
        Ok(self.to_manifest().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, FitError> {
        Self::from_manifest(&KeyValues::load(path)?)
    }

    /// One line per trace record.
    pub fn trace_text(&self) -> String {
        let mut out = String::from("# stage kind cost damping accepted\n");
        for r in &self.trace {
            let kind = match r.kind {
                StepKind::Damped => "damped",
                StepKind::Lighting => "lighting",
            };
            out.push_str(&format!(
                "{} {} {:?} {:?} {}\n",
                r.stage.name(),
                kind,
                r.cost,
                r.damping,
                r.accepted
            ));
        }
        out
    }
}

fn pack(state: &ReconstructionState) -> Vec<f64> {
    let mut x: Vec<f64> = state
        .coeffs
        .alpha
        .iter()
        .chain(state.coeffs.beta.iter())
        .copied()
        .collect();
    let r = state.pose.rotation;
    let t = state.pose.translation;
    x.extend_from_slice(&[r.x, r.y, r.z, t.x, t.y, state.pose.scale]);
    x
}

/// Rebuilds coefficients and pose from `x`, keeping `t_z`.
fn unpack(x: &[f64], k_id: usize, t_z: f64) -> (CoefficientVector, CameraPose) {
    let k = x.len() - POSE_PARAMS;
    let coeffs = CoefficientVector::new(
        DVector::from_column_slice(&x[..k_id]),
        DVector::from_column_slice(&x[k_id..k]),
    );
    let p = &x[k..];
    let pose = CameraPose::new(Vector3::new(p[0], p[1], p[2]), Vector3::new(p[3], p[4], t_z), p[5]);
    (coeffs, pose)
}

/// Residuals shared by both fits: weighted landmark offsets and the prior.
struct LandmarkResiduals<'a> {
    submodel: crate::model::LandmarkSubmodel,
    gt: Vec<f64>,
    inv_sigma: Vec<f64>,
    k_id: usize,
    t_z: f64,
    width: usize,
    height: usize,
    config: &'a FitConfig,
}

impl<'a> LandmarkResiduals<'a> {
    fn new(
        model: &MorphableModel,
        gt: &Landmarks,
        t_z: f64,
        width: usize,
        height: usize,
        config: &'a FitConfig,
    ) -> Self {
        Self {
            submodel: model.landmark_submodel(),
            gt: gt.to_flat(),
            inv_sigma: model
                .shape_sigma()
                .iter()
                .chain(model.expr_sigma().iter())
                .map(|s| 1.0 / s)
                .collect(),
            k_id: model.identity_modes(),
            t_z,
            width,
            height,
            config,
        }
    }

    fn len(&self) -> usize {
        self.gt.len() + self.inv_sigma.len()
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (coeffs, pose) = unpack(x, self.k_id, self.t_z);
        let pts = self.submodel.evaluate(&coeffs);
        let lw = self.config.landmark_weight.sqrt();
        let pw = self.config.prior_weight.sqrt();
        let mut r = Vec::with_capacity(self.len());
        for (p, g) in project(&pose, &pts, self.width, self.height)
            .iter()
            .zip(self.gt.chunks_exact(2))
        {
            r.push(lw * (p.u - g[0]));
            r.push(lw * (p.v - g[1]));
        }
        r.extend(x.iter().zip(&self.inv_sigma).map(|(c, is)| pw * c * is));
        r
    }

    /// (landmark, prior) cost split.
    fn costs(&self, x: &[f64]) -> (f64, f64) {
        let r = self.eval(x);
        let (l, p) = r.split_at(self.gt.len());
        (sq(l), sq(p))
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn numeric_jacobian(f: &(dyn Fn(&[f64]) -> Vec<f64> + Sync), x: &[f64], rows: usize, step: f64) -> DMatrix<f64> {
    let columns: Vec<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|j| {
            let mut xp = x.to_vec();
            xp[j] += step;
            let plus = f(&xp);
            xp[j] = x[j] - step;
            let minus = f(&xp);
            plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        })
        .collect();
    DMatrix::from_fn(rows, x.len(), |i, j| columns[j][i])
}

/// Solves `(JᵀJ + λ·(diag(JᵀJ) + ε)) δ = −Jᵀr`; `None` when the damped
/// system is not positive definite.
fn damped_step(jtj: &DMatrix<f64>, jtr: &DVector<f64>, damping: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    let floor = 1e-12 * jtj.diagonal().max().max(1e-300);
    for i in 0..a.nrows() {
        a[(i, i)] += damping * (jtj[(i, i)] + floor);
    }
    let step = a.cholesky()?.solve(&(-jtr));
    step.iter().all(|v| v.is_finite()).then_some(step)
}

fn step_is_small(step: &DVector<f64>, x: &[f64], tol: f64) -> bool {
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    step.norm() <= tol * (xn + tol)
}

fn check_landmarks(gt: &Landmarks) -> Result<(), FitError> {
    if gt.len() != crate::model::LANDMARK_COUNT || !gt.is_finite() {
        return Err(FitError::BadLandmarks);
    }
    Ok(())
}

/// Minimizes `landmark_weight · lmk_loss + prior_weight · prior` from `init`
/// (or [`ReconstructionState::initial`] when absent).
pub fn fit_landmarks(
    model: &MorphableModel,
    landmarks_gt: &Landmarks,
    width: usize,
    height: usize,
    config: &FitConfig,
    init: Option<&ReconstructionState>,
) -> Result<ReconstructionState, FitError> {
    config.validate()?;
    check_landmarks(landmarks_gt)?;
    let mut state = match init {
        Some(s) => s.clone(),
        None => ReconstructionState::initial(model, landmarks_gt, width, height, config.camera_distance),
    };
    let problem = LandmarkResiduals::new(model, landmarks_gt, state.pose.translation.z, width, height, config);
    let f = |x: &[f64]| problem.eval(x);

    let mut x = pack(&state);
    let mut r = DVector::from_vec(f(&x));
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(FitError::NonFiniteCost(cost));
    }
    let mut damping = config.damping_init;
    let mut converged = cost < 1e-20;
    let mut iterations = 0;
    let mut jac = None;
    while !converged && iterations < config.max_iterations && damping < MAX_DAMPING {
        iterations += 1;
        let (jtj, jtr) = jac.get_or_insert_with(|| {
            let j = numeric_jacobian(&f, &x, r.len(), config.jacobian_step);
            (j.tr_mul(&j), j.tr_mul(&r))
        });
        let Some(step) = damped_step(jtj, jtr, damping) else {
            damping *= 10.0;
            state.trace.push(IterationRecord {
                stage: FitStage::Landmark,
                kind: StepKind::Damped,
                cost: f64::INFINITY,
                damping,
                accepted: false,
            });
            continue;
        };
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let trial_r = DVector::from_vec(f(&trial));
        let trial_cost = if trial[trial.len() - 1] > 0.0 {
            trial_r.norm_squared()
        } else {
            f64::INFINITY
        };
        let accepted = trial_cost.is_finite() && trial_cost < cost;
        state.trace.push(IterationRecord {
            stage: FitStage::Landmark,
            kind: StepKind::Damped,
            cost: trial_cost,
            damping,
            accepted,
        });
        if accepted {
            let decrease = (cost - trial_cost) / cost;
            converged = decrease < config.convergence_tol
                || trial_cost < 1e-20
                || step_is_small(&step, &x, config.convergence_tol);
            x = trial;
            r = trial_r;
            cost = trial_cost;
            jac = None;
            damping *= 0.5;
        } else {
            damping *= 10.0;
            converged = step_is_small(&step, &x, config.convergence_tol);
        }
    }

    let (coeffs, pose) = unpack(&x, model.identity_modes(), state.pose.translation.z);
    let (landmark, prior) = problem.costs(&x);
    state.coeffs = coeffs;
    state.pose = pose;
    state.costs = Costs {
        landmark,
        prior,
        photo: 0.0,
    };
    state.converged = converged;
    Ok(state)
}

/// Least-squares SH coefficients explaining `luminance` at the covered
/// pixels of `raster`, ignoring the clamp at zero.
pub fn solve_gamma(raster: &RasterOutput, luminance: &[f64]) -> Result<ShCoefficients, FitError> {
    let covered: Vec<usize> = (0..luminance.len()).filter(|&i| raster.depth.valid[i]).collect();
    if covered.is_empty() {
        return Err(FitError::NoCoverage);
    }
    if covered.len() < SH_COUNT {
        return Err(FitError::SingularLighting);
    }
    let a = DMatrix::from_fn(covered.len(), SH_COUNT, |row, k| {
        let i = covered[row];
        raster.albedo[i] * sh_basis_unchecked(&raster.normals[i])[k]
    });
    let b = DVector::from_iterator(covered.len(), covered.iter().map(|&i| luminance[i]));
    let svd = a.svd(true, true);
    let max_sv = svd.singular_values.max();
    if !(max_sv > 0.0) || svd.singular_values.min() <= 1e-10 * max_sv {
        return Err(FitError::SingularLighting);
    }
    let x = svd.solve(&b, 0.0).map_err(|_| FitError::SingularLighting)?;
    let mut gamma = [0.0; SH_COUNT];
    gamma.copy_from_slice(x.as_slice());
    Ok(ShCoefficients(gamma))
}

/// Mean absolute shading residual over covered pixels, or `None` without
/// coverage.
fn photo_mean(raster: &RasterOutput, luminance: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &lum) in luminance.iter().enumerate() {
        if raster.depth.valid[i] {
            sum += (raster.intensity[i] - lum).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Shading with new lighting on an existing raster.
fn relit_photo_mean(raster: &RasterOutput, gamma: &ShCoefficients, luminance: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &lum) in luminance.iter().enumerate() {
        if raster.depth.valid[i] {
            let shade = (raster.albedo[i] * gamma.irradiance(&sh_basis_unchecked(&raster.normals[i]))).max(0.0);
            sum += (shade - lum).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Bilinear sample at a continuous pixel position; clamps at the border.
fn sample_bilinear(values: &[f64], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let x = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = values[y0 * width + x0] * (1.0 - fx) + values[y0 * width + x1] * fx;
    let bottom = values[y1 * width + x0] * (1.0 - fx) + values[y1 * width + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Surface points hit by the last raster, held fixed while the parameters
/// move: each residual compares the point's shading with the image at the
/// point's projection.
struct Correspondences {
    pixels: Vec<(u32, [f64; 3])>,
    /// IRLS factor `√(photo_weight / (2·n·max(|r₀|, ε)))` per pixel.
    weights: Vec<f64>,
}

struct PhotometricProblem<'a> {
    model: &'a MorphableModel,
    albedo: &'a [f64],
    luminance: &'a [f64],
    landmarks: LandmarkResiduals<'a>,
    gamma: ShCoefficients,
    width: usize,
    height: usize,
    t_z: f64,
}

impl PhotometricProblem<'_> {
    fn geometry(&self, x: &[f64]) -> Result<(Mesh, CameraPose), FitError> {
        let (coeffs, pose) = unpack(x, self.model.identity_modes(), self.t_z);
        let mesh = self.model.evaluate_geometry(&coeffs)?.with_albedo(self.albedo.to_vec());
        Ok((mesh, pose))
    }

    fn render(&self, x: &[f64], gamma: &ShCoefficients) -> Result<RasterOutput, FitError> {
        let (mesh, pose) = self.geometry(x)?;
        Ok(rasterize(&mesh, &pose, gamma, self.width, self.height)?)
    }

    /// True cost terms with re-rasterized coverage.
    fn costs(&self, x: &[f64], gamma: &ShCoefficients, photo_weight: f64) -> Result<(Costs, RasterOutput), FitError> {
        let raster = self.render(x, gamma)?;
        let (landmark, prior) = self.landmarks.costs(x);
        let photo = match photo_mean(&raster, self.luminance) {
            Some(m) => photo_weight * m,
            None => f64::INFINITY,
        };
        Ok((Costs { landmark, prior, photo }, raster))
    }

    fn correspondences(&self, raster: &RasterOutput, photo_weight: f64) -> Correspondences {
        let mut pixels = Vec::new();
        let mut residuals = Vec::new();
        for (i, &id) in raster.triangle_id.iter().enumerate() {
            if id != NO_TRIANGLE {
                pixels.push((id, raster.barycentric[i]));
                residuals.push(raster.intensity[i] - self.luminance[i]);
            }
        }
        let n = pixels.len().max(1) as f64;
        let weights = residuals
            .iter()
            .map(|r| (photo_weight / (2.0 * n * r.abs().max(IRLS_FLOOR))).sqrt())
            .collect();
        Correspondences { pixels, weights }
    }

    /// Landmark and prior residuals followed by weighted shading residuals.
    fn residuals(&self, x: &[f64], corr: &Correspondences) -> Vec<f64> {
        let mut r = self.landmarks.eval(x);
        let Ok((mesh, pose)) = self.geometry(x) else {
            r.resize(r.len() + corr.pixels.len(), f64::NAN);
            return r;
        };
        let camera = transform_points(&pose, &mesh.vertices);
        let rot = pose.rotation_matrix();
        let normals: Vec<Option<Vector3<f64>>> =
            vertex_normals(&mesh).into_iter().map(|n| n.map(|n| rot * n)).collect();
        for (&(id, w), &weight) in corr.pixels.iter().zip(&corr.weights) {
            let tri = mesh.triangles[id as usize];
            let (normal, albedo) = surface_sample(&mesh, &camera, &normals, tri, &w);
            let shade = (albedo * self.gamma.irradiance(&sh_basis_unchecked(&normal))).max(0.0);
            let point =
                w[0] * camera[tri[0] as usize] + w[1] * camera[tri[1] as usize] + w[2] * camera[tri[2] as usize];
            let p = project_camera_points(pose.scale, &[point], self.width, self.height)[0];
            let observed = sample_bilinear(self.luminance, self.width, self.height, p.u, p.v);
            r.push(weight * (shade - observed));
        }
        r
    }
}

/// Adds `photo_weight · mean |intensity − luminance(i1)|` over covered
/// pixels to the landmark objective and refines from `init`.
///
/// Each outer iteration re-solves the lighting in closed form, then takes
/// one damped step on a reweighted (L1 → weighted L2) model built from fixed
/// surface correspondences. Every candidate is judged by its true cost after
/// re-rasterizing.
pub fn fit_photometric(
    model: &MorphableModel,
    albedo: &[f64],
    i1: &Image,
    landmarks_gt: &Landmarks,
    config: &FitConfig,
    init: &ReconstructionState,
) -> Result<ReconstructionState, FitError> {
    config.validate()?;
    check_landmarks(landmarks_gt)?;
    if config.photo_weight == 0.0 {
        return Ok(init.clone());
    }
    if albedo.len() != model.vertex_count() {
        return Err(FitError::Albedo(albedo.len(), model.vertex_count()));
    }
    let (width, height) = (i1.width(), i1.height());
    let luminance = i1.luminance();
    let mut problem = PhotometricProblem {
        model,
        albedo,
        luminance: &luminance,
        landmarks: LandmarkResiduals::new(model, landmarks_gt, init.pose.translation.z, width, height, config),
        gamma: init.gamma,
        width,
        height,
        t_z: init.pose.translation.z,
    };
    let mut state = init.clone();
    let mut x = pack(&state);
    let (mut costs, mut raster) = problem.costs(&x, &problem.gamma, config.photo_weight)?;
    if !raster.depth.valid.iter().any(|&v| v) {
        return Err(FitError::NoCoverage);
    }
    if !costs.total().is_finite() {
        return Err(FitError::NonFiniteCost(costs.total()));
    }

    let record = |state: &mut ReconstructionState, kind, cost, damping, accepted| {
        state.trace.push(IterationRecord {
            stage: FitStage::Photometric,
            kind,
            cost,
            damping,
            accepted,
        })
    };

    let mut damping = config.damping_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut refresh = true;
    let mut linearization: Option<(Correspondences, DMatrix<f64>, DVector<f64>)> = None;
    while !converged && iterations < config.max_iterations && damping < MAX_DAMPING {
        if refresh {
            refresh = false;
            if let Ok(gamma) = solve_gamma(&raster, &luminance) {
                let photo =
                    relit_photo_mean(&raster, &gamma, &luminance).map_or(f64::INFINITY, |m| config.photo_weight * m);
                let trial = Costs { photo, ..costs };
                let accepted = trial.total() <= costs.total();
                record(&mut state, StepKind::Lighting, trial.total(), 0.0, accepted);
                if accepted {
                    problem.gamma = gamma;
                    costs = trial;
                    raster = problem.render(&x, &gamma)?;
                }
            }
            let corr = problem.correspondences(&raster, config.photo_weight);
            let f = |v: &[f64]| problem.residuals(v, &corr);
            let r = DVector::from_vec(f(&x));
            let j = numeric_jacobian(&f, &x, r.len(), config.jacobian_step);
            linearization = Some((corr, j.tr_mul(&j), j.tr_mul(&r)));
        }
        iterations += 1;
        let (_, jtj, jtr) = linearization.as_ref().expect("linearized above");
        let Some(step) = damped_step(jtj, jtr, damping) else {
            record(&mut state, StepKind::Damped, f64::INFINITY, damping, false);
            damping *= 10.0;
            continue;
        };
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let evaluated = if trial[trial.len() - 1] > 0.0 {
            Some(problem.costs(&trial, &problem.gamma, config.photo_weight)?)
        } else {
            None
        };
        let trial_cost = evaluated.as_ref().map_or(f64::INFINITY, |(c, _)| c.total());
        let accepted = trial_cost.is_finite() && trial_cost < costs.total();
        record(&mut state, StepKind::Damped, trial_cost, damping, accepted);
        if accepted {
            let (c, r) = evaluated.expect("finite cost");
            let decrease = (costs.total() - c.total()) / costs.total();
            converged = decrease < config.convergence_tol || step_is_small(&step, &x, config.convergence_tol);
            x = trial;
            costs = c;
            raster = r;
            damping *= 0.5;
            refresh = true;
        } else {
            damping *= 10.0;
            converged = step_is_small(&step, &x, config.convergence_tol);
        }
    }

    let (coeffs, pose) = unpack(&x, model.identity_modes(), problem.t_z);
    state.coeffs = coeffs;
    state.pose = pose;
    state.gamma = problem.gamma;
    state.costs = costs;
    state.converged = converged;
    Ok(state)
}
