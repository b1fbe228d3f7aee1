//! Two-stage reconstruction run: occlusion removal and completion, then
//! model fitting and detail transfer.
//!
//! Every stage writes into the configured output directory. A failing stage
//! removes the files it had already written.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bump::{apply_bump, depth_to_mesh, extrapolate_bump, BumpCodec, BumpMap};
use crate::fitting::{fit_landmarks, fit_photometric, FitConfig, ReconstructionState};
use crate::harmonic::HarmonicConfig;
use crate::image::Image;
use crate::io::{save_obj, KeyValues};
use crate::landmarks::Landmarks;
use crate::losses::features::DEFAULT_WIDTHS;
use crate::losses::{geo_loss, synthesis_loss, FeatureExtractor, LossWeights};
use crate::model::MorphableModel;
use crate::occlusion::{
    complete_baseline, compute_occlusion_mask, hollow_out, load_external_completion, OcclusionConfig, OcclusionMask,
    ParsingMap,
};
use crate::raster::{rasterize, DepthMap};
use crate::synth::{depth_rmse_split, files, reference_albedo};

/// Output file names.
pub mod outputs {
    pub const MASK: &str = "mask.pgm";
    pub const INCO: &str = "inco.png";
    pub const COMPLETED: &str = "completed.png";
    pub const STAGE1_METRICS: &str = "stage1_metrics.json";
    pub const FIT: &str = "fit.txt";
    pub const FIT_TRACE: &str = "fit_trace.txt";
    pub const DEPTH_BASE: &str = "depth_base.pgm";
    pub const BUMP: &str = "bump.pgm";
    pub const DEPTH_DETAILED: &str = "depth_detailed.pgm";
    pub const MESH_MODEL: &str = "mesh_model.obj";
    pub const MESH_BASE: &str = "mesh_base.obj";
    pub const MESH_DETAILED: &str = "mesh_detailed.obj";
    pub const STAGE2_METRICS: &str = "stage2_metrics.json";
    pub const METRICS: &str = "metrics.json";
    pub const SUITE_METRICS: &str = "suite_metrics.json";
}

pub const MODEL_FILE: &str = "model.ofmm";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Everything a run needs. Built from key=value settings; see
/// [`RunConfig::from_settings`] for the keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub image: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub parsing: Option<PathBuf>,
    /// Externally completed image merged into the masked region.
    pub completion: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: PathBuf,
    /// Occlusion-free reference image for stage-one metrics.
    pub clean: Option<PathBuf>,
    pub depth_gt: Option<PathBuf>,
    pub bump_gt: Option<PathBuf>,
    /// Bump half-range when no ground-truth bump is given; 0 disables detail.
    pub delta_max: Option<f64>,
    pub levels: u32,
    pub fit: FitConfig,
    pub occlusion: OcclusionConfig,
    pub harmonic: HarmonicConfig,
    /// Seed of the style-feature kernels.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image: None,
            landmarks: None,
            parsing: None,
            completion: None,
            model: None,
            output: PathBuf::from("out"),
            clean: None,
            depth_gt: None,
            bump_gt: None,
            delta_max: None,
            levels: 256,
            fit: FitConfig::default(),
            occlusion: OcclusionConfig::default(),
            harmonic: HarmonicConfig::default(),
            seed: crate::losses::features::DEFAULT_SEED,
        }
    }
}

/// Keys accepted by [`RunConfig::from_settings`].
pub const SETTING_KEYS: &[&str] = &[
    "scene",
    "image",
    "landmarks",
    "parsing",
    "completion",
    "model",
    "output",
    "clean",
    "depth_gt",
    "bump_gt",
    "delta_max",
    "levels",
    "occluder_labels",
    "margin",
    "seed",
    "max_iterations",
    "landmark_weight",
    "photo_weight",
    "prior_weight",
    "convergence_tol",
    "damping_init",
    "camera_distance",
    "harmonic_tolerance",
    "harmonic_max_sweeps",
];

const PATH_KEYS: &[&str] = &[
    "scene",
    "image",
    "landmarks",
    "parsing",
    "completion",
    "model",
    "output",
    "clean",
    "depth_gt",
    "bump_gt",
];

/// Reads a settings file, resolving relative paths against its directory.
pub fn load_settings(path: &Path) -> Result<KeyValues, PipelineError> {
    let kv = KeyValues::load(path).map_err(|e| PipelineError::Validation(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = KeyValues::new();
    for key in kv.keys() {
        let value = kv.get(key).unwrap_or_default();
        if PATH_KEYS.contains(&key) && Path::new(value).is_relative() {
            out.set(key, base.join(value).display().to_string());
        } else {
            out.set(key, value);
        }
    }
    Ok(out)
}

/// Copies every entry of `overrides` over `base`.
pub fn merge_settings(base: &KeyValues, overrides: &KeyValues) -> KeyValues {
    let mut out = base.clone();
    for key in overrides.keys() {
        out.set(key, overrides.get(key).unwrap_or_default());
    }
    out
}

fn parse<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<Option<T>, PipelineError> {
    match kv.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| PipelineError::Validation(format!("bad value for `{key}`: `{raw}`"))),
    }
}

impl RunConfig {
    /// Builds a configuration from settings.
    ///
    /// `scene=<dir>` fills the inputs and ground truth from a harness scene
    /// directory (and the model from `<dir>/../model.ofmm`) for any of those
    /// keys not given explicitly.
    pub fn from_settings(kv: &KeyValues) -> Result<Self, PipelineError> {
        if let Some(key) = kv.keys().find(|k| !SETTING_KEYS.contains(k)) {
            return Err(PipelineError::Validation(format!("unknown setting `{key}`")));
        }
        let path = |key: &str| kv.get(key).map(PathBuf::from);
        let mut cfg = RunConfig {
            image: path("image"),
            landmarks: path("landmarks"),
            parsing: path("parsing"),
            completion: path("completion"),
            model: path("model"),
            clean: path("clean"),
            depth_gt: path("depth_gt"),
            bump_gt: path("bump_gt"),
            ..RunConfig::default()
        };
        if let Some(out) = path("output") {
            cfg.output = out;
        }
        if let Some(scene) = path("scene") {
            let fill = |slot: &mut Option<PathBuf>, name: &str| {
                if slot.is_none() {
                    *slot = Some(scene.join(name));
                }
            };
            fill(&mut cfg.image, files::IMAGE);
            fill(&mut cfg.landmarks, files::LANDMARKS);
            fill(&mut cfg.parsing, files::PARSING);
            fill(&mut cfg.clean, files::CLEAN);
            fill(&mut cfg.depth_gt, files::DEPTH_BASE);
            fill(&mut cfg.bump_gt, files::BUMP_GT);
            if cfg.model.is_none() {
                cfg.model = Some(scene.parent().unwrap_or(Path::new(".")).join(MODEL_FILE));
            }
        }
        cfg.delta_max = parse(kv, "delta_max")?;
        if let Some(v) = parse(kv, "levels")? {
            cfg.levels = v;
        }
        if let Some(raw) = kv.get("occluder_labels") {
            cfg.occlusion.occluder_labels = raw
                .split([',', ' '])
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<u8>())
                .collect::<Result<_, _>>()
                .map_err(|_| PipelineError::Validation(format!("bad occluder_labels `{raw}`")))?;
        }
        if let Some(v) = parse(kv, "margin")? {
            cfg.occlusion.margin = v;
        }
        if let Some(v) = parse(kv, "seed")? {
            cfg.seed = v;
        }
        let fit = &mut cfg.fit;
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = parse(kv, stringify!($field))? {
                    fit.$field = v;
                }
            };
        }
        set!(max_iterations);
        set!(landmark_weight);
        set!(photo_weight);
        set!(prior_weight);
        set!(convergence_tol);
        set!(damping_init);
        set!(camera_distance);
        if let Some(v) = parse(kv, "harmonic_tolerance")? {
            cfg.harmonic.tolerance = v;
        }
        if let Some(v) = parse(kv, "harmonic_max_sweeps")? {
            cfg.harmonic.max_sweeps = v;
        }
        Ok(cfg)
    }

    fn require<'a>(&self, slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, PipelineError> {
        let path = slot
            .as_deref()
            .ok_or_else(|| PipelineError::Validation(format!("`{name}` is required")))?;
        if !path.is_file() {
            return Err(PipelineError::Validation(format!(
                "{name} file {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    fn check_optional(&self, slot: &Option<PathBuf>, name: &str) -> Result<(), PipelineError> {
        if slot.is_some() {
            self.require(slot, name)?;
        }
        Ok(())
    }

    fn validate_common(&self) -> Result<(), PipelineError> {
        self.fit
            .validate()
            .map_err(|e| PipelineError::Validation(e.to_string()))?;
        if let Some(d) = self.delta_max {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(PipelineError::Validation(
                    "delta_max must be finite and non-negative".into(),
                ));
            }
        }
        if self.levels < 2 {
            return Err(PipelineError::Validation("levels must be at least 2".into()));
        }
        if !(self.occlusion.margin >= 0.0) {
            return Err(PipelineError::Validation("margin must be non-negative".into()));
        }
        if !(self.harmonic.tolerance > 0.0) || self.harmonic.max_sweeps == 0 {
            return Err(PipelineError::Validation("harmonic settings must be positive".into()));
        }
        Ok(())
    }

    /// Checks what stage one reads.
    pub fn validate_stage1(&self) -> Result<(), PipelineError> {
        self.validate_common()?;
        self.require(&self.image, "image")?;
        self.require(&self.landmarks, "landmarks")?;
        self.require(&self.parsing, "parsing")?;
        self.check_optional(&self.completion, "completion")?;
        self.check_optional(&self.clean, "clean")?;
        Ok(())
    }

    /// Checks what stage two reads besides the stage-one outputs.
    pub fn validate_stage2(&self) -> Result<(), PipelineError> {
        self.validate_common()?;
        self.require(&self.landmarks, "landmarks")?;
        self.require(&self.model, "model")?;
        self.check_optional(&self.depth_gt, "depth_gt")?;
        self.check_optional(&self.bump_gt, "bump_gt")?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.validate_stage1()?;
        self.validate_stage2()
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

/// Files written by the current stage, removed again if it fails.
struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Stage {
            stage: "setup",
            message: format!("cannot create {}: {e}", dir.display()),
        })?;
        Ok(Self { written: Vec::new() })
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    /// Records a file and the sidecar written next to it.
    fn track_with_sidecar(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(crate::raster::sidecar_path(&path));
        self.track(path)
    }

    fn rollback(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Runs `body`, deleting its outputs if it fails.
fn guarded<T>(dir: &Path, body: impl FnOnce(&mut Outputs) -> Result<T, PipelineError>) -> Result<T, PipelineError> {
    let mut outputs = Outputs::new(dir)?;
    let result = body(&mut outputs);
    if result.is_err() {
        outputs.rollback();
    }
    result
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(stage_err("metrics"))?;
    text.push('\n');
    std::fs::write(path, text).map_err(stage_err("metrics"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Metrics {
    pub mask_pixels: usize,
    /// `"clean"` when losses are against the occlusion-free reference,
    /// `"input"` otherwise.
    pub reference: &'static str,
    pub completion: &'static str,
    pub pixel_loss: Option<f64>,
    pub style_loss: Option<f64>,
    pub synthesis_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub mask: OcclusionMask,
    pub inco: Image,
    /// Completed image as stored (8-bit).
    pub completed: Image,
    pub metrics: Stage1Metrics,
}

fn load_inputs(cfg: &RunConfig) -> Result<(Image, Landmarks, ParsingMap), PipelineError> {
    let i0 = Image::load(cfg.image.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load inputs"))?;
    let landmarks =
        Landmarks::load(cfg.landmarks.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load inputs"))?;
    let parsing =
        ParsingMap::load(cfg.parsing.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load inputs"))?;
    if parsing.width != i0.width() || parsing.height != i0.height() {
        return Err(PipelineError::Stage {
            stage: "load inputs",
            message: format!(
                "parsing map is {}x{} but image is {}x{}",
                parsing.width,
                parsing.height,
                i0.width(),
                i0.height()
            ),
        });
    }
    Ok((i0, landmarks, parsing))
}

/// Rounds an image through its 8-bit storage form.
fn as_stored(image: &Image) -> Result<Image, PipelineError> {
    Image::from_u8(image.width(), image.height(), image.channels(), &image.to_u8()).map_err(stage_err("completion"))
}

/// Computes `I_m` and `I_inco` and writes them.
pub fn run_mask(cfg: &RunConfig) -> Result<(OcclusionMask, Image), PipelineError> {
    cfg.validate_stage1()?;
    guarded(&cfg.output, |out| {
        let (i0, landmarks, parsing) = load_inputs(cfg)?;
        let mask = compute_occlusion_mask(&parsing, &landmarks, &cfg.occlusion).map_err(stage_err("mask"))?;
        let inco = hollow_out(&i0, &mask).map_err(stage_err("mask"))?;
        mask.save(out.track(cfg.output_path(outputs::MASK)))
            .map_err(stage_err("mask"))?;
        inco.save(out.track(cfg.output_path(outputs::INCO)))
            .map_err(stage_err("mask"))?;
        Ok((mask, inco))
    })
}

/// Stage one: mask, hollow-out, completion and losses.
pub fn run_stage1(cfg: &RunConfig) -> Result<Stage1Output, PipelineError> {
    cfg.validate_stage1()?;
    guarded(&cfg.output, |out| {
        let (i0, landmarks, parsing) = load_inputs(cfg)?;
        let mask = compute_occlusion_mask(&parsing, &landmarks, &cfg.occlusion).map_err(stage_err("mask"))?;
        let inco = hollow_out(&i0, &mask).map_err(stage_err("mask"))?;
        mask.save(out.track(cfg.output_path(outputs::MASK)))
            .map_err(stage_err("mask"))?;
        inco.save(out.track(cfg.output_path(outputs::INCO)))
            .map_err(stage_err("mask"))?;
        log::info!("mask covers {} pixels", mask.count());

        let (completed, completion) = match &cfg.completion {
            Some(path) => (
                load_external_completion(path, &mask, &inco).map_err(stage_err("completion"))?,
                "external",
            ),
            None => (
                complete_baseline(&inco, &mask, &landmarks, &cfg.harmonic).map_err(stage_err("completion"))?,
                "harmonic",
            ),
        };
        let completed = as_stored(&completed)?;
        completed
            .save(out.track(cfg.output_path(outputs::COMPLETED)))
            .map_err(stage_err("completion"))?;

        let (reference, reference_name) = match &cfg.clean {
            Some(p) => (Image::load(p).map_err(stage_err("metrics"))?, "clean"),
            None => (i0.clone(), "input"),
        };
        let mut metrics = Stage1Metrics {
            mask_pixels: mask.count(),
            reference: reference_name,
            completion,
            pixel_loss: None,
            style_loss: None,
            synthesis_loss: None,
        };
        if !mask.is_empty() {
            let fx = FeatureExtractor::new(completed.channels(), &DEFAULT_WIDTHS, cfg.seed);
            let loss = synthesis_loss(&completed, &reference, &mask, &LossWeights::default(), &fx)
                .map_err(stage_err("metrics"))?;
            metrics.pixel_loss = Some(loss.pixel);
            metrics.style_loss = Some(loss.style);
            metrics.synthesis_loss = Some(loss.total);
        }
        write_json(&out.track(cfg.output_path(outputs::STAGE1_METRICS)), &metrics)?;
        Ok(Stage1Output {
            mask,
            inco,
            completed,
            metrics,
        })
    })
}

fn load_model(cfg: &RunConfig) -> Result<MorphableModel, PipelineError> {
    MorphableModel::load(cfg.model.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load model"))
}

/// Landmark fit followed by the photometric refinement on `i1`; writes the
/// fit manifest and its iteration trace.
pub fn run_fit(cfg: &RunConfig, i1: &Image) -> Result<ReconstructionState, PipelineError> {
    cfg.validate_stage2()?;
    guarded(&cfg.output, |out| {
        let model = load_model(cfg)?;
        let landmarks =
            Landmarks::load(cfg.landmarks.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load inputs"))?;
        let (w, h) = (i1.width(), i1.height());
        let coarse = fit_landmarks(&model, &landmarks, w, h, &cfg.fit, None).map_err(stage_err("landmark fit"))?;
        log::info!(
            "landmark fit: cost {:.3e} after {} trial steps",
            coarse.costs.total(),
            coarse.trace.len()
        );
        let state = fit_photometric(&model, &reference_albedo(&model), i1, &landmarks, &cfg.fit, &coarse)
            .map_err(stage_err("photometric fit"))?;
        if !state.costs.total().is_finite() {
            return Err(PipelineError::Stage {
                stage: "photometric fit",
                message: format!("cost diverged\n{}", state.trace_text()),
            });
        }
        log::info!("photometric fit: cost {:.3e}", state.costs.total());
        state
            .save(&out.track(cfg.output_path(outputs::FIT)))
            .map_err(stage_err("fit"))?;
        std::fs::write(out.track(cfg.output_path(outputs::FIT_TRACE)), state.trace_text()).map_err(stage_err("fit"))?;
        Ok(state)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Metrics {
    pub cost_landmark: f64,
    pub cost_prior: f64,
    pub cost_photo: f64,
    pub cost_total: f64,
    pub fit_iterations: usize,
    pub fit_converged: bool,
    pub landmark_rmse_px: f64,
    pub bump_source: &'static str,
    pub delta_max_mm: Option<f64>,
    pub mask_pixels: usize,
    pub base_depth_rmse_inside_mm: Option<f64>,
    pub base_depth_rmse_outside_mm: Option<f64>,
    pub detailed_depth_rmse_inside_mm: Option<f64>,
    pub detailed_depth_rmse_outside_mm: Option<f64>,
    pub bump_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DetailOutput {
    pub depth_base: DepthMap,
    pub bump: Option<BumpMap>,
    pub depth_detailed: DepthMap,
    pub bump_source: &'static str,
}

/// Base depth, bump and detailed depth for a fitted state; writes depth
/// maps, the bump and OBJ meshes.
pub fn run_detail(
    cfg: &RunConfig,
    state: &ReconstructionState,
    mask: &OcclusionMask,
) -> Result<DetailOutput, PipelineError> {
    cfg.validate_stage2()?;
    guarded(&cfg.output, |out| {
        let model = load_model(cfg)?;
        let (w, h) = (mask.width, mask.height);
        let mesh = state.mesh(&model).map_err(stage_err("detail"))?;
        let textured = mesh.clone().with_albedo(reference_albedo(&model));
        let raster = rasterize(&textured, &state.pose, &state.gamma, w, h).map_err(stage_err("detail"))?;
        let depth_base = raster.depth;
        let valid = depth_base.valid.clone();

        let (bump, bump_source) = if cfg.delta_max == Some(0.0) {
            (None, "disabled")
        } else if let Some(path) = &cfg.bump_gt {
            let b = BumpMap::load_pgm(path, valid.clone()).map_err(stage_err("bump"))?;
            (Some(b), "ground_truth")
        } else {
            let codec = BumpCodec::new(cfg.delta_max.unwrap_or(1.0), cfg.levels).map_err(stage_err("bump"))?;
            (
                Some(BumpMap::flat(w, h, valid.clone(), codec).map_err(stage_err("bump"))?),
                "flat",
            )
        };
        let bump = match bump {
            Some(b) if b.width != w || b.height != h => {
                return Err(PipelineError::Stage {
                    stage: "bump",
                    message: format!("bump is {}x{} but image is {w}x{h}", b.width, b.height),
                })
            }
            Some(b) if !mask.is_empty() => Some(extrapolate_bump(&b, mask, &cfg.harmonic).map_err(stage_err("bump"))?),
            other => other,
        };
        let depth_detailed = match &bump {
            Some(b) => apply_bump(b, &depth_base).map_err(stage_err("bump"))?,
            None => depth_base.clone(),
        };

        depth_base
            .save_pgm(&out.track_with_sidecar(cfg.output_path(outputs::DEPTH_BASE)))
            .map_err(stage_err("detail"))?;
        if let Some(b) = &bump {
            b.save_pgm(&out.track_with_sidecar(cfg.output_path(outputs::BUMP)))
                .map_err(stage_err("bump"))?;
        }
        depth_detailed
            .save_pgm(&out.track_with_sidecar(cfg.output_path(outputs::DEPTH_DETAILED)))
            .map_err(stage_err("detail"))?;
        save_obj(&mesh, &out.track(cfg.output_path(outputs::MESH_MODEL))).map_err(stage_err("mesh"))?;
        let base_mesh = depth_to_mesh(&depth_base, &state.pose).map_err(stage_err("mesh"))?;
        save_obj(&base_mesh, &out.track(cfg.output_path(outputs::MESH_BASE))).map_err(stage_err("mesh"))?;
        let detailed_mesh = depth_to_mesh(&depth_detailed, &state.pose).map_err(stage_err("mesh"))?;
        save_obj(&detailed_mesh, &out.track(cfg.output_path(outputs::MESH_DETAILED))).map_err(stage_err("mesh"))?;
        Ok(DetailOutput {
            depth_base,
            bump,
            depth_detailed,
            bump_source,
        })
    })
}

/// Stage two: fit, detail and metrics (split inside / outside `mask`).
pub fn run_stage2(cfg: &RunConfig, i1: &Image, mask: &OcclusionMask) -> Result<Stage2Metrics, PipelineError> {
    cfg.validate_stage2()?;
    if i1.width() != mask.width || i1.height() != mask.height {
        return Err(PipelineError::Validation(format!(
            "completed image is {}x{} but mask is {}x{}",
            i1.width(),
            i1.height(),
            mask.width,
            mask.height
        )));
    }
    guarded(&cfg.output, |out| {
        let state = run_fit(cfg, i1)?;
        out.track(cfg.output_path(outputs::FIT));
        out.track(cfg.output_path(outputs::FIT_TRACE));
        let detail = run_detail(cfg, &state, mask)?;
        for name in [outputs::DEPTH_BASE, outputs::BUMP, outputs::DEPTH_DETAILED] {
            out.track_with_sidecar(cfg.output_path(name));
        }
        for name in [outputs::MESH_MODEL, outputs::MESH_BASE, outputs::MESH_DETAILED] {
            out.track(cfg.output_path(name));
        }

        let model = load_model(cfg)?;
        let landmarks =
            Landmarks::load(cfg.landmarks.as_deref().unwrap_or(Path::new(""))).map_err(stage_err("load inputs"))?;
        let mut metrics = Stage2Metrics {
            cost_landmark: state.costs.landmark,
            cost_prior: state.costs.prior,
            cost_photo: state.costs.photo,
            cost_total: state.costs.total(),
            fit_iterations: state.trace.len(),
            fit_converged: state.converged,
            landmark_rmse_px: state.landmarks(&model, i1.width(), i1.height()).rmse(&landmarks),
            bump_source: detail.bump_source,
            delta_max_mm: detail.bump.as_ref().map(|b| b.codec.delta_max),
            mask_pixels: mask.count(),
            base_depth_rmse_inside_mm: None,
            base_depth_rmse_outside_mm: None,
            detailed_depth_rmse_inside_mm: None,
            detailed_depth_rmse_outside_mm: None,
            bump_l1: None,
        };
        if let Some(path) = &cfg.depth_gt {
            let gt_base = DepthMap::load_pgm(path).map_err(stage_err("metrics"))?;
            gt_base.same_size(&detail.depth_base).map_err(stage_err("metrics"))?;
            let (bi, bo) = depth_rmse_split(&detail.depth_base, &gt_base, mask.as_slice());
            metrics.base_depth_rmse_inside_mm = bi;
            metrics.base_depth_rmse_outside_mm = bo;
            let gt_detailed = match &cfg.bump_gt {
                Some(bp) => {
                    let gt_bump = BumpMap::load_pgm(bp, gt_base.valid.clone()).map_err(stage_err("metrics"))?;
                    if let Some(b) = &detail.bump {
                        metrics.bump_l1 = Some(
                            geo_loss(b.values(), gt_bump.values(), b.width, b.height).map_err(stage_err("metrics"))?,
                        );
                    }
                    apply_bump(&gt_bump, &gt_base).map_err(stage_err("metrics"))?
                }
                None => gt_base,
            };
            let (di, dout) = depth_rmse_split(&detail.depth_detailed, &gt_detailed, mask.as_slice());
            metrics.detailed_depth_rmse_inside_mm = di;
            metrics.detailed_depth_rmse_outside_mm = dout;
        }
        write_json(&out.track(cfg.output_path(outputs::STAGE2_METRICS)), &metrics)?;
        Ok(metrics)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub stage1: Stage1Metrics,
    pub stage2: Stage2Metrics,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: RunMetrics,
    /// Wall-clock time per stage. Reported to the caller only; output files
    /// never contain timings, so repeated runs stay bit-identical.
    pub timings: Vec<(&'static str, Duration)>,
}

/// Stage one, then stage two on the stored stage-one outputs.
pub fn run_all(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let stage1 = run_stage1(cfg)?;
    let t1 = t0.elapsed();
    let (i1, mask) = load_stage1_outputs(cfg)?;
    let stage2 = run_stage2(cfg, &i1, &mask)?;
    let t2 = t0.elapsed() - t1;
    let metrics = RunMetrics {
        stage1: stage1.metrics,
        stage2,
    };
    write_json(&cfg.output_path(outputs::METRICS), &metrics)?;
    Ok(RunReport {
        metrics,
        timings: vec![("stage1", t1), ("stage2", t2)],
    })
}

/// Reads `completed.png` and `mask.pgm` from the output directory.
pub fn load_stage1_outputs(cfg: &RunConfig) -> Result<(Image, OcclusionMask), PipelineError> {
    let completed = cfg.output_path(outputs::COMPLETED);
    let mask = cfg.output_path(outputs::MASK);
    for p in [&completed, &mask] {
        if !p.is_file() {
            return Err(PipelineError::Validation(format!(
                "{} is missing; run stage one first",
                p.display()
            )));
        }
    }
    let i1 = Image::load(&completed).map_err(stage_err("load stage-one outputs"))?;
    let mask = OcclusionMask::load(&mask).map_err(stage_err("load stage-one outputs"))?;
    Ok((i1, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub scene: String,
    pub ok: bool,
    pub error: Option<String>,
    pub metrics: Option<RunMetrics>,
}

/// Runs every `scene_*` directory under `root` in parallel, each into its own
/// subdirectory of `base.output`, and writes an aggregate report.
pub fn run_suite(root: &Path, base: &KeyValues) -> Result<Vec<SuiteRow>, PipelineError> {
    let mut scenes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scene_"))
        })
        .collect();
    scenes.sort();
    if scenes.is_empty() {
        return Err(PipelineError::Validation(format!(
            "no scene_* directories in {}",
            root.display()
        )));
    }
    let base_cfg = RunConfig::from_settings(base)?;
    let rows: Vec<SuiteRow> = scenes
        .par_iter()
        .map(|dir| {
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let mut kv = base.clone();
            kv.set("scene", dir.display().to_string());
            kv.set("output", base_cfg.output.join(&name).display().to_string());
            let result = RunConfig::from_settings(&kv).and_then(|cfg| run_all(&cfg));
            match result {
                Ok(report) => SuiteRow {
                    scene: name,
                    ok: true,
                    error: None,
                    metrics: Some(report.metrics),
                },
                Err(e) => SuiteRow {
                    scene: name,
                    ok: false,
                    error: Some(e.to_string()),
                    metrics: None,
                },
            }
        })
        .collect();
    std::fs::create_dir_all(&base_cfg.output).map_err(stage_err("suite"))?;
    write_json(&base_cfg.output.join(outputs::SUITE_METRICS), &rows)?;
    Ok(rows)
}
