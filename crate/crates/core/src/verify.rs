//! Self-checks runnable from the command line: algebraic invariants and
//! finite-difference gradient verification on seeded random instances.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bump::BumpCodec;
use crate::camera::rotation_from_euler;
use crate::harmonic::{harmonic_fill, HarmonicConfig};
use crate::illumination::{sh_basis, ShCoefficients};
use crate::image::Image;
use crate::landmarks::Landmarks;
use crate::losses::{
    finite_difference_check, finite_difference_check_l1, geo_loss, geo_loss_gradient, geo_loss_residuals, lmk_loss,
    lmk_loss_gradient, pixel_loss, pixel_loss_gradient, style_loss, style_loss_gradient, style_loss_residuals,
    synthesis_loss, synthesis_loss_gradient, FeatureExtractor, LossWeights,
};
use crate::occlusion::OcclusionMask;
use crate::synth::{synthetic_model, DEFAULT_MODEL_SEED};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error for the check's own measure.
    pub worst: f64,
    pub instances: usize,
}

fn finish(name: &'static str, worst: f64, limit: f64, instances: usize) -> CheckResult {
    CheckResult {
        name,
        passed: worst <= limit,
        worst,
        instances,
    }
}

fn model_linearity(seed: u64) -> CheckResult {
    let model = synthetic_model(DEFAULT_MODEL_SEED);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = model.mean_shape().clone();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a1 = DVector::from_fn(model.identity_modes(), |_, _| rng.random_range(-2.0..2.0));
        let a2 = DVector::from_fn(model.identity_modes(), |_, _| rng.random_range(-2.0..2.0));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let lhs = model.evaluate_shape(&(&a1 * a + &a2 * b)).expect("lengths match");
        let s1 = model.evaluate_shape(&a1).expect("lengths match") - &mean;
        let s2 = model.evaluate_shape(&a2).expect("lengths match") - &mean;
        let rhs = s1 * a + s2 * b + &mean;
        worst = worst.max((lhs - &rhs).amax() / rhs.amax());
    }
    finish("model linearity", worst, 1e-9, 20)
}

fn rotation_orthonormal(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let r = Vector3::from_fn(|_, _| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let m = rotation_from_euler(&r);
        worst = worst
            .max((m.transpose() * m - nalgebra::Matrix3::identity()).amax())
            .max((m.determinant() - 1.0).abs());
    }
    finish("rotation orthonormality", worst, 1e-12, 1000)
}

fn sh_constant_band(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = ShCoefficients::ambient(0.8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let b = sh_basis(&n).expect("unit normal");
        worst = worst.max((gamma.irradiance(&b) - 0.8).abs());
    }
    finish("sh constant band", worst, 1e-12, 1000)
}

fn codec_roundtrip(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = BumpCodec::eight_bit(1.5).expect("valid codec");
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.random_range(-1.5..=1.5);
        let exact = (codec.decode(codec.encode(d)).expect("in range") - d).abs();
        let quant = (codec.decode(codec.quantize(codec.encode(d))).expect("in range") - d).abs();
        worst_ratio = worst_ratio.max(exact / 1e-12).max(quant / (codec.delta_max / 255.0));
    }
    finish("bump codec roundtrip", worst_ratio, 1.0, 1000)
}

fn harmonic_maximum_principle(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (24, 20);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for _ in 0..100 {
        let mut mask = vec![false; w * h];
        let (cx, cy) = (rng.random_range(3..w - 3), rng.random_range(3..h - 3));
        let (rx, ry) = (rng.random_range(1..6), rng.random_range(1..6));
        for y in cy.saturating_sub(ry)..(cy + ry).min(h - 1) {
            for x in cx.saturating_sub(rx)..(cx + rx).min(w - 1) {
                mask[y * w + x] = rng.random_bool(0.9);
            }
        }
        let mut values: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let boundary: Vec<f64> = (0..w * h).filter(|&i| !mask[i]).map(|i| values[i]).collect();
        let (lo, hi) = boundary
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if harmonic_fill(&mut values, w, h, &mask, &HarmonicConfig::default()).is_err() {
            continue;
        }
        instances += 1;
        for (i, &v) in values.iter().enumerate() {
            if mask[i] {
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    finish("harmonic maximum principle", worst.max(0.0), 0.0, instances)
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.random_range(0.05..0.95)).collect()).expect("valid image")
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> OcclusionMask {
    let mut m: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.4)).collect();
    m[0] = true;
    OcclusionMask::new(w, h, m).expect("sizes match")
}

fn image_from(x: &[f64], w: usize, h: usize) -> Image {
    Image::from_vec_clamped(w, h, 1, x.to_vec()).expect("valid image")
}

/// Central-difference checks of every loss on `instances` random inputs.
pub fn gradient_checks(seed: u64, instances: usize) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 8);
    let fx = FeatureExtractor::new(1, &[4, 6], seed);
    let mut worst = [0.0f64; 5];
    let mut passed = [true; 5];
    for k in 0..instances {
        let gt = Landmarks::from_flat(&(0..136).map(|_| rng.random_range(0.0..100.0)).collect::<Vec<_>>());
        let p0: Vec<f64> = (0..136).map(|_| rng.random_range(0.0..100.0)).collect();
        let loss = |x: &[f64]| lmk_loss(&Landmarks::from_flat(x), &gt).expect("same length");
        let grad = |x: &[f64]| lmk_loss_gradient(&Landmarks::from_flat(x), &gt).expect("same length");
        let r = finite_difference_check(&loss, Some(&grad), &p0, FD_STEP, FD_TOLERANCE);
        worst[0] = worst[0].max(r.max_relative_error);
        passed[0] &= r.passed;

        let i0 = random_image(&mut rng, w, h);
        let i1 = random_image(&mut rng, w, h);
        let mask = random_mask(&mut rng, w, h);
        let x0 = i1.data().to_vec();
        let residuals = |x: &[f64]| x.iter().zip(i0.data()).map(|(a, b)| a - b).collect::<Vec<_>>();
        let loss = |x: &[f64]| pixel_loss(&image_from(x, w, h), &i0, &mask).expect("valid");
        let grad = |x: &[f64]| pixel_loss_gradient(&image_from(x, w, h), &i0, &mask).expect("valid");
        let r = finite_difference_check_l1(&loss, &grad, &residuals, &x0, FD_STEP, FD_TOLERANCE, seed + k as u64);
        worst[1] = worst[1].max(r.max_relative_error);
        passed[1] &= r.passed;

        let style_res = |x: &[f64]| style_loss_residuals(&image_from(x, w, h), &i0, &mask, &fx).expect("valid");
        let loss = |x: &[f64]| style_loss(&image_from(x, w, h), &i0, &mask, &fx).expect("valid");
        let grad = |x: &[f64]| style_loss_gradient(&image_from(x, w, h), &i0, &mask, &fx).expect("valid");
        let r = finite_difference_check_l1(&loss, &grad, &style_res, &x0, FD_STEP, FD_TOLERANCE, seed + k as u64);
        worst[2] = worst[2].max(r.max_relative_error);
        passed[2] &= r.passed;

        let weights = LossWeights::default();
        let loss = |x: &[f64]| {
            synthesis_loss(&image_from(x, w, h), &i0, &mask, &weights, &fx)
                .expect("valid")
                .total
        };
        let grad = |x: &[f64]| synthesis_loss_gradient(&image_from(x, w, h), &i0, &mask, &weights, &fx).expect("valid");
        let all = |x: &[f64]| residuals(x).into_iter().chain(style_res(x)).collect();
        let r = finite_difference_check_l1(&loss, &grad, &all, &x0, FD_STEP, FD_TOLERANCE, seed + k as u64);
        worst[3] = worst[3].max(r.max_relative_error);
        passed[3] &= r.passed;

        let gt_bump: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let b0: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..255.0)).collect();
        let loss = |x: &[f64]| geo_loss(x, &gt_bump, w, h).expect("valid");
        let grad = |x: &[f64]| geo_loss_gradient(x, &gt_bump, w, h).expect("valid");
        let res = |x: &[f64]| geo_loss_residuals(x, &gt_bump, w, h);
        let r = finite_difference_check_l1(&loss, &grad, &res, &b0, FD_STEP, FD_TOLERANCE, seed + k as u64);
        worst[4] = worst[4].max(r.max_relative_error);
        passed[4] &= r.passed;
    }
    [
        "lmk_loss gradient",
        "pixel_loss gradient",
        "style_loss gradient",
        "synthesis_loss gradient",
        "geo_loss gradient",
    ]
    .iter()
    .zip(worst.iter().zip(passed))
    .map(|(&name, (&worst, ok))| CheckResult {
        name,
        passed: ok,
        worst,
        instances,
    })
    .collect()
}

/// Every check with its default instance count.
pub fn run_all_checks(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![
        model_linearity(seed),
        rotation_orthonormal(seed),
        sh_constant_band(seed),
        codec_roundtrip(seed),
        harmonic_maximum_principle(seed),
    ];
    out.extend(gradient_checks(seed, 10));
    out
}
