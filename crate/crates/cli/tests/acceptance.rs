//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use occface::bump::{compute_bump, extrapolate_bump, BumpCodec, BumpMap};
use occface::camera::{project, rotation_from_euler, CameraPose};
use occface::fitting::{fit_landmarks, fit_photometric, solve_gamma, Costs, FitConfig, ReconstructionState};
use occface::harmonic::{harmonic_fill, HarmonicConfig};
use occface::illumination::{sh_basis, ShCoefficients, SH_COUNT};
use occface::image::Image;
use occface::io::KeyValues;
use occface::landmarks::Landmarks;
use occface::losses::{
    finite_difference_check, finite_difference_check_l1, geo_loss, geo_loss_gradient, geo_loss_residuals, lmk_loss,
    lmk_loss_gradient, pixel_loss, pixel_loss_gradient, style_loss, style_loss_gradient, style_loss_residuals,
    synthesis_loss, synthesis_loss_gradient, FeatureExtractor, LossWeights,
};
use occface::model::{CoefficientVector, Mesh, MorphableModel};
use occface::occlusion::{complete_baseline, OcclusionMask};
use occface::pipeline::{outputs, run_suite, Stage2Metrics};
use occface::raster::{rasterize, DepthMap, NO_TRIANGLE};
use occface::synth::{
    generate_scene, reference_albedo, synthetic_model, write_scene, Difficulty, SceneConfig, DEFAULT_MODEL_SEED,
};

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);

type Criterion = Box<dyn Fn() -> Outcome + std::panic::RefUnwindSafe>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn model() -> MorphableModel {
    synthetic_model(DEFAULT_MODEL_SEED)
}

// 1 -------------------------------------------------------------------------

fn model_oracle() -> Outcome {
    let m = model();
    let n = m.vertex_count();
    let (ki, ke) = (m.identity_modes(), m.expression_modes());
    let mut r = rng(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let alpha: Vec<f64> = (0..ki).map(|_| r.random_range(-3.0..3.0)).collect();
        let beta: Vec<f64> = (0..ke).map(|_| r.random_range(-3.0..3.0)).collect();
        let coeffs = CoefficientVector::new(DVector::from_vec(alpha.clone()), DVector::from_vec(beta.clone()));
        let mesh = m.evaluate_geometry(&coeffs).expect("coefficient lengths match");
        // Naive dense product, one scalar at a time.
        let mut oracle = vec![0.0; 3 * n];
        for (row, o) in oracle.iter_mut().enumerate() {
            let mut acc = m.mean_shape()[row];
            for (k, a) in alpha.iter().enumerate() {
                acc += m.shape_basis()[(row, k)] * a;
            }
            for (k, b) in beta.iter().enumerate() {
                acc += m.expr_basis()[(row, k)] * b;
            }
            *o = acc;
        }
        let scale = oracle.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for (v, p) in mesh.vertices.iter().enumerate() {
            for c in 0..3 {
                worst = worst.max((p[c] - oracle[3 * v + c]).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    (
        worst <= 1e-12 && elapsed < Duration::from_secs(5) && n == 500 && ki == 10 && ke == 5,
        format!("N={n}, K_id={ki}, K_exp={ke}: worst relative error {worst:.2e} over 100 draws in {elapsed:.2?}"),
    )
}

// 2 -------------------------------------------------------------------------

fn rotation_projection() -> Outcome {
    let mut r = rng(2);
    let mut worst_orth: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    for _ in 0..1000 {
        let e = Vector3::from_fn(|_, _| r.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let m = rotation_from_euler(&e);
        worst_orth = worst_orth.max((m.transpose() * m - Matrix3::identity()).amax());
        worst_det = worst_det.max((m.determinant() - 1.0).abs());
    }
    // Exactness on dyadic inputs, where every product and sum is representable.
    let mut exact = true;
    for _ in 0..100 {
        let d = |r: &mut ChaCha8Rng| r.random_range(-512i32..512) as f64 / 8.0;
        let pose = CameraPose::new(Vector3::zeros(), Vector3::new(d(&mut r), d(&mut r), -500.0), 0.5);
        let p = Vector3::new(d(&mut r), d(&mut r), d(&mut r));
        let q = Vector3::new(d(&mut r), d(&mut r), d(&mut r));
        let (a, b) = (d(&mut r), d(&mut r));
        let f = project(&pose, &[Vector3::zeros(), p, q, p * a + q * b], 128, 128);
        let lin = |g: fn(&occface::camera::Projected) -> f64| {
            g(&f[3]) - g(&f[0]) == a * (g(&f[1]) - g(&f[0])) + b * (g(&f[2]) - g(&f[0]))
        };
        exact &= lin(|x| x.u) && lin(|x| x.v) && lin(|x| x.depth);
    }
    (
        worst_orth <= 1e-12 && worst_det <= 1e-12 && exact,
        format!(
            "1000 Euler triples: |RᵀR−I| {worst_orth:.2e}, |det−1| {worst_det:.2e}; projection linearity exact: {exact}"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Associated Legendre function without the Condon-Shortley phase, by the
/// standard recurrences.
fn legendre(l: u32, m: u32, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for i in 0..m {
        pmm *= (2 * i + 1) as f64 * s;
    }
    if l == m {
        return pmm;
    }
    let mut pm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pm1;
    }
    let mut p = 0.0;
    for ll in m + 2..=l {
        p = (x * (2 * ll - 1) as f64 * pm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pm1;
        pm1 = p;
    }
    p
}

/// Real spherical harmonic from polar and azimuthal angles.
fn real_sh(l: u32, m: i32, theta: f64, phi: f64) -> f64 {
    let am = m.unsigned_abs();
    let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
    let p = legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => k * p,
        std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * p * (m as f64 * phi).cos(),
        std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * p * (am as f64 * phi).sin(),
    }
}

fn sh_oracle(n: &Vector3<f64>) -> [f64; SH_COUNT] {
    let theta = n.z.clamp(-1.0, 1.0).acos();
    let phi = n.y.atan2(n.x);
    // Y₂₁ uses the xz product and Y₂₋₁ the yz product, as in the basis order.
    let idx = [
        (0, 0),
        (1, -1),
        (1, 0),
        (1, 1),
        (2, -2),
        (2, -1),
        (2, 0),
        (2, 1),
        (2, 2),
    ];
    idx.map(|(l, m)| real_sh(l, m, theta, phi))
}

fn sh_correctness() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut worst_const: f64 = 0.0;
    let ambient = ShCoefficients::ambient(0.73);
    for _ in 0..1000 {
        let n = loop {
            let v = Vector3::from_fn(|_, _| r.random_range(-1.0..1.0));
            if v.norm() > 1e-3 && v.norm() <= 1.0 {
                break v.normalize();
            }
        };
        let got = sh_basis(&n).expect("unit normal");
        for (a, b) in got.iter().zip(sh_oracle(&n)) {
            worst = worst.max((a - b).abs());
        }
        worst_const = worst_const.max((ambient.irradiance(&got) - 0.73).abs());
    }
    (
        worst <= 1e-12 && worst_const <= 1e-12,
        format!("1000 directions: basis error {worst:.2e}, constant-band shading deviation {worst_const:.2e}"),
    )
}

// 4 -------------------------------------------------------------------------

const RW: usize = 48;
const RH: usize = 40;

/// Brute-force coverage and depth of one triangle: every pixel center, plain
/// barycentric coordinates from the 2×2 system. `None` marks centers that
/// sit on an edge to within rounding, where coverage is decided by the
/// tie-break rule rather than geometry.
fn oracle_triangle(pts: &[Vector3<f64>; 3], scale: f64) -> Vec<Option<Option<f64>>> {
    let screen: Vec<(f64, f64, f64)> = pts
        .iter()
        .map(|p| (scale * p.x + RW as f64 / 2.0, RH as f64 / 2.0 - scale * p.y, -p.z))
        .collect();
    let (x1, y1, d1) = screen[0];
    let (x2, y2, d2) = screen[1];
    let (x3, y3, d3) = screen[2];
    let det = (y2 - y3) * (x1 - x3) + (x3 - x2) * (y1 - y3);
    (0..RW * RH)
        .map(|i| {
            let (px, py) = ((i % RW) as f64 + 0.5, (i / RW) as f64 + 0.5);
            let l1 = ((y2 - y3) * (px - x3) + (x3 - x2) * (py - y3)) / det;
            let l2 = ((y3 - y1) * (px - x3) + (x1 - x3) * (py - y3)) / det;
            let l3 = 1.0 - l1 - l2;
            if [l1, l2, l3].iter().any(|l| l.abs() < 1e-9) {
                None
            } else if l1 > 0.0 && l2 > 0.0 && l3 > 0.0 {
                Some(Some(l1 * d1 + l2 * d2 + l3 * d3))
            } else {
                Some(None)
            }
        })
        .collect()
}

fn raster_oracle() -> Outcome {
    let mut r = rng(4);
    let pose = CameraPose::identity(1.0);
    let gamma = ShCoefficients::ambient(1.0);
    let mut mismatched = 0;
    let mut ambiguous = 0;
    let mut covered = 0;
    let mut worst_depth: f64 = 0.0;
    for _ in 0..50 {
        let pts: [Vector3<f64>; 3] = std::array::from_fn(|_| {
            Vector3::new(
                r.random_range(-26.0..26.0),
                r.random_range(-22.0..22.0),
                r.random_range(-40.0..-5.0),
            )
        });
        let area = (pts[1] - pts[0]).xy().perp(&(pts[2] - pts[0]).xy());
        if area.abs() < 1.0 {
            continue;
        }
        let mesh = Mesh::new(pts.to_vec(), vec![[0, 1, 2]]);
        let out = rasterize(&mesh, &pose, &gamma, RW, RH).expect("valid mesh");
        for (i, o) in oracle_triangle(&pts, 1.0).into_iter().enumerate() {
            match o {
                None => ambiguous += 1,
                Some(None) => mismatched += usize::from(out.depth.valid[i]),
                Some(Some(d)) => {
                    covered += 1;
                    if !out.depth.valid[i] {
                        mismatched += 1;
                    } else {
                        worst_depth = worst_depth.max((out.depth.depth[i] - d).abs());
                    }
                }
            }
        }
    }

    // Overlap: a near and a far triangle, both submission orders.
    let near = [
        Vector3::new(-20.0, -15.0, -10.0),
        Vector3::new(18.0, -12.0, -10.0),
        Vector3::new(-2.0, 17.0, -10.0),
    ];
    let far = [
        Vector3::new(-15.0, 14.0, -30.0),
        Vector3::new(-12.0, -18.0, -30.0),
        Vector3::new(21.0, 2.0, -30.0),
    ];
    let mut overlap_exact = true;
    let mut overlap_pixels = 0;
    for order in [[near, far], [far, near]] {
        let verts: Vec<Vector3<f64>> = order.iter().flatten().copied().collect();
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [3, 4, 5]]);
        let out = rasterize(&mesh, &pose, &gamma, RW, RH).expect("valid mesh");
        let near_id = if order[0] == near { 0 } else { 1 };
        let on_near = oracle_triangle(&near, 1.0);
        let on_far = oracle_triangle(&far, 1.0);
        for i in 0..RW * RH {
            match (on_near[i], on_far[i]) {
                (Some(Some(_)), Some(Some(_))) => {
                    overlap_pixels += 1;
                    overlap_exact &= out.triangle_id[i] == near_id;
                    worst_depth = worst_depth.max((out.depth.depth[i] - 10.0).abs());
                }
                (Some(None), Some(Some(_))) => overlap_exact &= out.triangle_id[i] == 1 - near_id,
                (Some(None), Some(None)) => overlap_exact &= out.triangle_id[i] == NO_TRIANGLE,
                _ => {}
            }
        }
    }
    overlap_exact &= overlap_pixels > 0;
    (
        mismatched == 0 && worst_depth <= 1e-9 && overlap_exact && covered > 0,
        format!(
            "50 triangles: {covered} covered pixels, {mismatched} coverage mismatches ({ambiguous} edge-exact centers \
             skipped), depth error {worst_depth:.2e}; z-buffer overlap exact over {overlap_pixels} pixels: {overlap_exact}"
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| r.random_range(0.05..0.95)).collect()).expect("valid image")
}

fn random_mask(r: &mut ChaCha8Rng, w: usize, h: usize) -> OcclusionMask {
    let mut m: Vec<bool> = (0..w * h).map(|_| r.random_bool(0.35)).collect();
    m[w + 1] = true;
    OcclusionMask::new(w, h, m).expect("sizes match")
}

fn gradient_checks() -> Outcome {
    let mut r = rng(5);
    let (w, h, c) = (16, 16, 3);
    let fx = FeatureExtractor::standard(c);
    let weights = LossWeights::default();
    let names = ["lmk_loss", "pixel_loss", "style_loss", "synthesis_loss", "geo_loss"];
    let mut worst = [0.0f64; 5];
    let mut passes = [0usize; 5];
    let instances = 10;
    for k in 0..instances {
        let seed = 500 + k as u64;
        let gt = Landmarks::from_flat(&(0..136).map(|_| r.random_range(0.0..128.0)).collect::<Vec<_>>());
        let p0: Vec<f64> = (0..136).map(|_| r.random_range(0.0..128.0)).collect();
        let rep = finite_difference_check(
            &|x| lmk_loss(&Landmarks::from_flat(x), &gt).expect("same length"),
            Some(&|x| lmk_loss_gradient(&Landmarks::from_flat(x), &gt).expect("same length")),
            &p0,
            FD_STEP,
            FD_TOL,
        );
        worst[0] = worst[0].max(rep.max_relative_error);
        passes[0] += usize::from(rep.passed && rep.kinked_coordinates.unwrap_or(0) == 0);

        let i0 = random_image(&mut r, w, h, c);
        let x0 = random_image(&mut r, w, h, c).into_data();
        let mask = random_mask(&mut r, w, h);
        let img = |x: &[f64]| Image::from_vec_clamped(w, h, c, x.to_vec()).expect("valid image");
        let res = |x: &[f64]| x.iter().zip(i0.data()).map(|(a, b)| a - b).collect::<Vec<_>>();

        let rep = finite_difference_check_l1(
            &|x| pixel_loss(&img(x), &i0, &mask).expect("valid"),
            &|x| pixel_loss_gradient(&img(x), &i0, &mask).expect("valid"),
            &res,
            &x0,
            FD_STEP,
            FD_TOL,
            seed,
        );
        worst[1] = worst[1].max(rep.max_relative_error);
        passes[1] += usize::from(rep.passed && rep.kinked_coordinates.unwrap_or(0) == 0);

        let style_res = |x: &[f64]| style_loss_residuals(&img(x), &i0, &mask, &fx).expect("valid");
        let rep = finite_difference_check_l1(
            &|x| style_loss(&img(x), &i0, &mask, &fx).expect("valid"),
            &|x| style_loss_gradient(&img(x), &i0, &mask, &fx).expect("valid"),
            &style_res,
            &x0,
            FD_STEP,
            FD_TOL,
            seed,
        );
        worst[2] = worst[2].max(rep.max_relative_error);
        passes[2] += usize::from(rep.passed && rep.kinked_coordinates.unwrap_or(0) == 0);

        let rep = finite_difference_check_l1(
            &|x| synthesis_loss(&img(x), &i0, &mask, &weights, &fx).expect("valid").total,
            &|x| synthesis_loss_gradient(&img(x), &i0, &mask, &weights, &fx).expect("valid"),
            &|x| res(x).into_iter().chain(style_res(x)).collect(),
            &x0,
            FD_STEP,
            FD_TOL,
            seed,
        );
        worst[3] = worst[3].max(rep.max_relative_error);
        passes[3] += usize::from(rep.passed && rep.kinked_coordinates.unwrap_or(0) == 0);

        let gt_bump: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..255.0)).collect();
        let b0: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..255.0)).collect();
        let rep = finite_difference_check_l1(
            &|x| geo_loss(x, &gt_bump, w, h).expect("valid"),
            &|x| geo_loss_gradient(x, &gt_bump, w, h).expect("valid"),
            &|x| geo_loss_residuals(x, &gt_bump, w, h),
            &b0,
            FD_STEP,
            FD_TOL,
            seed,
        );
        worst[4] = worst[4].max(rep.max_relative_error);
        passes[4] += usize::from(rep.passed && rep.kinked_coordinates.unwrap_or(0) == 0);
    }
    let summary: Vec<String> = names
        .iter()
        .zip(worst.iter().zip(&passes))
        .map(|(n, (w, p))| format!("{n} {p}/{instances} (worst {w:.1e})"))
        .collect();
    (
        passes.iter().all(|&p| p == instances),
        format!("step {FD_STEP:e}, tolerance {FD_TOL:e}: {}", summary.join(", ")),
    )
}

// 6 -------------------------------------------------------------------------

fn synthesis_weights() -> Outcome {
    let mut r = rng(6);
    let d = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (w, h) = (24, 20);
        let fx = FeatureExtractor::standard(3);
        let i0 = random_image(&mut r, w, h, 3);
        let i1 = random_image(&mut r, w, h, 3);
        let mask = random_mask(&mut r, w, h);
        let total = synthesis_loss(&i1, &i0, &mask, &d, &fx).expect("valid").total;
        let expected = 1.0 * pixel_loss(&i1, &i0, &mask).expect("valid")
            + 250.0 * style_loss(&i1, &i0, &mask, &fx).expect("valid");
        worst = worst.max((total - expected).abs() / expected.abs().max(1e-300));
    }
    (
        d.lambda_pixe == 1.0 && d.lambda_style == 250.0 && worst <= 1e-12,
        format!(
            "defaults λ_pixe={}, λ_style={}; |total − (pixel + 250·style)| relative {worst:.2e}",
            d.lambda_pixe, d.lambda_style
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn codec_roundtrip() -> Outcome {
    let mut r = rng(7);
    let mut worst_cont: f64 = 0.0;
    let mut worst_quant_ratio: f64 = 0.0;
    for _ in 0..1000 {
        let delta = r.random_range(0.05..5.0);
        let codec = BumpCodec::eight_bit(delta).expect("valid codec");
        let d = r.random_range(-delta..=delta);
        worst_cont = worst_cont.max((codec.decode(codec.encode(d)).expect("in range") - d).abs());
        let q = codec.decode(codec.quantize(codec.encode(d))).expect("in range");
        worst_quant_ratio = worst_quant_ratio.max((q - d).abs() / (delta / 255.0));
    }

    // Non-face pixels: a scene's ground-truth bump and a bump computed from
    // partially valid depth maps.
    let scene = generate_scene(&model(), 7, Difficulty::Small, &SceneConfig::default()).expect("scene");
    let zero = scene.bump.codec.zero();
    let mut off_face = 0;
    let mut exact = true;
    for (v, ok) in scene.bump.values().iter().zip(scene.bump.valid()) {
        if !ok {
            off_face += 1;
            exact &= *v == zero;
        }
    }
    let (w, h) = (10, 8);
    let mut base = DepthMap::from_depths(w, h, vec![500.0; w * h]);
    let mut detailed = DepthMap::from_depths(w, h, vec![500.3; w * h]);
    for i in 0..w * h {
        base.valid[i] = i % 4 != 0;
        detailed.valid[i] = i % 3 != 0;
    }
    let codec = BumpCodec::eight_bit(1.0).expect("valid codec");
    let bump = compute_bump(&codec, &detailed, &base).expect("same size");
    for (i, v) in bump.values().iter().enumerate() {
        if i % 4 == 0 || i % 3 == 0 {
            off_face += 1;
            exact &= *v == codec.zero();
        }
    }
    (
        worst_cont <= 1e-12 && worst_quant_ratio <= 1.0 && exact && off_face > 0,
        format!(
            "continuous error {worst_cont:.2e}; 8-bit error ≤ {worst_quant_ratio:.3}·δ/255; \
             {off_face} non-face pixels exactly φ(0): {exact}"
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn harmonic_properties() -> Outcome {
    let mut r = rng(8);
    let cfg = HarmonicConfig::default();
    let (w, h) = (40, 32);
    let mut violations = 0;
    let mut filled = 0;
    for _ in 0..100 {
        let mut mask = vec![false; w * h];
        for _ in 0..r.random_range(1..4) {
            let (cx, cy) = (r.random_range(2..w - 2) as f64, r.random_range(2..h - 2) as f64);
            let (rx, ry) = (r.random_range(1.5..10.0), r.random_range(1.5..8.0));
            for (i, m) in mask.iter_mut().enumerate() {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                if ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0 {
                    *m = true;
                }
            }
        }
        let orig: Vec<f64> = (0..w * h).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut v = orig.clone();
        if harmonic_fill(&mut v, w, h, &mask, &cfg).is_err() {
            continue;
        }
        filled += 1;
        // Bound by the boundary values actually adjacent to the region.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in (0..w * h).filter(|&i| mask[i]) {
            let (x, y) = (i % w, i / w);
            let nbrs = [
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
            ];
            for j in nbrs.into_iter().flatten().filter(|&j| !mask[j]) {
                lo = lo.min(orig[j]);
                hi = hi.max(orig[j]);
            }
        }
        for i in 0..w * h {
            let bad = if mask[i] {
                v[i] < lo || v[i] > hi
            } else {
                v[i] != orig[i]
            };
            violations += usize::from(bad);
        }
    }

    // Linear ramps across vertical strips of full height.
    let mut worst_image: f64 = 0.0;
    let mut worst_bump_frac: f64 = 0.0;
    for _ in 0..10 {
        let x0 = r.random_range(2..w / 2);
        let x1 = x0 + r.random_range(3..w / 2 - 2);
        let strip: Vec<bool> = (0..w * h).map(|i| (x0..x1).contains(&(i % w))).collect();
        let mask = OcclusionMask::new(w, h, strip).expect("sizes match");
        let (a, b) = (r.random_range(0.1..0.3), r.random_range(0.005..0.015));
        let ramp: Vec<f64> = (0..w * h).map(|i| a + b * (i % w) as f64).collect();
        let image = Image::from_vec(w, h, 1, ramp.clone()).expect("valid image");
        let inco = Image::from_vec(
            w,
            h,
            1,
            ramp.iter()
                .zip(mask.as_slice())
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect(),
        )
        .expect("valid image");
        let no_landmarks = Landmarks::new(Vec::new());
        let done = complete_baseline(&inco, &mask, &no_landmarks, &cfg).expect("fill");
        for (p, q) in done.data().iter().zip(image.data()) {
            worst_image = worst_image.max((p - q).abs());
        }

        let codec = BumpCodec::eight_bit(1.0).expect("valid codec");
        let levels: Vec<f64> = (0..w * h).map(|i| 255.0 * (i % w) as f64 / (w - 1) as f64).collect();
        let bump = BumpMap::new(w, h, levels.clone(), vec![true; w * h], codec).expect("valid bump");
        let out = extrapolate_bump(&bump, &mask, &cfg).expect("fill");
        for (p, q) in out.values().iter().zip(&levels) {
            worst_bump_frac = worst_bump_frac.max((p - q).abs() / codec.top());
        }
    }
    (
        violations == 0 && filled == 100 && worst_image <= 1e-4 && worst_bump_frac <= 1e-3,
        format!(
            "maximum principle on {filled} masks: {violations} violations; ramp recovery {worst_image:.2e} (image), \
             {worst_bump_frac:.2e}·range (bump)"
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn fitting_recovery() -> Outcome {
    let m = model();
    let albedo = reference_albedo(&m);
    let cfg = SceneConfig::default();
    let fit_cfg = FitConfig::default();
    let start = Instant::now();
    let mut worst_rmse: f64 = 0.0;
    let mut worst_gamma: f64 = 0.0;
    let mut monotone = true;
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let scene = match generate_scene(&m, seed, Difficulty::None, &cfg) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("scene {seed}: {e}"));
                continue;
            }
        };
        let (w, h) = (scene.width(), scene.height());
        let mut r = rng(9000 + seed);
        let mut noise = |sigma: f64| sigma * r.sample::<f64, _>(StandardNormal);
        let mut rotation = scene.pose.rotation;
        for k in 0..3 {
            rotation[k] += noise(5f64.to_radians());
        }
        let alpha = scene.coeffs.alpha.map(|a| a + noise(0.2));
        let beta = scene.coeffs.beta.map(|b| b + noise(0.2));
        let init = ReconstructionState {
            coeffs: CoefficientVector::new(alpha, beta),
            pose: CameraPose::new(rotation, scene.pose.translation, scene.pose.scale),
            gamma: ShCoefficients::ambient(1.0),
            costs: Costs::default(),
            trace: Vec::new(),
            converged: false,
        };
        let state = match fit_landmarks(&m, &scene.landmarks, w, h, &fit_cfg, Some(&init)) {
            Ok(s) => s,
            Err(e) => {
                failures.push(format!("fit {seed}: {e}"));
                continue;
            }
        };
        worst_rmse = worst_rmse.max(state.landmarks(&m, w, h).rmse(&scene.landmarks));
        monotone &= state.accepted_costs_monotone();
        match fit_photometric(&m, &albedo, &scene.clean, &scene.landmarks, &fit_cfg, &state) {
            Ok(s) => monotone &= s.accepted_costs_monotone(),
            Err(e) => failures.push(format!("photometric {seed}: {e}")),
        }

        // Lighting at the true geometry from the unquantized render.
        let mesh = m
            .evaluate_geometry(&scene.coeffs)
            .expect("coefficient lengths match")
            .with_albedo(albedo.clone());
        let raster = rasterize(&mesh, &scene.pose, &scene.gamma, w, h).expect("renders");
        match solve_gamma(&raster, &scene.clean.luminance()) {
            Ok(g) => {
                for (a, b) in g.0.iter().zip(&scene.gamma.0) {
                    worst_gamma = worst_gamma.max((a - b).abs());
                }
            }
            Err(e) => failures.push(format!("gamma {seed}: {e}")),
        }
    }
    let elapsed = start.elapsed();
    (
        failures.is_empty()
            && worst_rmse < 0.5
            && worst_gamma <= 1e-6
            && monotone
            && elapsed < Duration::from_secs(300),
        format!(
            "20 scenes: worst landmark RMSE {worst_rmse:.4} px, worst γ error {worst_gamma:.2e}, monotone traces: \
             {monotone}, runtime {elapsed:.2?}{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failures: {}", failures.join("; "))
            }
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn occlusion_robustness(work: &Path) -> Outcome {
    let m = model();
    let root = work.join("occluded");
    std::fs::create_dir_all(&root).expect("create scene root");
    m.save(root.join(occface::pipeline::MODEL_FILE)).expect("write model");
    let cfg = SceneConfig::default();
    // Even seeds get the small occluder, odd seeds the large one.
    let mut scenes = BTreeMap::new();
    for seed in 0..20u64 {
        let difficulty = if seed % 2 == 0 {
            Difficulty::Small
        } else {
            Difficulty::Large
        };
        let scene = generate_scene(&m, seed, difficulty, &cfg).expect("scene");
        write_scene(&scene, &root).expect("write scene");
        scenes.insert(format!("scene_{seed}"), scene);
    }
    let mut kv = KeyValues::new();
    let out = work.join("occluded_runs");
    kv.set("output", out.display().to_string());
    let rows = match run_suite(&root, &kv) {
        Ok(rows) => rows,
        Err(e) => return (false, format!("suite failed: {e}")),
    };
    let mut failed = Vec::new();
    let mut over = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_scene = String::new();
    let mut min_iou: f64 = 1.0;
    for row in &rows {
        let Some(metrics) = &row.metrics else {
            failed.push(format!("{}: {}", row.scene, row.error.as_deref().unwrap_or("?")));
            continue;
        };
        let s2: &Stage2Metrics = &metrics.stage2;
        let ratio = match (s2.detailed_depth_rmse_inside_mm, s2.detailed_depth_rmse_outside_mm) {
            (Some(i), Some(o)) if o > 0.0 => i / o,
            _ => f64::INFINITY,
        };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_scene = row.scene.clone();
        }
        if ratio > 3.0 {
            over.push(format!("{} {ratio:.2}", row.scene));
        }
        let mask = OcclusionMask::load(out.join(&row.scene).join(outputs::MASK)).expect("mask written");
        min_iou = min_iou.min(mask.iou(&scenes[&row.scene].occluder));
    }
    (
        rows.len() == 20 && failed.is_empty() && over.is_empty() && min_iou == 1.0,
        format!(
            "{} scenes, {} failed; worst inside/outside detailed-depth RMSE ratio {worst_ratio:.2} ({worst_scene}), \
             {} above 3{}; minimum mask IoU {min_iou}",
            rows.len(),
            failed.len(),
            over.len(),
            if over.is_empty() {
                String::new()
            } else {
                format!(" [{}]", over.join(", "))
            }
        ),
    )
}

// 11 ------------------------------------------------------------------------

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn determinism(work: &Path) -> Outcome {
    let root = work.join("determinism");
    let bin = env!("CARGO_BIN_EXE_occface");
    let synth = Command::new(bin)
        .args(["synth", "--seed", "3", "--count", "1", "--difficulty", "large", "--out"])
        .arg(&root)
        .output()
        .expect("run synth");
    if !synth.status.success() {
        return (
            false,
            format!("synth failed: {}", String::from_utf8_lossy(&synth.stderr)),
        );
    }
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = work.join(format!("determinism_{name}"));
        let run = Command::new(bin)
            .args(["run", "--scene"])
            .arg(root.join("scene_3"))
            .arg("--output")
            .arg(&out)
            .args(["--seed", "42"])
            .output()
            .expect("run pipeline");
        if !run.status.success() {
            return (false, format!("run failed: {}", String::from_utf8_lossy(&run.stderr)));
        }
        trees.push(tree(&out));
    }
    let identical = trees[0] == trees[1];
    (
        identical && !trees[0].is_empty(),
        format!(
            "two `run` invocations: {} files each, bit-identical: {identical}",
            trees[0].len()
        ),
    )
}

fn main() {
    // Respect the libtest filter convention loosely: `--list` prints nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("morphable-model oracle", Box::new(model_oracle)),
        ("rotation and projection", Box::new(rotation_projection)),
        ("spherical harmonics", Box::new(sh_correctness)),
        ("rasterizer oracle", Box::new(raster_oracle)),
        ("loss gradients", Box::new(gradient_checks)),
        ("synthesis loss weights", Box::new(synthesis_weights)),
        ("bump codec", Box::new(codec_roundtrip)),
        ("harmonic fill", Box::new(harmonic_properties)),
        ("fitting recovery", Box::new(fitting_recovery)),
        ("occlusion robustness", {
            let w = work.path().to_path_buf();
            Box::new(move || occlusion_robustness(&w))
        }),
        ("determinism", {
            let w = work.path().to_path_buf();
            Box::new(move || determinism(&w))
        }),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(_) => (false, "panicked".to_string()),
        };
        failures += usize::from(!ok);
        println!(
            "{} criterion {:>2} {name}: {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
