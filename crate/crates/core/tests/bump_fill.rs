use proptest::prelude::*;

use occface::bump::{apply_bump, compute_bump, extrapolate_bump, BumpCodec, BumpMap};
use occface::harmonic::{harmonic_fill, HarmonicConfig};
use occface::occlusion::OcclusionMask;
use occface::raster::DepthMap;

const W: usize = 12;
const H: usize = 10;

fn rect_mask(x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<bool> {
    (0..W * H)
        .map(|i| {
            let (x, y) = (i % W, i / W);
            (x0..x1).contains(&x) && (y0..y1).contains(&y)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_decodes_what_it_encodes(delta in 0.01f64..10.0, t in -1.0f64..=1.0) {
        let codec = BumpCodec::eight_bit(delta).unwrap();
        let d = t * delta;
        prop_assert!((codec.decode(codec.encode(d)).unwrap() - d).abs() <= 1e-12 * delta.max(1.0));
        let q = codec.decode(codec.quantize(codec.encode(d))).unwrap();
        prop_assert!((q - d).abs() <= delta / 255.0 + 1e-12);
    }

    #[test]
    fn bump_applied_to_base_recovers_detail(
        base in prop::collection::vec(400.0f64..600.0, W * H),
        offset in prop::collection::vec(-0.9f64..0.9, W * H),
    ) {
        let base = DepthMap::from_depths(W, H, base);
        let detailed = DepthMap::from_depths(
            W, H, base.depth.iter().zip(&offset).map(|(b, o)| b + o).collect());
        let codec = BumpCodec::eight_bit(1.0).unwrap();
        let bump = compute_bump(&codec, &detailed, &base).unwrap();
        let back = apply_bump(&bump, &base).unwrap();
        for (a, b) in back.depth.iter().zip(&detailed.depth) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fill_stays_within_boundary_range(
        values in prop::collection::vec(-5.0f64..5.0, W * H),
        x0 in 1usize..5, y0 in 1usize..4, dx in 1usize..6, dy in 1usize..5,
    ) {
        let mask = rect_mask(x0, y0, x0 + dx, y0 + dy);
        let mut v = values.clone();
        harmonic_fill(&mut v, W, H, &mask, &HarmonicConfig::default()).unwrap();
        let known: Vec<f64> = (0..W * H).filter(|&i| !mask[i]).map(|i| values[i]).collect();
        let lo = known.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = known.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..W * H {
            if mask[i] {
                prop_assert!(v[i] >= lo && v[i] <= hi);
            } else {
                prop_assert_eq!(v[i], values[i]);
            }
        }
    }
}

#[test]
fn constant_bump_extrapolates_to_the_same_constant() {
    let codec = BumpCodec::eight_bit(2.0).unwrap();
    let bump = BumpMap::new(W, H, vec![171.0; W * H], vec![true; W * H], codec).unwrap();
    let mask = OcclusionMask::new(W, H, rect_mask(3, 2, 9, 8)).unwrap();
    let filled = extrapolate_bump(&bump, &mask, &HarmonicConfig::default()).unwrap();
    assert!(filled.values().iter().all(|&v| (v - 171.0).abs() < 1e-9));
}

#[test]
fn fully_masked_bump_has_no_support() {
    let codec = BumpCodec::eight_bit(2.0).unwrap();
    let bump = BumpMap::flat(W, H, vec![true; W * H], codec).unwrap();
    let mask = OcclusionMask::full(W, H);
    assert!(extrapolate_bump(&bump, &mask, &HarmonicConfig::default()).is_err());
}

#[test]
fn invalid_pixels_hold_zero_code_after_pgm_roundtrip() {
    let codec = BumpCodec::eight_bit(1.5).unwrap();
    let valid: Vec<bool> = (0..W * H).map(|i| i % 3 != 0).collect();
    let values: Vec<f64> = (0..W * H).map(|i| (i * 7 % 256) as f64).collect();
    let bump = BumpMap::new(W, H, values, valid.clone(), codec).unwrap().quantized();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.pgm");
    bump.save_pgm(&path).unwrap();
    let back = BumpMap::load_pgm(&path, valid.clone()).unwrap();
    assert_eq!(back.codec, bump.codec);
    assert_eq!(back.values(), bump.values());
    for (v, ok) in back.values().iter().zip(&valid) {
        if !ok {
            assert_eq!(*v, codec.zero());
        }
    }
}
