//! Central finite-difference verification of loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub numeric: Vec<f64>,
    pub analytic: Option<Vec<f64>>,
    /// Largest componentwise `|analytic − numeric|`.
    pub max_abs_error: f64,
    /// `max_abs_error` divided by the larger infinity norm of the two gradients.
    pub max_relative_error: f64,
    pub worst_index: Option<usize>,
    /// Point actually evaluated (may differ from the request after kink avoidance).
    pub point: Vec<f64>,
    /// Coordinates whose difference stencil still crosses a kink at the
    /// evaluated point, when residuals were given.
    pub kinked_coordinates: Option<usize>,
    pub passed: bool,
}

/// Central-difference gradient, one coordinate at a time.
pub fn numeric_gradient(loss: &dyn Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = loss(&x);
            x[i] = orig - step;
            let minus = loss(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Vector-valued function of the parameters: a gradient or a residual set.
pub type VectorFn<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

/// Compares `analytic` (if given) with a central-difference gradient of
/// `loss` at `point`. Without an analytic gradient the report only carries
/// the numeric one and passes trivially.
pub fn finite_difference_check(
    loss: &dyn Fn(&[f64]) -> f64,
    analytic: Option<VectorFn<'_>>,
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> GradientReport {
    let numeric = numeric_gradient(loss, point, step);
    let Some(analytic) = analytic else {
        return GradientReport {
            numeric,
            analytic: None,
            max_abs_error: 0.0,
            max_relative_error: 0.0,
            worst_index: None,
            point: point.to_vec(),
            kinked_coordinates: None,
            passed: true,
        };
    };
    let grad = analytic(point);
    assert_eq!(grad.len(), numeric.len(), "gradient length mismatch");
    let mut max_abs_error = 0.0;
    let mut worst_index = None;
    for (i, (a, n)) in grad.iter().zip(&numeric).enumerate() {
        let e = (a - n).abs();
        if e > max_abs_error || !e.is_finite() {
            max_abs_error = e;
            worst_index = Some(i);
        }
    }
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf_norm(&grad).max(inf_norm(&numeric));
    let max_relative_error = if scale > 0.0 {
        max_abs_error / scale
    } else {
        max_abs_error
    };
    GradientReport {
        passed: max_relative_error <= tolerance,
        numeric,
        analytic: Some(grad),
        max_abs_error,
        max_relative_error,
        worst_index,
        point: point.to_vec(),
        kinked_coordinates: None,
    }
}

/// Coordinates `i` for which some residual changes sign across
/// `x − step·eᵢ`, `x`, `x + step·eᵢ`. Residuals that stay exactly zero do
/// not count.
fn kinked_coordinates(residuals: VectorFn<'_>, x: &[f64], step: f64) -> usize {
    let same_side = |a: f64, b: f64| (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0) || (a == 0.0 && b == 0.0);
    let r0 = residuals(x);
    let mut probe = x.to_vec();
    let mut count = 0;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = residuals(&probe);
        probe[i] = orig - step;
        let minus = residuals(&probe);
        probe[i] = orig;
        let crossed = r0
            .iter()
            .zip(plus.iter().zip(&minus))
            .any(|(&c, (&p, &m))| !(same_side(c, p) && same_side(c, m)));
        count += usize::from(crossed);
    }
    count
}

/// [`finite_difference_check`] for losses with kinks (absolute values,
/// ReLUs).
///
/// `residuals` lists the quantities whose sign changes are the kinks. The
/// point is jittered (seeded, by up to 100 steps per coordinate) until no
/// central-difference stencil crosses a kink; after 100 attempts the last
/// point is checked anyway and the report records how many stencils
/// still cross one.
pub fn finite_difference_check_l1(
    loss: &dyn Fn(&[f64]) -> f64,
    analytic: VectorFn<'_>,
    residuals: VectorFn<'_>,
    point: &[f64],
    step: f64,
    tolerance: f64,
    seed: u64,
) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = point.to_vec();
    let mut kinked = kinked_coordinates(residuals, &x, step);
    let mut attempts = 0;
    while kinked > 0 && attempts < 100 {
        attempts += 1;
        x = point
            .iter()
            .map(|&v| v + rng.random_range(-100.0..100.0) * step)
            .collect();
        kinked = kinked_coordinates(residuals, &x, step);
    }
    let mut report = finite_difference_check(loss, Some(analytic), &x, step, tolerance);
    report.kinked_coordinates = Some(kinked);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let loss = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        let grad = |x: &[f64]| x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let report = finite_difference_check(&loss, Some(&grad), &[0.3, -1.2, 2.0], 1e-5, 1e-8);
        assert!(report.passed, "{report:?}");
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_fails() {
        let loss = |x: &[f64]| x[0] * x[0];
        let grad = |x: &[f64]| vec![x[0]];
        assert!(!finite_difference_check(&loss, Some(&grad), &[1.0], 1e-5, 1e-4).passed);
    }

    #[test]
    fn kinks_are_avoided() {
        let loss = |x: &[f64]| x.iter().map(|v| v.abs()).sum::<f64>();
        let grad = |x: &[f64]| x.iter().map(|v| v.signum()).collect();
        let res = |x: &[f64]| x.to_vec();
        let report = finite_difference_check_l1(&loss, &grad, &res, &[0.0, 1e-7, 0.5], 1e-5, 1e-4, 3);
        assert_eq!(report.kinked_coordinates, Some(0));
        assert!(report.passed, "{report:?}");
    }
}
