//! Order-2 real spherical-harmonics irradiance with a single gray channel.

use nalgebra::Vector3;
use thiserror::Error;

pub const SH_COUNT: usize = 9;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_0: f64 = 1.092_548_430_592_079_2;
const C2_1: f64 = 0.315_391_565_252_520_05;
const C2_2: f64 = 0.546_274_215_296_039_6;

/// Tolerance on `|‖n‖ − 1|` accepted by the shading functions.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum IlluminationError {
    #[error("normal has norm {0}, expected unit length")]
    NonUnitNormal(f64),
}

/// Lighting coefficients γ ∈ R⁹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShCoefficients(pub [f64; SH_COUNT]);

impl ShCoefficients {
    /// Uniform lighting that shades every normal to `level` before albedo.
    pub fn ambient(level: f64) -> Self {
        let mut g = [0.0; SH_COUNT];
        g[0] = level / C0;
        Self(g)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn irradiance(&self, basis: &[f64; SH_COUNT]) -> f64 {
        self.0.iter().zip(basis).map(|(g, y)| g * y).sum()
    }
}

/// Basis values in the order Y₀₀, Y₁₋₁, Y₁₀, Y₁₁, Y₂₋₂, Y₂₋₁, Y₂₀, Y₂₁, Y₂₂.
pub fn sh_basis(normal: &Vector3<f64>) -> Result<[f64; SH_COUNT], IlluminationError> {
    let norm = normal.norm();
    if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(IlluminationError::NonUnitNormal(norm));
    }
    Ok(sh_basis_unchecked(normal))
}

pub(crate) fn sh_basis_unchecked(n: &Vector3<f64>) -> [f64; SH_COUNT] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_0 * x * y,
        C2_0 * y * z,
        C2_1 * (3.0 * z * z - 1.0),
        C2_0 * x * z,
        C2_2 * (x * x - y * y),
    ]
}

/// `albedo · (γ · Y(n))`, clamped below at zero.
pub fn shade(albedo: f64, normal: &Vector3<f64>, gamma: &ShCoefficients) -> Result<f64, IlluminationError> {
    let basis = sh_basis(normal)?;
    Ok((albedo * gamma.irradiance(&basis)).max(0.0))
}
