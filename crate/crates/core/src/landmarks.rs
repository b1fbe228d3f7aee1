//! 2D landmark sets and their text file format (one `x y` pair per line).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Point2;
use thiserror::Error;

use crate::model::LANDMARK_COUNT;

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("failed to access landmark file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected two numbers, found `{text}`")]
    Parse { line: usize, text: String },
    #[error("expected {expected} landmarks, found {found}")]
    Count { expected: usize, found: usize },
    #[error("landmark {0} is not finite")]
    NonFinite(usize),
}

/// Pixel-space landmarks, `L ∈ R^{2×68}` stored as points.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks(Vec<Point2<f64>>);

impl Landmarks {
    pub fn new(points: Vec<Point2<f64>>) -> Self {
        Self(points)
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Coordinates flattened as `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self(flat.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p.x.is_finite() && p.y.is_finite())
    }

    /// Root mean square point distance.
    pub fn rmse(&self, other: &Landmarks) -> f64 {
        assert_eq!(self.len(), other.len());
        let sum: f64 = self.0.iter().zip(&other.0).map(|(a, b)| (a - b).norm_squared()).sum();
        (sum / self.len() as f64).sqrt()
    }

    pub fn parse(text: &str) -> Result<Self, LandmarkError> {
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace().map(str::parse::<f64>);
            let (Some(Ok(x)), Some(Ok(y)), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(LandmarkError::Parse {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            if !(x.is_finite() && y.is_finite()) {
                return Err(LandmarkError::NonFinite(points.len()));
            }
            points.push(Point2::new(x, y));
        }
        if points.len() != LANDMARK_COUNT {
            return Err(LandmarkError::Count {
                expected: LANDMARK_COUNT,
                found: points.len(),
            });
        }
        Ok(Self(points))
    }

    /// Text form; uses shortest round-trip float formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.0 {
            let _ = writeln!(out, "{:?} {:?}", p.x, p.y);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LandmarkError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LandmarkError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}
