//! Discrete Laplace fill over a masked region with Dirichlet data taken from
//! the unmasked 4-neighbors.
//!
//! Masked pixels on the image border simply have fewer neighbors (zero-flux
//! boundary). Sweeps are plain lexicographic Gauss-Seidel: every update is a
//! convex combination of neighbor values, so the iterate never leaves the
//! range of the boundary data.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HarmonicError {
    #[error("grid is {0} samples but mask is {1}")]
    SizeMismatch(usize, usize),
    #[error("masked region containing pixel {0} has no unmasked neighbor to take boundary values from")]
    NoBoundary(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicConfig {
    /// Stop once the largest per-sweep update falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicReport {
    pub sweeps: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Precomputed stencil for one mask, reusable across channels.
#[derive(Debug, Clone)]
pub struct HarmonicStencil {
    width: usize,
    height: usize,
    /// Masked pixel indices in raster order.
    unknowns: Vec<usize>,
    /// Neighbor pixel indices of each unknown.
    neighbors: Vec<[usize; 4]>,
    degree: Vec<u8>,
    /// Component id of each unknown.
    component: Vec<usize>,
    component_count: usize,
}

impl HarmonicStencil {
    pub fn new(width: usize, height: usize, mask: &[bool]) -> Result<Self, HarmonicError> {
        if mask.len() != width * height {
            return Err(HarmonicError::SizeMismatch(width * height, mask.len()));
        }
        let neighbor_list = |i: usize| {
            let (x, y) = (i % width, i / width);
            let mut out = [usize::MAX; 4];
            let mut n = 0;
            if x > 0 {
                out[n] = i - 1;
                n += 1;
            }
            if x + 1 < width {
                out[n] = i + 1;
                n += 1;
            }
            if y > 0 {
                out[n] = i - width;
                n += 1;
            }
            if y + 1 < height {
                out[n] = i + width;
                n += 1;
            }
            (out, n as u8)
        };

        let unknowns: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let mut neighbors = Vec::with_capacity(unknowns.len());
        let mut degree = Vec::with_capacity(unknowns.len());
        for &i in &unknowns {
            let (nb, n) = neighbor_list(i);
            neighbors.push(nb);
            degree.push(n);
        }

        // Label 4-connected components and check each touches boundary data.
        let mut label = vec![usize::MAX; mask.len()];
        let mut component_count = 0;
        let mut queue = VecDeque::new();
        for &seed in &unknowns {
            if label[seed] != usize::MAX {
                continue;
            }
            let id = component_count;
            component_count += 1;
            label[seed] = id;
            queue.push_back(seed);
            let mut has_boundary = false;
            while let Some(i) = queue.pop_front() {
                let (nb, n) = neighbor_list(i);
                for &j in &nb[..n as usize] {
                    if !mask[j] {
                        has_boundary = true;
                    } else if label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
            if !has_boundary {
                return Err(HarmonicError::NoBoundary(seed));
            }
        }
        let component = unknowns.iter().map(|&i| label[i]).collect();

        Ok(Self {
            width,
            height,
            unknowns,
            neighbors,
            degree,
            component,
            component_count,
        })
    }

    pub fn unknown_count(&self) -> usize {
        self.unknowns.len()
    }

    /// Fills the masked entries of `values` in place.
    pub fn solve(&self, values: &mut [f64], config: &HarmonicConfig) -> Result<HarmonicReport, HarmonicError> {
        if values.len() != self.width * self.height {
            return Err(HarmonicError::SizeMismatch(self.width * self.height, values.len()));
        }
        if self.unknowns.is_empty() {
            return Ok(HarmonicReport {
                sweeps: 0,
                residual: 0.0,
                converged: true,
            });
        }

        let is_unknown = {
            let mut flags = vec![false; values.len()];
            for &i in &self.unknowns {
                flags[i] = true;
            }
            flags
        };

        // Start each component at the mean of its boundary values.
        let mut sum = vec![0.0; self.component_count];
        let mut count = vec![0usize; self.component_count];
        for (k, nb) in self.neighbors.iter().enumerate() {
            for &j in &nb[..self.degree[k] as usize] {
                if !is_unknown[j] {
                    sum[self.component[k]] += values[j];
                    count[self.component[k]] += 1;
                }
            }
        }
        for (k, &i) in self.unknowns.iter().enumerate() {
            let c = self.component[k];
            values[i] = sum[c] / count[c] as f64;
        }

        let mut residual = f64::INFINITY;
        let mut sweeps = 0;
        while sweeps < config.max_sweeps {
            sweeps += 1;
            residual = 0.0;
            for (k, &i) in self.unknowns.iter().enumerate() {
                let deg = self.degree[k] as usize;
                let s: f64 = self.neighbors[k][..deg].iter().map(|&j| values[j]).sum();
                let next = s / deg as f64;
                residual = f64::max(residual, (next - values[i]).abs());
                values[i] = next;
            }
            if residual < config.tolerance {
                break;
            }
        }
        Ok(HarmonicReport {
            sweeps,
            residual,
            converged: residual < config.tolerance,
        })
    }
}

/// One-shot fill of a single plane.
pub fn harmonic_fill(
    values: &mut [f64],
    width: usize,
    height: usize,
    mask: &[bool],
    config: &HarmonicConfig,
) -> Result<HarmonicReport, HarmonicError> {
    HarmonicStencil::new(width, height, mask)?.solve(values, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_is_identity() {
        let mut v: Vec<f64> = (0..12).map(f64::from).collect();
        let before = v.clone();
        harmonic_fill(&mut v, 4, 3, &[false; 12], &HarmonicConfig::default()).unwrap();
        assert_eq!(v, before);
    }

    #[test]
    fn constant_boundary_gives_constant_fill() {
        let (w, h) = (12, 10);
        let mut v = vec![0.37; w * h];
        let mut mask = vec![false; w * h];
        for y in 3..7 {
            for x in 2..9 {
                mask[y * w + x] = true;
                v[y * w + x] = 0.9;
            }
        }
        harmonic_fill(&mut v, w, h, &mask, &HarmonicConfig::default()).unwrap();
        assert!(v.iter().all(|&x| (x - 0.37).abs() < 1e-12));
    }

    #[test]
    fn full_mask_has_no_boundary() {
        let mut v = vec![0.0; 9];
        assert!(matches!(
            harmonic_fill(&mut v, 3, 3, &[true; 9], &HarmonicConfig::default()),
            Err(HarmonicError::NoBoundary(0))
        ));
    }

    #[test]
    fn strip_across_linear_ramp_is_recovered() {
        let (w, h) = (40, 24);
        let truth: Vec<f64> = (0..w * h).map(|i| (i % w) as f64 / (w - 1) as f64).collect();
        let mask: Vec<bool> = (0..w * h).map(|i| (14..26).contains(&(i % w))).collect();
        let mut v: Vec<f64> = truth
            .iter()
            .zip(&mask)
            .map(|(&t, &m)| if m { 0.0 } else { t })
            .collect();
        let report = harmonic_fill(&mut v, w, h, &mask, &HarmonicConfig::default()).unwrap();
        assert!(report.converged);
        let err = v.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "max error {err}");
    }
}
