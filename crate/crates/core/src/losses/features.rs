//! Fixed random convolutional feature stack for the style loss.
//!
//! Layer `n` is `relu(conv3x3(x_n))` where `x_0` is the input image and
//! `x_{n+1}` is the 2× average-pooled output of layer `n`. Kernels are drawn
//! once from a seeded generator (He-normal scale) and never change.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LossError;

/// Channel widths of the default stack.
pub const DEFAULT_WIDTHS: [usize; 3] = [8, 16, 32];
pub const DEFAULT_SEED: u64 = 42;

/// `channels` maps of `height × width`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f64>,
}

impl ConvLayer {
    fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx]
    }

    fn forward(&self, input: &FeatureMap) -> FeatureMap {
        let (h, w) = (input.height, input.width);
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let dst = out.plane_mut(o);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight(o, i, ky, kx);
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let row = &src[sy as usize * w..(sy as usize + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let (x0, x1) = match kx {
                                0 => (1, w),
                                1 => (0, w),
                                _ => (0, w.saturating_sub(1)),
                            };
                            for x in x0..x1 {
                                drow[x] += k * row[x + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to the layer input.
    fn backward(&self, grad_out: &FeatureMap) -> FeatureMap {
        let (h, w) = (grad_out.height, grad_out.width);
        let mut grad_in = FeatureMap::zeros(self.in_channels, h, w);
        for o in 0..self.out_channels {
            let g = grad_out.plane(o);
            for i in 0..self.in_channels {
                let dst = grad_in.plane_mut(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight(o, i, ky, kx);
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sy = sy as usize;
                            let (x0, x1) = match kx {
                                0 => (1, w),
                                1 => (0, w),
                                _ => (0, w.saturating_sub(1)),
                            };
                            for x in x0..x1 {
                                dst[sy * w + x + kx - 1] += k * g[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

fn relu(map: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: map.data.iter().map(|&v| v.max(0.0)).collect(),
        ..*map
    }
}

fn avg_pool(map: &FeatureMap) -> FeatureMap {
    let (h, w) = (map.height / 2, map.width / 2);
    let mut out = FeatureMap::zeros(map.channels, h, w);
    for c in 0..map.channels {
        let src = map.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let a = src[(2 * y) * map.width + 2 * x];
                let b = src[(2 * y) * map.width + 2 * x + 1];
                let cc = src[(2 * y + 1) * map.width + 2 * x];
                let d = src[(2 * y + 1) * map.width + 2 * x + 1];
                dst[y * w + x] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

fn avg_pool_backward(grad: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        let g = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.height {
            for x in 0..grad.width {
                let v = 0.25 * g[y * grad.width + x];
                dst[(2 * y) * width + 2 * x] += v;
                dst[(2 * y) * width + 2 * x + 1] += v;
                dst[(2 * y + 1) * width + 2 * x] += v;
                dst[(2 * y + 1) * width + 2 * x + 1] += v;
            }
        }
    }
    out
}

/// Deterministic stack of random 3×3 convolutions.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<ConvLayer>,
    seed: u64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each convolution.
    inputs: Vec<FeatureMap>,
    /// Pre-activation output of each convolution.
    pre: Vec<FeatureMap>,
    /// Post-ReLU features `φₙ`.
    pub features: Vec<FeatureMap>,
}

impl ForwardCache {
    /// Convolution outputs before the ReLU, one map per layer.
    pub fn pre_activations(&self) -> &[FeatureMap] {
        &self.pre
    }
}

impl FeatureExtractor {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Self {
        assert!(!widths.is_empty() && in_channels > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len());
        let mut cin = in_channels;
        for &cout in widths {
            let std = (2.0 / (9.0 * cin as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let weights = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
            layers.push(ConvLayer {
                in_channels: cin,
                out_channels: cout,
                weights,
            });
            cin = cout;
        }
        Self { layers, seed }
    }

    /// Widths 8, 16, 32 and seed 42.
    pub fn standard(in_channels: usize) -> Self {
        Self::new(in_channels, &DEFAULT_WIDTHS, DEFAULT_SEED)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    /// Smallest image side that keeps every layer non-empty.
    pub fn min_side(&self) -> usize {
        1 << (self.layers.len() - 1)
    }

    pub fn forward(&self, input: FeatureMap) -> Result<ForwardCache, LossError> {
        if input.channels != self.in_channels() {
            return Err(LossError::Channels {
                expected: self.in_channels(),
                found: input.channels,
            });
        }
        let min = self.min_side();
        if input.height < min || input.width < min {
            return Err(LossError::TooSmall {
                width: input.width,
                height: input.height,
                min,
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut features = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (n, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&x);
            let f = relu(&z);
            inputs.push(x);
            if n + 1 < self.layers.len() {
                x = avg_pool(&f);
            } else {
                x = FeatureMap::zeros(0, 0, 0);
            }
            pre.push(z);
            features.push(f);
        }
        Ok(ForwardCache { inputs, pre, features })
    }

    pub fn extract(&self, input: FeatureMap) -> Result<Vec<FeatureMap>, LossError> {
        Ok(self.forward(input)?.features)
    }

    /// Backpropagates per-layer feature gradients to the input.
    pub fn backward(&self, cache: &ForwardCache, feature_grads: &[FeatureMap]) -> FeatureMap {
        assert_eq!(feature_grads.len(), self.layers.len());
        let mut carry: Option<FeatureMap> = None;
        for n in (0..self.layers.len()).rev() {
            let mut g = feature_grads[n].clone();
            if let Some(up) = carry.take() {
                let pooled = avg_pool_backward(&up, g.height, g.width);
                for (a, b) in g.data.iter_mut().zip(&pooled.data) {
                    *a += b;
                }
            }
            for (gv, &z) in g.data.iter_mut().zip(&cache.pre[n].data) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let gin = self.layers[n].backward(&g);
            debug_assert_eq!(gin.height, cache.inputs[n].height);
            carry = Some(gin);
        }
        carry.expect("at least one layer")
    }
}
