//! Forward samplers: bilinear, multi-scale and linearized multi-sampling.

mod linearized;
mod solve;

pub use linearized::{
    collapse_perturb, fit_linearization, generate_aux_offsets, sample_linearized, AuxOffsets,
    LinearizedSampler,
};
pub use solve::NormalEquations;

use serde::{Deserialize, Serialize};

use crate::autograd::{self, LossGrad};
use crate::error::{Error, Result};
use crate::raster::{gaussian_blur, pixel_center, Image, NormCoord};
use crate::transform::{AffineParams, NUM_PARAMS};

/// Images carry one or three channels.
pub const MAX_CHANNELS: usize = 3;

/// Blur levels of the multi-scale baseline, in source pixels.
pub const DEFAULT_MULTISCALE_STDS: [f64; 3] = [1.0, 5.0, 10.0];

/// Standard deviation of the auxiliary-sample offsets (normalized output units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaPolicy {
    Explicit { sigma_u: f64, sigma_v: f64 },
    /// `multiplier` output pixels on each axis: `σ_u = multiplier · 2 / out_w`.
    OutputPixel { multiplier: f64 },
}

impl SigmaPolicy {
    pub fn resolve(&self, out_h: usize, out_w: usize) -> (f64, f64) {
        match *self {
            SigmaPolicy::Explicit { sigma_u, sigma_v } => (sigma_u, sigma_v),
            SigmaPolicy::OutputPixel { multiplier } => {
                (multiplier * 2.0 / out_w as f64, multiplier * 2.0 / out_h as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearizationConfig {
    /// Total samples per pixel, center included.
    pub k: usize,
    pub sigma: SigmaPolicy,
    /// Tikhonov weight.
    pub epsilon: f64,
    pub collapse_prevention: bool,
    /// Add the fitted bias to the center intensity in the forward output.
    /// Off by default: the bias is a noisy local average whose loss against a
    /// sharp target is not minimized at the true warp.
    pub include_bias: bool,
    pub seed: u64,
}

impl Default for LinearizationConfig {
    fn default() -> Self {
        Self {
            k: 8,
            sigma: SigmaPolicy::OutputPixel { multiplier: 1.0 },
            epsilon: 1e-6,
            collapse_prevention: true,
            include_bias: false,
            seed: 0,
        }
    }
}

impl LinearizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParams(format!("k must be >= 2, got {}", self.k)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParams(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        let sigma_ok = match self.sigma {
            SigmaPolicy::Explicit { sigma_u, sigma_v } => {
                sigma_u >= 0.0 && sigma_v >= 0.0 && sigma_u.is_finite() && sigma_v.is_finite()
            }
            SigmaPolicy::OutputPixel { multiplier } => multiplier >= 0.0 && multiplier.is_finite(),
        };
        if !sigma_ok {
            return Err(Error::InvalidParams(format!("invalid sigma policy {:?}", self.sigma)));
        }
        Ok(())
    }

    pub fn aux_count(&self) -> usize {
        self.k - 1
    }
}

/// Local linear model of one output pixel.
///
/// `a[row][channel]` with rows `∂/∂u`, `∂/∂v` and bias, all in normalized
/// source coordinates. Channels beyond `channels` are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLinearization {
    pub a: [[f64; MAX_CHANNELS]; 3],
    pub center_intensity: [f64; MAX_CHANNELS],
    pub center_coord_transformed: NormCoord,
    pub channels: usize,
    pub valid: bool,
}

impl PixelLinearization {
    pub fn invalid(channels: usize, center: NormCoord) -> Self {
        Self {
            a: [[0.0; MAX_CHANNELS]; 3],
            center_intensity: [0.0; MAX_CHANNELS],
            center_coord_transformed: center,
            channels,
            valid: false,
        }
    }

    /// `(∂I/∂u, ∂I/∂v)` for one channel.
    pub fn spatial_gradient(&self, channel: usize) -> (f64, f64) {
        (self.a[0][channel], self.a[1][channel])
    }

    pub fn bias(&self, channel: usize) -> f64 {
        self.a[2][channel]
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().flatten().all(|&v| v == 0.0)
    }
}

/// A warped image plus, for the linearized sampler, one linearization per
/// output pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledOutput {
    pub image: Image,
    pub linearizations: Vec<PixelLinearization>,
}

/// `image[i] = bilinear(src, T(center_i))`; out-of-bounds pixels are zero.
pub fn sample_bilinear(src: &Image, params: &AffineParams, out_h: usize, out_w: usize) -> SampledOutput {
    assert!(out_h >= 1 && out_w >= 1, "output shape must be positive");
    let m = params.matrix();
    let mut image = Image::zeros(out_h, out_w, src.channels());
    for r in 0..out_h {
        for c in 0..out_w {
            let q = m.apply(pixel_center(r, c, out_h, out_w));
            src.bilinear_into(q, image.pixel_mut(r, c));
        }
    }
    SampledOutput { image, linearizations: Vec::new() }
}

/// Gaussian pyramid of the source, sampled bilinearly and averaged uniformly.
#[derive(Debug, Clone)]
pub struct MultiscalePyramid {
    levels: Vec<Image>,
}

impl MultiscalePyramid {
    pub fn new(src: &Image, stds: &[f64]) -> Result<Self> {
        if stds.is_empty() {
            return Err(Error::InvalidParams("multi-scale sampler needs at least one level".into()));
        }
        if let Some(s) = stds.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidParams(format!("invalid blur std {s}")));
        }
        Ok(Self { levels: stds.iter().map(|&s| gaussian_blur(src, s)).collect() })
    }

    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn sample(&self, params: &AffineParams, out_h: usize, out_w: usize) -> SampledOutput {
        // running mean, so identical levels reproduce a single level bit for bit
        let mut acc = sample_bilinear(&self.levels[0], params, out_h, out_w).image.into_data();
        for (i, level) in self.levels.iter().enumerate().skip(1) {
            let s = sample_bilinear(level, params, out_h, out_w).image;
            let n = (i + 1) as f64;
            acc.iter_mut().zip(s.data()).for_each(|(a, b)| *a += (b - *a) / n);
        }
        let image = Image::new(out_h, out_w, self.levels[0].channels(), acc).expect("shape is consistent");
        SampledOutput { image, linearizations: Vec::new() }
    }
}

pub fn sample_multiscale(
    src: &Image,
    params: &AffineParams,
    out_h: usize,
    out_w: usize,
    stds: &[f64],
) -> Result<SampledOutput> {
    Ok(MultiscalePyramid::new(src, stds)?.sample(params, out_h, out_w))
}

/// Which sampler to use, with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    Bilinear,
    Multiscale { stds: Vec<f64> },
    Linearized(LinearizationConfig),
}

impl SamplerKind {
    pub fn multiscale_default() -> Self {
        SamplerKind::Multiscale { stds: DEFAULT_MULTISCALE_STDS.to_vec() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Bilinear => "bilinear",
            SamplerKind::Multiscale { .. } => "multiscale",
            SamplerKind::Linearized(_) => "linearized",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SamplerKind::Bilinear => Ok(()),
            SamplerKind::Multiscale { stds } => {
                if stds.is_empty() || stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                    Err(Error::InvalidParams(format!("invalid multi-scale stds {stds:?}")))
                } else {
                    Ok(())
                }
            }
            SamplerKind::Linearized(cfg) => cfg.validate(),
        }
    }
}

enum Prepared {
    Bilinear,
    Multiscale(MultiscalePyramid),
    Linearized(LinearizedSampler),
}

/// A sampler bound to one source image and output shape, with any
/// parameter-independent work (blur pyramid, auxiliary offsets) done once.
pub struct PreparedSampler<'a> {
    src: &'a Image,
    out_h: usize,
    out_w: usize,
    inner: Prepared,
}

impl<'a> PreparedSampler<'a> {
    pub fn new(src: &'a Image, kind: &SamplerKind, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::DegenerateOutput { height: out_h, width: out_w });
        }
        kind.validate()?;
        let inner = match kind {
            SamplerKind::Bilinear => Prepared::Bilinear,
            SamplerKind::Multiscale { stds } => Prepared::Multiscale(MultiscalePyramid::new(src, stds)?),
            SamplerKind::Linearized(cfg) => Prepared::Linearized(LinearizedSampler::new(*cfg, out_h, out_w)?),
        };
        Ok(Self { src, out_h, out_w, inner })
    }

    pub fn out_shape(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn forward(&self, params: &AffineParams) -> SampledOutput {
        match &self.inner {
            Prepared::Bilinear => sample_bilinear(self.src, params, self.out_h, self.out_w),
            Prepared::Multiscale(p) => p.sample(params, self.out_h, self.out_w),
            Prepared::Linearized(s) => s.sample(self.src, params),
        }
    }

    /// Gradient of the loss with respect to the five parameters, using the
    /// sampler's own differentiable model.
    pub fn backward(&self, output: &SampledOutput, grad: &LossGrad, params: &AffineParams) -> Result<[f64; NUM_PARAMS]> {
        match &self.inner {
            Prepared::Bilinear => autograd::backprop_bilinear(self.src, grad, params, self.out_h, self.out_w),
            Prepared::Multiscale(p) => autograd::backprop_multiscale(p, grad, params, self.out_h, self.out_w),
            Prepared::Linearized(_) => {
                autograd::backprop_theta(grad, &output.linearizations, params, self.out_h, self.out_w)
            }
        }
    }
}
