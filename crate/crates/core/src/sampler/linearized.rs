//! Linearized multi-sampling.
//!
//! For every output pixel, `K - 1` auxiliary points are drawn around the pixel
//! center in output space, warped into the source together with the center,
//! optionally jittered by one source pixel to keep them from collapsing onto a
//! single source pixel, and read with bilinear interpolation. A regularized
//! least-squares fit of intensity differences against coordinate differences
//! gives the pixel's local linear model; only the warped query coordinate is
//! differentiated, everything else is a constant.

use rand::Rng;

use super::solve::NormalEquations;
use super::{LinearizationConfig, PixelLinearization, SampledOutput, MAX_CHANNELS};
use crate::error::Result;
use crate::raster::{pixel_center, Image, NormCoord};
use crate::rng::{self, tag};
use crate::transform::AffineParams;

/// Auxiliary offsets for every output pixel, `K - 1` per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxOffsets {
    per_pixel: usize,
    sigma: (f64, f64),
    offsets: Vec<NormCoord>,
}

impl AuxOffsets {
    pub fn per_pixel(&self) -> usize {
        self.per_pixel
    }

    /// `(σ_u, σ_v)` the offsets were drawn with.
    pub fn sigma(&self) -> (f64, f64) {
        self.sigma
    }

    pub fn pixel(&self, index: usize) -> &[NormCoord] {
        &self.offsets[index * self.per_pixel..(index + 1) * self.per_pixel]
    }

    pub fn all(&self) -> &[NormCoord] {
        &self.offsets
    }
}

/// Draws `K - 1` Gaussian offsets per output pixel. The center sample has a
/// zero offset and is not drawn. Each pixel has its own substream keyed by
/// `(config.seed, pixel index)`.
pub fn generate_aux_offsets(config: &LinearizationConfig, out_h: usize, out_w: usize) -> AuxOffsets {
    let per_pixel = config.aux_count();
    let (su, sv) = config.sigma.resolve(out_h, out_w);
    let mut offsets = Vec::with_capacity(out_h * out_w * per_pixel);
    for idx in 0..out_h * out_w {
        let mut rng = rng::substream(config.seed, tag::AUX_OFFSETS, idx as u64);
        for _ in 0..per_pixel {
            let du = su * rng::normal(&mut rng);
            let dv = sv * rng::normal(&mut rng);
            offsets.push(NormCoord::new(du, dv));
        }
    }
    AuxOffsets { per_pixel, sigma: (su, sv), offsets }
}

/// Jitters warped auxiliary coordinates by one source pixel (`2 / src_w`,
/// `2 / src_h` in normalized units). Does nothing when `enabled` is false.
/// Only pass auxiliary coordinates; the center is never perturbed.
pub fn collapse_perturb(coords: &mut [NormCoord], src_h: usize, src_w: usize, enabled: bool, rng: &mut impl Rng) {
    if !enabled {
        return;
    }
    let (du, dv) = source_pixel_size(src_h, src_w);
    for c in coords {
        c.u += du * rng::normal(rng);
        c.v += dv * rng::normal(rng);
    }
}

fn source_pixel_size(src_h: usize, src_w: usize) -> (f64, f64) {
    (2.0 / src_w as f64, 2.0 / src_h as f64)
}

/// Regularized least-squares fit of one pixel's linear model.
///
/// `aux_intensities` holds `aux_coords.len()` rows of `center_intensity.len()`
/// channels. Rows flagged invalid are dropped (equivalently, zeroed in both
/// data matrices). An out-of-bounds center yields an invalid, all-zero result.
pub fn fit_linearization(
    center_intensity: &[f64],
    center_coord: NormCoord,
    aux_intensities: &[f64],
    aux_coords: &[NormCoord],
    aux_valid: &[bool],
    epsilon: f64,
) -> PixelLinearization {
    let channels = center_intensity.len();
    assert!((1..=MAX_CHANNELS).contains(&channels), "unsupported channel count {channels}");
    assert_eq!(aux_intensities.len(), aux_coords.len() * channels);
    assert_eq!(aux_valid.len(), aux_coords.len());
    if !center_coord.in_bounds() {
        return PixelLinearization::invalid(channels, center_coord);
    }
    let mut ne = NormalEquations::default();
    let mut dy = [0.0; MAX_CHANNELS];
    for (k, (&coord, &valid)) in aux_coords.iter().zip(aux_valid).enumerate() {
        if !valid {
            continue;
        }
        let row = &aux_intensities[k * channels..(k + 1) * channels];
        for ch in 0..channels {
            dy[ch] = row[ch] - center_intensity[ch];
        }
        ne.add(coord.u - center_coord.u, coord.v - center_coord.v, &dy[..channels]);
    }
    let mut center = [0.0; MAX_CHANNELS];
    center[..channels].copy_from_slice(center_intensity);
    PixelLinearization {
        a: ne.solve(epsilon, channels),
        center_intensity: center,
        center_coord_transformed: center_coord,
        channels,
        valid: true,
    }
}

/// Linearized sampler bound to an output shape; the auxiliary offsets and
/// collapse jitter are drawn once and reused for every parameter value.
#[derive(Debug, Clone)]
pub struct LinearizedSampler {
    config: LinearizationConfig,
    out_h: usize,
    out_w: usize,
    offsets: AuxOffsets,
    /// Standard-normal jitter per auxiliary sample, `(z_u, z_v)`; empty when
    /// collapse prevention is off.
    jitter: Vec<[f64; 2]>,
}

impl LinearizedSampler {
    pub fn new(config: LinearizationConfig, out_h: usize, out_w: usize) -> Result<Self> {
        config.validate()?;
        let offsets = generate_aux_offsets(&config, out_h, out_w);
        let per_pixel = config.aux_count();
        let mut jitter = Vec::new();
        if config.collapse_prevention {
            jitter.reserve(out_h * out_w * per_pixel);
            for idx in 0..out_h * out_w {
                // same draw order as `collapse_perturb`
                let mut rng = rng::substream(config.seed, tag::COLLAPSE, idx as u64);
                for _ in 0..per_pixel {
                    let zu = rng::normal(&mut rng);
                    let zv = rng::normal(&mut rng);
                    jitter.push([zu, zv]);
                }
            }
        }
        Ok(Self { config, out_h, out_w, offsets, jitter })
    }

    pub fn config(&self) -> &LinearizationConfig {
        &self.config
    }

    pub fn offsets(&self) -> &AuxOffsets {
        &self.offsets
    }

    /// Warped (and jittered) auxiliary coordinates of one output pixel.
    pub fn aux_coords(&self, src: &Image, params: &AffineParams, index: usize) -> Vec<NormCoord> {
        let m = params.matrix();
        let (r, c) = (index / self.out_w, index % self.out_w);
        let x = pixel_center(r, c, self.out_h, self.out_w);
        let (du, dv) = source_pixel_size(src.height(), src.width());
        let per = self.offsets.per_pixel();
        self.offsets
            .pixel(index)
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let mut t = m.apply(NormCoord::new(x.u + o.u, x.v + o.v));
                if let Some(z) = self.jitter.get(index * per + k) {
                    t.u += du * z[0];
                    t.v += dv * z[1];
                }
                t
            })
            .collect()
    }

    pub fn sample(&self, src: &Image, params: &AffineParams) -> SampledOutput {
        let (out_h, out_w) = (self.out_h, self.out_w);
        let channels = src.channels();
        let m = params.matrix();
        let (du, dv) = source_pixel_size(src.height(), src.width());
        let per = self.offsets.per_pixel();
        let eps = self.config.epsilon;

        let mut image = Image::zeros(out_h, out_w, channels);
        let mut lins = Vec::with_capacity(out_h * out_w);
        let mut center = [0.0; MAX_CHANNELS];
        let mut aux = [0.0; MAX_CHANNELS];
        let mut dy = [0.0; MAX_CHANNELS];

        for r in 0..out_h {
            for c in 0..out_w {
                let idx = r * out_w + c;
                let x = pixel_center(r, c, out_h, out_w);
                let tc = m.apply(x);
                // the center read is exactly the bilinear sampler's read
                if !src.bilinear_into(tc, &mut center[..channels]) {
                    lins.push(PixelLinearization::invalid(channels, tc));
                    continue;
                }
                let mut ne = NormalEquations::default();
                for (k, o) in self.offsets.pixel(idx).iter().enumerate() {
                    let mut t = m.apply(NormCoord::new(x.u + o.u, x.v + o.v));
                    if let Some(z) = self.jitter.get(idx * per + k) {
                        t.u += du * z[0];
                        t.v += dv * z[1];
                    }
                    if !src.bilinear_into(t, &mut aux[..channels]) {
                        continue;
                    }
                    for ch in 0..channels {
                        dy[ch] = aux[ch] - center[ch];
                    }
                    ne.add(t.u - tc.u, t.v - tc.v, &dy[..channels]);
                }
                let a = ne.solve(eps, channels);
                let px = image.pixel_mut(r, c);
                for ch in 0..channels {
                    px[ch] = if self.config.include_bias { center[ch] + a[2][ch] } else { center[ch] };
                }
                lins.push(PixelLinearization {
                    a,
                    center_intensity: center,
                    center_coord_transformed: tc,
                    channels,
                    valid: true,
                });
            }
        }
        SampledOutput { image, linearizations: lins }
    }
}

/// One-shot linearized sampling; see [`LinearizedSampler`].
pub fn sample_linearized(
    src: &Image,
    params: &AffineParams,
    out_h: usize,
    out_w: usize,
    config: &LinearizationConfig,
) -> Result<SampledOutput> {
    Ok(LinearizedSampler::new(*config, out_h, out_w)?.sample(src, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_bilinear, SigmaPolicy};

    fn plane(h: usize, w: usize, a: f64, b: f64, c: f64) -> Image {
        Image::from_fn(h, w, 1, |r, col, _| {
            let p = pixel_center(r, col, h, w);
            a * p.u + b * p.v + c
        })
    }

    fn textured(h: usize, w: usize, channels: usize) -> Image {
        Image::from_fn(h, w, channels, |r, c, ch| {
            let (x, y) = (c as f64, r as f64);
            (0.5 + 0.25 * (0.7 * x + 0.3 * y + ch as f64).sin() + 0.2 * (0.21 * y - 0.4 * x).cos()).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn all_aux_out_of_bounds_gives_zero_a() {
        let lin = fit_linearization(
            &[0.3],
            NormCoord::new(0.0, 0.0),
            &[0.1, 0.9, 0.4],
            &[NormCoord::new(2.0, 0.0), NormCoord::new(0.0, -3.0), NormCoord::new(5.0, 5.0)],
            &[false, false, false],
            1e-6,
        );
        assert!(lin.valid);
        assert!(lin.is_zero());
    }

    #[test]
    fn out_of_bounds_center_is_invalid() {
        let lin = fit_linearization(&[0.7], NormCoord::new(1.2, 0.0), &[0.5], &[NormCoord::new(0.9, 0.0)], &[true], 1e-6);
        assert!(!lin.valid);
        assert!(lin.is_zero());
        assert_eq!(lin.center_intensity, [0.0; MAX_CHANNELS]);
    }

    #[test]
    fn exact_plane_is_recovered() {
        let (a, b, c) = (0.3, 0.5, 0.1);
        let center = NormCoord::new(0.05, -0.1);
        let f = |p: NormCoord| a * p.u + b * p.v + c;
        let coords: Vec<NormCoord> = (0..7)
            .map(|k| {
                let t = k as f64 * 0.9;
                NormCoord::new(center.u + 0.2 * t.cos() * (1.0 + 0.1 * k as f64), center.v + 0.15 * t.sin())
            })
            .collect();
        let ints: Vec<f64> = coords.iter().map(|&p| f(p)).collect();
        let lin = fit_linearization(&[f(center)], center, &ints, &coords, &[true; 7], 1e-9);
        assert!((lin.a[0][0] - a).abs() < 1e-6);
        assert!((lin.a[1][0] - b).abs() < 1e-6);
        assert!(lin.a[2][0].abs() < 1e-6);
    }

    #[test]
    fn global_shift_leaves_spatial_rows_unchanged() {
        let center = NormCoord::new(0.1, 0.2);
        let coords = [NormCoord::new(0.15, 0.18), NormCoord::new(0.05, 0.3), NormCoord::new(0.2, 0.1), NormCoord::new(0.12, 0.25)];
        let ints = [0.4, 0.8, 0.1, 0.55];
        let base = fit_linearization(&[0.3], center, &ints, &coords, &[true; 4], 1e-6);
        let shifted_ints: Vec<f64> = ints.iter().map(|v| v + 0.125).collect();
        let shifted = fit_linearization(&[0.3 + 0.125], center, &shifted_ints, &coords, &[true; 4], 1e-6);
        for row in 0..2 {
            assert!((base.a[row][0] - shifted.a[row][0]).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_rows_never_produce_nan() {
        let center = NormCoord::new(0.0, 0.0);
        let coords = [NormCoord::new(1e-9, 0.0), NormCoord::new(0.0, 1e-9), NormCoord::new(1e-9, 1e-9)];
        for mask in 0..8u8 {
            let valid = [mask & 1 != 0, mask & 2 != 0, mask & 4 != 0];
            let lin = fit_linearization(&[0.5], center, &[0.6, 0.4, 0.5], &coords, &valid, 1e-6);
            assert!(lin.a.iter().flatten().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn offsets_are_deterministic() {
        let cfg = LinearizationConfig { seed: 99, ..Default::default() };
        assert_eq!(generate_aux_offsets(&cfg, 5, 6), generate_aux_offsets(&cfg, 5, 6));
        let other = LinearizationConfig { seed: 100, ..cfg };
        assert_ne!(generate_aux_offsets(&cfg, 5, 6), generate_aux_offsets(&other, 5, 6));
        assert_eq!(generate_aux_offsets(&cfg, 10, 20).sigma(), (0.1, 0.2));
    }

    #[test]
    fn collapse_perturb_disabled_is_noop() {
        let mut coords = vec![NormCoord::new(0.1, 0.2); 5];
        let before = coords.clone();
        collapse_perturb(&mut coords, 100, 100, false, &mut rng::seeded(1));
        assert_eq!(coords, before);
        collapse_perturb(&mut coords, 100, 100, true, &mut rng::seeded(1));
        assert_ne!(coords, before);
    }

    #[test]
    fn collapse_jitter_matches_collapse_perturb() {
        let cfg = LinearizationConfig { seed: 5, k: 6, ..Default::default() };
        let src = textured(20, 30, 1);
        let sampler = LinearizedSampler::new(cfg, 4, 5).unwrap();
        let p = AffineParams::new(0.1, -0.1, 0.2, -0.5, -0.3);
        let idx = 7;
        let x = pixel_center(idx / 5, idx % 5, 4, 5);
        let mut manual: Vec<NormCoord> = sampler
            .offsets()
            .pixel(idx)
            .iter()
            .map(|o| p.apply(NormCoord::new(x.u + o.u, x.v + o.v)))
            .collect();
        let mut r = rng::substream(cfg.seed, tag::COLLAPSE, idx as u64);
        collapse_perturb(&mut manual, 20, 30, true, &mut r);
        assert_eq!(sampler.aux_coords(&src, &p, idx), manual);
    }

    #[test]
    fn bias_free_forward_equals_bilinear() {
        let src = textured(24, 20, 3);
        let p = AffineParams::new(0.05, -0.1, 0.3, -0.4, 0.2);
        let cfg = LinearizationConfig { include_bias: false, seed: 3, ..Default::default() };
        let lin = sample_linearized(&src, &p, 9, 7, &cfg).unwrap();
        assert_eq!(lin.image, sample_bilinear(&src, &p, 9, 7).image);
    }

    #[test]
    fn constant_image_is_reproduced() {
        let src = Image::from_fn(16, 16, 1, |_, _, _| 0.6);
        let p = AffineParams::new(0.0, 0.0, 0.2, -0.5, -0.5);
        let out = sample_linearized(&src, &p, 8, 8, &LinearizationConfig::default()).unwrap();
        assert!(out.image.data().iter().all(|v| (v - 0.6).abs() < 1e-9));
        assert!(out.linearizations.iter().all(|l| l.valid && l.is_zero()));
    }

    #[test]
    fn plane_image_forward_matches_plane() {
        let (a, b, c) = (0.2, -0.15, 0.5);
        let src = plane(64, 64, a, b, c);
        // zoom in so every sample stays inside the pixel-center hull
        let p = AffineParams::new(0.02, -0.03, 0.1, (0.4f64).ln(), (0.4f64).ln());
        let cfg = LinearizationConfig { epsilon: 1e-9, ..Default::default() };
        let out = sample_linearized(&src, &p, 16, 16, &cfg).unwrap();
        for r in 0..16 {
            for col in 0..16 {
                let q = p.apply(pixel_center(r, col, 16, 16));
                let expect = a * q.u + b * q.v + c;
                assert!((out.image.get(r, col, 0) - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let src = textured(20, 20, 1);
        let p = AffineParams::new(0.1, 0.0, -0.2, 0.1, -0.1);
        let cfg = LinearizationConfig { seed: 11, sigma: SigmaPolicy::OutputPixel { multiplier: 2.0 }, ..Default::default() };
        assert_eq!(
            sample_linearized(&src, &p, 10, 10, &cfg).unwrap(),
            sample_linearized(&src, &p, 10, 10, &cfg).unwrap()
        );
    }

    #[test]
    fn sampler_agrees_with_fit_linearization() {
        let src = textured(30, 30, 3);
        let p = AffineParams::new(-0.1, 0.05, 0.4, -0.2, 0.3);
        let cfg = LinearizationConfig { seed: 21, ..Default::default() };
        let sampler = LinearizedSampler::new(cfg, 6, 6).unwrap();
        let out = sampler.sample(&src, &p);
        for idx in [0, 7, 20, 35] {
            let tc = p.apply(pixel_center(idx / 6, idx % 6, 6, 6));
            let center = src.bilinear_at(tc);
            let coords = sampler.aux_coords(&src, &p, idx);
            let mut ints = Vec::new();
            let mut valid = Vec::new();
            for &q in &coords {
                let s = src.bilinear_at(q);
                ints.extend(s.values);
                valid.push(s.in_bounds);
            }
            let lin = fit_linearization(&center.values, tc, &ints, &coords, &valid, cfg.epsilon);
            assert_eq!(lin, out.linearizations[idx]);
        }
    }
}
