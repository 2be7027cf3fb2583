//! Seeded synthetic test images: oriented Gabor patches over a linear ramp.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{pixel_center, Image};
use crate::rng;

const PATCHES: usize = 600;
/// Wavelength range in normalized units.
const MIN_WAVELENGTH: f64 = 0.08;
const MAX_WAVELENGTH: f64 = 1.6;
const WAVELENGTH_EXPONENT: f64 = 1.5;
/// Output range after normalization; keeps values away from the clamp.
const LO: f64 = 0.05;
const HI: f64 = 0.95;

struct Gabor {
    cu: f64,
    cv: f64,
    envelope: f64,
    freq_u: f64,
    freq_v: f64,
    phase: f64,
    gains: [f64; 3],
}

impl Gabor {
    fn draw(rng: &mut impl Rng) -> Self {
        let theta = rng.random_range(0.0..PI);
        // density ∝ λ^-2.5: fine patches outnumber coarse ones but are small,
        // so most of the variance sits at coarse scales
        let (lo, hi) = (MIN_WAVELENGTH.powf(-WAVELENGTH_EXPONENT), MAX_WAVELENGTH.powf(-WAVELENGTH_EXPONENT));
        let wavelength = (lo - rng.random::<f64>() * (lo - hi)).powf(-1.0 / WAVELENGTH_EXPONENT);
        let k = 2.0 * PI / wavelength;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let amp = sign * rng.random_range(0.5..1.0);
        Self {
            cu: rng.random_range(-1.1..1.1),
            cv: rng.random_range(-1.1..1.1),
            envelope: wavelength * rng.random_range(0.4..0.8),
            freq_u: k * theta.cos(),
            freq_v: k * theta.sin(),
            phase: rng.random_range(0.0..2.0 * PI),
            gains: std::array::from_fn(|_| amp * rng.random_range(0.5..1.0)),
        }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.cu, v - self.cv);
        let env = (-(du * du + dv * dv) / (2.0 * self.envelope * self.envelope)).exp();
        env * (self.freq_u * du + self.freq_v * dv + self.phase).cos()
    }
}

/// Deterministic textured image in `[0.05, 0.95]`.
pub fn gen_texture(seed: u64, height: usize, width: usize, channels: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::EmptyImage { height, width });
    }
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidParams(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rng = rng::substream(seed, rng::tag::TEXTURE, 0);
    let ramp: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
    let patches: Vec<Gabor> = (0..PATCHES).map(|_| Gabor::draw(&mut rng)).collect();

    let mut raw = Image::from_fn(height, width, channels, |r, c, ch| {
        let p = pixel_center(r, c, height, width);
        let base = ramp[ch][0] * p.u + ramp[ch][1] * p.v;
        base + patches.iter().map(|g| g.gains[ch] * g.eval(p.u, p.v)).sum::<f64>()
    });

    let (min, max) = raw.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = max - min;
    for r in 0..height {
        for c in 0..width {
            for x in raw.pixel_mut(r, c) {
                *x = if span > 0.0 { LO + (HI - LO) * (*x - min) / span } else { 0.5 };
            }
        }
    }
    Ok(raw)
}
