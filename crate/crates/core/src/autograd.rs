//! Backward pass from an image-space loss to the affine parameters.
//!
//! The linearized sampler's pixel model is `center + Aᵀ [Δu, Δv, 1]` with
//! `Δ = T_θ(x_i) - T_θ₀(x_i)`. Only `Δ` depends on θ: the fetched intensities,
//! the fitted `A` and the anchor are constants, so the bias row never sees a
//! gradient.

use crate::error::{Error, Result};
use crate::raster::{pixel_center, Image};
use crate::sampler::{MultiscalePyramid, PixelLinearization, PreparedSampler, SamplerKind, MAX_CHANNELS};
use crate::transform::{AffineParams, NUM_PARAMS};

/// A scalar loss and its gradient with respect to every output intensity
/// (same layout as the output image).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub per_pixel: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LossGrad {
    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.per_pixel[index * self.channels..(index + 1) * self.channels]
    }

    pub fn scaled(&self, factor: f64) -> LossGrad {
        LossGrad { per_pixel: self.per_pixel.iter().map(|g| g * factor).collect(), ..self.clone() }
    }
}

/// Mean squared error over all pixels and channels.
pub fn l2_loss(output: &Image, target: &Image) -> Result<LossGrad> {
    if !output.same_shape(target) {
        return Err(Error::ShapeMismatch { expected: target.shape_string(), actual: output.shape_string() });
    }
    let n = output.len() as f64;
    let mut value = 0.0;
    let per_pixel = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(o, t)| {
            let d = o - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        per_pixel,
        height: output.height(),
        width: output.width(),
        channels: output.channels(),
    })
}

/// Neumaier-compensated accumulator for the five parameter sums.
#[derive(Default)]
struct GradSum {
    sum: [f64; NUM_PARAMS],
    comp: [f64; NUM_PARAMS],
}

impl GradSum {
    #[inline]
    fn add(&mut self, p: usize, x: f64) {
        let s = self.sum[p];
        let t = s + x;
        if s.abs() >= x.abs() {
            self.comp[p] += (s - t) + x;
        } else {
            self.comp[p] += (x - t) + s;
        }
        self.sum[p] = t;
    }

    /// Adds `Jᵀ (s_u, s_v)` for one pixel.
    #[inline]
    fn add_pixel(&mut self, jac: &[[f64; NUM_PARAMS]; 2], su: f64, sv: f64) {
        for p in 0..NUM_PARAMS {
            self.add(p, jac[0][p] * su + jac[1][p] * sv);
        }
    }

    fn total(&self) -> [f64; NUM_PARAMS] {
        std::array::from_fn(|p| self.sum[p] + self.comp[p])
    }
}

fn check_grad_shape(grad: &LossGrad, out_h: usize, out_w: usize) -> Result<()> {
    if grad.height != out_h || grad.width != out_w || grad.per_pixel.len() != out_h * out_w * grad.channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{out_h}x{out_w} loss gradient"),
            actual: format!("{}x{}x{}", grad.height, grad.width, grad.channels),
        });
    }
    Ok(())
}

/// `Σ_i J_iᵀ · A_i[0..2] · g_i` over valid pixels.
pub fn backprop_theta(
    grad: &LossGrad,
    linearizations: &[PixelLinearization],
    params: &AffineParams,
    out_h: usize,
    out_w: usize,
) -> Result<[f64; NUM_PARAMS]> {
    check_grad_shape(grad, out_h, out_w)?;
    if linearizations.len() != out_h * out_w {
        return Err(Error::ShapeMismatch {
            expected: format!("{} linearizations", out_h * out_w),
            actual: format!("{} linearizations", linearizations.len()),
        });
    }
    let mut acc = GradSum::default();
    for (idx, lin) in linearizations.iter().enumerate() {
        if !lin.valid {
            continue;
        }
        let g = grad.pixel(idx);
        let (mut su, mut sv) = (0.0, 0.0);
        for (ch, &gc) in g.iter().enumerate().take(lin.channels) {
            su += lin.a[0][ch] * gc;
            sv += lin.a[1][ch] * gc;
        }
        if su == 0.0 && sv == 0.0 {
            continue;
        }
        let jac = params.jacobian(pixel_center(idx / out_w, idx % out_w, out_h, out_w));
        acc.add_pixel(&jac, su, sv);
    }
    Ok(acc.total())
}

/// Bilinear sampler gradient: the sub-pixel derivative of the interpolant,
/// chained through the warp Jacobian. Out-of-bounds pixels contribute nothing.
pub fn backprop_bilinear(
    src: &Image,
    grad: &LossGrad,
    params: &AffineParams,
    out_h: usize,
    out_w: usize,
) -> Result<[f64; NUM_PARAMS]> {
    check_grad_shape(grad, out_h, out_w)?;
    if grad.channels != src.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", src.channels()),
            actual: format!("{} channels", grad.channels),
        });
    }
    let c = src.channels();
    let m = params.matrix();
    let (mut val, mut du, mut dv) = ([0.0; MAX_CHANNELS], [0.0; MAX_CHANNELS], [0.0; MAX_CHANNELS]);
    let mut acc = GradSum::default();
    for r in 0..out_h {
        for col in 0..out_w {
            let x = pixel_center(r, col, out_h, out_w);
            if !src.bilinear_with_grad_into(m.apply(x), &mut val[..c], &mut du[..c], &mut dv[..c]) {
                continue;
            }
            let g = grad.pixel(r * out_w + col);
            let (mut su, mut sv) = (0.0, 0.0);
            for ch in 0..c {
                su += du[ch] * g[ch];
                sv += dv[ch] * g[ch];
            }
            acc.add_pixel(&params.jacobian(x), su, sv);
        }
    }
    Ok(acc.total())
}

/// Multi-scale gradient: uniform average of the per-level bilinear gradients.
pub fn backprop_multiscale(
    pyramid: &MultiscalePyramid,
    grad: &LossGrad,
    params: &AffineParams,
    out_h: usize,
    out_w: usize,
) -> Result<[f64; NUM_PARAMS]> {
    let levels = pyramid.levels();
    let mut total = [0.0; NUM_PARAMS];
    for level in levels {
        let g = backprop_bilinear(level, grad, params, out_h, out_w)?;
        total.iter_mut().zip(g).for_each(|(t, v)| *t += v);
    }
    let n = levels.len() as f64;
    Ok(total.map(|t| t / n))
}

/// Forward, loss and analytic parameter gradient in one call.
pub struct Evaluation {
    pub output: crate::sampler::SampledOutput,
    pub loss: LossGrad,
    pub grad: [f64; NUM_PARAMS],
}

pub fn evaluate(sampler: &PreparedSampler<'_>, params: &AffineParams, target: &Image) -> Result<Evaluation> {
    let output = sampler.forward(params);
    let loss = l2_loss(&output.image, target)?;
    let grad = sampler.backward(&output, &loss, params)?;
    Ok(Evaluation { output, loss, grad })
}

/// Central finite differences of the full forward loss, re-sampling at
/// `θ ± step·e_p` with the same auxiliary draws. This is the gradient of the
/// forward map itself, against which each sampler's analytic gradient can be
/// compared.
pub fn fd_loss_grad_true(
    src: &Image,
    target: &Image,
    params: &AffineParams,
    kind: &SamplerKind,
    step: f64,
) -> Result<[f64; NUM_PARAMS]> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParams(format!("finite-difference step must be positive, got {step}")));
    }
    let sampler = PreparedSampler::new(src, kind, target.height(), target.width())?;
    let loss_at = |p: [f64; NUM_PARAMS]| -> Result<f64> {
        Ok(l2_loss(&sampler.forward(&AffineParams::from_array(p)).image, target)?.value)
    };
    let base = params.to_array();
    let mut out = [0.0; NUM_PARAMS];
    for (p, o) in out.iter_mut().enumerate() {
        let (mut hi, mut lo) = (base, base);
        hi[p] += step;
        lo[p] -= step;
        *o = (loss_at(hi)? - loss_at(lo)?) / (2.0 * step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_bilinear, sample_linearized, LinearizationConfig};

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 1, |r, c, _| {
            let (x, y) = (c as f64, r as f64);
            0.5 + 0.3 * (0.45 * x - 0.2 * y).sin() * (0.3 * y).cos()
        })
    }

    #[test]
    fn l2_examples() {
        let a = Image::from_fn(3, 2, 1, |r, c, _| (r + c) as f64 / 4.0);
        let z = l2_loss(&a, &a).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.per_pixel.iter().all(|&g| g == 0.0));
        let one = Image::new(1, 1, 1, vec![1.0]).unwrap();
        let zero = Image::new(1, 1, 1, vec![0.0]).unwrap();
        let l = l2_loss(&one, &zero).unwrap();
        assert_eq!((l.value, l.per_pixel[0]), (1.0, 2.0));
        assert!(l2_loss(&a, &one).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let out = Image::from_fn(3, 3, 3, |r, c, ch| ((r * 7 + c * 3 + ch * 5) % 11) as f64 / 10.0);
        let tgt = Image::from_fn(3, 3, 3, |r, c, ch| ((r * 2 + c * 5 + ch) % 7) as f64 / 6.0);
        let lg = l2_loss(&out, &tgt).unwrap();
        let h = 1e-6;
        for i in 0..out.len() {
            let mut hi = out.data().to_vec();
            let mut lo = out.data().to_vec();
            hi[i] += h;
            lo[i] -= h;
            let f = |d: Vec<f64>| l2_loss(&Image::new(3, 3, 3, d).unwrap(), &tgt).unwrap().value;
            let fd = (f(hi) - f(lo)) / (2.0 * h);
            assert!((fd - lg.per_pixel[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn all_invalid_pixels_give_zero_gradient() {
        let src = textured(16, 16);
        let p = AffineParams::translation(4.0, 4.0);
        let out = sample_linearized(&src, &p, 5, 5, &LinearizationConfig::default()).unwrap();
        assert!(out.linearizations.iter().all(|l| !l.valid));
        let lg = l2_loss(&out.image, &Image::from_fn(5, 5, 1, |_, _, _| 0.5)).unwrap();
        assert_eq!(backprop_theta(&lg, &out.linearizations, &p, 5, 5).unwrap(), [0.0; NUM_PARAMS]);
    }

    #[test]
    fn single_pixel_closed_form() {
        // 1x1 output: its pixel center is the origin
        let mut lin = PixelLinearization::invalid(1, Default::default());
        lin.valid = true;
        lin.a[0][0] = 1.0;
        let lg = LossGrad { value: 0.0, per_pixel: vec![1.0], height: 1, width: 1, channels: 1 };
        let g = backprop_theta(&lg, &[lin], &AffineParams::IDENTITY, 1, 1).unwrap();
        let j = AffineParams::IDENTITY.jacobian(pixel_center(0, 0, 1, 1));
        let expect: [f64; NUM_PARAMS] = std::array::from_fn(|p| j[0][p]);
        assert_eq!(g, expect);
    }

    #[test]
    fn backprop_is_linear_in_loss_gradient() {
        let src = textured(20, 20);
        let p = AffineParams::new(0.05, -0.02, 0.1, -0.3, -0.2);
        let out = sample_linearized(&src, &p, 7, 7, &LinearizationConfig::default()).unwrap();
        let lg = l2_loss(&out.image, &Image::from_fn(7, 7, 1, |r, c, _| (r * c) as f64 / 49.0)).unwrap();
        let g1 = backprop_theta(&lg, &out.linearizations, &p, 7, 7).unwrap();
        let g2 = backprop_theta(&lg.scaled(2.0), &out.linearizations, &p, 7, 7).unwrap();
        for k in 0..NUM_PARAMS {
            assert_eq!(g2[k], 2.0 * g1[k]);
        }
    }

    #[test]
    fn constant_source_gives_exactly_zero_gradient() {
        let src = Image::from_fn(12, 12, 3, |_, _, ch| 0.2 + 0.1 * ch as f64);
        let p = AffineParams::new(0.1, 0.0, 0.3, -0.2, 0.1);
        let out = sample_linearized(&src, &p, 6, 6, &LinearizationConfig::default()).unwrap();
        let lg = l2_loss(&out.image, &Image::zeros(6, 6, 3)).unwrap();
        assert_eq!(backprop_theta(&lg, &out.linearizations, &p, 6, 6).unwrap(), [0.0; NUM_PARAMS]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let lg = LossGrad { value: 0.0, per_pixel: vec![0.0; 4], height: 2, width: 2, channels: 1 };
        assert!(backprop_theta(&lg, &[], &AffineParams::IDENTITY, 2, 2).is_err());
        assert!(backprop_bilinear(&textured(4, 4), &lg, &AffineParams::IDENTITY, 3, 2).is_err());
    }

    #[test]
    fn bilinear_backward_matches_frozen_fd_off_lattice() {
        // the bilinear forward is its own model, so finite differences of the
        // true loss check it directly away from lattice lines
        let src = textured(24, 24);
        let p = AffineParams::new(0.0123, -0.0211, 0.071, -0.113, 0.052);
        let target = sample_bilinear(&src, &AffineParams::new(0.03, 0.0, 0.05, -0.1, 0.0), 9, 9).image;
        let out = sample_bilinear(&src, &p, 9, 9);
        let lg = l2_loss(&out.image, &target).unwrap();
        let g = backprop_bilinear(&src, &lg, &p, 9, 9).unwrap();
        let fd = fd_loss_grad_true(&src, &target, &p, &SamplerKind::Bilinear, 1e-7).unwrap();
        for k in 0..NUM_PARAMS {
            assert!((g[k] - fd[k]).abs() <= 1e-5 * (1.0 + fd[k].abs()), "{k}: {} vs {}", g[k], fd[k]);
        }
    }

    #[test]
    fn fd_rejects_bad_step() {
        let src = textured(4, 4);
        assert!(fd_loss_grad_true(&src, &src, &AffineParams::IDENTITY, &SamplerKind::Bilinear, 0.0).is_err());
    }
}
