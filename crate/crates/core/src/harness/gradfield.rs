use serde::Serialize;

use crate::autograd;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::sampler::{PreparedSampler, SamplerKind};
use crate::transform::AffineParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradFieldRow {
    pub offset_tx: f64,
    pub offset_ty: f64,
    pub neg_grad_tx: f64,
    pub neg_grad_ty: f64,
}

/// Steepest-descent direction over translation at each grid offset.
///
/// The parameters at each point are `base` shifted by the offset; the
/// returned vector is the negated `(tx, ty)` part of the loss gradient.
pub fn gradient_field(
    src: &Image,
    target: &Image,
    kind: &SamplerKind,
    base: &AffineParams,
    offsets: &[(f64, f64)],
) -> Result<Vec<GradFieldRow>> {
    if let Some(bad) = offsets.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidParams(format!("non-finite grid offset {bad:?}")));
    }
    let sampler = PreparedSampler::new(src, kind, target.height(), target.width())?;
    offsets
        .iter()
        .map(|&(dx, dy)| {
            let params = AffineParams { tx: base.tx + dx, ty: base.ty + dy, ..*base };
            let grad = autograd::evaluate(&sampler, &params, target)?.grad;
            Ok(GradFieldRow { offset_tx: dx, offset_ty: dy, neg_grad_tx: -grad[0], neg_grad_ty: -grad[1] })
        })
        .collect()
}

/// `n × n` grid of offsets spanning `[-extent, extent]` in both axes, row-major
/// over `ty` then `tx`.
pub fn square_grid(extent: f64, n: usize) -> Vec<(f64, f64)> {
    let at = |i: usize| if n == 1 { 0.0 } else { -extent + 2.0 * extent * i as f64 / (n - 1) as f64 };
    (0..n).flat_map(|j| (0..n).map(move |i| (at(i), at(j)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::sample_bilinear;

    #[test]
    fn grid_shape() {
        let g = square_grid(0.5, 3);
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], (-0.5, -0.5));
        assert_eq!(g[1], (0.0, -0.5));
        assert_eq!(g[8], (0.5, 0.5));
        assert_eq!(square_grid(1.0, 1), vec![(0.0, 0.0)]);
    }

    #[test]
    fn stationary_at_alignment() {
        let src = Image::from_fn(24, 24, 1, |r, c, _| 0.5 + 0.3 * ((r as f64) * 0.5).sin() * ((c as f64) * 0.4).cos());
        let target = sample_bilinear(&src, &AffineParams::IDENTITY, 12, 12).image;
        let rows = gradient_field(&src, &target, &SamplerKind::Bilinear, &AffineParams::IDENTITY, &[(0.0, 0.0)]).unwrap();
        assert_eq!(rows[0].neg_grad_tx, 0.0);
        assert_eq!(rows[0].neg_grad_ty, 0.0);
    }

    #[test]
    fn rejects_nan_offsets() {
        let src = Image::zeros(4, 4, 1);
        let r = gradient_field(&src, &src, &SamplerKind::Bilinear, &AffineParams::IDENTITY, &[(f64::NAN, 0.0)]);
        assert!(r.is_err());
    }
}
