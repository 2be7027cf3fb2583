//! Single-image alignment: recover the warp that produced a target image.

use std::f64::consts::{FRAC_PI_4, SQRT_2};

use rand::Rng;
use serde::Serialize;

use super::optimizer::{Optimizer, OptimizerConfig, STALL_WINDOW};
use crate::autograd;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng;
use crate::sampler::{sample_bilinear, LinearizationConfig, PreparedSampler, SamplerKind};
use crate::transform::{corner_reprojection_error, AffineParams};

/// Perturbation standard deviations in normalized coordinates / radians /
/// log-scale units.
pub const ROTATION_STD: f64 = FRAC_PI_4;
pub const LOG_SCALE_STD: f64 = SQRT_2;
pub const TRANSLATION_STD: f64 = 0.2;

/// Random warp with independent Gaussian components; `scale` multiplies every
/// standard deviation.
pub fn sample_perturbation(rng: &mut impl Rng, scale: f64) -> AffineParams {
    // fixed draw order: rotation, horizontal scale, vertical scale, translation
    let rot = ROTATION_STD * scale * rng::normal(rng);
    let log_sx = LOG_SCALE_STD * scale * rng::normal(rng);
    let log_sy = LOG_SCALE_STD * scale * rng::normal(rng);
    let tx = TRANSLATION_STD * scale * rng::normal(rng);
    let ty = TRANSLATION_STD * scale * rng::normal(rng);
    AffineParams { tx, ty, rot, log_sx, log_sy }
}

/// Output size for a source of `src_len` pixels decimated by `factor`.
pub fn downsampled_len(src_len: usize, factor: f64) -> usize {
    (src_len as f64 / factor + 1e-9).floor() as usize
}

/// Target for an alignment trial: the source warped by `gt` with bilinear
/// sampling, at `1 / downsample_factor` of the source resolution.
pub fn make_alignment_pair(src: &Image, gt: &AffineParams, downsample_factor: f64) -> Result<Image> {
    if !(downsample_factor >= 1.0 && downsample_factor.is_finite()) {
        return Err(Error::InvalidParams(format!("downsample factor must be >= 1, got {downsample_factor}")));
    }
    let out_h = downsampled_len(src.height(), downsample_factor);
    let out_w = downsampled_len(src.width(), downsample_factor);
    if out_h < 2 || out_w < 2 {
        return Err(Error::DegenerateOutput { height: out_h, width: out_w });
    }
    Ok(sample_bilinear(src, gt, out_h, out_w).image)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub loss: f64,
    pub params: AffineParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The loss stalled below the stop tolerance.
    Tolerance,
    MaxIterations,
    /// A non-finite loss or gradient ended the trial.
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub gt_params: Option<AffineParams>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_params: AffineParams,
    pub final_loss: f64,
    /// Corner reprojection error against `gt_params`, in source pixels.
    pub final_error_px: Option<f64>,
    pub stop: StopReason,
    pub converged: bool,
}

impl AlignmentReport {
    pub fn iterations(&self) -> usize {
        self.trajectory.len()
    }

    pub fn aborted(&self) -> bool {
        matches!(self.stop, StopReason::NonFinite(_))
    }
}

/// Iterative first-order alignment of the five warp parameters against the
/// mean-squared error to `target`.
///
/// Each iteration records the loss at the current parameters, then steps.
/// The final parameters are the last ones evaluated. With
/// `opt.resample_noise`, iteration `n > 0` of the linearized sampler uses
/// seed `derive_seed(config.seed, [ITERATION, n])`.
pub fn optimize_alignment(
    src: &Image,
    target: &Image,
    init: &AffineParams,
    kind: &SamplerKind,
    opt: &OptimizerConfig,
    gt: Option<&AffineParams>,
) -> Result<AlignmentReport> {
    opt.validate()?;
    if target.channels() != src.channels() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} channels", src.channels()),
            actual: format!("{} channels", target.channels()),
        });
    }
    let (out_h, out_w) = (target.height(), target.width());
    let fixed = PreparedSampler::new(src, kind, out_h, out_w)?;
    let mut optimizer = Optimizer::new(*opt);
    let mut params = *init;
    let mut trajectory = Vec::new();
    let mut stall = 0;
    let mut stop = StopReason::MaxIterations;

    for iteration in 0..opt.max_iters {
        let eval = match kind {
            SamplerKind::Linearized(cfg) if opt.resample_noise && iteration > 0 => {
                let cfg = LinearizationConfig { seed: rng::derive_seed(cfg.seed, &[rng::tag::ITERATION, iteration as u64]), ..*cfg };
                let sampler = PreparedSampler::new(src, &SamplerKind::Linearized(cfg), out_h, out_w)?;
                autograd::evaluate(&sampler, &params, target)?
            }
            _ => autograd::evaluate(&fixed, &params, target)?,
        };
        let loss = eval.loss.value;
        if !loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            stop = StopReason::NonFinite(format!(
                "iteration {iteration}: loss {loss}, gradient {:?}",
                eval.grad
            ));
            break;
        }
        if let Some(prev) = trajectory.last().map(|p: &TrajectoryPoint| p.loss) {
            stall = if (loss - prev).abs() < opt.stop_tol { stall + 1 } else { 0 };
        }
        trajectory.push(TrajectoryPoint { iteration, loss, params });
        if stall >= STALL_WINDOW {
            stop = StopReason::Tolerance;
            break;
        }
        if iteration + 1 == opt.max_iters {
            break;
        }
        let mut p = params.to_array();
        optimizer.step(&mut p, &eval.grad);
        params = AffineParams::from_array(p);
    }

    let (final_params, final_loss) = match trajectory.last() {
        Some(last) => (last.params, last.loss),
        None => (*init, f64::NAN),
    };
    if trajectory.is_empty() {
        // keep the trajectory nonempty even when the very first evaluation failed
        trajectory.push(TrajectoryPoint { iteration: 0, loss: f64::NAN, params: *init });
    }
    let final_error_px = gt.map(|g| {
        corner_reprojection_error(&final_params, g, target.height(), target.width(), src.height(), src.width())
    });
    let converged = stop == StopReason::Tolerance;
    Ok(AlignmentReport { gt_params: gt.copied(), trajectory, final_params, final_loss, final_error_px, stop, converged })
}

/// `recall(t)` = fraction of reports whose final error is at most `t`.
/// Reports without an error (no ground truth) never count as recalled.
pub fn recall_curve(reports: &[AlignmentReport], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    let errors: Vec<f64> = reports.iter().map(|r| r.final_error_px.unwrap_or(f64::INFINITY)).collect();
    recall_from_errors(&errors, thresholds)
}

pub fn recall_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if errors.is_empty() {
        return Err(Error::InvalidParams("recall curve needs at least one trial".into()));
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            // NaN errors never count
            let hits = errors.iter().filter(|&&e| e <= t).count();
            (t, hits as f64 / n)
        })
        .collect())
}

/// Log-spaced thresholds in `[lo, hi]` pixels.
pub fn log_thresholds(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// 64 log-spaced thresholds over `[0.1, 100]` px.
pub fn default_thresholds() -> Vec<f64> {
    log_thresholds(0.1, 100.0, 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with_error(e: f64) -> AlignmentReport {
        AlignmentReport {
            gt_params: Some(AffineParams::IDENTITY),
            trajectory: vec![TrajectoryPoint { iteration: 0, loss: 0.0, params: AffineParams::IDENTITY }],
            final_params: AffineParams::IDENTITY,
            final_loss: 0.0,
            final_error_px: Some(e),
            stop: StopReason::Tolerance,
            converged: true,
        }
    }

    #[test]
    fn recall_counting() {
        let reports: Vec<_> = [1.0, 3.0, 5.0].into_iter().map(report_with_error).collect();
        let curve = recall_curve(&reports, &[2.0, 4.0, 6.0, f64::INFINITY]).unwrap();
        let recalls: Vec<f64> = curve.iter().map(|c| c.1).collect();
        assert_eq!(recalls, vec![1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0]);
        let zeros: Vec<_> = (0..4).map(|_| report_with_error(0.0)).collect();
        assert!(recall_curve(&zeros, &[1e-6, 1.0]).unwrap().iter().all(|c| c.1 == 1.0));
        assert!(recall_curve(&[], &[1.0]).is_err());
    }

    #[test]
    fn thresholds_are_log_spaced() {
        let t = default_thresholds();
        assert_eq!(t.len(), 64);
        assert!((t[0] - 0.1).abs() < 1e-12 && (t[63] - 100.0).abs() < 1e-9);
        assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn perturbation_is_reproducible() {
        let a = sample_perturbation(&mut rng::seeded(4), 1.0);
        let b = sample_perturbation(&mut rng::seeded(4), 1.0);
        assert_eq!(a, b);
        let half = sample_perturbation(&mut rng::seeded(4), 0.5);
        assert!((half.rot - 0.5 * a.rot).abs() < 1e-15);
    }

    #[test]
    fn pair_shapes() {
        let src = Image::from_fn(64, 64, 1, |r, c, _| ((r + c) % 5) as f64 / 4.0);
        assert_eq!(make_alignment_pair(&src, &AffineParams::IDENTITY, 1.0).unwrap(), src);
        let t = make_alignment_pair(&src, &AffineParams::IDENTITY, 8.0).unwrap();
        assert_eq!((t.height(), t.width()), (8, 8));
        assert!(matches!(
            make_alignment_pair(&src, &AffineParams::IDENTITY, 40.0),
            Err(Error::DegenerateOutput { .. })
        ));
        assert!(make_alignment_pair(&src, &AffineParams::IDENTITY, 0.5).is_err());
    }

    #[test]
    fn starting_at_ground_truth_stops_immediately() {
        let src = Image::from_fn(32, 32, 1, |r, c, _| 0.5 + 0.4 * ((r as f64) * 0.4).sin() * ((c as f64) * 0.3).cos());
        let gt = AffineParams::new(0.05, -0.03, 0.1, -0.2, -0.1);
        let target = make_alignment_pair(&src, &gt, 2.0).unwrap();
        let rep = optimize_alignment(&src, &target, &gt, &SamplerKind::Bilinear, &OptimizerConfig::default(), Some(&gt)).unwrap();
        assert_eq!(rep.trajectory[0].loss, 0.0);
        assert!(rep.converged);
        assert_eq!(rep.iterations(), STALL_WINDOW + 1);
        assert_eq!(rep.final_error_px, Some(0.0));
    }
}
