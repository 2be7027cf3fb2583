//! Five-parameter affine warp mapping normalized output coordinates to
//! normalized source coordinates: scale, then rotate, then translate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::raster::NormCoord;

pub const NUM_PARAMS: usize = 5;

/// Parameter order used everywhere a flat vector is needed.
pub const PARAM_NAMES: [&str; NUM_PARAMS] = ["tx", "ty", "rot", "log_sx", "log_sy"];

/// `∂ apply / ∂ θ`: two rows (u, v), one column per parameter.
pub type Jacobian = [[f64; NUM_PARAMS]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub tx: f64,
    pub ty: f64,
    /// Radians.
    pub rot: f64,
    pub log_sx: f64,
    pub log_sy: f64,
}

/// The warp as a 2x3 matrix `[[a, b, tx], [c, d, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineMatrix {
    #[inline]
    pub fn apply(&self, p: NormCoord) -> NormCoord {
        NormCoord {
            u: self.a * p.u + self.b * p.v + self.tx,
            v: self.c * p.u + self.d * p.v + self.ty,
        }
    }
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams { tx: 0.0, ty: 0.0, rot: 0.0, log_sx: 0.0, log_sy: 0.0 };

    pub fn new(tx: f64, ty: f64, rot: f64, log_sx: f64, log_sy: f64) -> Self {
        Self { tx, ty, rot, log_sx, log_sy }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn to_array(self) -> [f64; NUM_PARAMS] {
        [self.tx, self.ty, self.rot, self.log_sx, self.log_sy]
    }

    pub fn from_array(v: [f64; NUM_PARAMS]) -> Self {
        Self { tx: v[0], ty: v[1], rot: v[2], log_sx: v[3], log_sy: v[4] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn matrix(&self) -> AffineMatrix {
        let (s, c) = self.rot.sin_cos();
        let (sx, sy) = (self.log_sx.exp(), self.log_sy.exp());
        AffineMatrix { a: c * sx, b: -s * sy, c: s * sx, d: c * sy, tx: self.tx, ty: self.ty }
    }

    /// `R(rot) · diag(e^log_sx, e^log_sy) · coord + (tx, ty)`.
    pub fn apply(&self, coord: NormCoord) -> NormCoord {
        self.matrix().apply(coord)
    }

    /// Derivative of [`AffineParams::apply`] with respect to the parameters,
    /// in `(tx, ty, rot, log_sx, log_sy)` order.
    pub fn jacobian(&self, coord: NormCoord) -> Jacobian {
        let (s, c) = self.rot.sin_cos();
        let (sx, sy) = (self.log_sx.exp(), self.log_sy.exp());
        let (su, sv) = (sx * coord.u, sy * coord.v);
        [
            [1.0, 0.0, -s * su - c * sv, c * su, -s * sv],
            [0.0, 1.0, c * su - s * sv, s * su, c * sv],
        ]
    }

    /// Transform that first applies `self` and then an isotropic zoom about the
    /// origin by `scale` (source region shrinks by `scale`). The result stays
    /// inside the five-parameter family.
    pub fn then_zoom(&self, scale: f64) -> Self {
        let ls = scale.ln();
        Self {
            tx: self.tx * scale,
            ty: self.ty * scale,
            rot: self.rot,
            log_sx: self.log_sx + ls,
            log_sy: self.log_sy + ls,
        }
    }
}

impl fmt::Display for AffineParams {
    /// Five comma-separated values, `tx,ty,rot,log_sx,log_sy`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.tx, self.ty, self.rot, self.log_sx, self.log_sy)
    }
}

impl FromStr for AffineParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidParams(format!("{s:?}: {e}")))?;
        let arr: [f64; NUM_PARAMS] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::InvalidParams(format!("expected 5 values, got {}", v.len())))?;
        let p = Self::from_array(arr);
        if !p.is_finite() {
            return Err(Error::InvalidParams(format!("{s:?}: non-finite value")));
        }
        Ok(p)
    }
}

/// Mean distance, in source pixels, between the four output-domain corners
/// mapped through `est` and through `gt`.
pub fn corner_reprojection_error(
    est: &AffineParams,
    gt: &AffineParams,
    _out_height: usize,
    _out_width: usize,
    src_height: usize,
    src_width: usize,
) -> f64 {
    let (me, mg) = (est.matrix(), gt.matrix());
    let (hx, hy) = (src_width as f64 * 0.5, src_height as f64 * 0.5);
    let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    corners
        .iter()
        .map(|&(u, v)| {
            let p = NormCoord::new(u, v);
            let (a, b) = (me.apply(p), mg.apply(p));
            ((a.u - b.u) * hx).hypot((a.v - b.v) * hy)
        })
        .sum::<f64>()
        / 4.0
}
