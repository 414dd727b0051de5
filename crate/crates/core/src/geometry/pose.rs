use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::PointArray;
use crate::{Error, Result};

/// Wraps an angle to `(-π, π]`; `-π` maps to `π`.
pub fn wrap_angle(theta: f64) -> f64 {
    let k = ((theta - PI) / (2.0 * PI)).ceil();
    let wrapped = theta - 2.0 * PI * k;
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

/// A small planar rigid motion `p ↦ R(dtheta)·p + (dx, dy)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        dx: 0.0,
        dy: 0.0,
        dtheta: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dtheta: f64) -> Self {
        Pose2 {
            dx,
            dy,
            dtheta: wrap_angle(dtheta),
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Pose2::new(dx, dy, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.dtheta.sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy]
    }

    pub fn inverse(&self) -> Pose2 {
        se2_invert(*self)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        se2_compose(*self, *other)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dtheta]
    }
}

/// Applies `pose` to every point.
pub fn se2_apply(pose: Pose2, pts: &PointArray) -> Result<PointArray> {
    if !pose.is_finite() {
        return Err(Error::validation("se2_apply: non-finite pose"));
    }
    if !pts.is_finite() {
        return Err(Error::validation("se2_apply: non-finite point coordinates"));
    }
    Ok(PointArray(pts.0.iter().map(|&p| pose.apply_point(p)).collect()))
}

pub fn se2_invert(pose: Pose2) -> Pose2 {
    // p = R q + T  =>  q = R(-θ) p - R(-θ) T
    let (s, c) = pose.dtheta.sin_cos();
    let tx = -(c * pose.dx + s * pose.dy);
    let ty = -(-s * pose.dx + c * pose.dy);
    Pose2::new(tx, ty, -pose.dtheta)
}

pub fn se2_compose(a: Pose2, b: Pose2) -> Pose2 {
    let t = a.apply_point([b.dx, b.dy]);
    Pose2::new(t[0], t[1], a.dtheta + b.dtheta)
}
