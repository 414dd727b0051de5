use serde::{Deserialize, Serialize};

use super::Pose2;
use crate::conventions::{WINDOW_LATERAL_M, WINDOW_LONGITUDINAL_M, X_MAX, Y_MAX};
use crate::{Error, Result};

/// Raster lattice of the BEV canvas. See [`crate::conventions`] for axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    /// Rows, along ego `x`.
    pub height: usize,
    /// Columns, along ego `y`.
    pub width: usize,
    /// Meters per column step (image `u`).
    pub mpp_x: f64,
    /// Meters per row step (image `v`).
    pub mpp_y: f64,
}

impl BevGridSpec {
    pub fn new(height: usize, width: usize, mpp_x: f64, mpp_y: f64) -> Self {
        BevGridSpec {
            height,
            width,
            mpp_x,
            mpp_y,
        }
    }

    /// Lattice of `height × width` pixels covering the 60 m × 30 m window.
    pub fn window(height: usize, width: usize) -> Self {
        BevGridSpec {
            height,
            width,
            mpp_x: WINDOW_LATERAL_M / width as f64,
            mpp_y: WINDOW_LONGITUDINAL_M / height as f64,
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::validation(format!(
                "grid must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.mpp_x > 0.0 && self.mpp_y > 0.0) {
            return Err(Error::validation("grid meters-per-pixel must be positive"));
        }
        Ok(())
    }

    pub fn covers_window(&self) -> bool {
        (self.height as f64 * self.mpp_y - WINDOW_LONGITUDINAL_M).abs() < 1e-9
            && (self.width as f64 * self.mpp_x - WINDOW_LATERAL_M).abs() < 1e-9
    }

    /// Ego coordinates of the center of pixel `(row, col)`.
    pub fn pixel_to_ego(&self, row: f64, col: f64) -> (f64, f64) {
        (
            X_MAX - (row + 0.5) * self.mpp_y,
            Y_MAX - (col + 0.5) * self.mpp_x,
        )
    }

    /// Continuous `(row, col)` of an ego point; integers are pixel centers.
    pub fn ego_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        ((X_MAX - x) / self.mpp_y - 0.5, (Y_MAX - y) / self.mpp_x - 0.5)
    }
}

/// 2×3 affine over align-corners normalized coordinates, mapping an output
/// location `(u, v)` to the source location sampled by the warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMatrix {
    pub theta: [[f64; 3]; 2],
}

impl AffineMatrix {
    pub const IDENTITY: AffineMatrix = AffineMatrix {
        theta: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let t = &self.theta;
        (
            t[0][0] * u + t[0][1] * v + t[0][2],
            t[1][0] * u + t[1][1] * v + t[1][2],
        )
    }

    pub fn rotation_det(&self) -> f64 {
        let t = &self.theta;
        t[0][0] * t[1][1] - t[0][1] * t[1][0]
    }
}

/// Normalized affine for an image-frame pose: translation converted from
/// meters to normalized units per axis, rotation block `R(dtheta)`.
pub fn affine_theta(pose: Pose2, grid: &BevGridSpec) -> AffineMatrix {
    let tx = 2.0 / (grid.width as f64 - 1.0) * (pose.dx / grid.mpp_x);
    let ty = 2.0 / (grid.height as f64 - 1.0) * (pose.dy / grid.mpp_y);
    let (s, c) = pose.dtheta.sin_cos();
    AffineMatrix {
        theta: [[c, -s, tx], [s, c, ty]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_gives_identity() {
        let g = BevGridSpec::new(60, 30, 1.0, 1.0);
        assert_eq!(affine_theta(Pose2::IDENTITY, &g), AffineMatrix::IDENTITY);
    }

    #[test]
    fn half_canvas_shift_is_unit() {
        let g = BevGridSpec::new(60, 30, 0.7, 1.3);
        let a = affine_theta(Pose2::new(0.7 * 29.0 / 2.0, 0.0, 0.0), &g);
        assert!((a.theta[0][2] - 1.0).abs() < 1e-15);
        assert_eq!(a.theta[0][0], 1.0);
        assert_eq!(a.theta[1][1], 1.0);
    }

    #[test]
    fn substitution() {
        // Direct substitution with H=60, W=30, mpp=1.
        let g = BevGridSpec::new(60, 30, 1.0, 1.0);
        let a = affine_theta(Pose2::new(0.5, -0.25, 0.1), &g);
        let expected = [
            [0.1f64.cos(), -(0.1f64.sin()), 2.0 / 29.0 * 0.5],
            [0.1f64.sin(), 0.1f64.cos(), 2.0 / 59.0 * -0.25],
        ];
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(a.theta[r][c], expected[r][c]);
            }
        }
        assert!((a.rotation_det() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn window_grid_covers_extent() {
        let g = BevGridSpec::window(40, 20);
        assert!(g.covers_window());
        let (x, y) = g.pixel_to_ego(0.0, 0.0);
        assert!(x > 29.0 && y > 14.0, "row 0 forward, col 0 left");
        let (r, c) = g.ego_to_pixel(x, y);
        assert!(r.abs() < 1e-12 && c.abs() < 1e-12);
        assert!(BevGridSpec::new(1, 5, 1.0, 1.0).validate().is_err());
    }
}
