//! SE(2), resampling and warping primitives shared by both encoder branches
//! and by data preparation.
//!
//! Scalar routines work on plain `f64` values; the `*_t` variants operate on
//! batched tensors and stay differentiable with respect to pose and inputs.

mod clip;
mod grid;
mod polyline;
mod pose;
mod raster;
mod warp;

pub use clip::{clip_polyline, clip_segment, Window};
pub use grid::{affine_theta, AffineMatrix, BevGridSpec};
pub use polyline::{polyline_length, resample_polyline, Point, PointArray, Resampled};
pub use pose::{se2_apply, se2_compose, se2_invert, wrap_angle, Pose2};
pub use raster::{bresenham, ego_cell, stroke_polyline};
pub use warp::{affine_theta_t, resize_bilinear, se2_apply_t, warp_bilinear};
