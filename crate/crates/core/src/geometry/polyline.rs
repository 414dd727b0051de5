use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point = [f64; 2];

/// Ordered points in the ego BEV frame, meters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointArray(pub Vec<Point>);

impl PointArray {
    pub fn new(points: Vec<Point>) -> Self {
        PointArray(points)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|p| p[0].is_finite() && p[1].is_finite())
    }

    /// True when every point lies in the closed box `[x0,x1]×[y0,y1]`.
    pub fn within(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
        self.0
            .iter()
            .all(|p| p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1)
    }
}

impl From<Vec<Point>> for PointArray {
    fn from(v: Vec<Point>) -> Self {
        PointArray(v)
    }
}

pub fn polyline_length(pts: &[Point]) -> f64 {
    pts.windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum()
}

/// Result of arc-length resampling. `degenerate` is set when the input had
/// zero length and the single location was replicated.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub points: PointArray,
    pub degenerate: bool,
}

/// Resamples `pts` to `count` points equally spaced in arc length. The first
/// and last input points are reproduced exactly.
pub fn resample_polyline(pts: &PointArray, count: usize) -> Result<Resampled> {
    if count < 2 {
        return Err(Error::validation(format!(
            "resample_polyline: need at least 2 output points, got {count}"
        )));
    }
    if pts.is_empty() {
        return Err(Error::validation("resample_polyline: empty polyline"));
    }
    if !pts.is_finite() {
        return Err(Error::validation("resample_polyline: non-finite coordinates"));
    }
    let p = pts.points();
    let total = polyline_length(p);
    if !(total > 0.0) {
        return Ok(Resampled {
            points: PointArray(vec![p[0]; count]),
            degenerate: true,
        });
    }

    let mut out = Vec::with_capacity(count);
    out.push(p[0]);
    let step = total / (count - 1) as f64;
    let mut seg = 0usize;
    let mut seg_start = 0.0;
    let mut seg_len = dist(p[0], p[1]);
    for k in 1..count - 1 {
        let target = step * k as f64;
        while seg + 2 < p.len() && seg_start + seg_len < target {
            seg_start += seg_len;
            seg += 1;
            seg_len = dist(p[seg], p[seg + 1]);
        }
        let t = if seg_len > 0.0 {
            ((target - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = p[seg];
        let b = p[seg + 1];
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out.push(p[p.len() - 1]);
    Ok(Resampled {
        points: PointArray(out),
        degenerate: false,
    })
}

fn dist(a: Point, b: Point) -> f64 {
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
}
