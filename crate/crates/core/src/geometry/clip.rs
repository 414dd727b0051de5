use super::{Point, PointArray};

/// Axis-aligned window in ego meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Window {
    pub fn ego() -> Self {
        use crate::conventions::{X_MAX, X_MIN, Y_MAX, Y_MIN};
        Window {
            x0: X_MIN,
            x1: X_MAX,
            y0: Y_MIN,
            y1: Y_MAX,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

/// Liang–Barsky: parametric range `[t0, t1]` of segment `a→b` inside `w`.
pub fn clip_segment(a: Point, b: Point, w: &Window) -> Option<(f64, f64)> {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a[0] - w.x0),
        (dx, w.x1 - a[0]),
        (-dy, a[1] - w.y0),
        (dy, w.y1 - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    Some((t0, t1))
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Clips a polyline to `w`, splitting it wherever it leaves the window.
/// Pieces shorter than two distinct points are dropped.
pub fn clip_polyline(pts: &PointArray, w: &Window) -> Vec<PointArray> {
    let p = pts.points();
    let mut out = Vec::new();
    let mut cur: Vec<Point> = Vec::new();
    for s in p.windows(2) {
        match clip_segment(s[0], s[1], w) {
            Some((t0, t1)) => {
                let a = if t0 == 0.0 { s[0] } else { lerp(s[0], s[1], t0) };
                let b = if t1 == 1.0 { s[1] } else { lerp(s[0], s[1], t1) };
                if cur.is_empty() || t0 > 0.0 {
                    flush(&mut cur, &mut out);
                    cur.push(a);
                }
                cur.push(b);
                if t1 < 1.0 {
                    flush(&mut cur, &mut out);
                }
            }
            None => flush(&mut cur, &mut out),
        }
    }
    flush(&mut cur, &mut out);
    out
}

fn flush(cur: &mut Vec<Point>, out: &mut Vec<PointArray>) {
    if cur.len() >= 2 && cur.iter().any(|p| *p != cur[0]) {
        out.push(PointArray(std::mem::take(cur)));
    }
    cur.clear();
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn inside_is_unchanged() {
        let pl = PointArray(vec![[0.0, 0.0], [5.0, 1.0], [7.0, -2.0]]);
        assert_eq!(clip_polyline(&pl, &Window::ego()), vec![pl]);
    }

    #[test]
    fn crossing_endpoint_lies_on_boundary() {
        let pl = PointArray(vec![[20.0, 1.0], [40.0, 3.0]]);
        let c = clip_polyline(&pl, &Window::ego());
        assert_eq!(c.len(), 1);
        let end = c[0].points()[1];
        assert!((end[0] - 30.0).abs() < 1e-9);
        // Intersection with x = 30 at t = 0.5.
        assert!((end[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn leaving_and_reentering_splits() {
        let pl = PointArray(vec![[0.0, 10.0], [0.0, 20.0], [5.0, 20.0], [5.0, 10.0]]);
        let c = clip_polyline(&pl, &Window::ego());
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].points(), &[[0.0, 10.0], [0.0, 15.0]]);
        assert_eq!(c[1].points(), &[[5.0, 15.0], [5.0, 10.0]]);
    }

    #[test]
    fn fully_outside_is_dropped() {
        let pl = PointArray(vec![[40.0, 0.0], [50.0, 0.0]]);
        assert!(clip_polyline(&pl, &Window::ego()).is_empty());
    }

    proptest! {
        #[test]
        fn clipped_points_stay_inside(pts in prop::collection::vec((-80.0f64..80.0, -40.0f64..40.0), 2..8)) {
            let pl = PointArray(pts.into_iter().map(|(x, y)| [x, y]).collect());
            let w = Window::ego();
            for piece in clip_polyline(&pl, &w) {
                for p in piece.points() {
                    prop_assert!(p[0] >= w.x0 - 1e-9 && p[0] <= w.x1 + 1e-9);
                    prop_assert!(p[1] >= w.y0 - 1e-9 && p[1] <= w.y1 + 1e-9);
                }
            }
        }
    }
}
