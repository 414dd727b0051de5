use super::{BevGridSpec, Point};

/// Integer pixels on the Bresenham line between two `(row, col)` cells,
/// endpoints included.
pub fn bresenham(r0: i64, c0: i64, r1: i64, c1: i64) -> Vec<(i64, i64)> {
    let dr = (r1 - r0).abs();
    let dc = -(c1 - c0).abs();
    let sr = if r0 < r1 { 1 } else { -1 };
    let sc = if c0 < c1 { 1 } else { -1 };
    let mut err = dr + dc;
    let (mut r, mut c) = (r0, c0);
    let mut out = Vec::with_capacity((dr - dc + 1) as usize);
    loop {
        out.push((r, c));
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

/// Nearest pixel cell of an ego point (may fall outside the canvas).
pub fn ego_cell(grid: &BevGridSpec, p: Point) -> (i64, i64) {
    let (r, c) = grid.ego_to_pixel(p[0], p[1]);
    (r.round() as i64, c.round() as i64)
}

/// Visits every canvas pixel covered by a polyline drawn with a square
/// brush `stroke` pixels wide. Pixels may be visited more than once.
pub fn stroke_polyline(grid: &BevGridSpec, pts: &[Point], stroke: usize, mut visit: impl FnMut(usize, usize)) {
    let stroke = stroke.max(1) as i64;
    let lo = -(stroke - 1) / 2;
    let hi = stroke / 2;
    let (h, w) = (grid.height as i64, grid.width as i64);
    let mut plot = |r: i64, c: i64| {
        for dr in lo..=hi {
            for dc in lo..=hi {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && rr < h && cc >= 0 && cc < w {
                    visit(rr as usize, cc as usize);
                }
            }
        }
    };
    if pts.len() == 1 {
        let (r, c) = ego_cell(grid, pts[0]);
        plot(r, c);
    }
    for s in pts.windows(2) {
        let (r0, c0) = ego_cell(grid, s[0]);
        let (r1, c1) = ego_cell(grid, s[1]);
        for (r, c) in bresenham(r0, c0, r1, c1) {
            plot(r, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_connectivity() {
        let l = bresenham(0, 0, 3, 7);
        assert_eq!(l.first(), Some(&(0, 0)));
        assert_eq!(l.last(), Some(&(3, 7)));
        assert_eq!(l.len(), 8);
        for w in l.windows(2) {
            assert!((w[1].0 - w[0].0).abs() <= 1 && (w[1].1 - w[0].1).abs() <= 1);
        }
    }

    #[test]
    fn stroke_width_three_covers_neighbours() {
        let g = BevGridSpec::window(40, 20);
        let mut hits = std::collections::BTreeSet::new();
        stroke_polyline(&g, &[[0.75, 0.75]], 3, |r, c| {
            hits.insert((r, c));
        });
        assert_eq!(hits.len(), 9);
    }
}
