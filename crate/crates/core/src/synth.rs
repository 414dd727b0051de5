//! Procedural desk-scale worlds and the four priors derived from them.
//!
//! A world is a main road along ego `x` with 1–3 lanes, an optional crossing
//! road and up to three pedestrian crossings. Priors are corrupted copies:
//! HD keeps the boundaries, SD the coarsened centerlines, the rasterized SD
//! renders those with the fixed palette and the satellite image is a
//! textured top-down render. Each source carries its own drift pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conventions::{
    Source, CLASS_BOUNDARY, CLASS_DIVIDER, CLASS_PED, HD_BOUNDARY_CATEGORY, NUM_MAP_CLASSES, POINTS_PER_POLYLINE,
    SD_CLASSES,
};
use crate::data::{Instance, PresenceMask, PriorBundle, RasterPrior, Sample};
use crate::geometry::{clip_polyline, resample_polyline, stroke_polyline, BevGridSpec, Point, PointArray, Pose2, Window};
use crate::ingest::{rasterize_sd, Palette};
use crate::Result;

/// Dense sampling step for world polylines, meters.
const SAMPLE_STEP: f64 = 1.0;
/// World geometry is laid out over this half-extent and clipped to the window.
const LAYOUT_HALF: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Runs along ego `x`; lateral coordinate is `y`.
    X,
    /// Runs along ego `y`; lateral coordinate is `x`.
    Y,
}

/// A road whose centerline is `lateral = offset + slope·t + curvature·t²`
/// along its axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub axis: Axis,
    pub offset: f64,
    pub slope: f64,
    pub curvature: f64,
    pub lanes: usize,
    pub lane_width: f64,
    pub sd_class: usize,
}

impl Road {
    pub fn half_width(&self) -> f64 {
        self.lanes as f64 * self.lane_width / 2.0
    }

    pub fn lateral_at(&self, t: f64) -> f64 {
        self.offset + self.slope * t + self.curvature * t * t
    }

    fn point(&self, t: f64, lateral: f64) -> Point {
        match self.axis {
            Axis::X => [t, lateral],
            Axis::Y => [lateral, t],
        }
    }

    /// `(along, lateral)` coordinates of an ego point.
    fn split(&self, p: Point) -> (f64, f64) {
        match self.axis {
            Axis::X => (p[0], p[1]),
            Axis::Y => (p[1], p[0]),
        }
    }

    /// Signed lateral distance of `p` from the centerline.
    pub fn lateral_offset(&self, p: Point) -> f64 {
        let (t, l) = self.split(p);
        l - self.lateral_at(t)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.lateral_offset(p).abs() <= self.half_width()
    }

    /// Dense line at a constant lateral offset from the centerline.
    fn offset_line(&self, delta: f64) -> Vec<Point> {
        let n = (2.0 * LAYOUT_HALF / SAMPLE_STEP).round() as usize;
        (0..=n)
            .map(|i| {
                let t = -LAYOUT_HALF + i as f64 * SAMPLE_STEP;
                self.point(t, self.lateral_at(t) + delta)
            })
            .collect()
    }
}

/// Pedestrian crossing spanning road `road` between `x0` and `x1` along it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub road: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub id: usize,
    pub class: usize,
    pub points: PointArray,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub seed: u64,
    pub roads: Vec<Road>,
    pub crossings: Vec<Crossing>,
    /// Clipped to the ego window.
    pub elements: Vec<MapElement>,
}

impl WorldMap {
    pub fn on_road(&self, p: Point) -> bool {
        self.roads.iter().any(|r| r.contains(p))
    }

    pub fn on_crossing(&self, p: Point) -> bool {
        self.crossings.iter().any(|c| {
            let r = &self.roads[c.road];
            let (t, _) = r.split(p);
            t >= c.start && t <= c.end && r.contains(p)
        })
    }

    pub fn elements_of(&self, class: usize) -> impl Iterator<Item = &MapElement> {
        self.elements.iter().filter(move |e| e.class == class)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub lane_width: (f64, f64),
    pub max_offset: f64,
    pub max_heading_deg: f64,
    pub max_curvature: f64,
    pub intersection_prob: f64,
    pub max_crossings: usize,
    pub crossing_depth: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            min_lanes: 1,
            max_lanes: 3,
            lane_width: (3.0, 3.8),
            max_offset: 4.0,
            max_heading_deg: 8.0,
            max_curvature: 0.004,
            intersection_prob: 0.4,
            max_crossings: 3,
            crossing_depth: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Drift bound on `|Δx|`, `|Δy|`, meters.
    pub drift_xy: f64,
    /// Drift bound on `|Δθ|`, degrees.
    pub drift_deg: f64,
    /// Probability of dropping each HD polyline.
    pub hd_drop: f64,
    /// Keep every n-th centerline point before smoothing.
    pub sd_decimate: usize,
    pub sd_smooth_passes: usize,
    /// Weight of a 3×3 box blur mixed into the satellite render.
    pub sat_blur: f64,
    /// Covered-area target of canopy patches on the satellite render.
    pub sat_occlusion: f64,
    /// Amplitude of the per-pixel texture, in [0, 1] intensity units.
    pub sat_texture: f64,
    pub obs_noise: f64,
    pub obs_occlusion: f64,
    pub obs_blur: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            drift_xy: 2.0,
            drift_deg: 5.0,
            hd_drop: 0.1,
            sd_decimate: 4,
            sd_smooth_passes: 2,
            sat_blur: 0.3,
            sat_occlusion: 0.15,
            sat_texture: 0.08,
            obs_noise: 0.35,
            obs_occlusion: 0.5,
            obs_blur: 0.3,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        NoiseSpec {
            drift_xy: 0.0,
            drift_deg: 0.0,
            hd_drop: 0.0,
            sd_decimate: 1,
            sd_smooth_passes: 0,
            sat_blur: 0.0,
            sat_occlusion: 0.0,
            sat_texture: 0.0,
            obs_noise: 0.0,
            obs_occlusion: 0.0,
            obs_blur: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.hd_drop,
            self.sat_blur,
            self.sat_occlusion,
            self.sat_texture,
            self.obs_occlusion,
            self.obs_blur,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(crate::Error::validation("noise rates must lie in [0, 1]"));
        }
        if self.drift_xy < 0.0 || self.drift_deg < 0.0 || self.obs_noise < 0.0 || self.sd_decimate == 0 {
            return Err(crate::Error::validation("noise bounds must be non-negative and decimation ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub grid: BevGridSpec,
    pub world: WorldSpec,
    pub noise: NoiseSpec,
    pub gt_stroke: usize,
    pub rsd_stroke: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid: BevGridSpec::window(40, 20),
            world: WorldSpec::default(),
            noise: NoiseSpec::default(),
            gt_stroke: 1,
            rsd_stroke: 1,
        }
    }
}

/// Observation channels: one per map class.
pub const OBS_CHANNELS: usize = NUM_MAP_CLASSES;

fn sample_road(rng: &mut ChaCha8Rng, spec: &WorldSpec, axis: Axis, lanes: (usize, usize), offset: f64) -> Road {
    let heading = spec.max_heading_deg.to_radians();
    Road {
        axis,
        offset: rng.gen_range(-offset..=offset),
        slope: rng.gen_range(-heading..=heading).tan(),
        curvature: if axis == Axis::X {
            rng.gen_range(-spec.max_curvature..=spec.max_curvature)
        } else {
            0.0
        },
        lanes: rng.gen_range(lanes.0..=lanes.1),
        lane_width: rng.gen_range(spec.lane_width.0..=spec.lane_width.1),
        sd_class: rng.gen_range(0..SD_CLASSES.len()),
    }
}

/// Splits a dense line into runs where `keep` holds, then clips to the window.
fn pieces(line: &[Point], keep: impl Fn(Point) -> bool) -> Vec<PointArray> {
    let mut runs: Vec<Vec<Point>> = Vec::new();
    let mut cur = Vec::new();
    for &p in line {
        if keep(p) {
            cur.push(p);
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    runs.push(cur);
    let w = Window::ego();
    runs.into_iter()
        .filter(|r| r.len() >= 2)
        .flat_map(|r| clip_polyline(&PointArray(r), &w))
        .collect()
}

/// Deterministic world for `seed`.
pub fn gen_world(seed: u64, spec: &WorldSpec) -> WorldMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let main = sample_road(&mut rng, spec, Axis::X, (spec.min_lanes, spec.max_lanes.max(spec.min_lanes)), spec.max_offset);
    let mut roads = vec![main];
    if rng.gen_bool(spec.intersection_prob.clamp(0.0, 1.0)) {
        roads.push(sample_road(&mut rng, spec, Axis::Y, (1, 2), 15.0));
    }
    let mut lines: Vec<(usize, Vec<PointArray>)> = Vec::new();
    for (ri, road) in roads.iter().enumerate() {
        let others: Vec<&Road> = roads.iter().enumerate().filter(|(j, _)| *j != ri).map(|(_, r)| r).collect();
        let outside = |p: Point| others.iter().all(|o| !o.contains(p));
        let hw = road.half_width();
        for side in [-1.0, 1.0] {
            lines.push((CLASS_BOUNDARY, pieces(&road.offset_line(side * hw), &outside)));
        }
        for lane in 1..road.lanes {
            let delta = -hw + lane as f64 * road.lane_width;
            lines.push((CLASS_DIVIDER, pieces(&road.offset_line(delta), &outside)));
        }
    }

    let mut crossings = Vec::new();
    let n_cross = rng.gen_range(0..=spec.max_crossings);
    let d = spec.crossing_depth;
    for _ in 0..n_cross {
        for _attempt in 0..20 {
            let t = rng.gen_range(-26.0..26.0 - d);
            let clear_of_roads = roads[1..].iter().all(|r| {
                let c = roads[0].lateral_at(t + d / 2.0);
                let cross_center = r.lateral_at(c);
                (t + d / 2.0 - cross_center).abs() > r.half_width() + d + 1.0
            });
            let clear_of_others = crossings.iter().all(|c: &Crossing| (c.start - t).abs() > d + 3.0);
            if clear_of_roads && clear_of_others {
                crossings.push(Crossing {
                    road: 0,
                    start: t,
                    end: t + d,
                });
                break;
            }
        }
    }
    crossings.sort_by(|a, b| a.start.total_cmp(&b.start));
    for c in &crossings {
        let r = &roads[c.road];
        let hw = r.half_width();
        let ring = vec![
            r.point(c.start, r.lateral_at(c.start) - hw),
            r.point(c.end, r.lateral_at(c.end) - hw),
            r.point(c.end, r.lateral_at(c.end) + hw),
            r.point(c.start, r.lateral_at(c.start) + hw),
            r.point(c.start, r.lateral_at(c.start) - hw),
        ];
        lines.push((CLASS_PED, clip_polyline(&PointArray(ring), &Window::ego())));
    }

    let mut elements = Vec::new();
    for (class, ps) in lines {
        for points in ps {
            elements.push(MapElement {
                id: elements.len(),
                class,
                points,
            });
        }
    }
    WorldMap {
        seed,
        roads,
        crossings,
        elements,
    }
}

/// Uniform pose within the drift bounds.
pub fn sample_drift(noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Pose2 {
    let sym = |rng: &mut ChaCha8Rng, b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let dx = sym(rng, noise.drift_xy);
    let dy = sym(rng, noise.drift_xy);
    let dt = sym(rng, noise.drift_deg.to_radians());
    Pose2::new(dx, dy, dt)
}

fn transform(pose: &Pose2, pts: &PointArray) -> PointArray {
    PointArray(pts.points().iter().map(|p| pose.apply_point(*p)).collect())
}

/// Keeps every `n`-th point (plus the last), then moving-average smoothing
/// of interior points.
pub fn coarsen(pts: &PointArray, decimate: usize, passes: usize) -> PointArray {
    let p = pts.points();
    let mut out: Vec<Point> = p.iter().step_by(decimate.max(1)).copied().collect();
    if out.last() != p.last() {
        out.push(*p.last().expect("non-empty polyline"));
    }
    for _ in 0..passes {
        if out.len() < 3 {
            break;
        }
        let prev = out.clone();
        for i in 1..out.len() - 1 {
            for k in 0..2 {
                out[i][k] = (prev[i - 1][k] + 2.0 * prev[i][k] + prev[i + 1][k]) / 4.0;
            }
        }
    }
    PointArray(out)
}

/// Resampled ground-truth instances of a world.
pub fn gt_instances(world: &WorldMap) -> Result<Vec<Instance>> {
    world
        .elements
        .iter()
        .map(|e| {
            Ok(Instance {
                class: e.class,
                points: resample_polyline(&e.points, POINTS_PER_POLYLINE)?.points,
            })
        })
        .collect()
}

/// `3 × H × W` class masks drawn with a `stroke`-pixel brush.
pub fn rasterize_world(world: &WorldMap, grid: &BevGridSpec, stroke: usize) -> Vec<u8> {
    let hw = grid.tokens();
    let mut out = vec![0u8; NUM_MAP_CLASSES * hw];
    for e in &world.elements {
        stroke_polyline(grid, e.points.points(), stroke, |r, c| {
            out[e.class * hw + r * grid.width + c] = 1;
        });
    }
    out
}

/// Union of random rectangles covering at least `rate` of the canvas.
pub fn occlusion_mask(grid: &BevGridSpec, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (grid.height, grid.width);
    let mut mask = vec![false; h * w];
    if rate <= 0.0 {
        return mask;
    }
    let target = (rate * (h * w) as f64).ceil() as usize;
    let mut covered = 0;
    for _ in 0..200 {
        if covered >= target {
            break;
        }
        let rh = rng.gen_range((h / 6).max(1)..=(h / 2).max(1));
        let rw = rng.gen_range((w / 5).max(1)..=(w * 3 / 5).max(1));
        let r0 = rng.gen_range(0..=h - rh);
        let c0 = rng.gen_range(0..=w - rw);
        for r in r0..r0 + rh {
            for c in c0..c0 + rw {
                if !mask[r * w + c] {
                    mask[r * w + c] = true;
                    covered += 1;
                }
            }
        }
    }
    mask
}

/// `(1 − weight)·x + weight·box3(x)` per channel, box clipped at the border.
fn box_blur(data: &mut [f32], channels: usize, grid: &BevGridSpec, weight: f64) {
    if weight <= 0.0 {
        return;
    }
    let (h, w) = (grid.height, grid.width);
    for ch in 0..channels {
        let plane = &mut data[ch * h * w..(ch + 1) * h * w];
        let src = plane.to_vec();
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0f64;
                let mut n = 0.0f64;
                for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                    for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                        s += src[rr * w + cc] as f64;
                        n += 1.0;
                    }
                }
                let v = (1.0 - weight) * src[r * w + c] as f64 + weight * s / n;
                plane[r * w + c] = v as f32;
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Corrupted class maps standing in for a camera BEV encoder, `3 × H × W`.
pub fn render_bev_observation(world: &WorldMap, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let grid = &spec.grid;
    let hw = grid.tokens();
    let mut obs: Vec<f32> = rasterize_world(world, grid, spec.gt_stroke).iter().map(|&v| v as f32).collect();
    box_blur(&mut obs, OBS_CHANNELS, grid, spec.noise.obs_blur);
    if spec.noise.obs_noise > 0.0 {
        for v in obs.iter_mut() {
            *v += (spec.noise.obs_noise * gaussian(rng)) as f32;
        }
    }
    let occ = occlusion_mask(grid, spec.noise.obs_occlusion, rng);
    for ch in 0..OBS_CHANNELS {
        for (i, o) in occ.iter().enumerate() {
            if *o {
                obs[ch * hw + i] = 0.0;
            }
        }
    }
    obs
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn near_class(world: &WorldMap, class: usize, p: Point, radius: f64) -> bool {
    world
        .elements_of(class)
        .any(|e| e.points.points().windows(2).any(|s| distance_to_segment(p, s[0], s[1]) <= radius))
}

const GRASS: [f64; 3] = [0.36, 0.43, 0.27];
const ASPHALT: [f64; 3] = [0.42, 0.42, 0.44];
const CURB: [f64; 3] = [0.66, 0.66, 0.62];
const PAINT: [f64; 3] = [0.88, 0.88, 0.80];
const CANOPY: [f64; 3] = [0.16, 0.27, 0.14];

/// Textured top-down render of the world as seen through `drift`.
pub fn render_satellite(world: &WorldMap, spec: &SynthSpec, drift: &Pose2, rng: &mut ChaCha8Rng) -> RasterPrior {
    let grid = &spec.grid;
    let (h, w) = (grid.height, grid.width);
    let inv = drift.inverse();
    let radius = 0.5 * grid.mpp_x.max(grid.mpp_y);
    let mut img = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let (x, y) = grid.pixel_to_ego(r as f64, c as f64);
            let q = inv.apply_point([x, y]);
            let color = if near_class(world, CLASS_BOUNDARY, q, radius) {
                CURB
            } else if world.on_crossing(q) || near_class(world, CLASS_DIVIDER, q, radius) {
                PAINT
            } else if world.on_road(q) {
                ASPHALT
            } else {
                GRASS
            };
            for k in 0..3 {
                img[k * h * w + r * w + c] = color[k] as f32;
            }
        }
    }
    let occ = occlusion_mask(grid, spec.noise.sat_occlusion, rng);
    for (i, o) in occ.iter().enumerate() {
        if *o {
            for k in 0..3 {
                img[k * h * w + i] = CANOPY[k] as f32;
            }
        }
    }
    box_blur(&mut img, 3, grid, spec.noise.sat_blur);
    let mut out = RasterPrior::filled(grid, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let tex = if spec.noise.sat_texture > 0.0 {
                rng.gen_range(-spec.noise.sat_texture..=spec.noise.sat_texture)
            } else {
                0.0
            };
            let mut px = [0u8; 3];
            for k in 0..3 {
                let v = img[k * h * w + r * w + c] as f64 + tex;
                px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            out.set_pixel(r, c, px);
        }
    }
    out
}

/// All four priors for one frame. Presence is all-ones; dropout and forced
/// subsets act later on the mask.
pub fn derive_priors(world: &WorldMap, spec: &SynthSpec, rng: &mut ChaCha8Rng, frame_id: u64) -> Result<PriorBundle> {
    let noise = &spec.noise;
    let mut bundle = PriorBundle::empty(frame_id, spec.grid);

    let hd_drift = sample_drift(noise, rng);
    for e in world.elements_of(CLASS_BOUNDARY) {
        if noise.hd_drop > 0.0 && rng.gen_bool(noise.hd_drop) {
            continue;
        }
        let rs = resample_polyline(&e.points, POINTS_PER_POLYLINE)?;
        bundle.hd.push(transform(&hd_drift, &rs.points), HD_BOUNDARY_CATEGORY, rs.degenerate);
    }

    let sd_drift = sample_drift(noise, rng);
    let w = Window::ego();
    for road in &world.roads {
        for piece in clip_polyline(&PointArray(road.offset_line(0.0)), &w) {
            let coarse = coarsen(&piece, noise.sd_decimate, noise.sd_smooth_passes);
            let rs = resample_polyline(&coarse, POINTS_PER_POLYLINE)?;
            bundle.sd.push(transform(&sd_drift, &rs.points), road.sd_class, rs.degenerate);
        }
    }

    let sat_drift = sample_drift(noise, rng);
    bundle.sat = Some(render_satellite(world, spec, &sat_drift, rng));
    bundle.rsd = Some(rasterize_sd(&bundle.sd, &Palette::default(), &spec.grid, spec.rsd_stroke));

    bundle.drift.insert(Source::Hd, hd_drift);
    bundle.drift.insert(Source::Sd, sd_drift);
    bundle.drift.insert(Source::Sat, sat_drift);
    bundle.drift.insert(Source::Rsd, sd_drift);
    if bundle.hd.degenerate.iter().chain(&bundle.sd.degenerate).any(|d| *d) {
        bundle.flags.push("degenerate_polyline".into());
    }
    bundle.presence = PresenceMask::ALL;
    Ok(bundle)
}

/// Per-frame generator: `ChaCha8(seed)` on stream `frame_id`, so frames can
/// be produced in any order or in parallel with identical results.
pub fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

pub fn generate_sample(seed: u64, frame_id: u64, spec: &SynthSpec) -> Result<Sample> {
    spec.grid.validate()?;
    spec.noise.validate()?;
    let mut rng = frame_rng(seed, frame_id);
    let world = gen_world(rng.gen(), &spec.world);
    let bundle = derive_priors(&world, spec, &mut rng, frame_id)?;
    let observation = render_bev_observation(&world, spec, &mut rng);
    Ok(Sample {
        gt_raster: rasterize_world(&world, &spec.grid, spec.gt_stroke),
        gt_instances: gt_instances(&world)?,
        bundle,
        world: Some(world),
        observation,
    })
}

pub fn generate_dataset(seed: u64, frames: usize, spec: &SynthSpec) -> Result<Vec<Sample>> {
    (0..frames as u64).map(|i| generate_sample(seed, i, spec)).collect()
}

/// One SourceDropout draw: per family, with probability `p`, one of the two
/// sources is chosen uniformly and masked. A family never loses both.
pub fn source_dropout(presence: PresenceMask, p: f64, rng: &mut impl Rng) -> (PresenceMask, [Option<Source>; 2]) {
    let mut out = presence;
    let mut dropped = [None, None];
    for (slot, fam) in [crate::conventions::Family::Vector, crate::conventions::Family::Raster]
        .into_iter()
        .enumerate()
    {
        if rng.gen_bool(p) {
            let pair = fam.sources();
            let pick = rng.gen_range(0..2);
            let (victim, other) = (pair[pick], pair[1 - pick]);
            if out.get(victim) && out.get(other) {
                out.set(victim, false);
                dropped[slot] = Some(victim);
            }
        }
    }
    (out, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::polyline_length;

    #[test]
    fn world_is_deterministic() {
        let s = WorldSpec::default();
        assert_eq!(gen_world(17, &s), gen_world(17, &s));
    }

    #[test]
    fn elements_stay_inside_extent() {
        let s = WorldSpec::default();
        let w = Window::ego();
        for seed in 0..100 {
            for e in gen_world(seed, &s).elements {
                assert!(e.points.points().iter().all(|p| {
                    p[0] >= w.x0 - 1e-9 && p[0] <= w.x1 + 1e-9 && p[1] >= w.y0 - 1e-9 && p[1] <= w.y1 + 1e-9
                }));
                assert!(polyline_length(e.points.points()) > 0.0);
            }
        }
    }

    #[test]
    fn zero_crossings_spec_has_no_ped_elements() {
        let s = WorldSpec {
            max_crossings: 0,
            ..Default::default()
        };
        for seed in 0..30 {
            assert_eq!(gen_world(seed, &s).elements_of(CLASS_PED).count(), 0);
        }
    }

    #[test]
    fn every_world_has_boundaries() {
        for seed in 0..50 {
            assert!(gen_world(seed, &WorldSpec::default()).elements_of(CLASS_BOUNDARY).count() >= 2);
        }
    }

    fn zero_spec() -> SynthSpec {
        SynthSpec {
            noise: NoiseSpec::zero(),
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_hd_matches_world_boundaries() {
        let spec = zero_spec();
        let s = generate_sample(3, 0, &spec).unwrap();
        let gt: Vec<&Instance> = s.gt_instances.iter().filter(|i| i.class == CLASS_BOUNDARY).collect();
        assert_eq!(gt.len(), s.bundle.hd.len());
        for (g, h) in gt.iter().zip(&s.bundle.hd.polylines) {
            let cd = crate::metrics::chamfer_distance(&g.points, h).unwrap();
            assert!(cd < 0.1, "{cd}");
        }
    }

    #[test]
    fn hd_drift_translation_displaces_by_one_meter() {
        let world = gen_world(5, &WorldSpec::default());
        let drift = Pose2::new(1.0, 0.0, 0.0);
        let mut total = 0.0;
        let mut n = 0.0;
        for e in world.elements_of(CLASS_BOUNDARY) {
            let rs = resample_polyline(&e.points, POINTS_PER_POLYLINE).unwrap().points;
            let moved = transform(&drift, &rs);
            for (a, b) in rs.points().iter().zip(moved.points()) {
                total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                n += 1.0;
            }
        }
        assert!((total / n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rsd_colors_come_from_palette() {
        let spec = SynthSpec::default();
        let palette = Palette::default();
        for f in 0..5 {
            let s = generate_sample(1, f, &spec).unwrap();
            let r = s.bundle.rsd.unwrap();
            for px in r.data.chunks(3) {
                let px = [px[0], px[1], px[2]];
                assert!(px == palette.background || palette.colors.contains(&px));
            }
        }
    }

    #[test]
    fn noiseless_observation_equals_gt() {
        let spec = zero_spec();
        let s = generate_sample(11, 2, &spec).unwrap();
        let gt: Vec<f32> = s.gt_raster.iter().map(|&v| v as f32).collect();
        assert_eq!(s.observation, gt);
    }

    #[test]
    fn occlusion_rate_half_hides_foreground() {
        let spec = SynthSpec {
            noise: NoiseSpec {
                obs_occlusion: 0.5,
                ..NoiseSpec::zero()
            },
            ..Default::default()
        };
        let mut hidden = 0.0;
        let mut fg = 0.0;
        for f in 0..100 {
            let s = generate_sample(2, f, &spec).unwrap();
            for (g, o) in s.gt_raster.iter().zip(&s.observation) {
                if *g == 1 {
                    fg += 1.0;
                    if *o == 0.0 {
                        hidden += 1.0;
                    }
                }
            }
        }
        assert!(hidden / fg >= 0.3, "{}", hidden / fg);
    }

    #[test]
    fn samples_are_deterministic_and_order_free() {
        let spec = SynthSpec::default();
        let a = generate_sample(9, 4, &spec).unwrap();
        let _ = generate_sample(9, 3, &spec).unwrap();
        let b = generate_sample(9, 4, &spec).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.observation, b.observation);
    }

    #[test]
    fn drift_within_bounds() {
        let noise = NoiseSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let p = sample_drift(&noise, &mut rng);
            assert!(p.dx.abs() <= 2.0 && p.dy.abs() <= 2.0 && p.dtheta.abs() <= 5f64.to_radians() + 1e-15);
        }
    }

    #[test]
    fn dropout_flips_exactly_one_bit_per_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let (m, dropped) = source_dropout(PresenceMask::ALL, 0.3, &mut rng);
            let vec_lost = [Source::Hd, Source::Sd].iter().filter(|s| !m.get(**s)).count();
            let ras_lost = [Source::Sat, Source::Rsd].iter().filter(|s| !m.get(**s)).count();
            assert_eq!(vec_lost, dropped[0].is_some() as usize);
            assert_eq!(ras_lost, dropped[1].is_some() as usize);
        }
    }

    #[test]
    fn dropout_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| source_dropout(PresenceMask::ALL, 0.3, &mut rng).0).collect::<Vec<_>>()
        };
        assert_eq!(draw(8), draw(8));
    }
}
