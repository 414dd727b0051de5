//! Real-data path: ego projection and cropping, slippy-map tile math, SD
//! rasterization with a fixed palette, tile clients and the on-disk bundle
//! format.
//!
//! A bundle is one directory per frame:
//!
//! ```text
//! meta.json      frame id, ego pose, presence, grid, drift, flags
//! hd.jsonl       one polyline record per line
//! sd.jsonl
//! sat.png        lossless RGB, present only if the source is available
//! sd_raster.png
//! gt.jsonl       ground-truth instances (synthetic frames only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::conventions::{Source, POINTS_PER_POLYLINE, SD_CLASSES};
use crate::data::{Instance, PolylineSet, PresenceMask, PriorBundle, RasterPrior};
use crate::geometry::{clip_polyline, resample_polyline, stroke_polyline, BevGridSpec, PointArray, Pose2, Window};
use crate::{Error, Result};

/// Web-Mercator latitude limit, degrees.
pub const MAX_MERCATOR_LAT: f64 = 85.0511;
/// Equatorial ground resolution of zoom 0 with 256-pixel tiles, m/px.
pub const ZOOM0_RESOLUTION: f64 = 156_543.033_92;
pub const TILE_SIZE: u32 = 256;
/// Environment variable holding the live tile API token.
pub const TILE_TOKEN_ENV: &str = "UMPE_TILE_TOKEN";

/// Ego pose: geodetic position for tile lookup plus its local Cartesian
/// position (east, north) and heading from east, counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub lon: f64,
    pub lat: f64,
    pub yaw: f64,
    pub x: f64,
    pub y: f64,
}

impl EgoPose {
    pub fn validate(&self) -> Result<()> {
        if !(self.lon.is_finite() && self.lat.is_finite() && self.yaw.is_finite() && self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::validation("ego pose has non-finite fields"));
        }
        if self.lat.abs() > MAX_MERCATOR_LAT {
            return Err(Error::validation(format!("latitude {} outside the Web-Mercator range", self.lat)));
        }
        Ok(())
    }

    /// Local-frame → ego-frame transform (inverse of the ego pose).
    pub fn to_ego(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw).inverse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRef {
    pub z: u32,
    pub x: u32,
    pub y: u32,
}

fn check_lat(lat: f64) -> Result<()> {
    if !lat.is_finite() || lat.abs() > MAX_MERCATOR_LAT {
        return Err(Error::validation(format!("latitude {lat} outside the Web-Mercator range")));
    }
    Ok(())
}

/// Fractional global tile coordinates.
pub fn lonlat_to_tile_f(lon: f64, lat: f64, z: u32) -> Result<(f64, f64)> {
    check_lat(lat)?;
    let n = 2f64.powi(z as i32);
    let phi = lat.to_radians();
    let x = (lon + 180.0) / 360.0 * n;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / std::f64::consts::PI) / 2.0 * n;
    Ok((x, y))
}

pub fn lonlat_to_tile(lon: f64, lat: f64, z: u32) -> Result<TileRef> {
    let (x, y) = lonlat_to_tile_f(lon, lat, z)?;
    let max = (1u64 << z) as f64 - 1.0;
    Ok(TileRef {
        z,
        x: x.floor().clamp(0.0, max) as u32,
        y: y.floor().clamp(0.0, max) as u32,
    })
}

/// Geodetic center of a tile.
pub fn tile_center(t: TileRef) -> (f64, f64) {
    let n = 2f64.powi(t.z as i32);
    let lon = (t.x as f64 + 0.5) / n * 360.0 - 180.0;
    let m = std::f64::consts::PI * (1.0 - 2.0 * (t.y as f64 + 0.5) / n);
    (lon, m.sinh().atan().to_degrees())
}

/// Ground meters per tile pixel at `lat`.
pub fn ground_resolution(lat: f64, z: u32) -> f64 {
    ZOOM0_RESOLUTION * lat.to_radians().cos() / 2f64.powi(z as i32)
}

/// Smallest zoom whose ground resolution does not exceed `mpp`.
pub fn select_zoom(lat: f64, mpp: f64, max_zoom: u32) -> Result<u32> {
    check_lat(lat)?;
    (0..=max_zoom)
        .find(|&z| ground_resolution(lat, z) <= mpp)
        .ok_or_else(|| Error::validation(format!("no zoom ≤ {max_zoom} reaches {mpp} m/px")))
}

/// Transforms local-frame polylines into the ego frame, clips them to the
/// 60 m × 30 m window and resamples every surviving piece.
pub fn crop_ego_window(polylines: &[(PointArray, usize)], ego: &EgoPose) -> Result<PolylineSet> {
    ego.validate()?;
    let t = ego.to_ego();
    let w = Window::ego();
    let mut set = PolylineSet::default();
    for (pl, cat) in polylines {
        if !pl.is_finite() {
            return Err(Error::validation("polyline has non-finite coordinates"));
        }
        let local = PointArray(pl.points().iter().map(|p| t.apply_point(*p)).collect());
        for piece in clip_polyline(&local, &w) {
            let rs = resample_polyline(&piece, POINTS_PER_POLYLINE)?;
            set.push(rs.points, *cat, rs.degenerate);
        }
    }
    Ok(set)
}

/// Fixed SD colors indexed by class. Classes are drawn in ascending index
/// order, so higher indices overdraw lower ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub background: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            colors: vec![
                [230, 25, 75],
                [245, 130, 48],
                [255, 225, 25],
                [60, 180, 75],
                [70, 240, 240],
                [0, 130, 200],
                [145, 30, 180],
                [240, 50, 230],
            ],
            background: [0, 0, 0],
        }
    }
}

impl Palette {
    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != SD_CLASSES.len() {
            return Err(Error::Config(format!("palette needs {} colors", SD_CLASSES.len())));
        }
        for (i, a) in self.colors.iter().enumerate() {
            if *a == self.background || self.colors[i + 1..].contains(a) {
                return Err(Error::Config("palette colors must be pairwise distinct and differ from the background".into()));
            }
        }
        Ok(())
    }
}

/// Strokes every SD polyline onto a background canvas in class order.
pub fn rasterize_sd(sd: &PolylineSet, palette: &Palette, grid: &BevGridSpec, stroke_px: usize) -> RasterPrior {
    let mut out = RasterPrior::filled(grid, palette.background);
    let mut order: Vec<usize> = (0..sd.len()).collect();
    order.sort_by_key(|&i| sd.categories[i]);
    for i in order {
        let color = palette.colors[sd.categories[i] % palette.colors.len()];
        stroke_polyline(grid, sd.polylines[i].points(), stroke_px, |r, c| out.set_pixel(r, c, color));
    }
    out
}

/// Source of map tiles. `Ok(None)` means the tile does not exist.
pub trait TileClient: Sync {
    fn get(&self, tile: TileRef) -> Result<Option<RgbImage>>;
}

/// Plays back tiles stored as `root/z/x/y.png`.
#[derive(Clone, Debug)]
pub struct FixtureTileClient {
    pub root: PathBuf,
}

impl FixtureTileClient {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureTileClient { root: root.into() }
    }

    pub fn path(&self, t: TileRef) -> PathBuf {
        self.root.join(t.z.to_string()).join(t.x.to_string()).join(format!("{}.png", t.y))
    }
}

impl TileClient for FixtureTileClient {
    fn get(&self, tile: TileRef) -> Result<Option<RgbImage>> {
        let p = self.path(tile);
        if !p.exists() {
            return Ok(None);
        }
        let img = image::open(&p)?;
        Ok(Some(img.to_rgb8()))
    }
}

/// HTTP tile client. The URL template contains `{z}`, `{x}`, `{y}` and
/// `{token}`; the token comes from [`TILE_TOKEN_ENV`].
#[cfg(feature = "live")]
#[derive(Clone, Debug)]
pub struct LiveTileClient {
    pub template: String,
    token: String,
    pub retries: usize,
}

#[cfg(feature = "live")]
impl LiveTileClient {
    pub fn from_env(template: &str, retries: usize) -> Result<Self> {
        let token = std::env::var(TILE_TOKEN_ENV)
            .map_err(|_| Error::LiveUnavailable(format!("set {TILE_TOKEN_ENV} to use live tiles")))?;
        Ok(LiveTileClient {
            template: template.to_string(),
            token,
            retries,
        })
    }
}

#[cfg(feature = "live")]
impl TileClient for LiveTileClient {
    fn get(&self, t: TileRef) -> Result<Option<RgbImage>> {
        let url = self
            .template
            .replace("{z}", &t.z.to_string())
            .replace("{x}", &t.x.to_string())
            .replace("{y}", &t.y.to_string())
            .replace("{token}", &self.token);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match ureq::get(&url).call() {
                Ok(resp) => {
                    let mut buf = Vec::new();
                    std::io::Read::read_to_end(&mut resp.into_reader(), &mut buf)
                        .map_err(|e| Error::io(url.clone(), e))?;
                    let img = image::load_from_memory(&buf)?;
                    return Ok(Some(img.to_rgb8()));
                }
                Err(ureq::Error::Status(404, _)) => return Ok(None),
                Err(e) => {
                    last = e.to_string();
                    log::warn!("tile {t:?} attempt {attempt} failed: {last}");
                    std::thread::sleep(std::time::Duration::from_millis(200 << attempt.min(4)));
                }
            }
        }
        Err(Error::Network {
            tile: format!("{}/{}/{}", t.z, t.x, t.y),
            attempts: self.retries + 1,
            message: last,
        })
    }
}

/// Output of [`fetch_tiles`].
#[derive(Clone, Debug, PartialEq)]
pub struct TileMosaic {
    pub raster: RasterPrior,
    pub missing: Vec<TileRef>,
}

/// Samples the covering tiles onto the BEV canvas: every canvas pixel is
/// mapped through the ego yaw to a global tile pixel and read with nearest
/// neighbor. Missing tiles leave `background`. Tiles are fetched with at most
/// `parallel` concurrent requests; the result does not depend on completion
/// order.
pub fn fetch_tiles(
    ego: &EgoPose,
    z: u32,
    client: &dyn TileClient,
    grid: &BevGridSpec,
    background: [u8; 3],
    parallel: usize,
) -> Result<TileMosaic> {
    ego.validate()?;
    let (tx, ty) = lonlat_to_tile_f(ego.lon, ego.lat, z)?;
    let ts = TILE_SIZE as f64;
    let (gx, gy) = (tx * ts, ty * ts);
    let res = ground_resolution(ego.lat, z);
    let (s, c) = ego.yaw.sin_cos();
    let mut coords = Vec::with_capacity(grid.tokens());
    for r in 0..grid.height {
        for col in 0..grid.width {
            let (x, y) = grid.pixel_to_ego(r as f64, col as f64);
            let east = c * x - s * y;
            let north = s * x + c * y;
            coords.push((gx + east / res, gy - north / res));
        }
    }
    let n = 1u64 << z;
    let mut needed: Vec<TileRef> = coords
        .iter()
        .filter_map(|&(px, py)| {
            let (ix, iy) = ((px / ts).floor(), (py / ts).floor());
            (ix >= 0.0 && iy >= 0.0 && (ix as u64) < n && (iy as u64) < n).then(|| TileRef {
                z,
                x: ix as u32,
                y: iy as u32,
            })
        })
        .collect();
    needed.sort();
    needed.dedup();

    let mut tiles: BTreeMap<TileRef, Option<RgbImage>> = BTreeMap::new();
    for chunk in needed.chunks(parallel.max(1)) {
        let results: Vec<(TileRef, Result<Option<RgbImage>>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&t| (t, scope.spawn(move || client.get(t)))).collect();
            handles
                .into_iter()
                .map(|(t, h)| (t, h.join().unwrap_or_else(|_| Err(Error::validation("tile worker panicked")))))
                .collect()
        });
        for (t, r) in results {
            tiles.insert(t, r?);
        }
    }

    let mut raster = RasterPrior::filled(grid, background);
    for (i, &(px, py)) in coords.iter().enumerate() {
        let (ix, iy) = ((px / ts).floor(), (py / ts).floor());
        if ix < 0.0 || iy < 0.0 {
            continue;
        }
        let t = TileRef {
            z,
            x: ix as u32,
            y: iy as u32,
        };
        if let Some(Some(img)) = tiles.get(&t) {
            let u = ((px - ix * ts).floor() as u32).min(img.width() - 1);
            let v = ((py - iy * ts).floor() as u32).min(img.height() - 1);
            let p = img.get_pixel(u, v).0;
            raster.set_pixel(i / grid.width, i % grid.width, p);
        }
    }
    let missing = tiles.iter().filter(|(_, v)| v.is_none()).map(|(k, _)| *k).collect();
    Ok(TileMosaic { raster, missing })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PresenceRecord {
    hd: bool,
    sd: bool,
    sat: bool,
    rsd: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    frame_id: u64,
    ego: Option<EgoPose>,
    presence: PresenceRecord,
    grid: BevGridSpec,
    #[serde(default)]
    drift: BTreeMap<String, Pose2>,
    #[serde(default)]
    flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolylineRecord {
    id: usize,
    category: usize,
    points: PointArray,
    source: String,
    #[serde(default)]
    degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InstanceRecord {
    id: usize,
    class: usize,
    points: PointArray,
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub(crate) fn write_png(path: &Path, r: &RasterPrior) -> Result<()> {
    let img = RgbImage::from_raw(r.width as u32, r.height as u32, r.data.clone())
        .ok_or_else(|| Error::validation("raster buffer does not match its dimensions"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub(crate) fn read_png(path: &Path, grid: &BevGridSpec) -> Result<RasterPrior> {
    let img = image::open(path)?.to_rgb8();
    let r = RasterPrior {
        height: img.height() as usize,
        width: img.width() as usize,
        mpp_x: grid.mpp_x,
        mpp_y: grid.mpp_y,
        data: img.into_raw(),
    };
    if !r.matches(grid) {
        return Err(Error::validation(format!("{} does not match the bundle grid", path.display())));
    }
    Ok(r)
}

fn polyline_records(set: &PolylineSet, source: Source) -> Vec<PolylineRecord> {
    (0..set.len())
        .map(|i| PolylineRecord {
            id: i,
            category: set.categories[i],
            points: set.polylines[i].clone(),
            source: source.name().to_string(),
            degenerate: set.degenerate.get(i).copied().unwrap_or(false),
        })
        .collect()
}

fn polyline_set(records: Vec<PolylineRecord>) -> PolylineSet {
    let mut set = PolylineSet::default();
    for r in records {
        set.push(r.points, r.category, r.degenerate);
    }
    set
}

/// Writes one frame directory. Existing files are replaced.
pub fn write_bundle(dir: &Path, bundle: &PriorBundle, gt: Option<&[Instance]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = &bundle.presence;
    let meta = BundleMeta {
        frame_id: bundle.frame_id,
        ego: bundle.ego,
        presence: PresenceRecord {
            hd: p.get(Source::Hd),
            sd: p.get(Source::Sd),
            sat: p.get(Source::Sat) && bundle.sat.is_some(),
            rsd: p.get(Source::Rsd) && bundle.rsd.is_some(),
        },
        grid: bundle.grid,
        drift: bundle.drift.iter().map(|(k, v)| (k.name().to_string(), *v)).collect(),
        flags: bundle.flags.clone(),
    };
    write_text(&dir.join("meta.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    write_jsonl(&dir.join("hd.jsonl"), &polyline_records(&bundle.hd, Source::Hd))?;
    write_jsonl(&dir.join("sd.jsonl"), &polyline_records(&bundle.sd, Source::Sd))?;
    for (name, r) in [("sat.png", &bundle.sat), ("sd_raster.png", &bundle.rsd)] {
        let path = dir.join(name);
        match r {
            Some(r) => write_png(&path, r)?,
            None if path.exists() => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
            None => {}
        }
    }
    if let Some(gt) = gt {
        let recs: Vec<InstanceRecord> = gt
            .iter()
            .enumerate()
            .map(|(id, g)| InstanceRecord {
                id,
                class: g.class,
                points: g.points.clone(),
            })
            .collect();
        write_jsonl(&dir.join("gt.jsonl"), &recs)?;
    }
    Ok(())
}

/// Reads a frame directory written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<(PriorBundle, Option<Vec<Instance>>)> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    meta.grid.validate()?;
    let hd = polyline_set(read_jsonl(&dir.join("hd.jsonl"))?);
    let sd = polyline_set(read_jsonl(&dir.join("sd.jsonl"))?);
    let raster = |name: &str| -> Result<Option<RasterPrior>> {
        let p = dir.join(name);
        if p.exists() {
            read_png(&p, &meta.grid).map(Some)
        } else {
            Ok(None)
        }
    };
    let sat = raster("sat.png")?;
    let rsd = raster("sd_raster.png")?;
    let mut presence = PresenceMask::NONE;
    presence.set(Source::Hd, meta.presence.hd);
    presence.set(Source::Sd, meta.presence.sd);
    presence.set(Source::Sat, meta.presence.sat && sat.is_some());
    presence.set(Source::Rsd, meta.presence.rsd && rsd.is_some());
    let mut drift = BTreeMap::new();
    for (k, v) in meta.drift {
        drift.insert(k.parse::<Source>()?, v);
    }
    let gt_path = dir.join("gt.jsonl");
    let gt = if gt_path.exists() {
        let recs: Vec<InstanceRecord> = read_jsonl(&gt_path)?;
        Some(
            recs.into_iter()
                .map(|r| Instance {
                    class: r.class,
                    points: r.points,
                })
                .collect(),
        )
    } else {
        None
    };
    Ok((
        PriorBundle {
            frame_id: meta.frame_id,
            hd,
            sd,
            sat,
            rsd,
            presence,
            drift,
            ego: meta.ego,
            grid: meta.grid,
            flags: meta.flags,
        },
        gt,
    ))
}

/// A fixture frame for `ingest`: ego pose plus local-frame polylines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureFrame {
    pub frame_id: u64,
    pub ego: EgoPose,
    /// Local-frame HD boundaries.
    #[serde(default)]
    pub hd: Vec<PointArray>,
    /// Local-frame SD centerlines with class names from the SD vocabulary.
    #[serde(default)]
    pub sd: Vec<(String, PointArray)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub grid: BevGridSpec,
    pub palette: Palette,
    pub stroke_px: usize,
    pub max_zoom: u32,
    pub parallel: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            grid: BevGridSpec::window(40, 20),
            palette: Palette::default(),
            stroke_px: 1,
            max_zoom: 19,
            parallel: 4,
        }
    }
}

/// Builds a bundle from a fixture frame and a tile client.
pub fn ingest_frame(frame: &FixtureFrame, client: Option<&dyn TileClient>, opts: &IngestOptions) -> Result<PriorBundle> {
    let mut bundle = PriorBundle::empty(frame.frame_id, opts.grid);
    bundle.ego = Some(frame.ego);
    let hd: Vec<(PointArray, usize)> = frame
        .hd
        .iter()
        .map(|p| (p.clone(), crate::conventions::HD_BOUNDARY_CATEGORY))
        .collect();
    bundle.hd = crop_ego_window(&hd, &frame.ego)?;
    let mut sd = Vec::new();
    for (class, p) in &frame.sd {
        let idx = SD_CLASSES
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::validation(format!("unknown SD class `{class}`")))?;
        sd.push((p.clone(), idx));
    }
    bundle.sd = crop_ego_window(&sd, &frame.ego)?;
    bundle.presence.set(Source::Hd, true);
    bundle.presence.set(Source::Sd, true);
    bundle.rsd = Some(rasterize_sd(&bundle.sd, &opts.palette, &opts.grid, opts.stroke_px));
    bundle.presence.set(Source::Rsd, true);
    if let Some(client) = client {
        let z = select_zoom(frame.ego.lat, opts.grid.mpp_x.min(opts.grid.mpp_y), opts.max_zoom)?;
        let mosaic = fetch_tiles(&frame.ego, z, client, &opts.grid, [0, 0, 0], opts.parallel)?;
        if !mosaic.missing.is_empty() {
            bundle.flags.push(format!("missing_tiles:{}", mosaic.missing.len()));
        }
        bundle.sat = Some(mosaic.raster);
        bundle.presence.set(Source::Sat, true);
    }
    if bundle.hd.degenerate.iter().chain(&bundle.sd.degenerate).any(|d| *d) {
        bundle.flags.push("degenerate_polyline".into());
    }
    Ok(bundle)
}
