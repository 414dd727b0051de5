//! Prior carriers shared by the synthetic generator, the ingestion path and
//! the encoders, plus batch collation into tensors.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conventions::{Source, NUM_MAP_CLASSES, POINTS_PER_POLYLINE};
use crate::geometry::{BevGridSpec, PointArray, Pose2};
use crate::ingest::EgoPose;
use crate::synth::WorldMap;
use crate::{Error, Result};

/// Fixed-length polylines of one vector source.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolylineSet {
    pub polylines: Vec<PointArray>,
    /// Category index per polyline into the unified vocabulary.
    pub categories: Vec<usize>,
    /// Set for polylines that were degenerate before resampling.
    #[serde(default)]
    pub degenerate: Vec<bool>,
}

impl PolylineSet {
    pub fn len(&self) -> usize {
        self.polylines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polylines.is_empty()
    }

    pub fn push(&mut self, pl: PointArray, category: usize, degenerate: bool) {
        self.polylines.push(pl);
        self.categories.push(category);
        self.degenerate.push(degenerate);
    }

    pub fn validate(&self, points: usize, num_categories: usize) -> Result<()> {
        if self.polylines.len() != self.categories.len() {
            return Err(Error::validation("polyline/category count mismatch"));
        }
        for (pl, &cat) in self.polylines.iter().zip(&self.categories) {
            if pl.len() != points {
                return Err(Error::validation(format!(
                    "polyline has {} points, expected {points}",
                    pl.len()
                )));
            }
            if cat >= num_categories {
                return Err(Error::validation(format!("category {cat} outside vocabulary")));
            }
        }
        Ok(())
    }

    pub fn one_hot(&self, i: usize, num_categories: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_categories];
        v[self.categories[i]] = 1.0;
        v
    }
}

/// An 8-bit RGB raster prior on the BEV canvas (row-major, channels last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterPrior {
    pub height: usize,
    pub width: usize,
    pub mpp_x: f64,
    pub mpp_y: f64,
    pub data: Vec<u8>,
}

impl RasterPrior {
    pub fn filled(grid: &BevGridSpec, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(grid.tokens() * 3);
        for _ in 0..grid.tokens() {
            data.extend_from_slice(&rgb);
        }
        RasterPrior {
            height: grid.height,
            width: grid.width,
            mpp_x: grid.mpp_x,
            mpp_y: grid.mpp_y,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn matches(&self, grid: &BevGridSpec) -> bool {
        self.height == grid.height && self.width == grid.width && self.data.len() == grid.tokens() * 3
    }

    /// Channels-first values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0f32; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                out[ch * hw + p] = self.data[p * 3 + ch] as f32 / 255.0;
            }
        }
        out
    }
}

/// Per-source availability flags in [`Source`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresenceMask(pub [bool; 4]);

impl PresenceMask {
    pub const ALL: PresenceMask = PresenceMask([true; 4]);
    pub const NONE: PresenceMask = PresenceMask([false; 4]);

    pub fn get(&self, s: Source) -> bool {
        self.0[s.index()]
    }

    pub fn set(&mut self, s: Source, v: bool) {
        self.0[s.index()] = v;
    }

    pub fn and(&self, other: &PresenceMask) -> PresenceMask {
        let mut out = *self;
        for i in 0..4 {
            out.0[i] &= other.0[i];
        }
        out
    }

    pub fn from_sources(sources: &[Source]) -> Self {
        let mut m = PresenceMask::NONE;
        for &s in sources {
            m.set(s, true);
        }
        m
    }

    /// Compact label such as `hd+sat`, `none` for the empty mask.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = Source::ALL.iter().filter(|s| self.get(**s)).map(|s| s.name()).collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let label = label.trim();
        if label.is_empty() || label == "none" {
            return Ok(PresenceMask::NONE);
        }
        if label == "all" {
            return Ok(PresenceMask::ALL);
        }
        let mut m = PresenceMask::NONE;
        for part in label.split(['+', ',']) {
            m.set(part.parse()?, true);
        }
        Ok(m)
    }

    /// All 16 patterns, the empty baseline first.
    pub fn powerset() -> Vec<PresenceMask> {
        (0u8..16)
            .map(|bits| PresenceMask([bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0]))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

/// One frame's full prior set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBundle {
    pub frame_id: u64,
    pub hd: PolylineSet,
    pub sd: PolylineSet,
    pub sat: Option<RasterPrior>,
    pub rsd: Option<RasterPrior>,
    pub presence: PresenceMask,
    /// Injected misalignment per source (synthetic data only).
    pub drift: BTreeMap<Source, Pose2>,
    pub ego: Option<EgoPose>,
    pub grid: BevGridSpec,
    /// Diagnostics such as degenerate polylines or missing tiles.
    #[serde(default)]
    pub flags: Vec<String>,
}

impl PriorBundle {
    pub fn empty(frame_id: u64, grid: BevGridSpec) -> Self {
        PriorBundle {
            frame_id,
            hd: PolylineSet::default(),
            sd: PolylineSet::default(),
            sat: None,
            rsd: None,
            presence: PresenceMask::NONE,
            drift: BTreeMap::new(),
            ego: None,
            grid,
            flags: Vec::new(),
        }
    }

    pub fn polylines(&self, s: Source) -> &PolylineSet {
        match s {
            Source::Sd => &self.sd,
            _ => &self.hd,
        }
    }

    pub fn raster(&self, s: Source) -> Option<&RasterPrior> {
        match s {
            Source::Rsd => self.rsd.as_ref(),
            _ => self.sat.as_ref(),
        }
    }
}

/// A vector map instance used for supervision and Chamfer AP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    pub points: PointArray,
}

/// A training or evaluation frame: priors plus ground truth and the
/// corrupted BEV observation.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bundle: PriorBundle,
    /// Generator world; absent for frames loaded from disk.
    pub world: Option<WorldMap>,
    /// `C_obs × H × W` observation maps.
    pub observation: Vec<f32>,
    /// `3 × H × W` ground-truth class masks.
    pub gt_raster: Vec<u8>,
    pub gt_instances: Vec<Instance>,
}

/// Tensors for one vector source across a batch. `points` is `None` when no
/// frame contributes a polyline.
#[derive(Clone, Debug)]
pub struct VectorSourceBatch {
    /// `(B, N, P, 2)`.
    pub points: Option<Tensor>,
    /// `(B, N, K_cat)`.
    pub categories: Option<Tensor>,
    /// `(B, N)` with 1 for real polylines.
    pub key_mask: Option<Tensor>,
    pub counts: Vec<usize>,
}

impl VectorSourceBatch {
    pub fn any(&self) -> bool {
        self.points.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub frame_ids: Vec<u64>,
    pub obs: Tensor,
    pub hd: VectorSourceBatch,
    pub sd: VectorSourceBatch,
    /// `(B, 3, H, W)` or `None` if absent in every frame.
    pub sat: Option<Tensor>,
    pub rsd: Option<Tensor>,
    /// `(B, 4)` 0/1 presence in [`Source`] order.
    pub presence: Tensor,
    pub presence_bits: Vec<PresenceMask>,
    pub gt_raster: Tensor,
    pub gt_instances: Vec<Vec<Instance>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn presence_pair(&self, a: Source, b: Source) -> Result<Tensor> {
        Ok(Tensor::cat(
            &[
                self.presence.narrow(1, a.index(), 1)?,
                self.presence.narrow(1, b.index(), 1)?,
            ],
            1,
        )?)
    }
}

fn collate_vector(
    frames: &[&Sample],
    masks: &[PresenceMask],
    source: Source,
    num_categories: usize,
    dtype: DType,
    dev: &Device,
) -> Result<VectorSourceBatch> {
    let b = frames.len();
    // Absent sources are treated as empty here, so masked payloads never
    // reach the encoders.
    let counts: Vec<usize> = frames
        .iter()
        .zip(masks)
        .map(|(f, m)| if m.get(source) { f.bundle.polylines(source).len() } else { 0 })
        .collect();
    let n = counts.iter().copied().max().unwrap_or(0);
    if n == 0 {
        return Ok(VectorSourceBatch {
            points: None,
            categories: None,
            key_mask: None,
            counts,
        });
    }
    let p = POINTS_PER_POLYLINE;
    let mut pts = vec![0.0f64; b * n * p * 2];
    let mut cats = vec![0.0f64; b * n * num_categories];
    let mut mask = vec![0.0f64; b * n];
    for (bi, f) in frames.iter().enumerate() {
        let set = f.bundle.polylines(source);
        set.validate(p, num_categories)?;
        for i in 0..counts[bi] {
            for (j, pt) in set.polylines[i].points().iter().enumerate() {
                let o = ((bi * n + i) * p + j) * 2;
                pts[o] = pt[0];
                pts[o + 1] = pt[1];
            }
            cats[(bi * n + i) * num_categories + set.categories[i]] = 1.0;
            mask[bi * n + i] = 1.0;
        }
    }
    Ok(VectorSourceBatch {
        points: Some(Tensor::from_vec(pts, (b, n, p, 2), dev)?.to_dtype(dtype)?),
        categories: Some(Tensor::from_vec(cats, (b, n, num_categories), dev)?.to_dtype(dtype)?),
        key_mask: Some(Tensor::from_vec(mask, (b, n), dev)?.to_dtype(dtype)?),
        counts,
    })
}

fn collate_raster(
    frames: &[&Sample],
    masks: &[PresenceMask],
    source: Source,
    grid: &BevGridSpec,
    dtype: DType,
    dev: &Device,
) -> Result<Option<Tensor>> {
    if !masks.iter().any(|m| m.get(source)) {
        return Ok(None);
    }
    let hw = grid.tokens();
    let mut data = vec![0.0f32; frames.len() * 3 * hw];
    for (bi, (f, m)) in frames.iter().zip(masks).enumerate() {
        if !m.get(source) {
            continue;
        }
        let r = f
            .bundle
            .raster(source)
            .ok_or_else(|| Error::validation(format!("frame {} marks {} present without payload", f.bundle.frame_id, source.name())))?;
        if !r.matches(grid) {
            return Err(Error::validation("raster prior does not match the BEV canvas"));
        }
        data[bi * 3 * hw..(bi + 1) * 3 * hw].copy_from_slice(&r.to_chw());
    }
    Ok(Some(
        Tensor::from_vec(data, (frames.len(), 3, grid.height, grid.width), dev)?.to_dtype(dtype)?,
    ))
}

/// Stacks frames into a batch. `masks[i]` is the effective presence of frame
/// `i` (already combined with dropout or a forced subset).
pub fn collate(
    frames: &[&Sample],
    masks: &[PresenceMask],
    grid: &BevGridSpec,
    obs_channels: usize,
    num_categories: usize,
    dtype: DType,
    dev: &Device,
) -> Result<Batch> {
    if frames.is_empty() || frames.len() != masks.len() {
        return Err(Error::validation("collate: empty batch or mask count mismatch"));
    }
    let b = frames.len();
    let hw = grid.tokens();
    let mut obs = Vec::with_capacity(b * obs_channels * hw);
    let mut gt = Vec::with_capacity(b * NUM_MAP_CLASSES * hw);
    let mut presence = Vec::with_capacity(b * 4);
    for (f, m) in frames.iter().zip(masks) {
        if f.observation.len() != obs_channels * hw || f.gt_raster.len() != NUM_MAP_CLASSES * hw {
            return Err(Error::validation("sample does not match the BEV canvas"));
        }
        obs.extend_from_slice(&f.observation);
        gt.extend(f.gt_raster.iter().map(|&v| v as f32));
        presence.extend(m.0.iter().map(|&p| if p { 1.0f32 } else { 0.0 }));
    }
    Ok(Batch {
        frame_ids: frames.iter().map(|f| f.bundle.frame_id).collect(),
        obs: Tensor::from_vec(obs, (b, obs_channels, grid.height, grid.width), dev)?.to_dtype(dtype)?,
        hd: collate_vector(frames, masks, Source::Hd, num_categories, dtype, dev)?,
        sd: collate_vector(frames, masks, Source::Sd, num_categories, dtype, dev)?,
        sat: collate_raster(frames, masks, Source::Sat, grid, dtype, dev)?,
        rsd: collate_raster(frames, masks, Source::Rsd, grid, dtype, dev)?,
        presence: Tensor::from_vec(presence, (b, 4), dev)?.to_dtype(dtype)?,
        presence_bits: masks.to_vec(),
        gt_raster: Tensor::from_vec(gt, (b, NUM_MAP_CLASSES, grid.height, grid.width), dev)?.to_dtype(dtype)?,
        gt_instances: frames.iter().map(|f| f.gt_instances.clone()).collect(),
    })
}
