//! On-disk synthetic datasets: one prior bundle per frame plus the
//! observation maps and ground-truth rasters needed for training.
//!
//! ```text
//! <root>/dataset.json
//! <root>/frames/000000/{meta.json, hd.jsonl, sd.jsonl, sat.png, sd_raster.png, gt.jsonl, obs.bin, gt_raster.png}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conventions::NUM_MAP_CLASSES;
use crate::data::{RasterPrior, Sample};
use crate::ingest::{read_bundle, read_png, write_bundle, write_png, write_text};
use crate::synth::{generate_sample, SynthSpec, OBS_CHANNELS};
use crate::{Error, Result};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: u32,
    pub seed: u64,
    pub frames: usize,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

pub fn frame_dir(root: &Path, frame_id: u64) -> PathBuf {
    root.join("frames").join(format!("{frame_id:06}"))
}

/// Fails with [`Error::WouldClobber`] if `root` exists and is non-empty,
/// unless `overwrite` is set, in which case it is removed first.
pub fn prepare_output_dir(root: &Path, overwrite: bool) -> Result<()> {
    let non_empty = root.is_dir() && fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
    if root.is_file() || non_empty {
        if !overwrite {
            return Err(Error::WouldClobber(root.to_path_buf()));
        }
        if root.is_file() {
            fs::remove_file(root).map_err(|e| Error::io(root, e))?;
        } else {
            fs::remove_dir_all(root).map_err(|e| Error::io(root, e))?;
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))
}

pub fn write_sample(root: &Path, s: &Sample) -> Result<()> {
    let dir = frame_dir(root, s.bundle.frame_id);
    write_bundle(&dir, &s.bundle, Some(&s.gt_instances))?;
    let obs: Vec<u8> = s.observation.iter().flat_map(|v| v.to_le_bytes()).collect();
    let p = dir.join("obs.bin");
    fs::write(&p, obs).map_err(|e| Error::io(&p, e))?;
    write_png(&dir.join("gt_raster.png"), &gt_to_rgb(s))
}

fn gt_to_rgb(s: &Sample) -> RasterPrior {
    let g = &s.bundle.grid;
    let hw = g.tokens();
    let mut r = RasterPrior::filled(g, [0, 0, 0]);
    for i in 0..hw {
        let px = [0, 1, 2].map(|c| s.gt_raster[c * hw + i] * 255);
        r.set_pixel(i / g.width, i % g.width, px);
    }
    r
}

/// Generates and writes `frames` samples into a fresh directory.
pub fn write_dataset(root: &Path, seed: u64, frames: usize, spec: &SynthSpec, overwrite: bool) -> Result<DatasetMeta> {
    prepare_output_dir(root, overwrite)?;
    write_frames(root, seed, frames, spec)
}

/// Writes `dataset.json` and every frame into an existing directory.
pub fn write_frames(root: &Path, seed: u64, frames: usize, spec: &SynthSpec) -> Result<DatasetMeta> {
    let meta = DatasetMeta {
        format: DATASET_FORMAT,
        seed,
        frames,
        spec: spec.clone(),
    };
    write_text(&root.join("dataset.json"), &(serde_json::to_string_pretty(&meta)? + "\n"))?;
    for i in 0..frames as u64 {
        write_sample(root, &generate_sample(seed, i, spec)?)?;
    }
    Ok(meta)
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let p = root.join("dataset.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::validation(format!("unsupported dataset format {}", meta.format)));
    }
    meta.spec.grid.validate()?;
    Ok(meta)
}

pub fn read_sample(root: &Path, frame_id: u64) -> Result<Sample> {
    let dir = frame_dir(root, frame_id);
    let (bundle, gt) = read_bundle(&dir)?;
    let gt_instances = gt.ok_or_else(|| Error::validation(format!("{} has no gt.jsonl", dir.display())))?;
    let grid = bundle.grid;
    let hw = grid.tokens();
    let p = dir.join("obs.bin");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    if bytes.len() != OBS_CHANNELS * hw * 4 {
        return Err(Error::validation(format!("{} has the wrong size", p.display())));
    }
    let observation = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let img = read_png(&dir.join("gt_raster.png"), &grid)?;
    let mut gt_raster = vec![0u8; NUM_MAP_CLASSES * hw];
    for i in 0..hw {
        let px = img.pixel(i / grid.width, i % grid.width);
        for c in 0..NUM_MAP_CLASSES {
            gt_raster[c * hw + i] = u8::from(px[c] > 127);
        }
    }
    Ok(Sample {
        bundle,
        world: None,
        observation,
        gt_raster,
        gt_instances,
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let meta = read_meta(root)?;
    let samples = (0..meta.frames as u64)
        .map(|i| read_sample(root, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { meta, samples })
}
