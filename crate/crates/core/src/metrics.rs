//! Chamfer distance, Chamfer-threshold AP/mAP and raster IoU.
//!
//! AP uses one-to-one greedy matching in score order (ties broken by
//! instance id) and all-points integration of the precision envelope.

use serde::{Deserialize, Serialize};

use crate::conventions::{CHAMFER_THRESHOLDS, NUM_MAP_CLASSES};
use crate::data::Instance;
use crate::geometry::PointArray;
use crate::{Error, Result};

/// `(mean_a min_b |a−b| + mean_b min_a |a−b|) / 2`.
pub fn chamfer_distance(a: &PointArray, b: &PointArray) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::validation("chamfer_distance: empty point set"));
    }
    let one_way = |a: &PointArray, b: &PointArray| -> f64 {
        let s: f64 = a
            .points()
            .iter()
            .map(|p| {
                b.points()
                    .iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        s / a.len() as f64
    };
    Ok((one_way(a, b) + one_way(b, a)) / 2.0)
}

/// A ranked prediction. `id` is the stable tie-break key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub id: usize,
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub points: PointArray,
}

/// Sorts by descending score, then ascending id.
pub fn rank(preds: &mut [ScoredInstance]) {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
}

/// Per-prediction true/false-positive flags after greedy matching.
/// `preds` must already be ranked; `gts` are `(frame, instance)` pairs.
pub fn greedy_match(preds: &[ScoredInstance], gts: &[(usize, &Instance)], tau: f64) -> Result<Vec<bool>> {
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, (frame, g)) in gts.iter().enumerate() {
            if used[j] || *frame != p.frame || g.class != p.class {
                continue;
            }
            let d = chamfer_distance(&p.points, &g.points)?;
            if d < tau && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    Ok(tp)
}

/// All-points AP of a ranked true-positive sequence: for each true
/// positive (one recall step of `1/num_gt`) the precision envelope
/// `max_{k' ≥ k} precision(k')` is accumulated.
pub fn ap_from_matches(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let total: f64 = tp.iter().zip(&prec).filter(|(t, _)| **t).map(|(_, p)| *p).sum();
    Some(total / num_gt as f64)
}

/// AP of one class at threshold `tau`. `None` when the class has no GT.
pub fn ap_at_threshold(preds: &[ScoredInstance], gts: &[(usize, &Instance)], class: usize, tau: f64) -> Result<Option<f64>> {
    let mut p: Vec<ScoredInstance> = preds.iter().filter(|p| p.class == class).cloned().collect();
    rank(&mut p);
    let g: Vec<(usize, &Instance)> = gts.iter().filter(|(_, g)| g.class == class).copied().collect();
    let tp = greedy_match(&p, &g, tau)?;
    Ok(ap_from_matches(&tp, g.len()))
}

/// Brute-force AP: for every recall level `h / num_gt` reached by the
/// ranking, scans all rank cutoffs for the best precision at recall ≥ that
/// level.
pub fn ap_oracle(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let cutoffs: Vec<(usize, f64)> = (1..=tp.len())
        .map(|k| {
            let hits = tp[..k].iter().filter(|t| **t).count();
            (hits, hits as f64 / k as f64)
        })
        .collect();
    let reached = cutoffs.last().map_or(0, |c| c.0);
    let mut total = 0.0;
    for level in 1..=reached {
        total += cutoffs.iter().filter(|c| c.0 >= level).map(|c| c.1).fold(0.0, f64::max);
    }
    Some(total / num_gt as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// `per_class[c][t]` for thresholds in [`CHAMFER_THRESHOLDS`]; `None`
    /// where the class has no ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    pub class_mean: Vec<Option<f64>>,
    pub map: Option<f64>,
    /// Classes excluded from the means for lack of ground truth.
    pub undefined: Vec<usize>,
}

/// Chamfer mAP over frames: mean over defined classes of the mean over
/// thresholds.
pub fn mean_ap(preds: &[ScoredInstance], gts: &[Vec<Instance>]) -> Result<ApResult> {
    let flat: Vec<(usize, &Instance)> = gts.iter().enumerate().flat_map(|(f, v)| v.iter().map(move |g| (f, g))).collect();
    let mut res = ApResult::default();
    for c in 0..NUM_MAP_CLASSES {
        let row = CHAMFER_THRESHOLDS
            .iter()
            .map(|&t| ap_at_threshold(preds, &flat, c, t))
            .collect::<Result<Vec<_>>>()?;
        let defined: Vec<f64> = row.iter().flatten().copied().collect();
        let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        if mean.is_none() {
            res.undefined.push(c);
        }
        res.per_class.push(row);
        res.class_mean.push(mean);
    }
    let defined: Vec<f64> = res.class_mean.iter().flatten().copied().collect();
    res.map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(res)
}

/// Intersection and union counts of a binarized prediction (`≥ 0.5`)
/// against a binary mask.
pub fn iou_counts(pred: &[f32], gt: &[u8]) -> Result<(u64, u64)> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!("iou: shape mismatch {} vs {}", pred.len(), gt.len())));
    }
    let mut inter = 0;
    let mut union = 0;
    for (p, g) in pred.iter().zip(gt) {
        let p = *p >= 0.5;
        let g = *g != 0;
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok((inter, union))
}

/// `|∩| / |∪|`, defined as 1 when both masks are empty.
pub fn iou(pred: &[f32], gt: &[u8]) -> Result<f64> {
    let (i, u) = iou_counts(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Per-class counts accumulated over an evaluation set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: [u64; NUM_MAP_CLASSES],
    pub union: [u64; NUM_MAP_CLASSES],
}

impl IouAccumulator {
    /// `pred` and `gt` are `3 × H × W` planes of one frame.
    pub fn add(&mut self, pred: &[f32], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() || pred.len() % NUM_MAP_CLASSES != 0 {
            return Err(Error::validation("iou: frame planes do not match"));
        }
        let hw = pred.len() / NUM_MAP_CLASSES;
        for c in 0..NUM_MAP_CLASSES {
            let (i, u) = iou_counts(&pred[c * hw..(c + 1) * hw], &gt[c * hw..(c + 1) * hw])?;
            self.intersection[c] += i;
            self.union[c] += u;
        }
        Ok(())
    }

    pub fn per_class(&self) -> [f64; NUM_MAP_CLASSES] {
        let mut out = [0.0; NUM_MAP_CLASSES];
        for c in 0..NUM_MAP_CLASSES {
            out[c] = if self.union[c] == 0 {
                1.0
            } else {
                self.intersection[c] as f64 / self.union[c] as f64
            };
        }
        out
    }

    /// Mean foreground IoU over the map classes.
    pub fn mean(&self) -> f64 {
        self.per_class().iter().sum::<f64>() / NUM_MAP_CLASSES as f64
    }
}
