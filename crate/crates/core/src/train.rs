//! Two-stage curriculum training, loss assembly, checkpoints and the
//! powerset evaluator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conventions::{Family, Source, NUM_MAP_CLASSES, POINTS_PER_POLYLINE};
use crate::data::{collate, Batch, Instance, PresenceMask, Sample};
use crate::fusion::{alpha_at, AlphaSchedule, FusionOrder, Stage2Ramp, UmpeConfig};
use crate::geometry::{BevGridSpec, PointArray};
use crate::head::{greedy_chamfer_assignment, HeadConfig, MapPrediction};
use crate::metrics::{mean_ap, ApResult, IouAccumulator, ScoredInstance};
use crate::model::{Model, ModelConfig, BEV_PREFIX, PRIOR_PREFIX};
use crate::nn::softplus;
use crate::raster_encoder::{BackboneKind, RasterEncoderConfig};
use crate::synth::{source_dropout, OBS_CHANNELS};
use crate::vector_encoder::{Se2Term, VectorEncoderConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Flat training configuration. Every key has a default; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr_prior: f64,
    pub lr_bev: f64,
    /// Multiplier applied to both learning rates from the first stage-2 epoch.
    pub stage2_lr_factor: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub dropout_stage2: bool,
    /// Sources the model may see during training, e.g. `hd+sd` or `all`.
    pub train_priors: String,
    pub bce_pos_weight: f64,
    pub vector_loss_weight: f64,
    pub class_loss_weight: f64,
    pub lambda_t: f64,
    pub lambda_r: f64,
    pub alpha_stage1_ceiling: f64,
    pub alpha_stage2_ceiling: f64,
    pub alpha_stage2_ramp: Stage2Ramp,
    pub fusion_order: FusionOrder,
    pub learnable_alpha: bool,
    pub width: usize,
    pub stem_hidden: usize,
    pub vector_layers: usize,
    pub vector_heads: usize,
    pub vector_ff: usize,
    /// Add the BEV queries back onto the gated vector mix.
    pub vector_residual: bool,
    pub raster_backbone: BackboneKind,
    pub raster_widths: Vec<usize>,
    pub raster_strides: Vec<usize>,
    pub head_hidden: usize,
    pub head_queries: usize,
    /// `f32` or `f64`.
    pub dtype: String,
    /// Emit a step record every this many optimizer steps (0 = never).
    pub log_every: usize,
    /// Evaluate on the eval set after every epoch instead of only at the end.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let v = VectorEncoderConfig::default();
        let r = RasterEncoderConfig::default();
        let h = HeadConfig::default();
        let a = AlphaSchedule::default();
        TrainConfig {
            seed: 0,
            dataset: None,
            eval_dataset: None,
            stage1_epochs: a.stage1_epochs,
            stage2_epochs: a.stage2_epochs,
            batch_size: 16,
            lr_prior: 4e-4,
            lr_bev: 1e-4,
            stage2_lr_factor: 0.25,
            weight_decay: 1e-2,
            dropout_p: 0.3,
            dropout_stage2: true,
            train_priors: "all".into(),
            bce_pos_weight: 2.0,
            vector_loss_weight: 0.1,
            class_loss_weight: 0.5,
            lambda_t: v.lambda_t,
            lambda_r: v.lambda_r,
            alpha_stage1_ceiling: a.stage1_ceiling,
            alpha_stage2_ceiling: a.stage2_ceiling,
            alpha_stage2_ramp: a.stage2_ramp,
            fusion_order: FusionOrder::Vr,
            learnable_alpha: false,
            width: 32,
            stem_hidden: 32,
            vector_layers: v.layers,
            vector_heads: v.heads,
            vector_ff: v.ff_width,
            vector_residual: v.residual,
            raster_backbone: r.backbone,
            raster_widths: r.widths,
            raster_strides: r.strides,
            head_hidden: h.hidden,
            head_queries: h.queries,
            dtype: "f32".into(),
            log_every: 10,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage1_epochs == 0 {
            return bad("stage1_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_prior > self.lr_bev && self.lr_bev > 0.0) {
            return bad(format!(
                "need lr_prior > lr_bev > 0, got {} and {}",
                self.lr_prior, self.lr_bev
            ));
        }
        if !(self.stage2_lr_factor > 0.0 && self.stage2_lr_factor < 1.0) {
            return bad(format!("stage2_lr_factor must lie in (0, 1), got {}", self.stage2_lr_factor));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(0.0..=self.alpha_stage2_ceiling).contains(&self.alpha_stage1_ceiling) || self.alpha_stage2_ceiling > 0.6 {
            return bad("alpha ceilings must satisfy 0 <= stage1 <= stage2 <= 0.6".into());
        }
        if self.raster_widths.len() != self.raster_strides.len() || self.raster_widths.is_empty() {
            return bad("raster_widths and raster_strides must have the same non-zero length".into());
        }
        if self.width % self.vector_heads != 0 {
            return bad(format!("width {} is not divisible by vector_heads {}", self.width, self.vector_heads));
        }
        self.dtype()?;
        self.train_mask()?;
        Ok(())
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("dtype must be f32 or f64, got {other}"))),
        }
    }

    pub fn train_mask(&self) -> Result<PresenceMask> {
        PresenceMask::parse(&self.train_priors).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            stage1_ceiling: self.alpha_stage1_ceiling,
            stage2_ceiling: self.alpha_stage2_ceiling,
            stage2_ramp: self.alpha_stage2_ramp,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    pub fn model_config(&self, grid: BevGridSpec) -> ModelConfig {
        let vector = VectorEncoderConfig {
            layers: self.vector_layers,
            heads: self.vector_heads,
            ff_width: self.vector_ff,
            residual: self.vector_residual,
            lambda_t: self.lambda_t,
            lambda_r: self.lambda_r,
            ..Default::default()
        };
        let raster = RasterEncoderConfig {
            backbone: self.raster_backbone,
            widths: self.raster_widths.clone(),
            strides: self.raster_strides.clone(),
            lambda_t: self.lambda_t,
            lambda_r: self.lambda_r,
            ..Default::default()
        };
        ModelConfig {
            grid,
            width: self.width,
            obs_channels: OBS_CHANNELS,
            stem_hidden: self.stem_hidden,
            umpe: UmpeConfig {
                vector,
                raster,
                order: self.fusion_order,
                learnable_alpha: self.learnable_alpha,
            },
            head: HeadConfig {
                hidden: self.head_hidden,
                queries: self.head_queries,
                heads: self.vector_heads,
                ..Default::default()
            },
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// parameter groups

#[derive(Clone, Debug)]
pub struct ParamGroups {
    pub prior: Vec<(String, Var)>,
    pub bev: Vec<(String, Var)>,
}

/// Splits the store into the prior and BEV/decoder groups and checks that
/// they partition it.
pub fn partition_params(model: &Model) -> Result<ParamGroups> {
    let mut groups = ParamGroups {
        prior: Vec::new(),
        bev: Vec::new(),
    };
    let all = model.store.vars();
    for (name, var) in &all {
        match name.split('.').next() {
            Some(p) if p == PRIOR_PREFIX => groups.prior.push((name.clone(), var.clone())),
            Some(p) if p == BEV_PREFIX => groups.bev.push((name.clone(), var.clone())),
            _ => return Err(Error::validation(format!("parameter {name} belongs to no group"))),
        }
    }
    if groups.prior.len() + groups.bev.len() != all.len() {
        return Err(Error::validation("parameter groups do not partition the model"));
    }
    Ok(groups)
}

// ---------------------------------------------------------------------------
// losses

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pos_weight: f64,
    pub vector: f64,
    pub class: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossWeights {
            pos_weight: cfg.bce_pos_weight,
            vector: cfg.vector_loss_weight,
            class: cfg.class_loss_weight,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    /// Every logged component plus `total`.
    pub components: BTreeMap<String, f64>,
}

/// Mean of `w·y·softplus(-l) + (1-y)·softplus(l)`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor, pos_weight: f64) -> Result<Tensor> {
    let pos = (target * softplus(&logits.neg()?)?)?;
    let neg = ((target.ones_like()? - target)? * softplus(logits)?)?;
    Ok(((pos * pos_weight)? + neg)?.mean_all()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Matched point targets for the query decoder. Each match takes whichever
/// point order of the ground truth is closer in L1.
fn vector_targets(
    points: &Tensor,
    gt: &[Vec<Instance>],
) -> Result<(Tensor, Tensor, Tensor, usize)> {
    let (b, nq, np, _) = points.dims4()?;
    let flat: Vec<Vec<f64>> = points.reshape((b, nq, np * 2))?.to_dtype(DType::F64)?.to_vec3::<f64>()?.concat();
    let mut target = vec![0.0f64; b * nq * np * 2];
    let mut mask = vec![0.0f64; b * nq];
    let mut cls = vec![0.0f64; b * nq * NUM_MAP_CLASSES];
    let mut matched = 0;
    for (f, frame_gt) in gt.iter().enumerate().take(b) {
        let preds: Vec<PointArray> = (0..nq)
            .map(|q| PointArray(flat[f * nq + q].chunks(2).map(|p| [p[0], p[1]]).collect()))
            .collect();
        for (q, g) in greedy_chamfer_assignment(&preds, frame_gt)? {
            let gpts = &frame_gt[g].points.0;
            let pred = &preds[q].0;
            let l1 = |rev: bool| -> f64 {
                (0..np)
                    .map(|i| {
                        let t = if rev { gpts[np - 1 - i] } else { gpts[i] };
                        (pred[i][0] - t[0]).abs() + (pred[i][1] - t[1]).abs()
                    })
                    .sum()
            };
            let rev = l1(true) < l1(false);
            let base = (f * nq + q) * np * 2;
            for i in 0..np {
                let t = if rev { gpts[np - 1 - i] } else { gpts[i] };
                target[base + 2 * i] = t[0];
                target[base + 2 * i + 1] = t[1];
            }
            mask[f * nq + q] = 1.0;
            cls[(f * nq + q) * NUM_MAP_CLASSES + frame_gt[g].class] = 1.0;
            matched += 1;
        }
    }
    let dev = points.device();
    let dt = points.dtype();
    Ok((
        Tensor::from_vec(target, (b, nq, np, 2), dev)?.to_dtype(dt)?,
        Tensor::from_vec(mask, (b, nq, 1, 1), dev)?.to_dtype(dt)?,
        Tensor::from_vec(cls, (b, nq, NUM_MAP_CLASSES), dev)?.to_dtype(dt)?,
        matched,
    ))
}

/// Task loss (raster BCE, optional vector L1 and class BCE on greedily
/// matched queries) plus every SE(2) regularizer.
pub fn total_loss(
    pred: &MapPrediction,
    gt_raster: &Tensor,
    gt_instances: &[Vec<Instance>],
    se2: &[&Se2Term],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut components = BTreeMap::new();
    let bce = bce_with_logits(&pred.logits, &gt_raster.to_dtype(pred.logits.dtype())?, w.pos_weight)?;
    components.insert("bce".to_string(), scalar(&bce)?);
    let mut total = bce;
    if let (Some(points), Some(class_logits)) = (&pred.points, &pred.class_logits) {
        if w.vector > 0.0 || w.class > 0.0 {
            let (target, mask, cls, matched) = vector_targets(points, gt_instances)?;
            let denom = (matched * POINTS_PER_POLYLINE * 2).max(1) as f64;
            let l1 = ((points - &target)?.abs()?.broadcast_mul(&mask)?.sum_all()? / denom)?;
            let cbce = bce_with_logits(class_logits, &cls, 1.0)?;
            components.insert("vector_l1".to_string(), scalar(&l1)?);
            components.insert("class_bce".to_string(), scalar(&cbce)?);
            total = ((total + (l1 * w.vector)?)? + (cbce * w.class)?)?;
        }
    }
    for t in se2 {
        components.insert(format!("se2.{}.t", t.name), scalar(&t.translation)?);
        components.insert(format!("se2.{}.r", t.name), scalar(&t.rotation)?);
        total = (total + t.total()?)?;
    }
    components.insert("total".to_string(), scalar(&total)?);
    Ok(LossBreakdown { total, components })
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: String,
    pub frames: usize,
    pub iou: Vec<f64>,
    /// Mean foreground IoU over the three map classes.
    pub mean_iou: f64,
    pub ap: Option<ApResult>,
}

fn effective_masks(samples: &[&Sample], subset: PresenceMask) -> Vec<PresenceMask> {
    samples.iter().map(|s| s.bundle.presence.and(&subset)).collect()
}

/// Side-effect free evaluation with the given presence subset forced on
/// every frame.
pub fn evaluate(model: &Model, samples: &[Sample], subset: PresenceMask, alpha: f64, batch_size: usize) -> Result<EvalReport> {
    let mut acc = IouAccumulator::default();
    let mut preds: Vec<ScoredInstance> = Vec::new();
    let mut gts: Vec<Vec<Instance>> = Vec::new();
    let hw = model.cfg.grid.tokens();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = make_batch(model, &refs, &effective_masks(&refs, subset))?;
        let out = model.forward(&batch, alpha)?;
        let probs: Vec<f32> = out.pred.probabilities()?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = NUM_MAP_CLASSES * hw;
        for (i, s) in chunk.iter().enumerate() {
            acc.add(&probs[i * per..(i + 1) * per], &s.gt_raster)?;
        }
        for frame in out.pred.instances()? {
            let offset = gts.len();
            preds.extend(frame.into_iter().map(|mut p| {
                p.frame += offset;
                p
            }));
        }
        gts.extend(chunk.iter().map(|s| s.gt_instances.clone()));
    }
    let ap = if model.cfg.head.queries > 0 {
        let mut preds = preds;
        for (i, p) in preds.iter_mut().enumerate() {
            p.id = i;
        }
        Some(mean_ap(&preds, &gts)?)
    } else {
        None
    };
    Ok(EvalReport {
        subset: subset.label(),
        frames: samples.len(),
        iou: acc.per_class().to_vec(),
        mean_iou: acc.mean(),
        ap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowersetTable {
    pub rows: Vec<EvalReport>,
    pub weights_hash: String,
}

/// Evaluates every presence subset, empty baseline first. Fails if the
/// weights change along the way.
pub fn eval_powerset(model: &Model, samples: &[Sample], alpha: f64, batch_size: usize) -> Result<PowersetTable> {
    let before = model.store.weights_hash()?;
    let rows = PresenceMask::powerset()
        .into_iter()
        .map(|m| evaluate(model, samples, m, alpha, batch_size))
        .collect::<Result<Vec<_>>>()?;
    let after = model.store.weights_hash()?;
    if before != after {
        return Err(Error::validation("evaluation mutated the checkpoint weights"));
    }
    Ok(PowersetTable {
        rows,
        weights_hash: before,
    })
}

pub fn make_batch(model: &Model, frames: &[&Sample], masks: &[PresenceMask]) -> Result<Batch> {
    let cfg = &model.cfg;
    collate(
        frames,
        masks,
        &cfg.grid,
        cfg.obs_channels,
        cfg.umpe.vector.num_categories,
        model.dtype(),
        model.device(),
    )
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutStats {
    /// Frames where the family had both sources and was eligible for a drop.
    pub vector_eligible: u64,
    pub vector_dropped: u64,
    pub raster_eligible: u64,
    pub raster_dropped: u64,
}

impl DropoutStats {
    pub fn vector_rate(&self) -> f64 {
        self.vector_dropped as f64 / (self.vector_eligible.max(1)) as f64
    }

    pub fn raster_rate(&self) -> f64 {
        self.raster_dropped as f64 / (self.raster_eligible.max(1)) as f64
    }

    fn merge(&mut self, o: &DropoutStats) {
        self.vector_eligible += o.vector_eligible;
        self.vector_dropped += o.vector_dropped;
        self.raster_eligible += o.raster_eligible;
        self.raster_dropped += o.raster_dropped;
    }
}

/// One structured line of the metrics log. No wall-clock fields, so reruns
/// produce identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        config_hash: String,
        seed: u64,
        train_frames: usize,
        eval_frames: usize,
        prior_params: usize,
        bev_params: usize,
        w_res_norm: f64,
    },
    Step {
        epoch: usize,
        step: usize,
        stage: usize,
        alpha: f64,
        lr_prior: f64,
        lr_bev: f64,
        w_res_norm: f64,
        losses: BTreeMap<String, f64>,
    },
    Epoch {
        epoch: usize,
        stage: usize,
        alpha: f64,
        lr_prior: f64,
        lr_bev: f64,
        mean_loss: f64,
        dropout: DropoutStats,
        eval: Option<EvalReport>,
    },
    End {
        final_alpha: f64,
        weights_hash: String,
        dropout: DropoutStats,
        eval: Option<EvalReport>,
    },
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub final_alpha: f64,
    pub dropout: DropoutStats,
    pub eval: Option<EvalReport>,
}

fn w_res_norm(model: &Model) -> Result<f64> {
    scalar(&model.umpe.residual.w_res.weight.sqr()?.sum_all()?.sqrt()?)
}

fn stage_of(epoch: usize, cfg: &TrainConfig) -> usize {
    if epoch < cfg.stage1_epochs {
        1
    } else {
        2
    }
}

struct LogSink {
    records: Vec<LogRecord>,
    file: Option<fs::File>,
    path: PathBuf,
}

impl LogSink {
    fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

fn dump_batch(dir: &Path, epoch: usize, step: usize, batch: &Batch, losses: &BTreeMap<String, f64>) -> PathBuf {
    let path = dir.join(format!("nonfinite_e{epoch}_s{step}.json"));
    let body = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "frame_ids": batch.frame_ids,
        "presence": batch.presence_bits.iter().map(|m| m.label()).collect::<Vec<_>>(),
        "losses": losses.iter().map(|(k, v)| (k.clone(), format!("{v}"))).collect::<BTreeMap<_, _>>(),
    });
    if let Err(e) = fs::write(&path, body.to_string()) {
        log::error!("could not write diagnostic dump {}: {e}", path.display());
    }
    path
}

/// Runs both stages. With `out_dir`, the metrics log is streamed to
/// `metrics.jsonl` and the final checkpoint written next to it.
pub fn train_two_stage(cfg: &TrainConfig, train: &[Sample], eval: Option<&[Sample]>, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train.first().ok_or_else(|| Error::validation("empty training set"))?;
    let grid = first.bundle.grid;
    if train.iter().chain(eval.unwrap_or(&[])).any(|s| s.bundle.grid != grid) {
        return Err(Error::validation("all frames must share one BEV grid"));
    }
    let model = Model::new(cfg.model_config(grid), cfg.seed, cfg.dtype()?, &Device::Cpu)?;
    let groups = partition_params(&model)?;
    let adam = |lr: f64| ParamsAdamW {
        lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut opt_prior = AdamW::new(groups.prior.iter().map(|(_, v)| v.clone()).collect(), adam(cfg.lr_prior))?;
    let mut opt_bev = AdamW::new(groups.bev.iter().map(|(_, v)| v.clone()).collect(), adam(cfg.lr_bev))?;
    let weights = LossWeights::from_config(cfg);
    let train_mask = cfg.train_mask()?;
    let sched = cfg.schedule();

    let mut sink = LogSink {
        records: Vec::new(),
        file: None,
        path: PathBuf::new(),
    };
    let dump_dir = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(METRICS_FILE);
            sink.file = Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?);
            sink.path = p;
            d.to_path_buf()
        }
        None => std::env::temp_dir(),
    };
    sink.push(LogRecord::Start {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        train_frames: train.len(),
        eval_frames: eval.map_or(0, |e| e.len()),
        prior_params: groups.prior.iter().map(|(_, v)| v.elem_count()).sum(),
        bev_params: groups.bev.iter().map(|(_, v)| v.elem_count()).sum(),
        w_res_norm: w_res_norm(&model)?,
    })?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut totals = DropoutStats::default();
    let mut global_step = 0;
    let mut alpha = 0.0;
    for epoch in 0..cfg.total_epochs() {
        let stage = stage_of(epoch, cfg);
        let lr_factor = if stage == 2 { cfg.stage2_lr_factor } else { 1.0 };
        opt_prior.set_learning_rate(cfg.lr_prior * lr_factor);
        opt_bev.set_learning_rate(cfg.lr_bev * lr_factor);
        alpha = alpha_at(epoch, &sched);
        let dropout_on = cfg.dropout_p > 0.0 && (stage == 1 || cfg.dropout_stage2);
        order.shuffle(&mut shuffle_rng);
        let mut stats = DropoutStats::default();
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            let frames: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let mut masks = Vec::with_capacity(frames.len());
            for f in &frames {
                let base = f.bundle.presence.and(&train_mask);
                if !dropout_on {
                    masks.push(base);
                    continue;
                }
                let eligible = |fam: Family| fam.sources().iter().all(|s| base.get(*s));
                stats.vector_eligible += eligible(Family::Vector) as u64;
                stats.raster_eligible += eligible(Family::Raster) as u64;
                let (m, dropped) = source_dropout(base, cfg.dropout_p, &mut drop_rng);
                stats.vector_dropped += dropped[0].is_some() as u64;
                stats.raster_dropped += dropped[1].is_some() as u64;
                masks.push(m);
            }
            let batch = make_batch(&model, &frames, &masks)?;
            let out = model.forward(&batch, alpha)?;
            let se2: Vec<&Se2Term> = out.umpe.se2_terms().collect();
            let loss = total_loss(&out.pred, &batch.gt_raster, &batch.gt_instances, &se2, &weights)?;
            let total = loss.components["total"];
            if !total.is_finite() {
                let dump = dump_batch(&dump_dir, epoch, steps, &batch, &loss.components);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    dump,
                });
            }
            if cfg.log_every > 0 && global_step % cfg.log_every == 0 {
                sink.push(LogRecord::Step {
                    epoch,
                    step: global_step,
                    stage,
                    alpha,
                    lr_prior: opt_prior.learning_rate(),
                    lr_bev: opt_bev.learning_rate(),
                    w_res_norm: w_res_norm(&model)?,
                    losses: loss.components.clone(),
                })?;
            }
            let grads = loss.total.backward()?;
            opt_prior.step(&grads)?;
            opt_bev.step(&grads)?;
            loss_sum += total;
            steps += 1;
            global_step += 1;
        }
        totals.merge(&stats);
        let last = epoch + 1 == cfg.total_epochs();
        let report = match eval {
            Some(e) if cfg.eval_every_epoch && !last => Some(evaluate(&model, e, PresenceMask::ALL.and(&train_mask), alpha, cfg.batch_size)?),
            _ => None,
        };
        log::info!("epoch {epoch} stage {stage} alpha {alpha:.3} loss {:.5}", loss_sum / steps.max(1) as f64);
        sink.push(LogRecord::Epoch {
            epoch,
            stage,
            alpha,
            lr_prior: opt_prior.learning_rate(),
            lr_bev: opt_bev.learning_rate(),
            mean_loss: loss_sum / steps.max(1) as f64,
            dropout: stats,
            eval: report,
        })?;
    }
    let final_eval = match eval {
        Some(e) => Some(evaluate(&model, e, train_mask, alpha, cfg.batch_size)?),
        None => None,
    };
    sink.push(LogRecord::End {
        final_alpha: alpha,
        weights_hash: model.store.weights_hash()?,
        dropout: totals,
        eval: final_eval.clone(),
    })?;
    if let Some(d) = out_dir {
        save_checkpoint(d, &model, cfg, alpha)?;
    }
    Ok(TrainOutcome {
        model,
        log: sink.records,
        final_alpha: alpha,
        dropout: totals,
        eval: final_eval,
    })
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub model: ModelConfig,
    pub git_rev: String,
    pub weights_hash: String,
    /// α the model was last trained with; evaluation uses it by default.
    pub final_alpha: f64,
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn save_checkpoint(dir: &Path, model: &Model, cfg: &TrainConfig, final_alpha: f64) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.store.save(&dir.join(WEIGHTS_FILE))?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        model: model.cfg.clone(),
        git_rev: git_revision(),
        weights_hash: model.store.weights_hash()?,
        final_alpha,
    };
    let p = dir.join(CHECKPOINT_FILE);
    fs::write(&p, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let p = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::validation(format!("unsupported checkpoint format {}", meta.format)));
    }
    let model = Model::new(meta.model.clone(), meta.config.seed, meta.config.dtype()?, &Device::Cpu)?;
    model.store.load(&dir.join(WEIGHTS_FILE))?;
    if model.store.weights_hash()? != meta.weights_hash {
        return Err(Error::validation("checkpoint weights do not match the recorded hash"));
    }
    Ok((model, meta))
}

/// Presence patterns as `(label, mask)`, empty baseline first.
pub fn subset_specs() -> Vec<(String, PresenceMask)> {
    PresenceMask::powerset().into_iter().map(|m| (m.label(), m)).collect()
}

/// Sources each family contributes in a mask, for reporting.
pub fn family_sources(mask: PresenceMask, fam: Family) -> Vec<Source> {
    fam.sources().into_iter().filter(|s| mask.get(*s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 1,
            batch_size: 4,
            width: 8,
            stem_hidden: 8,
            vector_layers: 1,
            vector_heads: 2,
            vector_ff: 16,
            raster_widths: vec![8, 8],
            raster_strides: vec![2, 1],
            head_hidden: 8,
            head_queries: 4,
            log_every: 1,
            ..Default::default()
        }
    }

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            grid: BevGridSpec::window(20, 10),
            ..Default::default()
        }
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(TrainConfig::from_toml("seed = 1\nlr_pror = 0.1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn lr_ordering_is_enforced() {
        let cfg = TrainConfig {
            lr_prior: 1e-5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn groups_partition_the_model() {
        let model = Model::new(tiny_config().model_config(tiny_spec().grid), 0, DType::F32, &Device::Cpu).unwrap();
        let g = partition_params(&model).unwrap();
        assert_eq!(g.prior.len() + g.bev.len(), model.store.names().len());
        assert!(g.prior.iter().any(|(n, _)| n.ends_with("w_res.weight")));
        assert!(g.bev.iter().any(|(n, _)| n.starts_with("bev.head")));
    }

    #[test]
    fn bce_matches_scalar_formula() {
        let l = [-3.0f64, -0.5, 0.0, 2.0];
        let y = [1.0f64, 0.0, 1.0, 0.0];
        let lt = Tensor::new(&l, &Device::Cpu).unwrap();
        let yt = Tensor::new(&y, &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits(&lt, &yt, 3.0).unwrap()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want: f64 = l
            .iter()
            .zip(&y)
            .map(|(&l, &y)| -(3.0 * y * sig(l).ln() + (1.0 - y) * (1.0 - sig(l)).ln()))
            .sum::<f64>()
            / 4.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn saturated_prediction_hits_floor_with_zero_se2() {
        let gt = Tensor::new(&[[[[1.0f64, 0.0]]]], &Device::Cpu).unwrap();
        let logits = ((&gt * 2.0).unwrap() - 1.0).unwrap() * 40.0;
        let pred = MapPrediction {
            logits: logits.unwrap(),
            points: None,
            class_logits: None,
        };
        let zero = Tensor::zeros((1, 3), DType::F64, &Device::Cpu).unwrap();
        let active = Tensor::ones(1, DType::F64, &Device::Cpu).unwrap();
        let term = crate::vector_encoder::se2_terms("hd", &zero, &active, 0.1, 1.0).unwrap();
        let w = LossWeights {
            pos_weight: 1.0,
            vector: 0.0,
            class: 0.0,
        };
        let l = total_loss(&pred, &gt, &[], &[&term], &w).unwrap();
        assert!(l.components["total"] < 1e-15);
        assert_eq!(l.components["se2.hd.t"], 0.0);
    }

    #[test]
    fn doubling_lambda_t_doubles_translation_component() {
        let pose = Tensor::new(&[[0.3f64, -0.2, 0.05]], &Device::Cpu).unwrap();
        let active = Tensor::ones(1, DType::F64, &Device::Cpu).unwrap();
        let pred = MapPrediction {
            logits: Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap(),
            points: None,
            class_logits: None,
        };
        let gt = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let w = LossWeights {
            pos_weight: 1.0,
            vector: 0.0,
            class: 0.0,
        };
        let c = |lt: f64| {
            let t = crate::vector_encoder::se2_terms("sat", &pose, &active, lt, 1.0).unwrap();
            total_loss(&pred, &gt, &[], &[&t], &w).unwrap().components
        };
        let (a, b) = (c(0.1), c(0.2));
        assert_eq!(b["se2.sat.t"], 2.0 * a["se2.sat.t"]);
        assert_eq!(b["se2.sat.r"], a["se2.sat.r"]);
    }

    #[test]
    fn vector_targets_pick_closer_orientation() {
        let pts: Vec<f64> = (0..11).flat_map(|i| [10.0 - i as f64, 0.0]).collect();
        let points = Tensor::from_vec(pts, (1, 1, 11, 2), &Device::Cpu).unwrap();
        let gt = vec![vec![Instance {
            class: 2,
            points: PointArray((0..11).map(|i| [i as f64, 0.0]).collect()),
        }]];
        let (target, mask, cls, n) = vector_targets(&points, &gt).unwrap();
        assert_eq!(n, 1);
        let diff = scalar(&(&points - &target).unwrap().abs().unwrap().sum_all().unwrap()).unwrap();
        assert_eq!(diff, 0.0);
        assert_eq!(mask.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert_eq!(cls.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn training_logs_alpha_and_zero_w_res_then_is_reproducible() {
        let spec = tiny_spec();
        let data = generate_dataset(5, 8, &spec).unwrap();
        let eval = generate_dataset(6, 4, &spec).unwrap();
        let cfg = tiny_config();
        let a = train_two_stage(&cfg, &data, Some(&eval), None).unwrap();
        let b = train_two_stage(&cfg, &data, Some(&eval), None).unwrap();
        let ja: Vec<String> = a.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        let jb: Vec<String> = b.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
        assert_eq!(ja, jb);
        let alphas: Vec<f64> = a
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { alpha, .. } => Some(*alpha),
                _ => None,
            })
            .collect();
        assert_eq!(alphas[0], 0.0);
        assert!((alphas[1] - 0.2).abs() < 1e-12);
        assert_eq!(alphas[2], 0.6);
        match &a.log[0] {
            LogRecord::Start { w_res_norm, .. } => assert_eq!(*w_res_norm, 0.0),
            r => panic!("unexpected first record {r:?}"),
        }
        let lrs: Vec<(f64, f64)> = a
            .log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { lr_prior, lr_bev, .. } => Some((*lr_prior, *lr_bev)),
                _ => None,
            })
            .collect();
        assert_eq!(lrs[1], (4e-4, 1e-4));
        assert_eq!(lrs[2], (1e-4, 2.5e-5));
        assert!(a.eval.unwrap().mean_iou.is_finite());
    }

    #[test]
    fn powerset_is_pure_and_has_sixteen_rows() {
        let spec = tiny_spec();
        let eval = generate_dataset(6, 3, &spec).unwrap();
        let model = Model::new(tiny_config().model_config(spec.grid), 1, DType::F32, &Device::Cpu).unwrap();
        let t = eval_powerset(&model, &eval, 0.2, 2).unwrap();
        assert_eq!(t.rows.len(), 16);
        assert_eq!(t.rows[0].subset, "none");
        assert_eq!(t.weights_hash, model.store.weights_hash().unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = tiny_spec();
        let data = generate_dataset(2, 4, &spec).unwrap();
        let cfg = TrainConfig {
            stage1_epochs: 1,
            stage2_epochs: 0,
            ..tiny_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train_two_stage(&cfg, &data, None, Some(dir.path())).unwrap();
        let (m, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.config_hash, cfg.hash());
        assert_eq!(m.store.weights_hash().unwrap(), out.model.store.weights_hash().unwrap());
        let lines = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(lines.lines().count(), out.log.len());
    }
}
