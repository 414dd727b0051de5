//! Multi-seed trend experiments on the synthetic benchmark: prior
//! ablations, powerset robustness and fusion order.

use serde::{Deserialize, Serialize};

use crate::data::{PresenceMask, Sample};
use crate::fusion::FusionOrder;
use crate::geometry::BevGridSpec;
use crate::synth::{generate_dataset, SynthSpec};
use crate::train::{eval_powerset, train_two_stage, PowersetTable, TrainConfig};
use crate::Result;

/// Environment variable selecting the full-scale protocol.
pub const FULL_PROTOCOL_ENV: &str = "UMPE_FULL_PROTOCOL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendProfile {
    pub name: String,
    pub seeds: Vec<u64>,
    pub train_frames: usize,
    pub eval_frames: usize,
    pub synth: SynthSpec,
    pub train: TrainConfig,
}

impl TrendProfile {
    /// 2,000 frames, 20 + 10 epochs, 3 seeds at the default model size.
    pub fn full() -> Self {
        TrendProfile {
            name: "full".into(),
            seeds: vec![0, 1, 2],
            train_frames: 2000,
            eval_frames: 400,
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
        }
    }

    /// Same thresholds and schedule shape at a size a single CPU core runs
    /// in minutes.
    pub fn reduced() -> Self {
        TrendProfile {
            name: "reduced".into(),
            seeds: vec![0, 1, 2],
            train_frames: 192,
            eval_frames: 64,
            synth: SynthSpec {
                grid: BevGridSpec::window(20, 10),
                ..Default::default()
            },
            train: TrainConfig {
                stage1_epochs: 12,
                stage2_epochs: 6,
                lr_prior: 4e-3,
                lr_bev: 2e-3,
                batch_size: 8,
                width: 16,
                stem_hidden: 16,
                vector_layers: 2,
                vector_ff: 32,
                raster_widths: vec![16, 16],
                raster_strides: vec![1, 1],
                head_hidden: 16,
                head_queries: 0,
                log_every: 0,
                ..Default::default()
            },
        }
    }

    pub fn from_env() -> Self {
        match std::env::var(FULL_PROTOCOL_ENV) {
            Ok(v) if v == "1" => Self::full(),
            _ => Self::reduced(),
        }
    }

    /// Train and eval sets for one seed; eval frames use a disjoint stream.
    pub fn data(&self, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
        Ok((
            generate_dataset(1000 + seed, self.train_frames, &self.synth)?,
            generate_dataset(9000 + seed, self.eval_frames, &self.synth)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub mean_iou: f64,
    pub iou: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// Powerset grid of the all-prior VR model.
    pub powerset: PowersetTable,
}

/// Training arms: `(name, train priors, fusion order)`.
pub fn arms() -> Vec<(&'static str, &'static str, FusionOrder)> {
    vec![
        ("none", "none", FusionOrder::Vr),
        ("vector", "hd+sd", FusionOrder::Vr),
        ("raster", "sat+rsd", FusionOrder::Vr),
        ("all", "all", FusionOrder::Vr),
        ("all_rv", "all", FusionOrder::Rv),
    ]
}

pub fn run_seed(p: &TrendProfile, seed: u64) -> Result<SeedResult> {
    let (train, eval) = p.data(seed)?;
    let mut out = Vec::new();
    let mut powerset = None;
    for (name, priors, order) in arms() {
        let cfg = TrainConfig {
            seed,
            train_priors: priors.into(),
            fusion_order: order,
            ..p.train.clone()
        };
        let res = train_two_stage(&cfg, &train, Some(&eval), None)?;
        let rep = res.eval.expect("eval set supplied");
        log::info!("seed {seed} arm {name}: mean IoU {:.4}", rep.mean_iou);
        if name == "all" {
            powerset = Some(eval_powerset(&res.model, &eval, res.final_alpha, cfg.batch_size)?);
        }
        out.push(ArmResult {
            arm: name.into(),
            seed,
            mean_iou: rep.mean_iou,
            iou: rep.iou,
        });
    }
    Ok(SeedResult {
        seed,
        arms: out,
        powerset: powerset.expect("all arm present"),
    })
}

pub fn arm_mean(results: &[SeedResult], arm: &str) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .flat_map(|r| r.arms.iter().filter(|a| a.arm == arm).map(|a| a.mean_iou))
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Seed-averaged mean IoU of one powerset row.
pub fn subset_mean(results: &[SeedResult], subset: PresenceMask) -> f64 {
    let label = subset.label();
    let v: Vec<f64> = results
        .iter()
        .flat_map(|r| r.powerset.rows.iter().filter(|row| row.subset == label).map(|row| row.mean_iou))
        .collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
