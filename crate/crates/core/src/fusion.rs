//! Residual composition of the two branches and the α schedule.
//!
//! `X_UMPE = LN(Ȳ) + α · W_res · LN(Z̄)` with `W_res` zero-initialized, so a
//! fresh model reproduces the vector-only pipeline exactly.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::geometry::BevGridSpec;
use crate::nn::{Init, LayerNorm, Linear, Scope};
use crate::raster_encoder::{RasterEncoder, RasterEncoderConfig, RasterOutput};
use crate::vector_encoder::{Se2Term, VectorEncoder, VectorEncoderConfig, VectorOutput};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// Vector stage on `X`, raster residual on top.
    Vr,
    /// Raster residual on `X`, vector stage on the result.
    Rv,
}

impl std::str::FromStr for FusionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vr" => Ok(FusionOrder::Vr),
            "rv" => Ok(FusionOrder::Rv),
            other => Err(Error::validation(format!("unknown fusion order `{other}` (expected vr or rv)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Ramp {
    Step,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_ceiling: f64,
    pub stage2_ceiling: f64,
    pub stage2_ramp: Stage2Ramp,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            stage1_epochs: 20,
            stage2_epochs: 10,
            stage1_ceiling: 0.2,
            stage2_ceiling: 0.6,
            stage2_ramp: Stage2Ramp::Step,
        }
    }
}

/// α for a zero-based epoch: linear from 0 at epoch 0 to the stage-1 ceiling
/// at the last stage-1 epoch, then a step (or linear ramp reaching the
/// ceiling at the last epoch) in stage 2.
pub fn alpha_at(epoch: usize, sched: &AlphaSchedule) -> f64 {
    let s1 = sched.stage1_epochs;
    let a = if epoch < s1 {
        if s1 <= 1 {
            0.0
        } else {
            sched.stage1_ceiling * epoch as f64 / (s1 - 1) as f64
        }
    } else {
        match sched.stage2_ramp {
            Stage2Ramp::Step => sched.stage2_ceiling,
            Stage2Ramp::Linear => {
                let k = (epoch - s1 + 1) as f64 / sched.stage2_epochs.max(1) as f64;
                sched.stage1_ceiling + (sched.stage2_ceiling - sched.stage1_ceiling) * k.min(1.0)
            }
        }
    };
    a.clamp(0.0, sched.stage2_ceiling)
}

/// Zero-initialized residual injection with its two LayerNorms.
#[derive(Clone, Debug)]
pub struct ResidualFusion {
    pub ln_y: LayerNorm,
    pub ln_z: LayerNorm,
    pub w_res: Linear,
}

impl ResidualFusion {
    pub fn new(s: &Scope, width: usize) -> Result<Self> {
        Ok(ResidualFusion {
            ln_y: LayerNorm::new(&s.pp("ln_y"), width)?,
            ln_z: LayerNorm::new(&s.pp("ln_z"), width)?,
            w_res: Linear::no_bias(&s.pp("w_res"), width, width, Init::Zeros)?,
        })
    }

    /// `ybar`, `zbar` are `(B, HW, C)`, `alpha` a scalar tensor and `mask`
    /// `(B)` selects frames with any raster prior.
    pub fn forward(&self, ybar: &Tensor, zbar: &Tensor, alpha: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, _, c) = ybar.dims3()?;
        if zbar.dims() != ybar.dims() || c != self.w_res.weight.dim(0)? {
            return Err(Error::validation(format!(
                "fusion width mismatch: Ȳ {:?}, Z̄ {:?}",
                ybar.dims(),
                zbar.dims()
            )));
        }
        let inj = self.w_res.forward(&self.ln_z.forward(zbar)?)?;
        let scale = mask.reshape((b, 1, 1))?.broadcast_mul(&alpha.reshape((1, 1, 1))?)?;
        Ok((self.ln_y.forward(ybar)? + inj.broadcast_mul(&scale)?)?)
    }
}

/// Scalar-α convenience over [`ResidualFusion::forward`] for a single frame
/// set where every frame carries raster priors.
pub fn residual_fuse(ybar: &Tensor, zbar: &Tensor, alpha: f64, p: &ResidualFusion) -> Result<Tensor> {
    let b = ybar.dim(0)?;
    let a = Tensor::new(alpha, ybar.device())?.to_dtype(ybar.dtype())?;
    let mask = Tensor::ones(b, ybar.dtype(), ybar.device())?;
    p.forward(ybar, zbar, &a, &mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmpeConfig {
    pub vector: VectorEncoderConfig,
    pub raster: RasterEncoderConfig,
    pub order: FusionOrder,
    /// Use a trained scalar instead of the schedule value.
    pub learnable_alpha: bool,
}

impl Default for UmpeConfig {
    fn default() -> Self {
        UmpeConfig {
            vector: VectorEncoderConfig::default(),
            raster: RasterEncoderConfig::default(),
            order: FusionOrder::Vr,
            learnable_alpha: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UmpeOutput {
    pub x_umpe: Tensor,
    pub vector: VectorOutput,
    pub raster: RasterOutput,
    pub alpha: Tensor,
}

impl UmpeOutput {
    pub fn se2_terms(&self) -> impl Iterator<Item = &Se2Term> {
        self.vector.se2.iter().chain(self.raster.se2.iter())
    }
}

#[derive(Clone, Debug)]
pub struct Umpe {
    pub cfg: UmpeConfig,
    pub vector: VectorEncoder,
    pub raster: RasterEncoder,
    pub residual: ResidualFusion,
    /// Output normalization used only by the RV order.
    ln_out: Option<LayerNorm>,
    alpha_param: Option<Tensor>,
}

impl Umpe {
    pub fn new(s: &Scope, cfg: UmpeConfig, width: usize, grid: &BevGridSpec) -> Result<Self> {
        let vector = VectorEncoder::new(&s.pp("vec"), cfg.vector.clone(), width, grid)?;
        let raster = RasterEncoder::new(&s.pp("ras"), cfg.raster.clone(), width, grid)?;
        let residual = ResidualFusion::new(&s.pp("fusion"), width)?;
        let ln_out = match cfg.order {
            FusionOrder::Rv => Some(LayerNorm::new(&s.pp("fusion").pp("ln_out"), width)?),
            FusionOrder::Vr => None,
        };
        let alpha_param = if cfg.learnable_alpha {
            Some(s.pp("fusion").get("alpha", &[], Init::Zeros)?)
        } else {
            None
        };
        Ok(Umpe {
            cfg,
            vector,
            raster,
            residual,
            ln_out,
            alpha_param,
        })
    }

    fn alpha_tensor(&self, scheduled: f64, like: &Tensor) -> Result<Tensor> {
        match &self.alpha_param {
            Some(a) => Ok(a.clone()),
            None => Ok(Tensor::new(scheduled, like.device())?.to_dtype(like.dtype())?),
        }
    }

    /// `x` are the BEV tokens `(B, HW, C)`; `alpha` the scheduled value.
    pub fn forward(&self, x: &Tensor, batch: &Batch, alpha: f64) -> Result<UmpeOutput> {
        let a = self.alpha_tensor(alpha, x)?;
        match self.cfg.order {
            FusionOrder::Vr => {
                let vector = self.vector.forward(x, batch)?;
                let raster = self.raster.forward(x, batch)?;
                let x_umpe = self.residual.forward(&vector.ybar, &raster.zbar, &a, &raster.any_present)?;
                Ok(UmpeOutput {
                    x_umpe,
                    vector,
                    raster,
                    alpha: a,
                })
            }
            FusionOrder::Rv => {
                let raster = self.raster.forward(x, batch)?;
                let x1 = self.residual.forward(x, &raster.zbar, &a, &raster.any_present)?;
                let vector = self.vector.forward(&x1, batch)?;
                let ln = self.ln_out.as_ref().expect("RV order owns an output norm");
                Ok(UmpeOutput {
                    x_umpe: ln.forward(&vector.ybar)?,
                    vector,
                    raster,
                    alpha: a,
                })
            }
        }
    }
}
