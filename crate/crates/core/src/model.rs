//! Full desk-scale pipeline: observation stem → BEV tokens `X` → UMPE →
//! mapping head. Parameters live under two prefixes: `bev.` for the stem and
//! head, `prior.` for everything UMPE adds.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::fusion::{Umpe, UmpeConfig, UmpeOutput};
use crate::geometry::BevGridSpec;
use crate::head::{HeadConfig, MapHead, MapPrediction};
use crate::nn::{Conv2d, ParamStore};
use crate::raster_encoder::flatten_hw;
use crate::Result;

pub const BEV_PREFIX: &str = "bev";
pub const PRIOR_PREFIX: &str = "prior";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    pub width: usize,
    pub obs_channels: usize,
    pub stem_hidden: usize,
    pub umpe: UmpeConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: BevGridSpec::window(40, 20),
            width: 32,
            obs_channels: crate::synth::OBS_CHANNELS,
            stem_hidden: 32,
            umpe: UmpeConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Baseline BEV tokens `X`, `(B, HW, C)`.
    pub x: Tensor,
    pub umpe: UmpeOutput,
    pub pred: MapPrediction,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    stem1: Conv2d,
    stem2: Conv2d,
    pub umpe: Umpe,
    pub head: MapHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.grid.validate()?;
        let store = ParamStore::new(seed, dtype, device.clone());
        let root = store.root();
        let bev = root.pp(BEV_PREFIX);
        let stem1 = Conv2d::new(&bev.pp("stem1"), cfg.obs_channels, cfg.stem_hidden, 3, 1)?;
        let stem2 = Conv2d::new(&bev.pp("stem2"), cfg.stem_hidden, cfg.width, 3, 1)?;
        let umpe = Umpe::new(&root.pp(PRIOR_PREFIX), cfg.umpe.clone(), cfg.width, &cfg.grid)?;
        let head = MapHead::new(&bev.pp("head"), cfg.head.clone(), cfg.width, &cfg.grid)?;
        Ok(Model {
            cfg,
            store,
            stem1,
            stem2,
            umpe,
            head,
        })
    }

    /// Baseline BEV tokens from the observation maps.
    pub fn bev_tokens(&self, obs: &Tensor) -> Result<Tensor> {
        let h = self.stem2.forward(&self.stem1.forward(obs)?.relu()?)?;
        flatten_hw(&h)
    }

    pub fn forward(&self, batch: &Batch, alpha: f64) -> Result<ModelOutput> {
        let x = self.bev_tokens(&batch.obs)?;
        let umpe = self.umpe.forward(&x, batch, alpha)?;
        let pred = self.head.decode_map(&umpe.x_umpe)?;
        Ok(ModelOutput { x, umpe, pred })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}
