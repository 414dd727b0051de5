//! Central finite-difference checks of the analytic gradients through the
//! vector stage, the raster stage and the residual fusion.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, Batch, PresenceMask};
use crate::fusion::{Umpe, UmpeConfig};
use crate::geometry::BevGridSpec;
use crate::nn::ParamStore;
use crate::raster_encoder::RasterEncoderConfig;
use crate::synth::{generate_dataset, SynthSpec, OBS_CHANNELS};
use crate::vector_encoder::VectorEncoderConfig;
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub suite: String,
    pub target: String,
    pub elements: usize,
    pub max_abs_err: f64,
    /// `max|a - n| / max(max|a|, max|n|)`.
    pub rel_err: f64,
    pub passed: bool,
}

/// Compares `d loss / d var` from autodiff against central differences on at
/// most `max_elems` evenly strided entries.
pub fn check_var(
    suite: &str,
    target: &str,
    var: &Var,
    loss: &dyn Fn() -> Result<Tensor>,
    max_elems: usize,
    tol: f64,
) -> Result<GradCheck> {
    let l = loss()?;
    let grads = l.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        None => vec![0.0; var.elem_count()],
    };
    let shape = var.shape().clone();
    let base: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n = base.len();
    let stride = n.div_ceil(max_elems.max(1)).max(1);
    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut v = base.clone();
        v[i] += delta;
        var.set(&Tensor::from_vec(v, shape.clone(), var.device())?.to_dtype(var.dtype())?)?;
        Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let mut max_abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut count = 0;
    for i in (0..n).step_by(stride) {
        let numeric = (eval_at(i, STEP)? - eval_at(i, -STEP)?) / (2.0 * STEP);
        max_abs = max_abs.max((numeric - analytic[i]).abs());
        scale = scale.max(numeric.abs()).max(analytic[i].abs());
        count += 1;
    }
    var.set(&Tensor::from_vec(base, shape, var.device())?.to_dtype(var.dtype())?)?;
    let rel = if scale > 0.0 { max_abs / scale } else { 0.0 };
    Ok(GradCheck {
        suite: suite.into(),
        target: target.into(),
        elements: count,
        max_abs_err: max_abs,
        rel_err: rel,
        passed: rel < tol && scale > 0.0 && rel.is_finite(),
    })
}

/// Tiny f64 setup shared by the three suites.
pub struct Fixture {
    pub store: ParamStore,
    pub umpe: Umpe,
    pub batch: Batch,
    pub x: Tensor,
    /// Fixed random projection turning an output into a scalar loss.
    pub proj: Tensor,
}

pub fn fixture(seed: u64) -> Result<Fixture> {
    let grid = BevGridSpec::window(8, 4);
    let width = 8;
    let spec = SynthSpec {
        grid,
        ..Default::default()
    };
    let samples = generate_dataset(seed, 2, &spec)?;
    let refs: Vec<_> = samples.iter().collect();
    let cfg = UmpeConfig {
        vector: VectorEncoderConfig {
            layers: 1,
            heads: 2,
            ff_width: 8,
            se2_hidden: 8,
            num_freqs: 2,
            ..Default::default()
        },
        raster: RasterEncoderConfig {
            widths: vec![4, 8],
            strides: vec![1, 1],
            embed_dim: 4,
            align_hidden: 8,
            ..Default::default()
        },
        learnable_alpha: true,
        ..Default::default()
    };
    let batch = collate(
        &refs,
        &[PresenceMask::ALL, PresenceMask::ALL],
        &grid,
        OBS_CHANNELS,
        cfg.vector.num_categories,
        DType::F64,
        &Device::Cpu,
    )?;
    let store = ParamStore::new(seed, DType::F64, Device::Cpu);
    let umpe = Umpe::new(&store.root(), cfg, width, &grid)?;
    // Move every parameter off its init so zero-initialized paths are live.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for (_, v) in store.vars() {
        let vals: Vec<f64> = v.as_tensor().flatten_all()?.to_vec1()?;
        let moved: Vec<f64> = vals.iter().map(|x| x + rng.gen_range(-0.1..0.1)).collect();
        v.set(&Tensor::from_vec(moved, v.shape().clone(), &Device::Cpu)?)?;
    }
    let mut rnd = |shape: (usize, usize, usize)| -> Result<Tensor> {
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
    };
    let x = rnd((2, grid.tokens(), width))?;
    let proj = rnd((2, grid.tokens(), width))?;
    Ok(Fixture {
        store,
        umpe,
        batch,
        x,
        proj,
    })
}

fn project(t: &Tensor, proj: &Tensor) -> Result<Tensor> {
    Ok((t * proj)?.sum_all()?)
}

fn store_var(f: &Fixture, name: &str) -> Result<Var> {
    f.store
        .var(name)
        .ok_or_else(|| Error::validation(format!("gradcheck: no parameter {name}")))
}

fn vars_matching(f: &Fixture, pat: &str) -> Vec<(String, Var)> {
    f.store.vars().into_iter().filter(|(n, _)| n.contains(pat)).collect()
}

/// (a) `Ȳ` w.r.t. HD polyline coordinates, the pose head output and the gate
/// network.
pub fn suite_vector(f: &Fixture, tol: f64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let pts = Var::from_tensor(f.batch.hd.points.as_ref().expect("fixture has HD polylines"))?;
    let loss = || -> Result<Tensor> {
        let mut b = f.batch.clone();
        b.hd.points = Some(pts.as_tensor().clone());
        project(&f.umpe.vector.forward(&f.x, &b)?.ybar, &f.proj)
    };
    out.push(check_var("vector", "hd polyline coords", &pts, &loss, 40, tol)?);
    let loss = || project(&f.umpe.vector.forward(&f.x, &f.batch)?.ybar, &f.proj);
    out.push(check_var("vector", "pose (se2 head output bias)", &store_var(f, "vec.se2.fc2.bias")?, &loss, 3, tol)?);
    for (name, v) in vars_matching(f, "vec.gate.") {
        out.push(check_var("vector", &name, &v, &loss, 12, tol)?);
    }
    Ok(out)
}

/// (b) `Z̄` w.r.t. the FiLM projections and the micro-alignment pose.
pub fn suite_raster(f: &Fixture, tol: f64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let loss = || project(&f.umpe.raster.forward(&f.x, &f.batch)?.zbar, &f.proj);
    for (name, v) in vars_matching(f, "film") {
        out.push(check_var("raster", &name, &v, &loss, 12, tol)?);
    }
    out.push(check_var("raster", "pose (align head output bias)", &store_var(f, "ras.align.fc2.bias")?, &loss, 3, tol)?);
    Ok(out)
}

/// (c) `X_UMPE` w.r.t. α and `W_res`.
pub fn suite_fusion(f: &Fixture, tol: f64) -> Result<Vec<GradCheck>> {
    let loss = || project(&f.umpe.forward(&f.x, &f.batch, 0.0)?.x_umpe, &f.proj);
    Ok(vec![
        check_var("fusion", "alpha", &store_var(f, "fusion.alpha")?, &loss, 1, tol)?,
        check_var("fusion", "w_res", &store_var(f, "fusion.w_res.weight")?, &loss, 24, tol)?,
    ])
}

pub fn run_all(seed: u64, tol: f64) -> Result<Vec<GradCheck>> {
    let f = fixture(seed)?;
    let mut out = suite_vector(&f, tol)?;
    out.extend(suite_raster(&f, tol)?);
    out.extend(suite_fusion(&f, tol)?);
    Ok(out)
}
