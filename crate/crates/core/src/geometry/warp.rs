use candle_core::{DType, Device, Tensor};

use super::BevGridSpec;
use crate::{Error, Result};

/// Batched rigid transform. `pose` is `(B, 3)` rows of `(dx, dy, dtheta)`,
/// `pts` is `(B, M, 2)`. Differentiable in both arguments.
pub fn se2_apply_t(pose: &Tensor, pts: &Tensor) -> Result<Tensor> {
    let (b, _, two) = pts.dims3()?;
    if two != 2 || pose.dims2()? != (b, 3) {
        return Err(Error::validation(format!(
            "se2_apply_t: pose {:?} incompatible with points {:?}",
            pose.shape(),
            pts.shape()
        )));
    }
    let dx = pose.narrow(1, 0, 1)?;
    let dy = pose.narrow(1, 1, 1)?;
    let th = pose.narrow(1, 2, 1)?;
    let (c, s) = (th.cos()?, th.sin()?);
    let x = pts.narrow(2, 0, 1)?.squeeze(2)?;
    let y = pts.narrow(2, 1, 1)?.squeeze(2)?;
    let nx = (x.broadcast_mul(&c)? - y.broadcast_mul(&s)?)?.broadcast_add(&dx)?;
    let ny = (x.broadcast_mul(&s)? + y.broadcast_mul(&c)?)?.broadcast_add(&dy)?;
    Ok(Tensor::stack(&[nx, ny], 2)?)
}

/// Batched normalized affine, `(B, 3)` poses to `(B, 2, 3)` matrices.
pub fn affine_theta_t(pose: &Tensor, grid: &BevGridSpec) -> Result<Tensor> {
    grid.validate()?;
    let sx = 2.0 / (grid.width as f64 - 1.0) / grid.mpp_x;
    let sy = 2.0 / (grid.height as f64 - 1.0) / grid.mpp_y;
    let tx = pose.narrow(1, 0, 1)?.affine(sx, 0.0)?;
    let ty = pose.narrow(1, 1, 1)?.affine(sy, 0.0)?;
    let th = pose.narrow(1, 2, 1)?;
    let (c, s) = (th.cos()?, th.sin()?);
    let row0 = Tensor::cat(&[&c, &s.neg()?, &tx], 1)?;
    let row1 = Tensor::cat(&[&s, &c, &tx.zeros_like()?.add(&ty)?], 1)?;
    Ok(Tensor::stack(&[row0, row1], 1)?)
}

fn normalized_base_grid(h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        let v = -1.0 + 2.0 * r as f64 / (h as f64 - 1.0);
        for c in 0..w {
            let u = -1.0 + 2.0 * c as f64 / (w as f64 - 1.0);
            data.extend_from_slice(&[u, v, 1.0]);
        }
    }
    Ok(Tensor::from_vec(data, (h * w, 3), dev)?.to_dtype(dtype)?)
}

/// Bilinear resampling of `fmap` (`B×C×H×W`) at `theta·[u, v, 1]ᵀ` for every
/// output pixel, align-corners normalized coordinates. Bilinear taps that
/// fall outside the input read zero, so samples more than one pixel outside
/// `[-1, 1]²` produce zero. Differentiable in `fmap` and `theta`.
pub fn warp_bilinear(fmap: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = fmap.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::validation("warp_bilinear: spatial dims must be >= 2"));
    }
    if theta.dims3()? != (b, 2, 3) {
        return Err(Error::validation(format!(
            "warp_bilinear: theta {:?} does not match batch {b}",
            theta.shape()
        )));
    }
    let dev = fmap.device();
    let dtype = fmap.dtype();
    let hw = h * w;
    let base = normalized_base_grid(h, w, dtype, dev)?
        .unsqueeze(0)?
        .broadcast_as((b, hw, 3))?
        .contiguous()?;
    let src = base.matmul(&theta.transpose(1, 2)?.contiguous()?)?; // (B, HW, 2)
    let u = src.narrow(2, 0, 1)?.squeeze(2)?;
    let v = src.narrow(2, 1, 1)?.squeeze(2)?;
    let half_w = (w as f64 - 1.0) / 2.0;
    let half_h = (h as f64 - 1.0) / 2.0;
    let px = u.affine(half_w, half_w)?;
    let py = v.affine(half_h, half_h)?;
    let x0 = px.detach().floor()?;
    let y0 = py.detach().floor()?;
    let fx = (&px - &x0)?;
    let fy = (&py - &y0)?;

    let x0v: Vec<f64> = x0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let y0v: Vec<f64> = y0.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

    let flat = fmap.reshape((b, c, hw))?;
    let mut acc: Option<Tensor> = None;
    for (ox, oy) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)] {
        let mut idx = Vec::with_capacity(b * hw);
        let mut mask = Vec::with_capacity(b * hw);
        for (&xf, &yf) in x0v.iter().zip(&y0v) {
            let xi = xf as i64 + ox;
            let yi = yf as i64 + oy;
            if xf.is_finite() && yf.is_finite() && xi >= 0 && yi >= 0 && xi < w as i64 && yi < h as i64 {
                idx.push((yi as usize * w + xi as usize) as u32);
                mask.push(1.0f64);
            } else {
                idx.push(0);
                mask.push(0.0);
            }
        }
        let idx = Tensor::from_vec(idx, (b, 1, hw), dev)?
            .broadcast_as((b, c, hw))?
            .contiguous()?;
        let mask = Tensor::from_vec(mask, (b, hw), dev)?.to_dtype(dtype)?;
        let wx = if ox == 0 { fx.affine(-1.0, 1.0)? } else { fx.clone() };
        let wy = if oy == 0 { fy.affine(-1.0, 1.0)? } else { fy.clone() };
        let weight = (wx * wy)?.mul(&mask)?.unsqueeze(1)?;
        let tap = flat.gather(&idx, 2)?.broadcast_mul(&weight)?;
        acc = Some(match acc {
            None => tap,
            Some(a) => (a + tap)?,
        });
    }
    Ok(acc.expect("four taps").reshape((b, c, h, w))?)
}

fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    for i in 0..out {
        let src = if out > 1 {
            i as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
        } else {
            0.0
        };
        let i0 = (src.floor() as usize).min(inp - 1);
        let f = src - i0 as f64;
        m[i * inp + i0] += 1.0 - f;
        if f > 0.0 && i0 + 1 < inp {
            m[i * inp + i0 + 1] += f;
        }
    }
    m
}

/// Align-corners bilinear resize of `B×C×h×w` to `B×C×H×W`, expressed as two
/// matrix products so it differentiates like any linear map.
pub fn resize_bilinear(fmap: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = fmap.dims4()?;
    let (oh, ow) = size;
    if (h, w) == (oh, ow) {
        return Ok(fmap.clone());
    }
    let dev = fmap.device();
    let dtype = fmap.dtype();
    let rx_t = Tensor::from_vec(interp_matrix(ow, w), (ow, w), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let ry_t = Tensor::from_vec(interp_matrix(oh, h), (oh, h), dev)?
        .to_dtype(dtype)?
        .t()?
        .contiguous()?;
    let t = fmap.reshape((b * c * h, w))?.matmul(&rx_t)?; // (BCh, W)
    let t = t
        .reshape((b * c, h, ow))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * ow, h))?
        .matmul(&ry_t)?; // (BCW, H)
    Ok(t
        .reshape((b * c, ow, oh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, oh, ow))?)
}
