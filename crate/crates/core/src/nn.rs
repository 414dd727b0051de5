//! Parameter storage and the small set of layers the encoders are built from.
//!
//! Parameters are created from a seeded ChaCha stream so a model built twice
//! with the same seed is bit-identical, independent of candle's global RNG.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable parameters, ordered by name.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.names().len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::validation(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| inner.rng.gen_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller keeps the draw sequence explicit and portable.
                    let u1: f64 = inner.rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = inner.rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.lock().expect("param store poisoned").vars.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").vars.get(name).cloned()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn weights_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the stored value; the name sets must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.vars();
        if map.len() != vars.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} tensors, model has {}",
                map.len(),
                vars.len()
            )));
        }
        for (name, var) in vars {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::validation(format!("checkpoint missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::validation(format!("shape mismatch for {name}")));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get_or_init(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            weight: s.get("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: Some(s.get("bias", &[d_out], Init::Uniform(bound))?),
        })
    }

    pub fn zeros(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: s.get("weight", &[d_out, d_in], Init::Zeros)?,
            bias: Some(s.get("bias", &[d_out], Init::Zeros)?),
        })
    }

    pub fn no_bias(s: &Scope, d_in: usize, d_out: usize, init: Init) -> Result<Self> {
        Ok(Linear {
            weight: s.get("weight", &[d_out, d_in], init)?,
            bias: None,
        })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::validation("linear on scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok(Conv2d {
            weight: s.get("weight", &[c_out, c_in, k, k], Init::Uniform(bound))?,
            bias: Some(s.get("bias", &[c_out], Init::Uniform(bound))?),
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension with a learnable affine,
/// initialized to the identity.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(s: &Scope, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&s.pp("fc1"), d_in, hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, d_out)?,
        })
    }

    /// Output layer starts at zero so the network initially emits zeros.
    pub fn zero_output(s: &Scope, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(&s.pp("fc1"), d_in, hidden)?,
            fc2: Linear::zeros(&s.pp("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Numerically stable softmax over the last dimension. The subtracted max is
/// detached; softmax is shift-invariant so gradients are unaffected.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + e^{-x}) with primitive ops so every backend path has a gradient.
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Mean over `dim` of `x` weighted by a 0/1 `mask` broadcastable to `x`;
/// rows with an all-zero mask yield zero.
pub fn masked_mean(x: &Tensor, mask: &Tensor, dim: usize) -> Result<Tensor> {
    let m = mask.broadcast_as(x.shape())?;
    let num = (x * &m)?.sum(dim)?;
    let den = m.sum(dim)?.clamp(1.0, f64::MAX)?;
    Ok((num / den)?)
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(s: &Scope, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&s.pp("q"), dim, dim)?,
            k: Linear::new(&s.pp("k"), dim, dim)?,
            v: Linear::new(&s.pp("v"), dim, dim)?,
            o: Linear::new(&s.pp("o"), dim, dim)?,
            heads,
        })
    }

    /// `query` `(B, Nq, C)`, `kv` `(B, Nk, C)`, `bias` broadcastable to
    /// `(B, heads, Nq, Nk)` and added to the scaled logits.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        attend(&self.q, &self.k, &self.v, &self.o, self.heads, query, kv, bias)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Scaled dot-product attention with explicit projections; shared by
/// self-attention and the per-source cross-attention.
#[allow(clippy::too_many_arguments)]
pub fn attend(
    wq: &Linear,
    wk: &Linear,
    wv: &Linear,
    wo: &Linear,
    heads: usize,
    query: &Tensor,
    kv: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, nq, c) = query.dims3()?;
    let d = c / heads;
    let q = split_heads(&wq.forward(query)?, heads)?;
    let k = split_heads(&wk.forward(kv)?, heads)?;
    let v = split_heads(&wv.forward(kv)?, heads)?;
    let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
    let logits = match bias {
        Some(bias) => logits.broadcast_add(bias)?,
        None => logits,
    };
    let attn = softmax_last(&logits)?;
    let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, nq, c))?;
    wo.forward(&out)
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl EncoderLayer {
    pub fn new(s: &Scope, dim: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(&s.pp("ln1"), dim)?,
            attn: MultiHeadAttention::new(&s.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&s.pp("ln2"), dim)?,
            ff: Mlp::new(&s.pp("ff"), dim, ff, dim)?,
        })
    }

    /// `key_bias` is `(B, 1, 1, N)`: 0 for real tokens, a large negative
    /// value for padding.
    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, key_bias)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Bias added to logits of padded keys.
pub const PAD_LOGIT: f64 = -1e9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_deterministic_and_ordered() {
        let a = ParamStore::new(3, DType::F64, Device::Cpu);
        let b = ParamStore::new(3, DType::F64, Device::Cpu);
        for s in [&a, &b] {
            Linear::new(&s.root().pp("z"), 4, 2).unwrap();
            Linear::new(&s.root().pp("a"), 2, 2).unwrap();
        }
        assert_eq!(a.weights_hash().unwrap(), b.weights_hash().unwrap());
        assert_eq!(a.names(), vec!["a.bias", "a.weight", "z.bias", "z.weight"]);
        let c = ParamStore::new(4, DType::F64, Device::Cpu);
        Linear::new(&c.root().pp("z"), 4, 2).unwrap();
        Linear::new(&c.root().pp("a"), 2, 2).unwrap();
        assert_ne!(a.weights_hash().unwrap(), c.weights_hash().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = ParamStore::new(1, DType::F64, Device::Cpu);
        Mlp::new(&a.root().pp("m"), 3, 5, 2).unwrap();
        a.save(&dir.path().join("w.safetensors")).unwrap();
        let b = ParamStore::new(2, DType::F64, Device::Cpu);
        Mlp::new(&b.root().pp("m"), 3, 5, 2).unwrap();
        b.load(&dir.path().join("w.safetensors")).unwrap();
        assert_eq!(a.weights_hash().unwrap(), b.weights_hash().unwrap());
    }

    #[test]
    fn layer_norm_normalizes() {
        let s = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&s.root(), 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = ln.forward(&x).unwrap().to_vec2().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, -3.0, 700.0], [PAD_LOGIT, PAD_LOGIT, PAD_LOGIT]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in y {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
