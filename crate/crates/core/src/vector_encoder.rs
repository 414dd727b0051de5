//! Vector-prior branch: SE(2) pre-alignment, sinusoidal tokenization, a
//! transformer over each frame's polylines with a per-token confidence, and
//! per-source cross-attention from the BEV queries with an additive
//! log-confidence bias, mixed by presence-normalized channel gates.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conventions::{Source, EPS, WINDOW_LONGITUDINAL_M, X_MAX};
use crate::data::{Batch, VectorSourceBatch};
use crate::gate::GateNetwork;
use crate::geometry::{se2_apply_t, BevGridSpec, PointArray, Pose2};
use crate::nn::{attend, masked_mean, sigmoid, EncoderLayer, LayerNorm, Linear, Mlp, Scope, PAD_LOGIT};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorEncoderConfig {
    pub num_freqs: usize,
    /// Lowest angular frequency, rad/m.
    pub omega0: f64,
    pub points: usize,
    pub num_categories: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub se2_hidden: usize,
    pub lambda_t: f64,
    pub lambda_r: f64,
    /// One key/value projection pair for both sources instead of one each.
    pub shared_kv: bool,
    /// Add the queries back onto the gated mix.
    pub residual: bool,
    pub pre_align: bool,
}

impl Default for VectorEncoderConfig {
    fn default() -> Self {
        VectorEncoderConfig {
            num_freqs: 8,
            omega0: 2.0 * std::f64::consts::PI / WINDOW_LONGITUDINAL_M,
            points: 11,
            num_categories: 8,
            layers: 6,
            heads: 4,
            ff_width: 64,
            se2_hidden: 32,
            lambda_t: 0.1,
            lambda_r: 1.0,
            shared_kv: false,
            residual: true,
            pre_align: true,
        }
    }
}

impl VectorEncoderConfig {
    /// `ω_k = ω_0 · 2^(k-1)`, `k = 1..K`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.num_freqs).map(|k| self.omega0 * 2f64.powi(k as i32)).collect()
    }

    pub fn token_width(&self) -> usize {
        self.points * 4 * self.num_freqs + self.num_categories + 2
    }
}

/// `[sin ω_k x, cos ω_k x, sin ω_k y, cos ω_k y]` for each `k` in order.
pub fn sinusoidal_embed(x: f64, y: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * freqs.len());
    for &w in freqs {
        out.extend_from_slice(&[(w * x).sin(), (w * x).cos(), (w * y).sin(), (w * y).cos()]);
    }
    out
}

fn source_one_hot(source: Source) -> [f64; 2] {
    match source {
        Source::Sd => [0.0, 1.0],
        _ => [1.0, 0.0],
    }
}

/// Raw token `[point encodings (P·4K); category one-hot; source one-hot]`.
pub fn tokenize_polyline(pl: &PointArray, category: &[f64], source: &[f64], freqs: &[f64], points: usize) -> Result<Vec<f64>> {
    if pl.len() != points {
        return Err(Error::validation(format!("tokenize: {} points, expected {points}", pl.len())));
    }
    if source.len() != 2 {
        return Err(Error::validation("tokenize: source one-hot must have 2 entries"));
    }
    let mut z = Vec::with_capacity(points * 4 * freqs.len() + category.len() + 2);
    for p in pl.points() {
        z.extend(sinusoidal_embed(p[0], p[1], freqs));
    }
    z.extend_from_slice(category);
    z.extend_from_slice(source);
    Ok(z)
}

/// `λ_t‖T‖² + λ_r Δθ²`.
pub fn se2_regularizer(pose: Pose2, lambda_t: f64, lambda_r: f64) -> f64 {
    lambda_t * (pose.dx * pose.dx + pose.dy * pose.dy) + lambda_r * pose.dtheta * pose.dtheta
}

/// Sinusoidal embedding of the last axis `(…, 2)` into `(…, 4K)`.
pub fn sinusoidal_embed_t(pts: &Tensor, freqs: &[f64]) -> Result<Tensor> {
    let dims = pts.dims().to_vec();
    let k = freqs.len();
    let lead = &dims[..dims.len() - 1];
    let w = Tensor::from_vec(freqs.to_vec(), k, pts.device())?.to_dtype(pts.dtype())?;
    let x = pts.narrow(dims.len() - 1, 0, 1)?.broadcast_mul(&w)?;
    let y = pts.narrow(dims.len() - 1, 1, 1)?.broadcast_mul(&w)?;
    let stacked = Tensor::stack(&[x.sin()?, x.cos()?, y.sin()?, y.cos()?], dims.len())?;
    let mut out_dims = lead.to_vec();
    out_dims.push(4 * k);
    Ok(stacked.reshape(out_dims)?)
}

/// Additive attention bias `(B, 1, 1, N)`: `log(clamp(U, ε, 1))` on real keys,
/// a large negative value on padding.
pub fn confidence_bias(conf: &Tensor, key_mask: &Tensor, eps: f64) -> Result<Tensor> {
    let log_u = conf.clamp(eps, 1.0)?.log()?;
    let pad = key_mask.affine(-1.0, 1.0)?.affine(PAD_LOGIT, 0.0)?;
    let bias = ((log_u * key_mask)? + pad)?;
    Ok(bias.unsqueeze(1)?.unsqueeze(1)?)
}

/// Contextualized polyline tokens and their confidences.
#[derive(Clone, Debug)]
pub struct PolylineTokens {
    /// `(B, N, C)`.
    pub tokens: Tensor,
    /// `(B, N)` in `(0, 1)`.
    pub confidence: Tensor,
}

/// Output of one source's alignment and attention.
#[derive(Clone, Debug)]
pub struct SourceOutput {
    pub y: Tensor,
    pub pose: Tensor,
    pub confidence: Tensor,
}

/// SE(2) regularizer split into its two logged components.
#[derive(Clone, Debug)]
pub struct Se2Term {
    pub name: String,
    /// `(B, 3)` predicted poses.
    pub pose: Tensor,
    pub translation: Tensor,
    pub rotation: Tensor,
}

impl Se2Term {
    pub fn total(&self) -> Result<Tensor> {
        Ok((&self.translation + &self.rotation)?)
    }
}

#[derive(Clone, Debug)]
pub struct VectorOutput {
    /// `(B, HW, C)` fused vector-prior tokens.
    pub ybar: Tensor,
    pub y_hd: Option<Tensor>,
    pub y_sd: Option<Tensor>,
    pub gates: Option<(Tensor, Tensor)>,
    pub se2: Vec<Se2Term>,
    /// Frames where both vector sources were absent and `X` passed through.
    pub passthrough: Vec<bool>,
}

#[derive(Clone, Debug)]
struct KvProjection {
    k: Linear,
    v: Linear,
}

#[derive(Clone, Debug)]
pub struct VectorEncoder {
    pub cfg: VectorEncoderConfig,
    width: usize,
    freqs: Vec<f64>,
    input_proj: Linear,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    conf_head: Linear,
    se2_head: Mlp,
    query_pos: Linear,
    wq: Linear,
    wo: Linear,
    kv_hd: KvProjection,
    kv_sd: KvProjection,
    gate: GateNetwork,
    /// `(HW, 4K)` sinusoidal code of each BEV cell center.
    cell_code: Tensor,
}

impl VectorEncoder {
    pub fn new(s: &Scope, cfg: VectorEncoderConfig, width: usize, grid: &BevGridSpec) -> Result<Self> {
        let freqs = cfg.frequencies();
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(&s.pp(&format!("layer{i}")), width, cfg.heads, cfg.ff_width))
            .collect::<Result<Vec<_>>>()?;
        let kv = |name: &str| -> Result<KvProjection> {
            Ok(KvProjection {
                k: Linear::new(&s.pp(name).pp("k"), width, width)?,
                v: Linear::new(&s.pp(name).pp("v"), width, width)?,
            })
        };
        let kv_hd = kv("kv_hd")?;
        let kv_sd = if cfg.shared_kv { kv_hd.clone() } else { kv("kv_sd")? };
        let mut cells = Vec::with_capacity(grid.tokens() * 2);
        for r in 0..grid.height {
            for c in 0..grid.width {
                let (x, y) = grid.pixel_to_ego(r as f64, c as f64);
                cells.extend_from_slice(&[x, y]);
            }
        }
        let cells = Tensor::from_vec(cells, (grid.tokens(), 2), s.device())?.to_dtype(s.dtype())?;
        Ok(VectorEncoder {
            input_proj: Linear::new(&s.pp("input_proj"), cfg.token_width(), width)?,
            layers,
            final_ln: LayerNorm::new(&s.pp("final_ln"), width)?,
            conf_head: Linear::new(&s.pp("conf_head"), width, 1)?,
            se2_head: Mlp::zero_output(&s.pp("se2"), 2 + width, cfg.se2_hidden, 3)?,
            query_pos: Linear::new(&s.pp("query_pos"), 4 * cfg.num_freqs, width)?,
            wq: Linear::new(&s.pp("wq"), width, width)?,
            wo: Linear::new(&s.pp("wo"), width, width)?,
            kv_hd,
            kv_sd,
            gate: GateNetwork::new(&s.pp("gate"), width)?,
            cell_code: sinusoidal_embed_t(&cells, &freqs)?,
            freqs,
            width,
            cfg,
        })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Regresses `(Δx, Δy, Δθ)` per frame from mean-pooled raw points and the
    /// mean BEV token. Returns the pose `(B, 3)`.
    pub fn predict_se2(&self, points: &Tensor, key_mask: &Tensor, bev: &Tensor) -> Result<Tensor> {
        let (b, n, p, _) = points.dims4()?;
        let flat = points.reshape((b, n * p, 2))?;
        let mask = key_mask.unsqueeze(2)?.broadcast_as((b, n, p))?.reshape((b, n * p, 1))?;
        let pooled_pts = (masked_mean(&flat, &mask, 1)? / X_MAX)?;
        let pooled_bev = bev.mean(1)?;
        self.se2_head.forward(&Tensor::cat(&[pooled_pts, pooled_bev], 1)?)
    }

    /// Regularizer components, averaged over frames flagged in `active` `(B)`.
    pub fn se2_terms(&self, name: &str, pose: &Tensor, active: &Tensor) -> Result<Se2Term> {
        se2_terms(name, pose, active, self.cfg.lambda_t, self.cfg.lambda_r)
    }

    /// Raw tokens `(B, N, P·4K + K_cat + 2)` from already corrected points.
    pub fn tokenize(&self, points: &Tensor, categories: &Tensor, source: Source) -> Result<Tensor> {
        let (b, n, p, _) = points.dims4()?;
        if p != self.cfg.points {
            return Err(Error::validation(format!("expected {} points per polyline, got {p}", self.cfg.points)));
        }
        let enc = sinusoidal_embed_t(points, &self.freqs)?.reshape((b, n, p * 4 * self.cfg.num_freqs))?;
        let src = Tensor::from_vec(source_one_hot(source).to_vec(), (1, 1, 2), points.device())?
            .to_dtype(points.dtype())?
            .broadcast_as((b, n, 2))?;
        Ok(Tensor::cat(&[enc, categories.clone(), src], 2)?)
    }

    /// Transformer over each frame's tokens plus the sigmoid confidence head.
    pub fn encode_tokens(&self, z: &Tensor, key_mask: &Tensor) -> Result<PolylineTokens> {
        let ones = key_mask.ones_like()?;
        let key_bias = confidence_bias(&ones, key_mask, EPS)?;
        let mut h = self.input_proj.forward(z)?;
        for layer in &self.layers {
            h = layer.forward(&h, Some(&key_bias))?;
        }
        let h = self.final_ln.forward(&h)?;
        let confidence = sigmoid(&self.conf_head.forward(&h)?.squeeze(2)?)?;
        Ok(PolylineTokens { tokens: h, confidence })
    }

    /// BEV queries with the cell position code added, `(B, HW, C)`.
    pub fn queries(&self, x: &Tensor) -> Result<Tensor> {
        let pos = self.query_pos.forward(&self.cell_code)?;
        Ok(x.broadcast_add(&pos)?)
    }

    /// Confidence-biased cross-attention from `x` to one source. Frames with
    /// no polylines get all-zero output.
    pub fn cross_attend(&self, x: &Tensor, tokens: &PolylineTokens, key_mask: &Tensor, source: Source) -> Result<Tensor> {
        let kv = match source {
            Source::Sd => &self.kv_sd,
            _ => &self.kv_hd,
        };
        let bias = confidence_bias(&tokens.confidence, key_mask, EPS)?;
        let q = self.queries(x)?;
        let y = attend(&self.wq, &kv.k, &kv.v, &self.wo, self.cfg.heads, &q, &tokens.tokens, Some(&bias))?;
        let has_keys = key_mask.max_keepdim(1)?.unsqueeze(2)?; // (B, 1, 1)
        Ok(y.broadcast_mul(&has_keys)?)
    }

    fn encode_source(&self, x: &Tensor, batch: &VectorSourceBatch, source: Source) -> Result<Option<(SourceOutput, Se2Term)>> {
        let (Some(points), Some(cats), Some(mask)) = (&batch.points, &batch.categories, &batch.key_mask) else {
            return Ok(None);
        };
        let (b, n, p, _) = points.dims4()?;
        let pose = if self.cfg.pre_align {
            self.predict_se2(points, mask, x)?
        } else {
            Tensor::zeros((b, 3), x.dtype(), x.device())?
        };
        let corrected = se2_apply_t(&pose, &points.reshape((b, n * p, 2))?)?.reshape((b, n, p, 2))?;
        let z = self.tokenize(&corrected, cats, source)?;
        let tokens = self.encode_tokens(&z, mask)?;
        let y = self.cross_attend(x, &tokens, mask, source)?;
        let active = mask.max(1)?;
        let term = self.se2_terms(&format!("vec_{}", source.name()), &pose, &active)?;
        Ok(Some((
            SourceOutput {
                y,
                pose,
                confidence: tokens.confidence,
            },
            term,
        )))
    }

    /// Full vector stage: `X` → `Ȳ`.
    pub fn forward(&self, x: &Tensor, batch: &Batch) -> Result<VectorOutput> {
        let presence = batch.presence_pair(Source::Hd, Source::Sd)?;
        let bsz = batch.size();
        let passthrough: Vec<bool> = batch
            .presence_bits
            .iter()
            .map(|m| !m.get(Source::Hd) && !m.get(Source::Sd))
            .collect();
        if passthrough.iter().all(|p| *p) {
            return Ok(VectorOutput {
                ybar: x.clone(),
                y_hd: None,
                y_sd: None,
                gates: None,
                se2: Vec::new(),
                passthrough,
            });
        }
        let hd = self.encode_source(x, &batch.hd, Source::Hd)?;
        let sd = self.encode_source(x, &batch.sd, Source::Sd)?;
        let zeros = x.zeros_like()?;
        let y_hd = hd.as_ref().map(|(o, _)| o.y.clone()).unwrap_or_else(|| zeros.clone());
        let y_sd = sd.as_ref().map(|(o, _)| o.y.clone()).unwrap_or_else(|| zeros.clone());
        let evidence = Tensor::cat(&[y_hd.mean(1)?, y_sd.mean(1)?], 1)?;
        let g = self.gate.fuse(&evidence, &y_hd, &y_sd, &presence)?;
        let mixed = if self.cfg.residual { (x + &g.fused)? } else { g.fused };
        let any: Vec<f64> = passthrough.iter().map(|p| if *p { 0.0 } else { 1.0 }).collect();
        let any = Tensor::from_vec(any, (bsz, 1, 1), x.device())?.to_dtype(x.dtype())?;
        let keep = any.affine(-1.0, 1.0)?;
        let ybar = (mixed.broadcast_mul(&any)? + x.broadcast_mul(&keep)?)?;
        let mut se2 = Vec::new();
        for (_, t) in hd.iter().chain(sd.iter()) {
            se2.push(t.clone());
        }
        Ok(VectorOutput {
            ybar,
            y_hd: hd.map(|(o, _)| o.y),
            y_sd: sd.map(|(o, _)| o.y),
            gates: Some((g.gate_a, g.gate_b)),
            se2,
            passthrough,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Shared by both branches: `λ_t‖T‖²` and `λ_r Δθ²` averaged over active frames.
pub fn se2_terms(name: &str, pose: &Tensor, active: &Tensor, lambda_t: f64, lambda_r: f64) -> Result<Se2Term> {
    let t2 = pose.narrow(1, 0, 2)?.sqr()?.sum(1)?;
    let r2 = pose.narrow(1, 2, 1)?.squeeze(1)?.sqr()?;
    let denom = active.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    let translation = ((t2 * active)?.sum_all()? * (lambda_t / denom))?;
    let rotation = ((r2 * active)?.sum_all()? * (lambda_r / denom))?;
    Ok(Se2Term {
        name: name.to_string(),
        pose: pose.clone(),
        translation,
        rotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    fn approx_vec(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn embed_origin_alternates() {
        let e = sinusoidal_embed(0.0, 0.0, &[0.5, 1.0, 2.0]);
        approx_vec(&e, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 0.0);
    }

    #[test]
    fn embed_quarter_period() {
        let w = 0.37;
        let e = sinusoidal_embed(std::f64::consts::PI / (2.0 * w), 0.0, &[w]);
        approx_vec(&e, &[1.0, 0.0, 0.0, 1.0], 1e-15);
    }

    #[test]
    fn embed_matches_direct_trig() {
        let e = sinusoidal_embed(2.0, -1.5, &[1.0, 2.0, 4.0]);
        let mut exp = Vec::new();
        for w in [1.0f64, 2.0, 4.0] {
            exp.extend([(2.0 * w).sin(), (2.0 * w).cos(), (-1.5 * w).sin(), (-1.5 * w).cos()]);
        }
        approx_vec(&e, &exp, 1e-15);
        let t = Tensor::new(&[[2.0f64, -1.5]], &Device::Cpu).unwrap();
        let et: Vec<Vec<f64>> = sinusoidal_embed_t(&t, &[1.0, 2.0, 4.0]).unwrap().to_vec2().unwrap();
        approx_vec(&et[0], &exp, 1e-15);
    }

    #[test]
    fn token_layout() {
        let cfg = VectorEncoderConfig::default();
        assert_eq!(cfg.token_width(), 362);
        let freqs = cfg.frequencies();
        let zero = PointArray(vec![[0.0, 0.0]; 11]);
        let mut cat = vec![0.0; 8];
        cat[2] = 1.0;
        let z = tokenize_polyline(&zero, &cat, &[1.0, 0.0], &freqs, 11).unwrap();
        assert_eq!(z.len(), 362);
        let origin = sinusoidal_embed(0.0, 0.0, &freqs);
        for i in 0..11 {
            approx_vec(&z[i * 32..(i + 1) * 32], &origin, 0.0);
        }
        let z_sd = tokenize_polyline(&zero, &cat, &[0.0, 1.0], &freqs, 11).unwrap();
        let differing: Vec<usize> = (0..362).filter(|&i| z[i] != z_sd[i]).collect();
        assert_eq!(differing, vec![360, 361]);
        assert!(tokenize_polyline(&PointArray(vec![[0.0, 0.0]; 10]), &cat, &[1.0, 0.0], &freqs, 11).is_err());
    }

    #[test]
    fn regularizer_substitution() {
        assert!((se2_regularizer(Pose2::new(1.0, 0.0, 0.0), 0.1, 1.0) - 0.1).abs() < 1e-15);
        assert!((se2_regularizer(Pose2::new(0.0, 0.0, 0.2), 0.1, 1.0) - 0.04).abs() < 1e-15);
        assert!((se2_regularizer(Pose2::new(0.5, 0.0, 0.0), 0.1, 1.0) - 0.025).abs() < 1e-15);
        let pose = Tensor::new(&[[1.0f64, 0.0, 0.0], [0.0, 0.0, 0.2]], &Device::Cpu).unwrap();
        let active = Tensor::new(&[1.0f64, 1.0], &Device::Cpu).unwrap();
        let t = se2_terms("x", &pose, &active, 0.1, 1.0).unwrap();
        let total = t.total().unwrap().to_scalar::<f64>().unwrap();
        assert!((total - (0.1 + 0.04) / 2.0).abs() < 1e-15);
    }

    fn tiny() -> (ParamStore, VectorEncoder) {
        let store = ParamStore::new(11, DType::F64, Device::Cpu);
        let cfg = VectorEncoderConfig {
            layers: 2,
            heads: 2,
            ff_width: 16,
            se2_hidden: 8,
            ..Default::default()
        };
        let grid = BevGridSpec::window(6, 4);
        let enc = VectorEncoder::new(&store.root().pp("vec"), cfg, 8, &grid).unwrap();
        (store, enc)
    }

    fn random_tokens(b: usize, n: usize, width: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * n * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, n, width), &Device::Cpu).unwrap()
    }

    #[test]
    fn encode_shapes_and_confidence_range() {
        let (_s, enc) = tiny();
        let z = random_tokens(1, 1, 362, 0);
        let mask = Tensor::ones((1, 1), DType::F64, &Device::Cpu).unwrap();
        let out = enc.encode_tokens(&z, &mask).unwrap();
        assert_eq!(out.tokens.dims(), &[1, 1, 8]);
        assert_eq!(out.confidence.dims(), &[1, 1]);
        let z = random_tokens(2, 5, 362, 1);
        let mask = Tensor::ones((2, 5), DType::F64, &Device::Cpu).unwrap();
        let u: Vec<Vec<f64>> = enc.encode_tokens(&z, &mask).unwrap().confidence.to_vec2().unwrap();
        assert!(u.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let (_s, enc) = tiny();
        let z = random_tokens(1, 4, 362, 2);
        let perm = [2u32, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let zp = z.index_select(&idx, 1).unwrap();
        let mask = Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap();
        let a = enc.encode_tokens(&z, &mask).unwrap();
        let b = enc.encode_tokens(&zp, &mask).unwrap();
        let d = (a.tokens.index_select(&idx, 1).unwrap() - &b.tokens)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-6);
        let dc = (a.confidence.index_select(&idx, 1).unwrap() - &b.confidence)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(dc < 1e-6);
    }

    #[test]
    fn padding_does_not_change_real_tokens() {
        let (_s, enc) = tiny();
        let z = random_tokens(1, 3, 362, 3);
        let padded = Tensor::cat(&[z.clone(), random_tokens(1, 2, 362, 4)], 1).unwrap();
        let m3 = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        let m5 = Tensor::new(&[[1.0f64, 1.0, 1.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let a = enc.encode_tokens(&z, &m3).unwrap();
        let b = enc.encode_tokens(&padded, &m5).unwrap();
        let d = (a.tokens - b.tokens.narrow(1, 0, 3).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn zero_init_se2_head_predicts_identity() {
        let (_s, enc) = tiny();
        let pts = random_tokens(2, 3 * 11, 2, 5).reshape((2, 3, 11, 2)).unwrap();
        let mask = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let bev = random_tokens(2, 24, 8, 6);
        let pose: Vec<Vec<f64>> = enc.predict_se2(&pts, &mask, &bev).unwrap().to_vec2().unwrap();
        assert!(pose.iter().flatten().all(|&v| v == 0.0));
    }
}
