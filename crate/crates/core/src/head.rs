//! Toy mapping head: per-class raster logits from `X_UMPE` and an optional
//! light query decoder emitting fixed-length vector instances.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::conventions::{NUM_MAP_CLASSES, POINTS_PER_POLYLINE, X_MAX, Y_MAX};
use crate::data::Instance;
use crate::geometry::{BevGridSpec, PointArray};
use crate::metrics::{chamfer_distance, ScoredInstance};
use crate::nn::{sigmoid, Conv2d, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, Scope};
use crate::raster_encoder::unflatten_hw;
use crate::vector_encoder::sinusoidal_embed_t;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Number of instance queries; 0 disables the vector decoder.
    pub queries: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            queries: 20,
            decoder_layers: 2,
            heads: 4,
        }
    }
}

/// Raw head outputs. Probabilities are `sigmoid(logits)`.
#[derive(Clone, Debug)]
pub struct MapPrediction {
    /// `(B, 3, H, W)`.
    pub logits: Tensor,
    /// `(B, N_q, P, 2)` ego-frame points.
    pub points: Option<Tensor>,
    /// `(B, N_q, 3)` class logits.
    pub class_logits: Option<Tensor>,
}

impl MapPrediction {
    pub fn probabilities(&self) -> Result<Tensor> {
        sigmoid(&self.logits)
    }

    /// Vector instances of every frame with `score = max_c sigmoid(class)`.
    pub fn instances(&self) -> Result<Vec<Vec<ScoredInstance>>> {
        let (Some(points), Some(cls)) = (&self.points, &self.class_logits) else {
            return Ok(Vec::new());
        };
        let (b, nq, np, _) = points.dims4()?;
        let pts: Vec<Vec<Vec<f64>>> = to_f64(&points.reshape((b, nq, np * 2))?)?.to_vec3()?;
        let probs: Vec<Vec<Vec<f64>>> = to_f64(&sigmoid(cls)?)?.to_vec3()?;
        let mut out = Vec::with_capacity(pts.len());
        for (f, (fp, fc)) in pts.iter().zip(&probs).enumerate() {
            let mut frame = Vec::with_capacity(fp.len());
            for (q, (qp, qc)) in fp.iter().zip(fc).enumerate() {
                let qp: Vec<&[f64]> = qp.chunks(2).collect();
                let (class, score) = qc
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |best, (c, &s)| if s > best.1 { (c, s) } else { best });
                frame.push(ScoredInstance {
                    id: q,
                    frame: f,
                    class,
                    score,
                    points: PointArray(qp.iter().map(|p| [p[0], p[1]]).collect()),
                });
            }
            out.push(frame);
        }
        Ok(out)
    }
}

fn to_f64(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(candle_core::DType::F64)?)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_q: LayerNorm,
    attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ff: Mlp,
}

#[derive(Clone, Debug)]
struct QueryDecoder {
    queries: Tensor,
    pos: Linear,
    layers: Vec<DecoderLayer>,
    points: Linear,
    class: Linear,
    cell_code: Tensor,
}

#[derive(Clone, Debug)]
pub struct MapHead {
    pub cfg: HeadConfig,
    grid: BevGridSpec,
    conv1: Conv2d,
    conv2: Conv2d,
    decoder: Option<QueryDecoder>,
}

impl MapHead {
    pub fn new(s: &Scope, cfg: HeadConfig, width: usize, grid: &BevGridSpec) -> Result<Self> {
        let decoder = if cfg.queries > 0 {
            let freqs: Vec<f64> = (0..4).map(|k| std::f64::consts::TAU / 60.0 * 2f64.powi(k)).collect();
            let mut cells = Vec::with_capacity(grid.tokens() * 2);
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let (x, y) = grid.pixel_to_ego(r as f64, c as f64);
                    cells.extend_from_slice(&[x, y]);
                }
            }
            let cells = Tensor::from_vec(cells, (grid.tokens(), 2), s.device())?.to_dtype(s.dtype())?;
            let layers = (0..cfg.decoder_layers)
                .map(|i| {
                    let l = s.pp(&format!("decoder{i}"));
                    Ok(DecoderLayer {
                        ln_q: LayerNorm::new(&l.pp("ln_q"), width)?,
                        attn: MultiHeadAttention::new(&l.pp("attn"), width, cfg.heads)?,
                        ln_ff: LayerNorm::new(&l.pp("ln_ff"), width)?,
                        ff: Mlp::new(&l.pp("ff"), width, 2 * width, width)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(QueryDecoder {
                queries: s.get("queries", &[cfg.queries, width], Init::Normal(1.0))?,
                pos: Linear::new(&s.pp("pos"), 16, width)?,
                layers,
                points: Linear::new(&s.pp("points"), width, POINTS_PER_POLYLINE * 2)?,
                class: Linear::new(&s.pp("class"), width, NUM_MAP_CLASSES)?,
                cell_code: sinusoidal_embed_t(&cells, &freqs)?,
            })
        } else {
            None
        };
        Ok(MapHead {
            conv1: Conv2d::new(&s.pp("conv1"), width, cfg.hidden, 3, 1)?,
            conv2: Conv2d::new(&s.pp("conv2"), cfg.hidden, NUM_MAP_CLASSES, 1, 1)?,
            decoder,
            grid: *grid,
            cfg,
        })
    }

    /// Decodes `(B, HW, C)` tokens.
    pub fn decode_map(&self, x: &Tensor) -> Result<MapPrediction> {
        let f = unflatten_hw(x, self.grid.height, self.grid.width)?;
        let logits = self.conv2.forward(&self.conv1.forward(&f)?.relu()?)?;
        let (points, class_logits) = match &self.decoder {
            Some(d) => {
                let b = x.dim(0)?;
                let (nq, c) = d.queries.dims2()?;
                let mut q = d.queries.unsqueeze(0)?.broadcast_as((b, nq, c))?.contiguous()?;
                let keys = x.broadcast_add(&d.pos.forward(&d.cell_code)?)?;
                for l in &d.layers {
                    q = (&q + l.attn.forward(&l.ln_q.forward(&q)?, &keys, None)?)?;
                    q = (&q + l.ff.forward(&l.ln_ff.forward(&q)?)?)?;
                }
                let raw = d.points.forward(&q)?.tanh()?.reshape((b, nq, POINTS_PER_POLYLINE, 2))?;
                let scale = Tensor::from_vec(vec![X_MAX, Y_MAX], (1, 1, 1, 2), x.device())?.to_dtype(x.dtype())?;
                (Some(raw.broadcast_mul(&scale)?), Some(d.class.forward(&q)?))
            }
            None => (None, None),
        };
        Ok(MapPrediction {
            logits,
            points,
            class_logits,
        })
    }
}

/// Greedy one-to-one assignment of queries to ground truth by ascending
/// Chamfer distance. Returns `(query, gt)` pairs.
pub fn greedy_chamfer_assignment(pred: &[PointArray], gt: &[Instance]) -> Result<Vec<(usize, usize)>> {
    let mut costs = Vec::with_capacity(pred.len() * gt.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            costs.push((chamfer_distance(p, &g.points)?, i, j));
        }
    }
    costs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, i, j) in costs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn shapes_and_ranges() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let grid = BevGridSpec::window(8, 4);
        let head = MapHead::new(
            &store.root(),
            HeadConfig {
                hidden: 8,
                queries: 5,
                ..Default::default()
            },
            8,
            &grid,
        )
        .unwrap();
        let x = Tensor::randn(0.0f64, 1.0, (2, 32, 8), &Device::Cpu).unwrap();
        let p = head.decode_map(&x).unwrap();
        assert_eq!(p.logits.dims(), &[2, 3, 8, 4]);
        let probs: Vec<f64> = p.probabilities().unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(probs.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(p.points.as_ref().unwrap().dims(), &[2, 5, 11, 2]);
        let inst = p.instances().unwrap();
        assert_eq!(inst.len(), 2);
        assert!(inst.iter().all(|f| f.len() == 5 && f.iter().all(|i| i.points.len() == 11)));
    }

    #[test]
    fn greedy_assignment_prefers_closest() {
        let line = |y: f64| PointArray((0..11).map(|i| [i as f64, y]).collect());
        let gt = vec![
            Instance { class: 1, points: line(0.0) },
            Instance { class: 1, points: line(4.0) },
        ];
        let pred = vec![line(3.5), line(0.2), line(10.0)];
        assert_eq!(greedy_chamfer_assignment(&pred, &gt).unwrap(), vec![(0, 1), (1, 0)]);
    }
}
