//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.
//!
//! Reference values come from oracles written here, independent of the
//! library code paths they check.

use std::collections::BTreeSet;
use std::fs;
use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use entropy_ground_cli::{cmd_ablate, cmd_refine, RunConfig};
use entropy_ground_core::eval::{self, AblationAxis, PlantedConfig, PlantedSample};
use entropy_ground_core::geometry::{rect_iou, BinaryMask, Rect, TokenGrid, ViewId};
use entropy_ground_core::imaging::RasterImage;
use entropy_ground_core::objective::{self, ObjectiveConfig, ObjectiveKind};
use entropy_ground_core::pipeline::{self, Connectivity, PipelineConfig};
use entropy_ground_core::protocol::{
    self, AnswerRequest, AnswerResponse, GradientBackend, GroundRequest, GroundResponse, ImagePayload, Message,
    PixelFormat, RemoteBackend, ViewGrounding, ViewPayload,
};
use entropy_ground_core::refine::{self, Decision, RefineConfig, SpatialEntropyStop, Stopping};
use entropy_ground_core::toy::{ToyBackend, ToyModel, ToyModelConfig, VisualEmbeddings};
use entropy_ground_core::Result as CoreResult;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(name: &str, start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    check(took < limit, || format!("{name} took {took:.1?}, limit {limit:?}"))
}

// ---------------------------------------------------------------------------
// Objective oracles, straight from the definitions.

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn oracle_entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn oracle_nucleus(p: &[f64], mass: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut out = Vec::new();
    for i in idx {
        out.push(i);
        cum += p[i];
        if cum >= mass {
            break;
        }
    }
    out
}

fn oracle_value(kind: &ObjectiveKind, z: &[f64]) -> f64 {
    let p = oracle_softmax(z);
    match *kind {
        ObjectiveKind::Entropy => oracle_entropy(&p),
        ObjectiveKind::TopPEntropy { mass, renormalize } => {
            let set = oracle_nucleus(&p, mass);
            let sub: Vec<f64> = set.iter().map(|&i| p[i]).collect();
            if renormalize {
                let s: f64 = sub.iter().sum();
                oracle_entropy(&sub.iter().map(|x| x / s).collect::<Vec<_>>())
            } else {
                oracle_entropy(&sub)
            }
        }
        ObjectiveKind::MaxProb => {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m - (m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        }
    }
}

/// Selection that must stay fixed across a perturbation for the function to
/// be smooth there.
fn piece(kind: &ObjectiveKind, z: &[f64]) -> Vec<usize> {
    let p = oracle_softmax(z);
    match *kind {
        ObjectiveKind::Entropy => Vec::new(),
        ObjectiveKind::TopPEntropy { mass, .. } => {
            let mut s = oracle_nucleus(&p, mass);
            s.sort_unstable();
            s
        }
        ObjectiveKind::MaxProb => vec![objective::argmax(&p)],
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(1e-12, f64::max);
    diff / scale
}

const FD_EPS: f64 = 1e-5;

fn logit_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kinds = |rng: &mut ChaCha8Rng| {
        let mass = rng.random_range(0.3..0.95);
        [
            ObjectiveKind::Entropy,
            ObjectiveKind::TopPEntropy { mass, renormalize: true },
            ObjectiveKind::TopPEntropy {
                mass,
                renormalize: false,
            },
            ObjectiveKind::MaxProb,
        ]
    };
    let mut worst = [0.0f64; 4];
    let mut redrawn = 0;
    for (slot, worst) in worst.iter_mut().enumerate() {
        let mut done = 0;
        while done < 1000 {
            let v = rng.random_range(2..=64);
            let z: Vec<f64> = (0..v).map(|_| rng.random_range(-5.0..=5.0)).collect();
            let kind = kinds(&mut rng)[slot];
            let base = piece(&kind, &z);
            let mut numeric = Vec::with_capacity(v);
            let mut stable = true;
            for j in 0..v {
                let mut plus = z.clone();
                plus[j] += FD_EPS;
                let mut minus = z.clone();
                minus[j] -= FD_EPS;
                stable &= piece(&kind, &plus) == base && piece(&kind, &minus) == base;
                numeric.push((oracle_value(&kind, &plus) - oracle_value(&kind, &minus)) / (2.0 * FD_EPS));
            }
            if !stable {
                redrawn += 1;
                continue;
            }
            let cfg = ObjectiveConfig { kind, decode_step: 1 };
            let (value, analytic) = objective::objective_seed(&cfg, &z).map_err(|e| e.to_string())?;
            check((value - oracle_value(&kind, &z)).abs() <= 1e-12, || {
                format!("{kind:?}: value {value} vs oracle {}", oracle_value(&kind, &z))
            })?;
            *worst = worst.max(rel_err(&analytic, &numeric));
            done += 1;
        }
    }
    check(worst.iter().all(|&e| e <= 1e-6), || format!("max relative errors {worst:?}"))?;
    Ok(format!(
        "4x1000 logit vectors, max rel err entropy {:.1e}, top-p {:.1e}, top-p raw {:.1e}, max-prob {:.1e} ({redrawn} redrawn at nucleus boundaries)",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn noise(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RasterImage {
    let mut data = vec![0u8; (w * h * 3) as usize];
    rng.fill(data.as_mut_slice());
    RasterImage::new(w, h, 3, data).unwrap()
}

fn toy_same_piece(model: &ToyModel, a: &VisualEmbeddings, b: &VisualEmbeddings, tokens: &[usize], obj: &ObjectiveConfig) -> bool {
    let fa = model.forward(a, tokens, obj.decode_step).unwrap();
    let fb = model.forward(b, tokens, obj.decode_step).unwrap();
    fa.generated == fb.generated && piece(&obj.kind, &fa.logits) == piece(&obj.kind, &fb.logits)
}

fn toy_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut configs = 0;
    let mut attempts = 0;
    while configs < 24 {
        attempts += 1;
        check(attempts <= 100, || "too many unstable configurations".into())?;
        let rows = rng.random_range(2..=5);
        let cols = rng.random_range(2..=5);
        let n = rows * cols;
        let mask = rng
            .random_bool(0.4)
            .then(|| (0..n).filter(|_| rng.random_bool(0.6)).collect::<Vec<_>>())
            .filter(|m| !m.is_empty());
        let model = ToyModel::new(ToyModelConfig {
            embed_dim: rng.random_range(4..=12),
            vocab: rng.random_range(8..=48),
            grid_rows: rows,
            grid_cols: cols,
            seed: rng.random(),
            attention_mask: mask,
        })
        .map_err(|e| e.to_string())?;
        let image = noise(8 * cols as u32, 8 * rows as u32, &mut rng);
        let emb = model.embed_image(&image).map_err(|e| e.to_string())?;
        let vocab = model.config().vocab;
        let tokens: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..vocab)).collect();
        let kind = match configs % 3 {
            0 => ObjectiveKind::Entropy,
            1 => ObjectiveKind::top_p(rng.random_range(0.5..0.95)),
            _ => ObjectiveKind::MaxProb,
        };
        let obj = ObjectiveConfig {
            kind,
            decode_step: rng.random_range(1..=3),
        };
        let (_, _, field) = model.gradient(&emb, &tokens, &obj).map_err(|e| e.to_string())?;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut stable = true;
        for i in 0..emb.vectors.len() {
            for k in 0..emb.vectors[i].len() {
                let mut plus = emb.clone();
                plus.vectors[i][k] += FD_EPS;
                let mut minus = emb.clone();
                minus.vectors[i][k] -= FD_EPS;
                stable &= toy_same_piece(&model, &plus, &minus, &tokens, &obj);
                let fp = oracle_value(&obj.kind, &model.forward(&plus, &tokens, obj.decode_step).unwrap().logits);
                let fm = oracle_value(&obj.kind, &model.forward(&minus, &tokens, obj.decode_step).unwrap().logits);
                numeric.push((fp - fm) / (2.0 * FD_EPS));
                analytic.push(field.vectors[i][k]);
            }
        }
        if !stable {
            continue;
        }
        let err = rel_err(&analytic, &numeric);
        check(err <= 1e-4, || format!("config {configs} ({kind:?}): relative error {err:e}"))?;
        worst = worst.max(err);
        configs += 1;
    }
    Ok(format!("{configs} toy configurations, max rel err {worst:.1e}"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let a = logit_gradients()?;
    let b = toy_gradients()?;
    within("gradient checks", start, Duration::from_secs(30))?;
    Ok(format!("{a}; {b}; {:.1?}", start.elapsed()))
}

fn fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_h = 0.0f64;
    let mut worst_g = 0.0f64;
    for v in (2..=1024).step_by(7) {
        let c = rng.random_range(-50.0..50.0);
        let z = vec![c; v];
        let p = objective::softmax(&z);
        let h = objective::shannon_entropy(&p).map_err(|e| e.to_string())?;
        worst_h = worst_h.max((h - (v as f64).ln()).abs());
        let g = objective::entropy_grad_logits(&z).map_err(|e| e.to_string())?;
        worst_g = worst_g.max(g.iter().map(|x| x.abs()).fold(0.0, f64::max));
    }
    check(worst_h <= 1e-12, || format!("uniform entropy off ln V by {worst_h:e}"))?;
    check(worst_g <= 1e-10, || format!("uniform gradient component {worst_g:e}"))?;
    for v in [1, 2, 10, 1000] {
        for hot in [0, v - 1] {
            let mut p = vec![0.0; v];
            p[hot] = 1.0;
            let h = objective::shannon_entropy(&p).map_err(|e| e.to_string())?;
            check(h == 0.0, || format!("one-hot entropy {h} for V={v}"))?;
        }
    }
    Ok(format!("uniform |H - ln V| <= {worst_h:.1e}, |grad| <= {worst_g:.1e}; one-hot H = 0"))
}

// ---------------------------------------------------------------------------
// Geometry and pipeline oracles.

/// Farthest point from the first-last chord by explicit orthogonal
/// projection.
fn oracle_elbow(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = s.len();
    let (ax, ay) = (0.0, s[0]);
    let (dx, dy) = ((n - 1) as f64, s[n - 1] - s[0]);
    let dd = dx * dx + dy * dy;
    let mut best = (0, -1.0);
    for (i, &y) in s.iter().enumerate() {
        let (px, py) = (i as f64 - ax, y - ay);
        let t = (px * dx + py * dy) / dd;
        let (ex, ey) = (px - t * dx, py - t * dy);
        let d = (ex * ex + ey * ey).sqrt();
        if d > best.1 {
            best = (i, d);
        }
    }
    s[best.0]
}

fn flood_fill(bits: &[bool], rows: usize, cols: usize, eight: bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / cols) as i64, (i % cols) as i64);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if bits[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn pixel_iou(a: &Rect, b: &Rect) -> f64 {
    let inside = |r: &Rect, x: u32, y: u32| x >= r.x && x < r.x + r.w && y >= r.y && y < r.y + r.h;
    let (mut inter, mut union) = (0u32, 0u32);
    for y in 0..64 {
        for x in 0..64 {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u32;
            union += (ia || ib) as u32;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mask_of(rows: usize, cols: usize, bits: Vec<bool>) -> BinaryMask {
    let grid = TokenGrid::new(rows, cols, Rect::of_size(cols as u32 * 4, rows as u32 * 4)).unwrap();
    BinaryMask::new(grid, bits, 0.5).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let shape = rng.random_range(0..3);
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                match shape {
                    0 => u,
                    1 => u.powi(6),
                    _ => (-8.0 * u).exp(),
                }
            })
            .collect();
        let got = pipeline::elbow_threshold(&values, 1e-9).map_err(|e| e.to_string())?;
        let want = oracle_elbow(&values);
        check(got == Some(want), || format!("elbow case {case}: {got:?} vs oracle {want}"))?;
    }

    let mut components = 0;
    for case in 0..500 {
        let rows = rng.random_range(1..=16);
        let cols = rng.random_range(1..=16);
        let density = rng.random_range(0.0..1.0);
        let bits: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(density)).collect();
        let mask = mask_of(rows, cols, bits.clone());
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let got = pipeline::connected_components(&mask, conn);
            let mut want = flood_fill(&bits, rows, cols, eight);
            let mut got_sets: Vec<Vec<usize>> = got.iter().map(|c| c.token_indices.clone()).collect();
            got_sets.sort();
            want.sort();
            check(got_sets == want, || format!("components case {case} ({conn:?}) differ from flood fill"))?;
            for c in &got {
                let rs = c.token_indices.iter().map(|i| i / cols);
                let cs = c.token_indices.iter().map(|i| i % cols);
                let b = &c.token_bbox;
                check(
                    rs.clone().min() == Some(b.row_min)
                        && rs.max() == Some(b.row_max)
                        && cs.clone().min() == Some(b.col_min)
                        && cs.max() == Some(b.col_max),
                    || format!("components case {case}: loose bounding box {b:?}"),
                )?;
            }
            let keys: Vec<_> = got
                .iter()
                .map(|c| (c.token_bbox.row_min, c.token_bbox.col_min, c.token_indices[0]))
                .collect();
            check(keys.windows(2).all(|w| w[0] <= w[1]), || format!("components case {case}: not in raster order"))?;
            components += got.len();
        }
    }

    for case in 0..200 {
        let mut r = || {
            Rect::new(
                rng.random_range(0..40),
                rng.random_range(0..40),
                rng.random_range(0..=24),
                rng.random_range(0..=24),
            )
        };
        let (a, b) = (r(), r());
        let got = rect_iou(&a, &b);
        let want = pixel_iou(&a, &b);
        check((got - want).abs() <= 1e-12, || format!("iou case {case}: {a:?} {b:?} {got} vs {want}"))?;
    }
    within("oracle checks", start, Duration::from_secs(10))?;
    Ok(format!(
        "100 elbows, 500 masks x 2 connectivities ({components} components), 200 box pairs; {:.1?}",
        start.elapsed()
    ))
}

// ---------------------------------------------------------------------------
// Spatial entropy and the refinement stop.

/// Grounds the global view with a scripted one-row map per call and every
/// crop with zeros.
struct Scripted {
    maps: Vec<Vec<f64>>,
    calls: std::sync::Mutex<usize>,
}

impl GradientBackend for Scripted {
    fn ground(&self, request: &GroundRequest) -> CoreResult<GroundResponse> {
        let mut calls = self.calls.lock().unwrap();
        let map = &self.maps[(*calls).min(self.maps.len() - 1)];
        *calls += 1;
        Ok(GroundResponse {
            id: request.id,
            views: request
                .views
                .iter()
                .map(|v| ViewGrounding {
                    rows: 1,
                    cols: map.len(),
                    scores: if v.is_global { map.clone() } else { vec![0.0; map.len()] },
                    entropy: 0.5,
                    max_prob: 0.5,
                    vocab: 4,
                })
                .collect(),
        })
    }
    fn answer(&self, request: &AnswerRequest) -> CoreResult<AnswerResponse> {
        Ok(AnswerResponse {
            id: request.id,
            text: String::new(),
        })
    }
    fn ping(&self) -> CoreResult<String> {
        Ok("scripted".into())
    }
}

/// `m` equal blocks of ones split by single zeros on a 1x16 row. The blocks
/// cover more than half the row, so the knee falls on the block value and
/// the mask is exactly the blocks.
fn blocks(m: usize) -> Vec<f64> {
    let size = (16 - (m - 1)) / m;
    let mut map = vec![0.0; 16];
    for k in 0..m {
        map[k * (size + 1)..k * (size + 1) + size].fill(1.0);
    }
    map
}

fn spatial_entropy_values() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for conn in [Connectivity::Four, Connectivity::Eight] {
        for _ in 0..50 {
            let (rows, cols) = (rng.random_range(1..=10), rng.random_range(1..=10));
            let (h, w) = (rng.random_range(1..=rows), rng.random_range(1..=cols));
            let (r0, c0) = (rng.random_range(0..=rows - h), rng.random_range(0..=cols - w));
            let bits = (0..rows * cols)
                .map(|i| (r0..r0 + h).contains(&(i / cols)) && (c0..c0 + w).contains(&(i % cols)))
                .collect();
            let e = refine::spatial_entropy(&mask_of(rows, cols, bits), conn);
            check(e.abs() <= 1e-12, || format!("single component gave {e}"))?;
        }
        for m in 2..=5usize {
            for (h, w) in [(1, 1), (2, 2), (1, 3), (3, 2)] {
                let cols = m * (w + 1);
                let bits = (0..h * cols).map(|i| i % cols % (w + 1) < w).collect();
                let e = refine::spatial_entropy(&mask_of(h, cols, bits), conn);
                let want = (m as f64).ln();
                check((e - want).abs() <= 1e-12, || format!("{m} components of {h}x{w}: {e} vs ln m = {want}"))?;
            }
        }
    }

    let mut rule = SpatialEntropyStop::default();
    let stops: Vec<bool> = [0.9, 0.5, 0.7].into_iter().map(|h| rule.observe(h)).collect();
    check(stops == [false, false, true], || format!("rule on [inf, .9, .5, .7] gave {stops:?}"))?;

    // Maps with 4, 2 then 3 components: H falls, falls, rises.
    let backend = Scripted {
        maps: vec![blocks(4), blocks(2), blocks(3)],
        calls: Default::default(),
    };
    // Small enough that smoothing leaks nothing into the gaps.
    let pipeline = PipelineConfig {
        sigma: 0.01,
        ..PipelineConfig::default()
    };
    let cfg = RefineConfig {
        top_k: 1,
        min_crop_px: 16,
        stopping: Stopping::SpatialEntropy,
        ..RefineConfig::default()
    };
    let image = RasterImage::filled(128, 16, 3, 0);
    let out = refine::refine(&image, "q", &backend, &pipeline, &cfg).map_err(|e| e.to_string())?;
    let iters = &out.trace.iterations;
    check(iters.len() == 3 && out.decision == Decision::SpatialEntropyRose, || {
        format!("scripted run stopped after {} iterations with {:?}", iters.len(), out.decision)
    })?;
    let hs: Vec<f64> = iters.iter().map(|r| r.spatial_entropy.unwrap_or(f64::NAN)).collect();
    let want = [4f64.ln(), 2f64.ln(), 3f64.ln()];
    check(hs.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12), || format!("scripted H {hs:?}"))?;
    let entering: Vec<ViewId> = iters[2].views.iter().map(|v| v.view.id).collect();
    let returned: Vec<ViewId> = out.views.views().iter().map(|v| v.id).collect();
    check(entering == returned, || format!("returned views {returned:?}, breaking iteration grounded {entering:?}"))?;
    check(*backend.calls.lock().unwrap() == 3, || "extra grounding after the break".into())?;
    Ok("single component 0, m equal components ln m (m = 2..5), break at the third comparison with the pre-expansion views".into())
}

// ---------------------------------------------------------------------------
// Planted evidence.

fn planted_block_rect(sample: &PlantedSample) -> Rect {
    let cfg = PlantedConfig::default();
    let tw = cfg.width / cfg.grid_cols as u32;
    let th = cfg.height / cfg.grid_rows as u32;
    let b = &sample.block;
    Rect::new(
        b.col_min as u32 * tw,
        b.row_min as u32 * th,
        (b.col_max - b.col_min + 1) as u32 * tw,
        (b.row_max - b.row_min + 1) as u32 * th,
    )
}

fn planted_localization() -> Outcome {
    let start = Instant::now();
    let cfg = PlantedConfig::default();
    let samples = eval::planted_samples(&cfg).map_err(|e| e.to_string())?;
    check(samples.len() == 100, || format!("{} planted samples", samples.len()))?;
    let pipeline = PipelineConfig::default();
    let refine_cfg = RefineConfig::default();
    let mut hits = 0;
    let mut iou_sum = 0.0;
    let mut leaks = Vec::new();
    for s in &samples {
        let block = planted_block_rect(s);
        let backend = ToyBackend::new(ToyModelConfig {
            attention_mask: s.record.toy_attention_mask.clone(),
            ..ToyModelConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let out = refine::refine(&s.image, &s.record.prompt(), &backend, &pipeline, &refine_cfg)
            .map_err(|e| e.to_string())?;
        let iou = out.proposals.first().map_or(0.0, |p| pixel_iou(&p.pixel_rect, &block));
        iou_sum += iou;
        hits += (iou >= 0.5) as usize;
        // Every token carrying saliency, in every view grounded, lies in the block.
        let (bx0, by0, bx1, by1) = (block.x as f64, block.y as f64, (block.x + block.w) as f64, (block.y + block.h) as f64);
        let inside = |(x0, y0, x1, y1): (f64, f64, f64, f64)| x0 >= bx0 && y0 >= by0 && x1 <= bx1 && y1 <= by1;
        let mut leaked = false;
        for it in &out.trace.iterations {
            for v in &it.views {
                for (i, &score) in v.saliency.scores.iter().enumerate() {
                    leaked |= score != 0.0 && !inside(v.saliency.grid.token_extent(i));
                }
            }
        }
        for p in &out.proposals {
            leaked |= rect_iou(&p.pixel_rect, &block) == 0.0;
        }
        if leaked {
            leaks.push(s.record.sample_id.clone());
        }
    }
    let rate = hits as f64 / samples.len() as f64;
    let detail = format!(
        "IoU >= 0.5 in {hits}/100 (need >= 90), mean IoU {:.3}, support outside block in {} samples; {:.1?}",
        iou_sum / samples.len() as f64,
        leaks.len(),
        start.elapsed()
    );
    within("planted run", start, Duration::from_secs(120))?;
    check(leaks.is_empty(), || format!("{detail}; leaking: {leaks:?}"))?;
    check(rate >= 0.9, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// End-to-end artifacts.

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sample = &eval::planted_samples(&PlantedConfig::default()).map_err(|e| e.to_string())?[7];
    let image = tmp.path().join("input.ppm");
    sample.image.save(&image).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        render: true,
        toy: ToyModelConfig {
            seed: 42,
            attention_mask: sample.record.toy_attention_mask.clone(),
            ..ToyModelConfig::default()
        },
        refine: RefineConfig {
            stopping: Stopping::Fixed { iterations: 3 },
            ..RefineConfig::default()
        },
        ..RunConfig::default()
    };
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        cmd_refine(&image, &sample.record.prompt(), &cfg, &out).map_err(|e| format!("{e:#}"))?;
        runs.push(dir_bytes(&out));
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    for required in ["trace.json", "result.json"] {
        check(names.contains(&required), || format!("{required} missing"))?;
    }
    let pixmaps = names.iter().filter(|n| n.ends_with(".ppm")).count();
    check(pixmaps > 0, || "no pixmaps rendered".into())?;
    let differing: Vec<&str> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    check(runs[0].len() == runs[1].len() && differing.is_empty(), || format!("runs differ in {differing:?}"))?;
    Ok(format!("{} files byte-identical across two runs ({pixmaps} pixmaps)", names.len()))
}

fn random_string(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '{', 'é', '漢', '🙂', '\u{7f}', '\u{1}'];
    (0..rng.random_range(0..24)).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
}

fn random_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => 0.0,
        1 => rng.random(),
        2 => rng.random_range(-1e6..1e6),
        _ => f64::from_bits(rng.random::<u64>() & !(0x7FFu64 << 52) | (rng.random_range(1..0x7FEu64) << 52)),
    }
}

fn random_objective(rng: &mut ChaCha8Rng) -> ObjectiveConfig {
    let kind = match rng.random_range(0..3) {
        0 => ObjectiveKind::Entropy,
        1 => ObjectiveKind::TopPEntropy {
            mass: rng.random_range(0.01..=1.0),
            renormalize: rng.random(),
        },
        _ => ObjectiveKind::MaxProb,
    };
    ObjectiveConfig {
        kind,
        decode_step: rng.random_range(1..=8),
    }
}

fn random_views(rng: &mut ChaCha8Rng) -> Vec<ViewPayload> {
    (0..rng.random_range(0..4))
        .map(|k| {
            let image = if rng.random() {
                let (w, h) = (rng.random_range(1..5), rng.random_range(1..5));
                let format = if rng.random() { PixelFormat::Rgb8 } else { PixelFormat::Gray8 };
                let mut data = vec![0u8; (w * h * format.channels() as u32) as usize];
                rng.fill(data.as_mut_slice());
                ImagePayload::inline(&RasterImage::new(w, h, format.channels(), data).unwrap())
            } else {
                ImagePayload::Path {
                    path: random_string(rng),
                }
            };
            ViewPayload {
                view: ViewId(rng.random()),
                rect: Rect::new(rng.random(), rng.random(), rng.random(), rng.random()),
                is_global: k == 0,
                image,
            }
        })
        .collect()
}

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let id = rng.random();
    match rng.random_range(0..7) {
        0 => Message::Ground(GroundRequest {
            id,
            views: random_views(rng),
            prompt: random_string(rng),
            objective: random_objective(rng),
            tap_layer: rng.random::<bool>().then(|| rng.random()),
        }),
        1 => Message::Answer(AnswerRequest {
            id,
            views: random_views(rng),
            prompt: random_string(rng),
        }),
        2 => Message::Ping { id },
        3 => Message::GroundResult(GroundResponse {
            id,
            views: (0..rng.random_range(0..3))
                .map(|_| {
                    let (rows, cols) = (rng.random_range(0..4), rng.random_range(0..4));
                    ViewGrounding {
                        rows,
                        cols,
                        scores: (0..rows * cols).map(|_| random_f64(rng)).collect(),
                        entropy: random_f64(rng),
                        max_prob: rng.random(),
                        vocab: rng.random_range(0..100_000),
                    }
                })
                .collect(),
        }),
        4 => Message::AnswerResult(AnswerResponse {
            id,
            text: random_string(rng),
        }),
        5 => Message::Pong {
            id,
            model: random_string(rng),
        },
        _ => Message::Error {
            id,
            message: random_string(rng),
        },
    }
}

fn protocol_transports() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let m = random_message(&mut rng);
        let line = protocol::encode(&m);
        check(line.ends_with('\n') && line.matches('\n').count() == 1, || format!("case {case}: not one line"))?;
        let back = protocol::decode(&line).map_err(|e| format!("case {case}: {e}"))?;
        check(back == m, || format!("case {case}: {m:?} came back as {back:?}"))?;
    }

    let samples = eval::planted_samples(&PlantedConfig {
        n_samples: 4,
        seed: 9,
        ..PlantedConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let toy = ToyModelConfig {
        seed: 5,
        ..ToyModelConfig::default()
    };
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?;
    let served = ToyBackend::new(toy.clone()).map_err(|e| e.to_string())?;
    std::thread::spawn(move || protocol::serve_tcp(&served, listener));
    let remote = RemoteBackend::connect_tcp(&addr.to_string(), Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let local = ToyBackend::new(toy).map_err(|e| e.to_string())?;
    let pipeline = PipelineConfig::default();
    let cfg = RefineConfig {
        stopping: Stopping::Fixed { iterations: 3 },
        ..RefineConfig::default()
    };
    let mut iterations = 0;
    for s in &samples {
        let prompt = s.record.prompt();
        let run = |b: &dyn GradientBackend| -> Result<(String, String), String> {
            let out = refine::refine(&s.image, &prompt, b, &pipeline, &cfg).map_err(|e| e.to_string())?;
            let answer = refine::answer_with_views(b, &out.views, &s.image, &prompt).map_err(|e| e.to_string())?;
            let record = serde_json::json!({
                "trace": out.trace,
                "views": out.views.views(),
                "proposals": out.proposals,
                "decision": out.decision,
            });
            Ok((serde_json::to_string(&record).unwrap(), answer))
        };
        let a = run(&local)?;
        let b = run(&remote)?;
        check(a == b, || format!("{}: in-process and loopback results differ", s.record.sample_id))?;
        iterations += serde_json::from_str::<serde_json::Value>(&a.0).unwrap()["trace"]["iterations"]
            .as_array()
            .map_or(0, Vec::len);
    }
    Ok(format!(
        "1000 random messages round-trip; {} refinements ({iterations} iterations) identical in-process and over TCP",
        samples.len()
    ))
}

fn ablation_runner() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    eval::generate_planted(
        &PlantedConfig {
            n_samples: 3,
            ..PlantedConfig::default()
        },
        &data,
    )
    .map_err(|e| e.to_string())?;
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).map_err(|e| e.to_string())?;
    let cfg = RunConfig {
        workers: 2,
        ..RunConfig::default()
    };
    cmd_ablate(&data.join("manifest.jsonl"), &AblationAxis::ALL, &cfg, &out).map_err(|e| format!("{e:#}"))?;

    let expected: [(&str, &str, Vec<String>); 4] = [
        (
            "stopping",
            "refine.stopping",
            ["spatial", "confidence", "fixed:1", "fixed:2", "fixed:3"].map(String::from).to_vec(),
        ),
        (
            "objective",
            "refine.objective.",
            ["entropy", "top_p(0.9)", "max_prob"].map(String::from).to_vec(),
        ),
        ("top_k", "refine.top_k", (1..=4).map(|k| format!("top_k={k}")).collect()),
        ("decode_step", "refine.objective.decode_step", (1..=4).map(|t| format!("decode_step={t}")).collect()),
    ];
    let mut reports = 0;
    for (axis, prefix, labels) in &expected {
        let dir = out.join(axis);
        let mut found = BTreeSet::new();
        for entry in fs::read_dir(&dir).map_err(|e| format!("{axis}: {e}"))? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            if name.starts_with("report_") && name.ends_with(".json") {
                let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).map_err(|e| e.to_string())?;
                check(v["evaluated"] == 3, || format!("{name}: evaluated {}", v["evaluated"]))?;
                check(found.insert(v["label"].as_str().unwrap_or_default().to_string()), || {
                    format!("{axis}: duplicate report {name}")
                })?;
            }
        }
        let want: BTreeSet<String> = labels.iter().cloned().collect();
        check(found == want, || format!("{axis}: reports for {found:?}, expected {want:?}"))?;
        reports += found.len();

        let audit: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("config_diff.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let settings = audit["settings"].as_array().cloned().unwrap_or_default();
        check(settings.len() == labels.len(), || format!("{axis}: {} diff entries", settings.len()))?;
        for (k, s) in settings.iter().enumerate() {
            let paths: Vec<&str> = s[1].as_array().unwrap().iter().map(|p| p.as_str().unwrap()).collect();
            check(paths.iter().all(|p| p.starts_with(prefix)), || format!("{axis}: {} changes {paths:?}", s[0]))?;
            check((k == 0) == paths.is_empty(), || format!("{axis}: {} diff {paths:?}", s[0]))?;
        }
    }
    check(reports == 16, || format!("{reports} reports"))?;
    Ok("16 reports over 4 axes (5 + 3 + 4 + 4), each config diff confined to its axis".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("analytic fixed points", fixed_points),
        ("oracle equivalence", oracle_equivalence),
        ("spatial entropy values", spatial_entropy_values),
        ("planted-evidence localization", planted_localization),
        ("determinism", determinism),
        ("protocol transports", protocol_transports),
        ("ablation runner", ablation_runner),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
