//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the library's geometry or loss
//! code.
#![allow(dead_code)]

use ovdet::model::AnchorSet;
use ovdet::{BBox, Matrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-4;

/// GIoU straight from its definition: `IoU - |C \ (A ∪ B)| / |C|`.
pub fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

pub fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    inter / (area(a) + area(b) - inter)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(0.0..extent);
    let y1 = rng.gen_range(0.0..extent);
    let w = rng.gen_range(extent * 0.01..extent);
    let h = rng.gen_range(extent * 0.01..extent);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Error measure used by every gradient check.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[i] += FD_STEP;
    lo[i] -= FD_STEP;
    (f(&hi) - f(&lo)) / (2.0 * FD_STEP)
}

/// `N x M` targets with at most one positive per column.
pub fn random_targets(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let mut g = Matrix::zeros(n, m);
    for col in 0..m {
        if rng.gen_bool(0.3) {
            g.set(rng.gen_range(0..n), col, 1.0);
        }
    }
    g
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..n * m).map(|_| rng.gen_range(lo..hi)).collect();
    Matrix::from_vec(n, m, data).unwrap()
}

/// Brute-force assignment: candidates by rank counting, threshold by a
/// two-pass mean and sample deviation, winner by exhaustive comparison.
pub fn atss_reference(anchors: &AnchorSet, objects: &[(BBox, usize)], n: usize, topk: usize) -> Matrix {
    let m = anchors.boxes.len();
    let center = |b: &BBox| ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let arr = |b: &BBox| [b.x1, b.y1, b.x2, b.y2];
    let mut starts = vec![0usize];
    for s in &anchors.level_sizes {
        starts.push(starts.last().unwrap() + s);
    }
    // positive[o][a]
    let mut positive = vec![vec![false; m]; objects.len()];
    let mut ious = vec![vec![0.0; m]; objects.len()];
    for (o, (obj, _)) in objects.iter().enumerate() {
        let (ox, oy) = center(obj);
        let dist: Vec<f64> = anchors
            .boxes
            .iter()
            .map(|b| {
                let (ax, ay) = center(b);
                (ax - ox).powi(2) + (ay - oy).powi(2)
            })
            .collect();
        let mut cands = Vec::new();
        for l in 0..anchors.level_sizes.len() {
            for a in starts[l]..starts[l + 1] {
                let closer = (starts[l]..starts[l + 1])
                    .filter(|&b| dist[b] < dist[a] || (dist[b] == dist[a] && b < a))
                    .count();
                if closer < topk {
                    cands.push(a);
                }
            }
        }
        for a in 0..m {
            ious[o][a] = iou_oracle(arr(&anchors.boxes[a]), arr(obj));
        }
        let k = cands.len() as f64;
        let mean = cands.iter().map(|&a| ious[o][a]).sum::<f64>() / k;
        let std = if cands.len() > 1 {
            (cands.iter().map(|&a| (ious[o][a] - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        for &a in &cands {
            let (ax, ay) = center(&anchors.boxes[a]);
            let inside = ax > obj.x1 && ax < obj.x2 && ay > obj.y1 && ay < obj.y2;
            positive[o][a] = inside && ious[o][a] >= mean + std;
        }
    }
    let mut g = Matrix::zeros(n, m);
    for a in 0..m {
        let mut best: Option<usize> = None;
        for o in 0..objects.len() {
            if positive[o][a] && best.map_or(true, |b| ious[o][a] > ious[b][a]) {
                best = Some(o);
            }
        }
        if let Some(o) = best {
            if objects[o].1 < n {
                g.set(objects[o].1, a, 1.0);
            }
        }
    }
    g
}

/// Anchors on `levels` square grids of up to `max_side x max_side` cells.
pub fn random_anchor_grid(rng: &mut ChaCha8Rng, levels: usize, max_side: usize) -> AnchorSet {
    let mut boxes = Vec::new();
    let mut level_sizes = Vec::new();
    for _ in 0..levels {
        let rows = rng.gen_range(1..=max_side);
        let cols = rng.gen_range(1..=max_side);
        let stride = rng.gen_range(2.0..16.0);
        let side = stride * rng.gen_range(1.0..5.0);
        for y in 0..rows {
            for x in 0..cols {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                boxes.push(BBox::from_center(cx, cy, side, side).unwrap());
            }
        }
        level_sizes.push(rows * cols);
    }
    AnchorSet { boxes, level_sizes }
}

/// Small synthetic dataset written to `dir` plus a training config over it
/// with a narrow model, so a run takes seconds.
pub fn tiny_run(dir: &std::path::Path, num_images: usize, seed: u64) -> ovdet::TrainConfig {
    let spec = ovdet::data::SyntheticSpec { num_images, eval_fraction: 0.2, seed, ..Default::default() };
    tiny_run_with(dir, &spec)
}

pub fn tiny_run_with(dir: &std::path::Path, spec: &ovdet::data::SyntheticSpec) -> ovdet::TrainConfig {
    use ovdet::data::{generate_synthetic_dataset, write_dataset};
    let spec = spec.clone();
    let ds = generate_synthetic_dataset(&spec).unwrap();
    write_dataset(&ds, &spec, dir).unwrap();
    ovdet::TrainConfig {
        detection: Some(dir.join("detection.jsonl")),
        grounding: Some(dir.join("grounding.jsonl")),
        dictionary: Some(dir.join("dict.jsonl")),
        exclude: Some(dir.join("holdout_names.txt")),
        out_dir: dir.join("run"),
        n: 8,
        epochs: 1,
        batch_size: 2,
        warmup_steps: 0,
        model: tiny_model(),
        ..Default::default()
    }
}

pub fn tiny_model() -> ovdet::ModelConfig {
    ovdet::ModelConfig {
        d_model: 16,
        backbone_channels: vec![8, 16, 16, 16],
        head_channels: 16,
        text_width: 16,
        text_layers: 1,
        text_heads: 2,
        ..Default::default()
    }
}

/// Box pairs whose compared coordinates stay at least `gap` apart, so a
/// central difference never straddles a min/max switch.
pub fn smooth_pair(rng: &mut ChaCha8Rng, gap: f64) -> (BBox, BBox) {
    loop {
        let (p, t) = (random_box(rng, 20.0), random_box(rng, 20.0));
        let (pa, ta) = (p.to_array(), t.to_array());
        let clear = (0..4).all(|k| (pa[k] - ta[k]).abs() > gap)
            && (pa[0] - ta[2]).abs() > gap
            && (pa[2] - ta[0]).abs() > gap
            && (pa[1] - ta[3]).abs() > gap
            && (pa[3] - ta[1]).abs() > gap;
        if clear {
            return (p, t);
        }
    }
}

/// `[a, b1, b2, ...]` whose squared entries sum, in f64, to exactly 1.0, so
/// normalization leaves `a` untouched.
pub fn with_cosine(a: f32) -> Vec<f32> {
    let mut v = vec![a];
    let mut rest = 1.0 - (a as f64) * (a as f64);
    while rest > 0.0 && v.len() < 12 {
        let mut b = rest.sqrt() as f32;
        if (b as f64) * (b as f64) > rest {
            b = b.next_down();
        }
        v.push(b);
        rest -= (b as f64) * (b as f64);
    }
    let norm: f64 = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    assert_eq!(norm, 1.0, "fixture vector is not exactly unit length");
    v
}
