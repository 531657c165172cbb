//! Independent reference implementations shared by the integration tests and
//! the acceptance binary. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use bevcollab::comm::{MapEncoding, TokenMessage};
use bevcollab::geometry::OrientedBox;
use bevcollab::grid::{BevGrid, GridSpec};
use bevcollab::nn::Dense;
use bevcollab::uac::MAX_REFINE_OFFSET;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> BevGrid {
    let data = (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    BevGrid::from_data(GridSpec::centered(h, w, 0.5), c, data).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Full stable sort by (weight desc, index asc), first `k`.
pub fn topk_by_sort(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|a, b| weights[*b].partial_cmp(&weights[*a]).unwrap().then(a.cmp(b)));
    idx.truncate(k);
    idx
}

/// `y = W x + b` by explicit loops.
pub fn dense(d: &Dense, x: &[f32]) -> Vec<f64> {
    let mut y = vec![0.0; d.outputs];
    for (o, yo) in y.iter_mut().enumerate() {
        let mut s = d.bias[o] as f64;
        for (i, xi) in x.iter().enumerate() {
            s += d.weight[o * d.inputs + i] as f64 * *xi as f64;
        }
        *yo = s;
    }
    y
}

/// Bilinear read at `(x, y)` = (col, row); zero outside the cell-center hull.
pub fn bilinear(g: &BevGrid, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (g.height(), g.width(), g.channels());
    let mut out = vec![0.0; c];
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return out;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wx * wy;
            if wgt == 0.0 {
                continue;
            }
            let (r, cc) = ((y0 + dy).min(h - 1), (x0 + dx).min(w - 1));
            for (k, o) in out.iter_mut().enumerate() {
                *o += wgt * g.data()[(r * w + cc) * c + k] as f64;
            }
        }
    }
    out
}

/// Dense deformable gather: `feat(p) + Σ_n v_n · bilinear(feat, p + clamp(δ_n))`.
pub fn refine_dense(feat: &BevGrid, cells: &[(usize, usize)], offset_net: &Dense, v: &[f32]) -> Vec<Vec<f64>> {
    cells
        .iter()
        .map(|&(r, c)| {
            let x = feat.at(r, c);
            let offsets = dense(offset_net, x);
            let mut out = widen(x);
            for (n, vn) in v.iter().enumerate() {
                let dx = offsets[2 * n].clamp(-MAX_REFINE_OFFSET as f64, MAX_REFINE_OFFSET as f64);
                let dy = offsets[2 * n + 1].clamp(-MAX_REFINE_OFFSET as f64, MAX_REFINE_OFFSET as f64);
                let s = bilinear(feat, c as f64 + dx, r as f64 + dy);
                for (o, si) in out.iter_mut().zip(s) {
                    *o += *vn as f64 * si;
                }
            }
            out
        })
        .collect()
}

/// Single-query attention over the unselected cells by explicit sums.
pub fn agent_token_dense(feat: &BevGrid, selected: &[(usize, usize)], a: &[f32], wq: &Dense, wk: &Dense, wv: &Dense) -> Vec<f64> {
    let (h, w, c) = (feat.height(), feat.width(), feat.channels());
    let q = dense(wq, a);
    let mut logits = Vec::new();
    let mut values = Vec::new();
    for r in 0..h {
        for col in 0..w {
            if selected.contains(&(r, col)) {
                continue;
            }
            let k = dense(wk, feat.at(r, col));
            logits.push(k.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>() / (c as f64).sqrt());
            values.push(dense(wv, feat.at(r, col)));
        }
    }
    let mut out = vec![0.0; c];
    if logits.is_empty() {
        return out;
    }
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    for (l, v) in logits.iter().zip(&values) {
        let p = (l - m).exp() / z;
        for (o, vi) in out.iter_mut().zip(v) {
            *o += p * vi;
        }
    }
    out
}

/// `Softmax(X Xᵀ/√C + log g) X` by two nested loops per row.
pub fn assemble_dense(rows: &[Vec<f32>], prior: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let m = rows.len();
    let c = rows[0].len();
    let mut weights = vec![vec![0.0; m]; m];
    let mut out = vec![vec![0.0; c]; m];
    for a in 0..m {
        let mut logits = vec![0.0; m];
        for b in 0..m {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| *x as f64 * *y as f64).sum();
            logits[b] = dot / (c as f64).sqrt() + prior[b].ln();
        }
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for b in 0..m {
            weights[a][b] = (logits[b] - mx).exp() / z;
            for k in 0..c {
                out[a][k] += weights[a][b] * rows[b][k] as f64;
            }
        }
    }
    (weights, out)
}

fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.length / 2.0 && v.abs() <= b.width / 2.0
}

/// IoU by uniform sampling over the union's bounding square.
pub fn iou_monte_carlo(a: &OrientedBox, b: &OrientedBox, samples: usize, rng: &mut impl Rng) -> f64 {
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    let x0 = (a.cx - ra).min(b.cx - rb);
    let x1 = (a.cx + ra).max(b.cx + rb);
    let y0 = (a.cy - ra).min(b.cy - rb);
    let y1 = (a.cy + ra).max(b.cy + rb);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..samples {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let (ia, ib) = (inside(a, x, y), inside(b, x, y));
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn random_box(rng: &mut impl Rng) -> OrientedBox {
    OrientedBox::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(0.5..5.0),
        rng.random_range(0.5..3.0),
        rng.random_range(-3.2..3.2),
    )
}

// straight-line loss references

pub fn focal_ref(p: f64, pos: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if pos {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

pub fn dice_ref(p: &[f64], q: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sq = 0.0;
    for i in 0..p.len() {
        inter += p[i] * q[i];
        sp += p[i];
        sq += q[i];
    }
    1.0 - 2.0 * inter / (sp + sq + 1.0)
}

pub fn focal_dice_ref(p: &[f64], q: &[f64]) -> f64 {
    let mut f = 0.0;
    for i in 0..p.len() {
        f += focal_ref(p[i], q[i] >= 0.5, 0.25, 2.0);
    }
    f / p.len() as f64 + dice_ref(p, q)
}

pub fn bce_ref(p: f64, pos: bool) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if pos {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn depth_ref(logits: &[f64], bins: usize, labels: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for (a, l) in labels.iter().enumerate() {
        if let Some(k) = l {
            let col = &logits[a * bins..(a + 1) * bins];
            let z: f64 = col.iter().map(|v| v.exp()).sum();
            total += focal_ref(col[*k].exp() / z, true, 0.25, 2.0);
            n += 1.0;
        }
    }
    if n == 0.0 {
        0.0
    } else {
        total / n
    }
}

pub fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// A random message whose maps survive the chosen encoding exactly.
pub fn random_message(rng: &mut impl Rng, k: usize, c: usize, h: usize, w: usize, encoding: MapEncoding) -> TokenMessage {
    let cells = h * w;
    let mut order: Vec<usize> = (0..cells).collect();
    for i in (1..cells).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let indices = order[..k].iter().map(|&i| ((i / w) as u16, (i % w) as u16)).collect();
    let bits = |rng: &mut dyn rand::RngCore| f32::from_bits(rng.next_u32());
    let map = |rng: &mut dyn rand::RngCore| -> Vec<f32> {
        (0..cells)
            .map(|_| match encoding {
                MapEncoding::F32 => f32::from_bits(rng.next_u32()),
                MapEncoding::U8 => (rng.next_u32() % 256) as f32 / 255.0,
            })
            .collect()
    };
    TokenMessage {
        sender: rng.random(),
        receiver: rng.random(),
        level: rng.random_range(0..4),
        timestamp_ms: rng.random(),
        channels: c as u16,
        indices,
        tokens: (0..k * c).map(|_| bits(rng)).collect(),
        agent_token: (0..c).map(|_| bits(rng)).collect(),
        confidence: map(rng),
        consensus: map(rng),
        encoding,
    }
}

/// Bitwise equality, so NaN payloads count.
pub fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn messages_identical(a: &TokenMessage, b: &TokenMessage) -> bool {
    a.sender == b.sender
        && a.receiver == b.receiver
        && a.level == b.level
        && a.timestamp_ms == b.timestamp_ms
        && a.channels == b.channels
        && a.indices == b.indices
        && a.encoding == b.encoding
        && same_bits(&a.tokens, &b.tokens)
        && same_bits(&a.agent_token, &b.agent_token)
        && same_bits(&a.confidence, &b.confidence)
        && same_bits(&a.consensus, &b.consensus)
}

/// Wire size written out field by field.
pub fn layout_bytes(k: usize, c: usize, cells: usize, map_bytes: usize) -> usize {
    let header = 4 + 4 + 4 + 1 + 4 + 2;
    let timestamp = 8;
    let per_token = 2 + 2 + 4 * c;
    header + timestamp + k * per_token + 4 * c + 2 * map_bytes * cells
}

pub fn request_bytes(k: usize) -> usize {
    4 + 4 + 4 + 1 + 4 + 2 + k * (2 + 2)
}
