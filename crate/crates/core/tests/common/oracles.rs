//! Brute-force reference implementations, written without the library's
//! helpers so a shared bug cannot hide.

use dasnet::geometry::{box_to_cells, CellRange};
use dasnet::harness::eval::{GtMask, ScoredMask};
use dasnet::BBox;

pub fn iou32(a: &BBox, b: &BBox) -> f32 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let area = |b: &BBox| (b.x_max - b.x_min) * (b.y_max - b.y_min);
    (inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0)
}

/// Rank of every box by (score desc, index asc), computed by counting.
fn ranks(boxes: &[BBox]) -> Vec<usize> {
    let s = |b: &BBox| b.score.unwrap_or(0.0);
    let mut order = vec![0; boxes.len()];
    for i in 0..boxes.len() {
        let before = (0..boxes.len())
            .filter(|&j| s(&boxes[j]) > s(&boxes[i]) || (s(&boxes[j]) == s(&boxes[i]) && j < i))
            .count();
        order[before] = i;
    }
    order
}

/// Suppression-flag formulation: walk by rank, and each surviving box
/// suppresses every lower-ranked box overlapping it by more than `t`.
pub fn nms(boxes: &[BBox], t: f32) -> Vec<usize> {
    let order = ranks(boxes);
    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (r, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[r + 1..] {
            if iou32(&boxes[i], &boxes[j]) > t {
                suppressed[j] = true;
            }
        }
    }
    kept
}

pub fn match_boxes(cands: &[BBox], gts: &[BBox], t: f32) -> Vec<Option<usize>> {
    cands
        .iter()
        .map(|c| {
            let ious: Vec<f32> = gts.iter().map(|g| iou32(c, g)).collect();
            let best = ious.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let first = ious.iter().position(|&v| v == best)?;
            (best > t).then_some(first)
        })
        .collect()
}

/// Cell of ROI offset `r` along an axis of length `len` split into `k`
/// bins, where bin `i` starts at `ceil(i·len/k)`.
fn bin_of(r: usize, len: usize, k: usize) -> usize {
    (0..k)
        .rev()
        .find(|&i| (i * len).div_ceil(k) <= r)
        .expect("bin 0 starts at 0")
}

/// `(rect, outside, inside)` read straight from the score maps.
pub fn assemble(
    maps: &[f32],
    h: usize,
    w: usize,
    b: &BBox,
    k: usize,
) -> (CellRange, Vec<f32>, Vec<f32>) {
    let rect = box_to_cells(b, h, w);
    let (rw, rh) = (rect.x_hi - rect.x_lo + 1, rect.y_hi - rect.y_lo + 1);
    let plane = h * w;
    let (mut outside, mut inside) = (Vec::new(), Vec::new());
    for y in rect.y_lo..=rect.y_hi {
        for x in rect.x_lo..=rect.x_hi {
            let i = bin_of(y - rect.y_lo, rh, k);
            let j = bin_of(x - rect.x_lo, rw, k);
            let cell = i * k + j;
            inside.push(maps[cell * plane + y * w + x]);
            outside.push(maps[(k * k + cell) * plane + y * w + x]);
        }
    }
    (rect, outside, inside)
}

pub fn instance_logit(maps: &[f32], h: usize, w: usize, b: &BBox, k: usize) -> f64 {
    let (_, outside, inside) = assemble(maps, h, w, b, k);
    let mut s = 0.0f64;
    for (o, i) in outside.iter().zip(&inside) {
        s += if i > o { *i as f64 } else { *o as f64 };
    }
    s / inside.len() as f64
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP as the sum, over each true positive rank, of the best precision at
/// that rank or any later one, divided by the gt count.
fn ap(tp: &[bool], n_gt: usize) -> f64 {
    let prec: Vec<f64> = (0..tp.len())
        .map(|r| tp[..=r].iter().filter(|&&t| t).count() as f64 / (r + 1) as f64)
        .collect();
    let mut total = 0.0;
    for r in 0..tp.len() {
        if tp[r] {
            total += prec[r..].iter().copied().fold(0.0, f64::max);
        }
    }
    total / n_gt as f64
}

pub fn map_r(
    preds: &[Vec<ScoredMask>],
    gts: &[Vec<GtMask>],
    classes: usize,
    t: f64,
) -> (Vec<Option<f64>>, f64) {
    let mut per = vec![None; classes + 1];
    for (c, slot) in per.iter_mut().enumerate().skip(1) {
        let n_gt = gts.iter().flatten().filter(|g| g.class == c).count();
        if n_gt == 0 {
            continue;
        }
        let mut cand: Vec<(usize, usize)> = Vec::new();
        for (img, p) in preds.iter().enumerate() {
            for (j, m) in p.iter().enumerate() {
                if m.class == c {
                    cand.push((img, j));
                }
            }
        }
        // Selection sort: highest score first, earliest (image, index) on ties.
        let mut order = Vec::new();
        let mut left = cand.clone();
        while !left.is_empty() {
            let mut best = 0;
            for q in 1..left.len() {
                let (a, b) = (left[q], left[best]);
                if preds[a.0][a.1].score > preds[b.0][b.1].score {
                    best = q;
                }
            }
            order.push(left.remove(best));
        }
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = Vec::new();
        for (img, j) in order {
            let p = &preds[img][j];
            let mut best: Option<(usize, f64)> = None;
            for (q, g) in gts[img].iter().enumerate() {
                if g.class != c || used[img][q] {
                    continue;
                }
                let v = mask_iou(&p.mask, &g.mask);
                if best.is_none() || v > best.unwrap().1 {
                    best = Some((q, v));
                }
            }
            match best {
                Some((q, v)) if v >= t => {
                    used[img][q] = true;
                    tp.push(true);
                }
                _ => tp.push(false),
            }
        }
        *slot = Some(ap(&tp, n_gt));
    }
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per, mean)
}

/// Attention reference: each cell is tested against every box on its own.
pub fn attend_cell_kept(boxes: &[BBox], h: usize, w: usize, y: usize, x: usize) -> bool {
    boxes.iter().any(|b| {
        let xs = span(b.x_min, b.x_max, w);
        let ys = span(b.y_min, b.y_max, h);
        (xs.0..=xs.1).contains(&x) && (ys.0..=ys.1).contains(&y)
    })
}

/// Cells `[floor(n·lo), ceil(n·hi) − 1]` clamped, or the center cell when
/// that is empty.
fn span(lo: f32, hi: f32, n: usize) -> (usize, usize) {
    let nf = n as f32;
    let clamp = |v: f32| v.max(0.0).min(nf - 1.0) as usize;
    let a = (nf * lo).floor();
    let b = (nf * hi).ceil() - 1.0;
    if a.max(0.0) <= b.min(nf - 1.0) {
        (clamp(a), clamp(b))
    } else {
        let c = clamp((nf * 0.5 * (lo + hi)).floor());
        (c, c)
    }
}
