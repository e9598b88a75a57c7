//! Normalized box arithmetic: IoU, NMS, matching, offset coding and the
//! rasterization of boxes onto feature grids.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
///
/// `label` is a class id in `[1, C]`, or 0 for background. `score` is absent
/// for ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl BBox {
    /// Builds a box, checking `0 <= min < max <= 1` on both axes.
    pub fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32, label: usize) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
            label,
            score: None,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid box ({x_min}, {y_min}, {x_max}, {y_max})"
            )))
        }
    }

    pub fn with_score(mut self, score: f32) -> Self {
        self.score = Some(score);
        self
    }

    pub fn is_valid(&self) -> bool {
        let ok = |lo: f32, hi: f32| {
            lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0
        };
        ok(self.x_min, self.x_max) && ok(self.y_min, self.y_max)
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn score_or_zero(&self) -> f32 {
        self.score.unwrap_or(0.0)
    }

    /// Box from center/size, clamped to the unit square.
    pub fn from_center_clamped(cx: f32, cy: f32, w: f32, h: f32, label: usize) -> Self {
        Self {
            x_min: (cx - 0.5 * w).clamp(0.0, 1.0),
            y_min: (cy - 0.5 * h).clamp(0.0, 1.0),
            x_max: (cx + 0.5 * w).clamp(0.0, 1.0),
            y_max: (cy + 0.5 * h).clamp(0.0, 1.0),
            label,
            score: None,
        }
    }
}

/// Intersection over union; touching edges count as disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn by_score_desc(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        boxes[j]
            .score_or_zero()
            .partial_cmp(&boxes[i].score_or_zero())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression over one class.
///
/// Returns indices into `boxes` of the kept boxes, in descending score order
/// (ties by input index). A box is kept iff its IoU with every already-kept
/// box is `<= iou_thresh`.
pub fn nms(boxes: &[BBox], iou_thresh: f32) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in by_score_desc(boxes) {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept
}

/// Assigns each candidate to its best ground truth when that IoU exceeds
/// `thresh`. Ties go to the lowest gt index.
pub fn match_boxes(candidates: &[BBox], gts: &[BBox], thresh: f32) -> Vec<Option<usize>> {
    candidates
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f32)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(c, gt);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.filter(|&(_, v)| v > thresh).map(|(g, _)| g)
        })
        .collect()
}

/// [`match_boxes`] followed by the bipartite step used for detector
/// training: every gt claims its single best candidate (lowest candidate
/// index on ties), overriding the threshold rule. Gts are processed in index
/// order, so a later gt wins a candidate that two gts both prefer.
pub fn match_boxes_forced(candidates: &[BBox], gts: &[BBox], thresh: f32) -> Vec<Option<usize>> {
    let mut assign = match_boxes(candidates, gts, thresh);
    if candidates.is_empty() {
        return assign;
    }
    for (g, gt) in gts.iter().enumerate() {
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for (c, cand) in candidates.iter().enumerate() {
            let v = iou(cand, gt);
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        assign[best] = Some(g);
    }
    assign
}

/// Center/size offsets of `gt` relative to a default box:
/// `(Δcx / w, Δcy / h, ln(w_gt / w), ln(h_gt / h))`.
pub fn encode_offsets(default: &BBox, gt: &BBox) -> [f32; 4] {
    let (dcx, dcy) = default.center();
    let (gcx, gcy) = gt.center();
    let (dw, dh) = (default.width(), default.height());
    [
        (gcx - dcx) / dw,
        (gcy - dcy) / dh,
        (gt.width() / dw).ln(),
        (gt.height() / dh).ln(),
    ]
}

/// Inverse of [`encode_offsets`]; the result is clamped to the unit square
/// and carries the default box's label.
pub fn decode_offsets(default: &BBox, offsets: &[f32; 4]) -> BBox {
    let (dcx, dcy) = default.center();
    let (dw, dh) = (default.width(), default.height());
    let cx = dcx + offsets[0] * dw;
    let cy = dcy + offsets[1] * dh;
    let w = dw * offsets[2].exp();
    let h = dh * offsets[3].exp();
    BBox::from_center_clamped(cx, cy, w, h, default.label)
}

/// Inclusive cell-index rectangle on an `H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRange {
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
}

impl CellRange {
    pub fn width(&self) -> usize {
        self.x_hi - self.x_lo + 1
    }

    pub fn height(&self) -> usize {
        self.y_hi - self.y_lo + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_lo..=self.x_hi).contains(&x) && (self.y_lo..=self.y_hi).contains(&y)
    }
}

fn axis_cells(lo: f32, hi: f32, n: usize) -> (usize, usize) {
    let last = n as i64 - 1;
    let a = ((n as f32 * lo).floor() as i64).clamp(0, last);
    let b = ((n as f32 * hi).ceil() as i64 - 1).clamp(0, last);
    if a <= b {
        (a as usize, b as usize)
    } else {
        let c = ((n as f32 * 0.5 * (lo + hi)).floor() as i64).clamp(0, last) as usize;
        (c, c)
    }
}

/// Rasterizes a box onto an `h×w` grid: `[floor(w·x_min), ceil(w·x_max) − 1]`
/// (likewise in y), clamped to the grid. Every cell whose extent meets the
/// box interior is covered; an empty range falls back to the center cell.
pub fn box_to_cells(b: &BBox, h: usize, w: usize) -> CellRange {
    let (x_lo, x_hi) = axis_cells(b.x_min, b.x_max, w);
    let (y_lo, y_hi) = axis_cells(b.y_min, b.y_max, h);
    CellRange {
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    }
}

/// Union of [`box_to_cells`] over `boxes`, as a row-major `h×w` keep grid.
pub fn boxes_union_grid(boxes: &[BBox], h: usize, w: usize) -> Vec<bool> {
    let mut keep = vec![false; h * w];
    for b in boxes {
        let r = box_to_cells(b, h, w);
        for y in r.y_lo..=r.y_hi {
            keep[y * w + r.x_lo..=y * w + r.x_hi].fill(true);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f32, b: f32, c: f32, d: f32) -> BBox {
        BBox::new(a, b, c, d, 1).unwrap()
    }

    fn random_box(rng: &mut impl Rng) -> BBox {
        loop {
            let (a, b): (f32, f32) = (rng.gen(), rng.gen());
            let (c, d): (f32, f32) = (rng.gen(), rng.gen());
            if let Ok(bb) = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d), rng.gen_range(1..=3))
            {
                return bb;
            }
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0.1, 0.2, 0.6, 0.7), &bx(0.1, 0.2, 0.6, 0.7)), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 0.5, 1.0), &bx(0.5, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.5, 0.0, 1.0, 1.0)), 0.5);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(0.5, 0.0, 0.5, 1.0, 1).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 1.0, 1).is_err());
        assert!(BBox::new(0.0, 0.0, 0.5, 1.1, 1).is_err());
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.45).is_empty());
        let one = [bx(0.1, 0.1, 0.3, 0.3).with_score(0.7)];
        assert_eq!(nms(&one, 0.45), vec![0]);
        let b = bx(0.1, 0.1, 0.5, 0.5);
        let two = [b.with_score(0.8), b.with_score(0.9)];
        assert_eq!(nms(&two, 0.45), vec![1]);
    }

    #[test]
    fn match_examples() {
        let gts = [bx(0.1, 0.1, 0.4, 0.4), bx(0.6, 0.6, 0.9, 0.9)];
        let cands = [bx(0.6, 0.6, 0.9, 0.9), bx(0.0, 0.5, 0.05, 0.55)];
        assert_eq!(match_boxes(&cands, &gts, 0.5), vec![Some(1), None]);
    }

    #[test]
    fn forced_match_claims_best_candidate() {
        let gts = [bx(0.1, 0.1, 0.2, 0.2)];
        let cands = [bx(0.0, 0.0, 0.5, 0.5), bx(0.6, 0.6, 0.9, 0.9)];
        assert_eq!(match_boxes(&cands, &gts, 0.5), vec![None, None]);
        assert_eq!(match_boxes_forced(&cands, &gts, 0.5), vec![Some(0), None]);
    }

    #[test]
    fn offsets_examples() {
        let d = bx(0.25, 0.25, 0.75, 0.75);
        assert_eq!(encode_offsets(&d, &d), [0.0; 4]);
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        let o = encode_offsets(&d, &gt);
        assert_eq!(&o[..2], &[0.0, 0.0]);
        assert!((o[2] - 2f32.ln()).abs() < 1e-7);
        assert!((o[3] - 2f32.ln()).abs() < 1e-7);
    }

    #[test]
    fn offsets_round_trip_1000_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0f32;
        for _ in 0..1000 {
            let (d, g) = (random_box(&mut rng), random_box(&mut rng));
            let r = decode_offsets(&d, &encode_offsets(&d, &g));
            for (a, b) in [
                (r.x_min, g.x_min),
                (r.y_min, g.y_min),
                (r.x_max, g.x_max),
                (r.y_max, g.y_max),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 1e-6, "max round-trip error {worst}");
    }

    #[test]
    fn box_to_cells_examples() {
        let full = box_to_cells(&bx(0.0, 0.0, 1.0, 1.0), 8, 8);
        assert_eq!(
            full,
            CellRange {
                x_lo: 0,
                x_hi: 7,
                y_lo: 0,
                y_hi: 7
            }
        );
        let q = box_to_cells(&bx(0.25, 0.25, 0.5, 0.5), 8, 8);
        assert_eq!(
            q,
            CellRange {
                x_lo: 2,
                x_hi: 3,
                y_lo: 2,
                y_hi: 3
            }
        );
        // thin box inside one column
        let thin = box_to_cells(&bx(0.52, 0.1, 0.53, 0.9), 4, 4);
        assert_eq!((thin.x_lo, thin.x_hi), (2, 2));
    }

    /// Cell `x` spans `[x/n, (x+1)/n)`; it is covered iff that span meets the
    /// open interval `(lo, hi)`.
    fn overlap_oracle(b: &BBox, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let xs = (x as f32) < w as f32 * b.x_max && (x as f32 + 1.0) > w as f32 * b.x_min;
                let ys = (y as f32) < h as f32 * b.y_max && (y as f32 + 1.0) > h as f32 * b.y_min;
                out[y * w + x] = xs && ys;
            }
        }
        out
    }

    #[test]
    fn box_to_cells_matches_overlap_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let b = random_box(&mut rng);
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let oracle = overlap_oracle(&b, h, w);
            let got = boxes_union_grid(&[b], h, w);
            assert_eq!(got, oracle, "box {b:?} on {h}x{w}");
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f32..0.9, 0.0f32..0.9, 0.01f32..1.0, 0.01f32..1.0).prop_map(|(x, y, w, h)| {
            BBox::new(
                x,
                y,
                (x + w).min(1.0).max(x + 0.01),
                (y + h).min(1.0).max(y + 0.01),
                1,
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn nms_output_is_antichain(boxes in proptest::collection::vec((arb_box(), 0.0f32..1.0), 0..40)) {
            let boxes: Vec<BBox> = boxes.into_iter().map(|(b, s)| b.with_score(s)).collect();
            let kept = nms(&boxes, 0.45);
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(iou(&boxes[a], &boxes[b]) <= 0.45);
                }
            }
        }

        #[test]
        fn dominated_box_does_not_change_nms(
            boxes in proptest::collection::vec((arb_box(), 0.1f32..1.0), 1..30),
            pick in 0usize..30,
        ) {
            let boxes: Vec<BBox> = boxes.into_iter().map(|(b, s)| b.with_score(s)).collect();
            let kept = nms(&boxes, 0.45);
            // a copy of a kept box with a lower score is always suppressed
            let src = boxes[kept[pick % kept.len()]];
            let mut more = boxes.clone();
            more.push(src.with_score(src.score.unwrap() * 0.5));
            let kept2 = nms(&more, 0.45);
            prop_assert_eq!(kept, kept2);
        }
    }
}
