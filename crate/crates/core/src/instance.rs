//! Position-sensitive instance head.
//!
//! A single bank of `2k²` score maps (inside/outside × k×k relative cells,
//! no per-class factor) is predicted from the decoder's image-resolution top
//! features. An ROI gathers each pixel from the channel of the cell it falls
//! in; the ROI score is the sigmoid of the mean per-pixel `max(inside,
//! outside)`, and the mask is the per-pixel inside/outside softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::autodiff::{Gradients, Graph, Var};
use crate::decoder::Decoder;
use crate::detector::{self, Detector, FeaturePyramid};
use crate::error::{Error, Result};
use crate::geometry::{box_to_cells, iou, BBox, CellRange};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PS_HEAD: &str = "instance.ps_head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsConfig {
    /// Relative-position grid size.
    pub k: usize,
    /// Positives sampled per ground-truth box.
    pub p: usize,
    /// Negatives sampled per ground-truth box.
    pub n: usize,
    pub match_thresh: f32,
    pub max_attempts: usize,
}

impl Default for PsConfig {
    fn default() -> Self {
        Self {
            k: 7,
            p: 2,
            n: 4,
            match_thresh: 0.5,
            max_attempts: 50,
        }
    }
}

impl PsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("k, p and n must all be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        2 * self.k * self.k
    }
}

pub fn init_ps_head(store: &mut ParamStore, top_channels: usize, k: usize, rng: &mut impl Rng) {
    detector::init_conv(store, PS_HEAD, 2 * k * k, top_channels, 1, rng);
}

/// 1×1 conv from the top decoder features to the `2k²` score maps.
pub fn ps_head(g: &mut Graph, store: &ParamStore, top: Var) -> Result<Var> {
    detector::conv(g, store, top, PS_HEAD, 1, 0)
}

/// Channel of group `inside` (0) or `outside` (1) for cell `(i, j)`.
pub fn ps_channel(k: usize, outside: bool, i: usize, j: usize) -> usize {
    (outside as usize) * k * k + i * k + j
}

/// Pixel rectangle of `b` on an `h×w` image and, for every ROI pixel, the
/// flat index into a `1×2k²×h×w` map for the outside (first block) and
/// inside (second block) score.
pub fn roi_gather_index(b: &BBox, k: usize, h: usize, w: usize) -> Result<(CellRange, Vec<usize>)> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("ROI smaller than one pixel".into()));
    }
    let r = box_to_cells(b, h, w);
    let (rw, rh) = (r.width(), r.height());
    let plane = h * w;
    let mut index = vec![0usize; 2 * rw * rh];
    for ry in 0..rh {
        for rx in 0..rw {
            let (i, j) = (k * ry / rh, k * rx / rw);
            let pix = (r.y_lo + ry) * w + r.x_lo + rx;
            let o = ry * rw + rx;
            index[o] = ps_channel(k, true, i, j) * plane + pix;
            index[rw * rh + o] = ps_channel(k, false, i, j) * plane + pix;
        }
    }
    Ok((r, index))
}

/// Inside/outside scores gathered over one ROI, row-major over the ROI.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledRoi {
    pub rect: CellRange,
    pub inside: Vec<f32>,
    pub outside: Vec<f32>,
}

impl AssembledRoi {
    pub fn width(&self) -> usize {
        self.rect.width()
    }

    pub fn height(&self) -> usize {
        self.rect.height()
    }
}

/// Copy-paste assembly of an ROI from `1×2k²×H×W` score maps.
pub fn assemble_roi(maps: &Tensor, b: &BBox, k: usize) -> Result<AssembledRoi> {
    let [_, c, h, w] = maps.dims4()?;
    if c != 2 * k * k {
        return Err(Error::shape("assemble_roi", maps.shape(), &[2 * k * k]));
    }
    let (rect, index) = roi_gather_index(b, k, h, w)?;
    let n = rect.width() * rect.height();
    let d = maps.data();
    Ok(AssembledRoi {
        rect,
        outside: index[..n].iter().map(|&i| d[i]).collect(),
        inside: index[n..].iter().map(|&i| d[i]).collect(),
    })
}

/// Mean over the ROI of `max(inside, outside)`: the pre-sigmoid score.
pub fn instance_logit(roi: &AssembledRoi) -> f64 {
    let s: f64 = roi
        .inside
        .iter()
        .zip(&roi.outside)
        .map(|(&a, &b)| a.max(b) as f64)
        .sum();
    s / roi.inside.len() as f64
}

pub fn instance_score(roi: &AssembledRoi) -> f32 {
    let z = instance_logit(roi);
    (1.0 / (1.0 + (-z).exp())) as f32
}

/// Per-pixel foreground probability over the ROI and the binary mask
/// (`fg >= 0.5`) placed on the full `h×w` image.
pub fn instance_mask(roi: &AssembledRoi, h: usize, w: usize) -> (Vec<f32>, Vec<bool>) {
    let probs: Vec<f32> = roi
        .inside
        .iter()
        .zip(&roi.outside)
        .map(|(&a, &b)| {
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            ea / (ea + eb)
        })
        .collect();
    let mut mask = vec![false; h * w];
    let rw = roi.width();
    for (o, &p) in probs.iter().enumerate() {
        if p >= 0.5 {
            let (ry, rx) = (o / rw, o % rw);
            mask[(roi.rect.y_lo + ry) * w + roi.rect.x_lo + rx] = true;
        }
    }
    (probs, mask)
}

/// One sampled training box. `label` is 1 for positives and 0 for negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSample {
    pub bbox: BBox,
    pub label: u8,
    pub gt_index: Option<usize>,
}

/// Samples up to `p` positives and `n` negatives per ground-truth box.
///
/// Positives jitter the gt (per-axis scale in `[0.7, 1.3]`, center shift up
/// to ±0.2 of its size) and are kept iff IoU with that gt exceeds the match
/// threshold. Negatives are boxes of comparable size (each side scaled by
/// `[0.5, 1.5]`) placed uniformly in the image, kept iff their IoU with
/// every gt is at most the threshold. Each sample gets `max_attempts` tries.
pub fn sample_instance_boxes(
    gts: &[BBox],
    cfg: &PsConfig,
    rng: &mut impl Rng,
) -> Vec<InstanceSample> {
    let mut out = Vec::new();
    for (gi, gt) in gts.iter().enumerate() {
        let (cx, cy) = gt.center();
        let (gw, gh) = (gt.width(), gt.height());
        for _ in 0..cfg.p {
            for _ in 0..cfg.max_attempts {
                let w = gw * rng.gen_range(0.7..=1.3);
                let h = gh * rng.gen_range(0.7..=1.3);
                let x = cx + gw * rng.gen_range(-0.2..=0.2);
                let y = cy + gh * rng.gen_range(-0.2..=0.2);
                let b = BBox::from_center_clamped(x, y, w, h, gt.label);
                if b.is_valid() && iou(&b, gt) > cfg.match_thresh {
                    out.push(InstanceSample {
                        bbox: b,
                        label: 1,
                        gt_index: Some(gi),
                    });
                    break;
                }
            }
        }
        for _ in 0..cfg.n {
            for _ in 0..cfg.max_attempts {
                let w = (gw * rng.gen_range(0.5..=1.5)).min(1.0);
                let h = (gh * rng.gen_range(0.5..=1.5)).min(1.0);
                let x0 = rng.gen_range(0.0..=1.0 - w);
                let y0 = rng.gen_range(0.0..=1.0 - h);
                let b = BBox {
                    x_min: x0,
                    y_min: y0,
                    x_max: (x0 + w).min(1.0),
                    y_max: (y0 + h).min(1.0),
                    label: gt.label,
                    score: None,
                };
                if b.is_valid() && gts.iter().all(|g| iou(&b, g) <= cfg.match_thresh) {
                    out.push(InstanceSample {
                        bbox: b,
                        label: 0,
                        gt_index: None,
                    });
                    break;
                }
            }
        }
    }
    out
}

/// `L = L_score + L_seg`. `L_score` is the mean sigmoid cross-entropy of the
/// ROI logit against the sample label over every sample. `L_seg` is the mean
/// over positives of the per-pixel inside/outside cross-entropy against the
/// matched gt instance mask within the sampled ROI; it is omitted when there
/// are no positives.
pub fn instance_loss(
    g: &mut Graph,
    maps: Var,
    k: usize,
    samples: &[InstanceSample],
    gt_masks: &[Vec<bool>],
) -> Result<Var> {
    let [_, c, h, w] = g.value(maps).dims4()?;
    if c != 2 * k * k {
        return Err(Error::shape("instance_loss", g.shape(maps), &[2 * k * k]));
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "instance loss needs at least one sample".into(),
        ));
    }
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let mut terms = Vec::new();
    for s in samples {
        let (rect, index) = roi_gather_index(&s.bbox, k, h, w)?;
        let (rw, rh) = (rect.width(), rect.height());
        let roi = g.gather(maps, index, vec![1, 2, rh, rw])?;
        let outside = g.slice_channels(roi, 0, 1)?;
        let inside = g.slice_channels(roi, 1, 1)?;
        let best = g.maximum(inside, outside)?;
        let logit = g.mean(best);
        terms.push(g.sigmoid_bce(logit, vec![s.label as f32], samples.len() as f64)?);
        if s.label == 1 {
            let gi = s.gt_index.ok_or_else(|| {
                Error::InvalidArgument("positive sample without a matched gt".into())
            })?;
            let mask = gt_masks
                .get(gi)
                .ok_or_else(|| Error::InvalidArgument(format!("no mask for gt {gi}")))?;
            if mask.len() != h * w {
                return Err(Error::shape("instance_loss", &[mask.len()], &[h, w]));
            }
            let targets: Vec<i32> = (0..rh)
                .flat_map(|ry| (0..rw).map(move |rx| (ry, rx)))
                .map(|(ry, rx)| mask[(rect.y_lo + ry) * w + rect.x_lo + rx] as i32)
                .collect();
            let divisor = (rw * rh * positives) as f64;
            terms.push(g.softmax_cross_entropy(roi, targets, divisor)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Loss value and gradients for one (image, class) instance-training term.
#[allow(clippy::too_many_arguments)]
pub fn instance_sample_loss(
    det: &Detector,
    dec: &Decoder,
    store: &ParamStore,
    image: &Tensor,
    class_boxes: &[BBox],
    k: usize,
    samples: &[InstanceSample],
    gt_masks: &[Vec<bool>],
    weight: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let x = g.input(image.clone().with_requires_grad(false));
    let levels = det.backbone_vars(&mut g, store, x)?;
    let attended = attention::attend_vars(&mut g, &levels, class_boxes)?;
    let top = dec.top_features(&mut g, store, &attended)?;
    let maps = ps_head(&mut g, store, top)?;
    let loss = instance_loss(&mut g, maps, k, samples, gt_masks)?;
    let value = g.value(loss).data()[0];
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// [`instance_sample_loss`] from a precomputed pyramid, for a frozen
/// detector.
#[allow(clippy::too_many_arguments)]
pub fn instance_pyramid_loss(
    dec: &Decoder,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
    class_boxes: &[BBox],
    k: usize,
    samples: &[InstanceSample],
    gt_masks: &[Vec<bool>],
    weight: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let levels: Vec<Var> = pyramid.maps.iter().map(|t| g.input(t.clone())).collect();
    let attended = attention::attend_vars(&mut g, &levels, class_boxes)?;
    let top = dec.top_features(&mut g, store, &attended)?;
    let maps = ps_head(&mut g, store, top)?;
    let loss = instance_loss(&mut g, maps, k, samples, gt_masks)?;
    let value = g.value(loss).data()[0];
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// Score maps for a pyramid attended with `boxes`.
pub fn score_maps(
    dec: &Decoder,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
    boxes: &[BBox],
) -> Result<Tensor> {
    let attended = attention::attend(pyramid, boxes, 0)?;
    let mut g = Graph::new();
    let levels: Vec<Var> = attended.maps.iter().map(|t| g.input(t.clone())).collect();
    let top = dec.top_features(&mut g, store, &levels)?;
    let maps = ps_head(&mut g, store, top)?;
    Ok(g.value(maps).clone())
}

/// One segmented instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub bbox: BBox,
    pub label: usize,
    /// Detection score × instance score.
    pub score: f32,
    pub instance_score: f32,
    pub mask: Vec<bool>,
}

/// Detects, then segments every detected box separately with the box alone
/// as attention. Sorted by combined score.
pub fn instance_infer(
    det: &Detector,
    dec: &Decoder,
    store: &ParamStore,
    k: usize,
    image: &Tensor,
) -> Result<Vec<InstancePrediction>> {
    let [_, _, h, w] = image.dims4()?;
    let pyramid = det.backbone_forward(store, image)?;
    let raw = det.head_forward(store, &pyramid)?;
    let detections = det.postprocess(&raw, &det.defaults_for(&pyramid)?);
    let mut out = Vec::with_capacity(detections.len());
    for b in detections {
        let maps = score_maps(dec, store, &pyramid, std::slice::from_ref(&b))?;
        let roi = assemble_roi(&maps, &b, k)?;
        let s = instance_score(&roi);
        let (_, mask) = instance_mask(&roi, h, w);
        out.push(InstancePrediction {
            bbox: b,
            label: b.label,
            score: b.score_or_zero() * s,
            instance_score: s,
            mask,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
