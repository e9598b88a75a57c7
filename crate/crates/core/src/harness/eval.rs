//! Segmentation metrics and dataset-level prediction helpers.

use serde::Serialize;

use crate::data::SynthSample;
use crate::decoder::semantic_infer;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::instance::{assemble_roi, instance_infer, instance_score, score_maps};
use crate::model::Model;
use crate::params::ParamStore;

/// Per-class IoU (index 0 is background) and their mean over the classes
/// present in prediction or ground truth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// IoU per class accumulated over all images, VOC style.
pub fn eval_miou(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape("eval_miou", &[pred.len()], &[gt.len()]));
    }
    let mut inter = vec![0u64; classes + 1];
    let mut union = vec![0u64; classes + 1];
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::shape("eval_miou", &[p.len()], &[g.len()]));
        }
        for (&a, &b) in p.iter().zip(g) {
            let (a, b) = (a as usize, b as usize);
            if a > classes || b > classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside 0..={classes}",
                    a.max(b)
                )));
            }
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}

/// A predicted instance mask with its confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub class: usize,
    pub score: f32,
    pub mask: Vec<bool>,
}

/// A ground-truth instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct GtMask {
    pub class: usize,
    pub mask: Vec<bool>,
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        i += (x && y) as u64;
        u += (x || y) as u64;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// mAP^r at one IoU threshold; per-class AP is `None` for classes without
/// ground truth, which are left out of the mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapResult {
    pub threshold: f64,
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
}

/// Area under the precision–recall curve with the all-points interpolated
/// precision envelope, given true/false positive flags in rank order.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (rank + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&p, &r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Per class: predictions over all images by descending score (ties keep
/// image then input order), each matched to the unmatched same-image gt of
/// highest mask IoU when that IoU is `>= threshold`.
pub fn eval_map_r(
    preds: &[Vec<ScoredMask>],
    gts: &[Vec<GtMask>],
    classes: usize,
    thresholds: &[f64],
) -> Result<Vec<MapResult>> {
    if preds.len() != gts.len() {
        return Err(Error::shape("eval_map_r", &[preds.len()], &[gts.len()]));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "threshold {t} outside (0, 1)"
        )));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let mut per_class = vec![None; classes + 1];
        for (c, slot) in per_class.iter_mut().enumerate().skip(1) {
            let n_gt: usize = gts
                .iter()
                .map(|g| g.iter().filter(|m| m.class == c).count())
                .sum();
            if n_gt == 0 {
                continue;
            }
            let mut ranked: Vec<(usize, &ScoredMask)> = preds
                .iter()
                .enumerate()
                .flat_map(|(img, p)| p.iter().filter(|m| m.class == c).map(move |m| (img, m)))
                .collect();
            ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp = Vec::with_capacity(ranked.len());
            for (img, p) in ranked {
                let best = gts[img]
                    .iter()
                    .enumerate()
                    .filter(|&(j, g)| g.class == c && !used[img][j])
                    .map(|(j, g)| (j, mask_iou(&p.mask, &g.mask)))
                    .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((j, v)),
                    });
                match best {
                    Some((j, v)) if v >= threshold => {
                        used[img][j] = true;
                        tp.push(true);
                    }
                    _ => tp.push(false),
                }
            }
            *slot = Some(average_precision(&tp, n_gt));
        }
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let map = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        out.push(MapResult {
            threshold,
            per_class,
            map,
        });
    }
    Ok(out)
}

/// Fraction of ground-truth boxes covered by a same-class detection with
/// box IoU `>= thresh`.
pub fn detection_recall(dets: &[Vec<BBox>], gts: &[Vec<BBox>], thresh: f32) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 1.0;
    }
    let hit: usize = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| {
            g.iter()
                .filter(|gt| {
                    d.iter()
                        .any(|b| b.label == gt.label && iou(b, gt) >= thresh)
                })
                .count()
        })
        .sum();
    hit as f64 / total as f64
}

pub fn detections(
    model: &Model,
    store: &ParamStore,
    samples: &[SynthSample],
) -> Result<Vec<Vec<BBox>>> {
    samples
        .iter()
        .map(|s| model.detector.detect(store, &s.to_tensor()))
        .collect()
}

pub fn semantic_predictions(
    model: &Model,
    store: &ParamStore,
    samples: &[SynthSample],
) -> Result<Vec<Vec<u8>>> {
    samples
        .iter()
        .map(|s| semantic_infer(&model.detector, &model.decoder, store, &s.to_tensor()))
        .collect()
}

pub fn instance_predictions(
    model: &Model,
    store: &ParamStore,
    samples: &[SynthSample],
) -> Result<Vec<Vec<ScoredMask>>> {
    samples
        .iter()
        .map(|s| {
            let preds = instance_infer(
                &model.detector,
                &model.decoder,
                store,
                model.cfg.k,
                &s.to_tensor(),
            )?;
            Ok(preds
                .into_iter()
                .map(|p| ScoredMask {
                    class: p.label,
                    score: p.score,
                    mask: p.mask,
                })
                .collect())
        })
        .collect()
}

pub fn ground_truth_masks(samples: &[SynthSample]) -> Vec<Vec<GtMask>> {
    samples
        .iter()
        .map(|s| {
            s.instances
                .iter()
                .map(|i| GtMask {
                    class: i.class,
                    mask: i.mask.clone(),
                })
                .collect()
        })
        .collect()
}

/// The box moved horizontally by half its width, toward the side with
/// room (right when both have), clamped to the image.
pub fn half_width_shift(b: &BBox) -> BBox {
    let d = b.width() / 2.0;
    let d = if b.x_max + d <= 1.0 {
        d
    } else {
        -d.min(b.x_min)
    };
    BBox {
        x_min: b.x_min + d,
        x_max: b.x_max + d,
        ..*b
    }
}

/// For every ground-truth instance, scores the ROI at its box and at the
/// half-width shifted box, both over the pyramid attended with the box
/// itself. Returns `(lowered, total)`.
pub fn shift_sensitivity(
    model: &Model,
    store: &ParamStore,
    samples: &[SynthSample],
) -> Result<(usize, usize)> {
    let (mut lowered, mut total) = (0, 0);
    for s in samples {
        let pyramid = model.detector.backbone_forward(store, &s.to_tensor())?;
        for inst in &s.instances {
            let maps = score_maps(
                &model.decoder,
                store,
                &pyramid,
                std::slice::from_ref(&inst.bbox),
            )?;
            let at = instance_score(&assemble_roi(&maps, &inst.bbox, model.cfg.k)?);
            let shifted = instance_score(&assemble_roi(
                &maps,
                &half_width_shift(&inst.bbox),
                model.cfg.k,
            )?);
            total += 1;
            lowered += (shifted < at) as usize;
        }
    }
    Ok((lowered, total))
}
