//! Single-shot detector: a small strided backbone producing the multi-scale
//! feature pyramid, per-scale box predictors, the training objective, and
//! post-processing into the final detection set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, IGNORE};
use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PREFIX: &str = "detector.";

/// Multi-scale backbone features, finest first. Each map is `1×C_k×H_k×W_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Foreground class count; score maps carry `classes + 1` channels.
    pub classes: usize,
    /// Channel width of each pyramid level; its length is the scale count.
    pub channels: Vec<usize>,
    /// Side of the square default box at each level, as a fraction of the image.
    pub default_scales: Vec<f32>,
    pub match_thresh: f32,
    pub neg_ratio: usize,
    pub score_thresh: f32,
    pub nms_thresh: f32,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            channels: vec![16, 32, 64],
            default_scales: vec![0.2, 0.35, 0.5],
            match_thresh: 0.5,
            neg_ratio: 3,
            score_thresh: 0.5,
            nms_thresh: 0.45,
            max_detections: 32,
        }
    }
}

impl DetectorConfig {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument("class count must be >= 1".into()));
        }
        if self.channels.len() < 2 || self.default_scales.len() != self.channels.len() {
            return Err(Error::InvalidArgument(
                "need >= 2 pyramid levels and one default scale per level".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::InvalidArgument(format!(
                "score threshold {} outside [0, 1]",
                self.score_thresh
            )));
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nms threshold {} outside (0, 1]",
                self.nms_thresh
            )));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.scales() + 1)
    }

    /// Grid size of every level for a square `size×size` input.
    pub fn grid_sizes(&self, size: usize) -> Vec<usize> {
        (0..self.scales()).map(|k| size >> (k + 2)).collect()
    }
}

/// Per-level raw head outputs: `1×(C+1)×H×W` class logits and `1×4×H×W`
/// offsets, one default box per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPredictions {
    pub scores: Vec<Tensor>,
    pub offsets: Vec<Tensor>,
}

struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
}

/// Parameter layout and forward passes of the detection module.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// Two stride-2 stem convs reach stride 4; every level, including the
    /// first, ends with a stride-1 conv, and each further level starts with a
    /// stride-2 conv.
    fn backbone_layers(&self) -> Vec<ConvSpec> {
        let ch = &self.cfg.channels;
        let mut layers = Vec::new();
        let mut push = |cin, cout, stride| {
            let name = format!("{PREFIX}backbone.conv{}", layers.len() + 1);
            layers.push(ConvSpec {
                name,
                cin,
                cout,
                stride,
            });
        };
        push(3, ch[0], 2);
        push(ch[0], ch[0], 2);
        push(ch[0], ch[0], 1);
        for k in 1..ch.len() {
            push(ch[k - 1], ch[k], 2);
            push(ch[k], ch[k], 1);
        }
        layers
    }

    /// Index of the backbone layer whose output is pyramid level `k`.
    fn level_outputs(&self) -> Vec<usize> {
        (0..self.cfg.scales()).map(|k| 2 + 2 * k).collect()
    }

    fn head_name(k: usize) -> String {
        format!("{PREFIX}head{}", k + 1)
    }

    pub fn head_channels(&self) -> usize {
        self.cfg.classes + 1 + 4
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in self.backbone_layers() {
            init_conv(store, &l.name, l.cout, l.cin, 3, rng);
        }
        for (k, &c) in self.cfg.channels.iter().enumerate() {
            init_conv(store, &Self::head_name(k), self.head_channels(), c, 3, rng);
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.cfg.size_divisor();
        match shape {
            [1, 3, h, w] if h % d == 0 && w % d == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "detector input must be 1x3xHxW with H, W divisible by {d}, got {shape:?}"
            ))),
        }
    }

    /// Records the backbone on `g`; returns the pyramid levels, finest first.
    pub fn backbone_vars(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(image))?;
        let outputs = self.level_outputs();
        let mut x = image;
        let mut levels = Vec::new();
        for (i, l) in self.backbone_layers().iter().enumerate() {
            x = conv_relu(g, store, x, &l.name, l.stride, 1)?;
            if outputs.contains(&i) {
                levels.push(x);
            }
        }
        Ok(levels)
    }

    /// Records the predictors; returns `(scores, offsets)` per level.
    pub fn head_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        levels: &[Var],
    ) -> Result<Vec<(Var, Var)>> {
        let c1 = self.cfg.classes + 1;
        levels
            .iter()
            .enumerate()
            .map(|(k, &f)| {
                let y = conv(g, store, f, &Self::head_name(k), 1, 1)?;
                Ok((g.slice_channels(y, 0, c1)?, g.slice_channels(y, c1, 4)?))
            })
            .collect()
    }

    pub fn backbone_forward(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let x = g.input(image.clone().with_requires_grad(false));
        let levels = self.backbone_vars(&mut g, store, x)?;
        Ok(FeaturePyramid {
            maps: levels.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn head_forward(
        &self,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
    ) -> Result<RawPredictions> {
        let mut g = Graph::new();
        let levels: Vec<Var> = pyramid.maps.iter().map(|m| g.input(m.clone())).collect();
        let heads = self.head_vars(&mut g, store, &levels)?;
        Ok(RawPredictions {
            scores: heads.iter().map(|&(s, _)| g.value(s).clone()).collect(),
            offsets: heads.iter().map(|&(_, o)| g.value(o).clone()).collect(),
        })
    }

    /// One square default box per cell, centered on the cell.
    pub fn build_default_boxes(&self, grids: &[(usize, usize)]) -> Vec<Vec<BBox>> {
        grids
            .iter()
            .zip(&self.cfg.default_scales)
            .map(|(&(h, w), &s)| default_boxes_for_grid(h, w, s))
            .collect()
    }

    /// Records the detection objective for one image.
    pub fn detection_loss_vars(
        &self,
        g: &mut Graph,
        heads: &[(Var, Var)],
        defaults: &[Vec<BBox>],
        gts: &[BBox],
    ) -> Result<Var> {
        let scores: Vec<&Tensor> = heads.iter().map(|&(s, _)| g.value(s)).collect();
        let t = detection_targets(&self.cfg, &scores, defaults, gts)?;
        let mut total: Option<Var> = None;
        for (k, &(s, o)) in heads.iter().enumerate() {
            let cls = g.softmax_cross_entropy(s, t.classes[k].clone(), t.divisor)?;
            let loc = g.smooth_l1(
                o,
                t.offsets[k].clone(),
                t.offset_weights[k].clone(),
                t.divisor,
            )?;
            let term = g.add(cls, loc)?;
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("no predictor levels".into()))
    }

    /// Detection loss evaluated on fixed predictions.
    pub fn detection_loss(
        &self,
        preds: &RawPredictions,
        defaults: &[Vec<BBox>],
        gts: &[BBox],
    ) -> Result<f32> {
        let mut g = Graph::new();
        let heads: Vec<(Var, Var)> = preds
            .scores
            .iter()
            .zip(&preds.offsets)
            .map(|(s, o)| (g.input(s.clone()), g.input(o.clone())))
            .collect();
        let loss = self.detection_loss_vars(&mut g, &heads, defaults, gts)?;
        Ok(g.value(loss).data()[0])
    }

    /// Full inference: backbone, predictors, decoding, per-class NMS.
    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<BBox>> {
        let pyramid = self.backbone_forward(store, image)?;
        let raw = self.head_forward(store, &pyramid)?;
        Ok(self.postprocess(&raw, &self.defaults_for(&pyramid)?))
    }

    pub fn defaults_for(&self, pyramid: &FeaturePyramid) -> Result<Vec<Vec<BBox>>> {
        let grids = pyramid
            .maps
            .iter()
            .map(|m| m.dims4().map(|[_, _, h, w]| (h, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.build_default_boxes(&grids))
    }

    /// Decodes raw predictions into the final detection set.
    pub fn postprocess(&self, raw: &RawPredictions, defaults: &[Vec<BBox>]) -> Vec<BBox> {
        let order: Vec<usize> = (1..=self.cfg.classes).collect();
        self.postprocess_in_order(raw, defaults, &order)
    }

    pub(crate) fn postprocess_in_order(
        &self,
        raw: &RawPredictions,
        defaults: &[Vec<BBox>],
        class_order: &[usize],
    ) -> Vec<BBox> {
        let c1 = self.cfg.classes + 1;
        // per-cell class probabilities, shared across the class loop
        let mut cells: Vec<(Vec<f32>, BBox)> = Vec::new();
        for (k, (scores, offsets)) in raw.scores.iter().zip(&raw.offsets).enumerate() {
            let plane = scores.shape()[2] * scores.shape()[3];
            for p in 0..plane {
                let logits: Vec<f32> = (0..c1).map(|c| scores.data()[c * plane + p]).collect();
                let probs = softmax(&logits);
                let off = [0, 1, 2, 3].map(|i| offsets.data()[i * plane + p]);
                cells.push((probs, geometry::decode_offsets(&defaults[k][p], &off)));
            }
        }
        let mut out = Vec::new();
        for &c in class_order {
            let cand: Vec<BBox> = cells
                .iter()
                .filter(|(p, b)| p[c] > self.cfg.score_thresh && b.is_valid())
                .map(|(p, b)| BBox { label: c, ..*b }.with_score(p[c]))
                .collect();
            out.extend(
                geometry::nms(&cand, self.cfg.nms_thresh)
                    .into_iter()
                    .map(|i| cand[i]),
            );
        }
        sort_detections(&mut out);
        out.truncate(self.cfg.max_detections);
        out
    }
}

/// Descending score, then label, then coordinates.
pub fn sort_detections(boxes: &mut [BBox]) {
    boxes.sort_by(|a, b| {
        b.score_or_zero()
            .total_cmp(&a.score_or_zero())
            .then(a.label.cmp(&b.label))
            .then(a.x_min.total_cmp(&b.x_min))
            .then(a.y_min.total_cmp(&b.y_min))
            .then(a.x_max.total_cmp(&b.x_max))
            .then(a.y_max.total_cmp(&b.y_max))
    });
}

pub fn default_boxes_for_grid(h: usize, w: usize, side: f32) -> Vec<BBox> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cx = (2 * x + 1) as f32 / (2 * w) as f32;
            let cy = (2 * y + 1) as f32 / (2 * h) as f32;
            out.push(BBox::from_center_clamped(cx, cy, side, side, 0));
        }
    }
    out
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|&v| ((v - m) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| (v / z) as f32).collect()
}

/// Per-level training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    /// Class per cell: matched label, 0 for a mined negative, [`IGNORE`] otherwise.
    pub classes: Vec<Vec<i32>>,
    /// Encoded offsets laid out like the `4×H×W` offset map.
    pub offsets: Vec<Vec<f32>>,
    pub offset_weights: Vec<Vec<bool>>,
    pub positives: usize,
    pub negatives: usize,
    pub divisor: f64,
}

/// Matches default boxes to `gts` (threshold plus forced best match) and
/// mines the hardest negatives at `neg_ratio` per positive. With no
/// positives, `neg_ratio` negatives are mined and the divisor is 1.
pub fn detection_targets(
    cfg: &DetectorConfig,
    scores: &[&Tensor],
    defaults: &[Vec<BBox>],
    gts: &[BBox],
) -> Result<DetectionTargets> {
    if scores.len() != defaults.len() {
        return Err(Error::shape(
            "detection_targets",
            &[scores.len()],
            &[defaults.len()],
        ));
    }
    let flat: Vec<BBox> = defaults.iter().flatten().copied().collect();
    let assign = geometry::match_boxes_forced(&flat, gts, cfg.match_thresh);

    let mut classes = Vec::new();
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut neg_pool: Vec<(f64, usize, usize)> = Vec::new();
    let mut positives = 0;
    let mut cell = 0;
    for (k, s) in scores.iter().enumerate() {
        let [_, c1, h, w] = s.dims4()?;
        if c1 != cfg.classes + 1 || defaults[k].len() != h * w {
            return Err(Error::shape(
                "detection_targets",
                s.shape(),
                &[defaults[k].len()],
            ));
        }
        let plane = h * w;
        let mut cls = vec![IGNORE; plane];
        let mut off = vec![0.0; 4 * plane];
        let mut wts = vec![false; 4 * plane];
        for p in 0..plane {
            match assign[cell] {
                Some(gi) => {
                    let gt = &gts[gi];
                    cls[p] = gt.label as i32;
                    let enc = geometry::encode_offsets(&defaults[k][p], gt);
                    for i in 0..4 {
                        off[i * plane + p] = enc[i];
                        wts[i * plane + p] = true;
                    }
                    positives += 1;
                }
                None => {
                    let at = |c: usize| s.data()[c * plane + p] as f64;
                    let m = (0..c1).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..c1).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                    neg_pool.push((lse - at(0), k, p));
                }
            }
            cell += 1;
        }
        classes.push(cls);
        offsets.push(off);
        weights.push(wts);
    }
    let want = cfg.neg_ratio * positives.max(1);
    neg_pool.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let negatives = want.min(neg_pool.len());
    for &(_, k, p) in &neg_pool[..negatives] {
        classes[k][p] = 0;
    }
    Ok(DetectionTargets {
        classes,
        offsets,
        offset_weights: weights,
        positives,
        negatives,
        divisor: positives.max(1) as f64,
    })
}

pub(crate) fn init_conv(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let w = Tensor::he_uniform(&[cout, cin, k, k], cin * k * k, rng);
    store.insert(format!("{name}.weight"), w.with_requires_grad(true));
    store.insert(
        format!("{name}.bias"),
        Tensor::zeros(&[cout]).with_requires_grad(true),
    );
}

/// Kernel layout `Cin×Cout×K×K` for transposed convolutions. At stride 2
/// each output sees a quarter of the kernel taps, which sets the fan-in.
pub(crate) fn init_conv_transpose(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    let w = Tensor::he_uniform(&[cin, cout, k, k], (cin * k * k / 4).max(1), rng);
    store.insert(format!("{name}.weight"), w.with_requires_grad(true));
    store.insert(
        format!("{name}.bias"),
        Tensor::zeros(&[cout]).with_requires_grad(true),
    );
}

pub(crate) fn conv(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_bias(y, b)
}

pub(crate) fn conv_relu(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = conv(g, store, x, name, stride, pad)?;
    Ok(g.relu(y))
}

pub(crate) fn conv_transpose(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    name: &str,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.conv_transpose2d(x, w, stride, pad)?;
    g.add_bias(y, b)
}
