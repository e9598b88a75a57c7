//! Deconvolutional segmentation module: merges a class-specific pyramid top
//! down into image-resolution features, the two-channel semantic head and its
//! box-restricted loss, and max-rule semantic inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::autodiff::{Gradients, Graph, Var, IGNORE};
use crate::detector::{self, Detector};
use crate::error::{Error, Result};
use crate::geometry::{boxes_union_grid, BBox};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PREFIX: &str = "decoder.";
pub const SEMANTIC_HEAD: &str = "semantic.head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Channel widths of the pyramid levels being merged (finest first).
    pub level_channels: Vec<usize>,
    /// Width after the first of the two final ×2 upsamplings.
    pub refine_channels: usize,
    /// Width of the image-resolution top features.
    pub top_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            level_channels: vec![16, 32, 64],
            refine_channels: 16,
            top_channels: 8,
        }
    }
}

/// Class-agnostic decoder; one parameter set serves every class.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        if cfg.level_channels.len() < 2 {
            return Err(Error::InvalidArgument(
                "decoder needs >= 2 pyramid levels".into(),
            ));
        }
        Ok(Self { cfg })
    }

    fn upsample_name(level: usize) -> String {
        format!("{PREFIX}upsample{}", level + 1)
    }

    fn merge_name(level: usize) -> String {
        format!("{PREFIX}merge{}", level + 1)
    }

    /// Initializes the merge path. The semantic head is separate so the
    /// instance stage can reuse the decoder without it.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let ch = &self.cfg.level_channels;
        for level in (0..ch.len() - 1).rev() {
            detector::init_conv_transpose(
                store,
                &Self::upsample_name(level),
                ch[level + 1],
                ch[level],
                4,
                rng,
            );
            detector::init_conv(
                store,
                &Self::merge_name(level),
                ch[level],
                2 * ch[level],
                3,
                rng,
            );
        }
        detector::init_conv_transpose(
            store,
            &format!("{PREFIX}final_up1"),
            ch[0],
            self.cfg.refine_channels,
            4,
            rng,
        );
        detector::init_conv_transpose(
            store,
            &format!("{PREFIX}final_up2"),
            self.cfg.refine_channels,
            self.cfg.top_channels,
            4,
            rng,
        );
    }

    pub fn init_semantic_head(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        detector::init_conv(store, SEMANTIC_HEAD, 2, self.cfg.top_channels, 1, rng);
    }

    /// Top-down merge ending at the image-resolution top features.
    ///
    /// Starting from the coarsest level, each step upsamples ×2 by transposed
    /// convolution to the next level's height, width and channel count,
    /// concatenates along channels, and applies a 3×3 conv + ReLU.
    pub fn top_features(&self, g: &mut Graph, store: &ParamStore, levels: &[Var]) -> Result<Var> {
        let ch = &self.cfg.level_channels;
        if levels.len() != ch.len() {
            return Err(Error::shape("merge_topdown", &[levels.len()], &[ch.len()]));
        }
        for (&v, &c) in levels.iter().zip(ch) {
            let [_, cv, _, _] = g.value(v).dims4()?;
            if cv != c {
                return Err(Error::shape("merge_topdown", g.shape(v), &[c]));
            }
        }
        let mut x = levels[ch.len() - 1];
        for level in (0..ch.len() - 1).rev() {
            let up = detector::conv_transpose(g, store, x, &Self::upsample_name(level), 2, 1)?;
            let up = g.relu(up);
            if g.shape(up) != g.shape(levels[level]) {
                return Err(Error::shape(
                    "merge_topdown",
                    g.shape(up),
                    g.shape(levels[level]),
                ));
            }
            let cat = g.concat_channels(up, levels[level])?;
            x = detector::conv_relu(g, store, cat, &Self::merge_name(level), 1, 1)?;
        }
        let x = detector::conv_transpose(g, store, x, &format!("{PREFIX}final_up1"), 2, 1)?;
        let x = g.relu(x);
        let x = detector::conv_transpose(g, store, x, &format!("{PREFIX}final_up2"), 2, 1)?;
        Ok(g.relu(x))
    }

    /// Two-channel logits (0 background, 1 foreground) from top features.
    pub fn semantic_head(&self, g: &mut Graph, store: &ParamStore, top: Var) -> Result<Var> {
        detector::conv(g, store, top, SEMANTIC_HEAD, 1, 0)
    }

    /// Full merge: pyramid to `1×2×H×W` logits.
    pub fn merge_topdown(&self, g: &mut Graph, store: &ParamStore, levels: &[Var]) -> Result<Var> {
        let top = self.top_features(g, store, levels)?;
        self.semantic_head(g, store, top)
    }

    /// Value-level [`Decoder::merge_topdown`].
    pub fn merge_topdown_values(&self, store: &ParamStore, pyramid: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let levels: Vec<Var> = pyramid.iter().map(|t| g.input(t.clone())).collect();
        let logits = self.merge_topdown(&mut g, store, &levels)?;
        Ok(g.value(logits).clone())
    }
}

/// Pixel targets for the semantic loss: the mask value inside the union of
/// `boxes` rasterized at image resolution, [`IGNORE`] outside.
pub fn semantic_targets(
    gt_mask: &[bool],
    boxes: &[BBox],
    h: usize,
    w: usize,
) -> Result<(Vec<i32>, usize)> {
    if gt_mask.len() != h * w {
        return Err(Error::shape("semantic_loss", &[gt_mask.len()], &[h, w]));
    }
    let inside = boxes_union_grid(boxes, h, w);
    let counted = inside.iter().filter(|&&v| v).count();
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "semantic loss needs a non-empty box union".into(),
        ));
    }
    let targets = inside
        .iter()
        .zip(gt_mask)
        .map(|(&inb, &m)| if inb { m as i32 } else { IGNORE })
        .collect();
    Ok((targets, counted))
}

/// Mean two-way cross-entropy over the pixels inside the box union.
pub fn semantic_loss(g: &mut Graph, logits: Var, gt_mask: &[bool], boxes: &[BBox]) -> Result<Var> {
    let [_, c, h, w] = g.value(logits).dims4()?;
    if c != 2 {
        return Err(Error::shape(
            "semantic_loss",
            g.shape(logits),
            &[1, 2, h, w],
        ));
    }
    let (targets, counted) = semantic_targets(gt_mask, boxes, h, w)?;
    g.softmax_cross_entropy(logits, targets, counted as f64)
}

/// Forward and backward of one (image, class) semantic training term:
/// backbone, attention with the ground-truth class boxes, decoder, loss.
/// Gradients reach only tensors marked trainable in `store`.
pub fn semantic_sample_loss(
    det: &Detector,
    dec: &Decoder,
    store: &ParamStore,
    image: &Tensor,
    class_mask: &[bool],
    class_boxes: &[BBox],
    weight: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let x = g.input(image.clone().with_requires_grad(false));
    let levels = det.backbone_vars(&mut g, store, x)?;
    let attended = attention::attend_vars(&mut g, &levels, class_boxes)?;
    let logits = dec.merge_topdown(&mut g, store, &attended)?;
    let loss = semantic_loss(&mut g, logits, class_mask, class_boxes)?;
    let value = g.value(loss).data()[0];
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// [`semantic_sample_loss`] starting from a precomputed pyramid, for a
/// frozen detector: gradients stop at the pyramid.
pub fn semantic_pyramid_loss(
    dec: &Decoder,
    store: &ParamStore,
    pyramid: &crate::detector::FeaturePyramid,
    class_mask: &[bool],
    class_boxes: &[BBox],
    weight: f32,
) -> Result<(f32, Gradients)> {
    let mut g = Graph::new();
    let levels: Vec<Var> = pyramid.maps.iter().map(|t| g.input(t.clone())).collect();
    let attended = attention::attend_vars(&mut g, &levels, class_boxes)?;
    let logits = dec.merge_topdown(&mut g, store, &attended)?;
    let loss = semantic_loss(&mut g, logits, class_mask, class_boxes)?;
    let value = g.value(loss).data()[0];
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// One SGD step on a single (image, class) pair.
#[allow(clippy::too_many_arguments)]
pub fn semantic_train_step(
    det: &Detector,
    dec: &Decoder,
    store: &mut ParamStore,
    image: &Tensor,
    class_mask: &[bool],
    class_boxes: &[BBox],
    lr: f32,
    momentum: f32,
) -> Result<f32> {
    let (loss, grads) = semantic_sample_loss(det, dec, store, image, class_mask, class_boxes, 1.0)?;
    grads.accumulate_into(store)?;
    store.sgd_momentum_step(lr, momentum)?;
    Ok(loss)
}

/// Foreground probability map of one class given its boxes; zero outside
/// the box union, where the loss never supervised the decoder.
pub fn class_foreground(
    dec: &Decoder,
    store: &ParamStore,
    pyramid: &crate::detector::FeaturePyramid,
    boxes: &[BBox],
) -> Result<Vec<f32>> {
    let attended = attention::attend(pyramid, boxes, 0)?;
    let logits = dec.merge_topdown_values(store, &attended.maps)?;
    let [_, _, h, w] = logits.dims4()?;
    let plane = h * w;
    let d = logits.data();
    let inside = boxes_union_grid(boxes, h, w);
    Ok((0..plane)
        .map(|p| {
            if !inside[p] {
                return 0.0;
            }
            let (b, f) = (d[p], d[plane + p]);
            let m = b.max(f);
            let (eb, ef) = ((b - m).exp(), (f - m).exp());
            ef / (eb + ef)
        })
        .collect())
}

/// Max rule over per-class foreground maps: a pixel takes the class of the
/// highest probability when that probability is `>= 0.5`, else background.
/// Ties go to the lower class id.
pub fn fuse_class_maps(maps: &[(usize, Vec<f32>)], pixels: usize) -> Vec<u8> {
    let mut best = vec![(0u8, 0.0f32); pixels];
    let mut sorted: Vec<&(usize, Vec<f32>)> = maps.iter().collect();
    sorted.sort_by_key(|(c, _)| *c);
    for (class, probs) in sorted {
        for (slot, &p) in best.iter_mut().zip(probs) {
            if p >= 0.5 && p > slot.1 {
                *slot = (*class as u8, p);
            }
        }
    }
    best.into_iter().map(|(c, _)| c).collect()
}

/// Semantic label map (`0` background, `1..=C` classes) from detected boxes.
pub fn semantic_infer(
    det: &Detector,
    dec: &Decoder,
    store: &ParamStore,
    image: &Tensor,
) -> Result<Vec<u8>> {
    let [_, _, h, w] = image.dims4()?;
    let pyramid = det.backbone_forward(store, image)?;
    let raw = det.head_forward(store, &pyramid)?;
    let detections = det.postprocess(&raw, &det.defaults_for(&pyramid)?);
    let mut maps = Vec::new();
    for class in 1..=det.cfg.classes {
        let boxes = attention::select_class_boxes(&detections, class);
        if boxes.is_empty() {
            continue;
        }
        maps.push((class, class_foreground(dec, store, &pyramid, &boxes)?));
    }
    Ok(fuse_class_maps(&maps, h * w))
}
