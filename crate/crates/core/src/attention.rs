//! Box attention: class-specific feature pyramids by zeroing every feature
//! vector outside the union of a class's boxes, at every scale.

use crate::autodiff::{Graph, Var};
use crate::detector::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::{boxes_union_grid, BBox};
use crate::tensor::Tensor;

/// Per-scale binary grid of kept cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellMask {
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
}

impl CellMask {
    pub fn for_boxes(boxes: &[BBox], height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: boxes_union_grid(boxes, height, width),
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Output of [`attend`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpecificPyramid {
    pub maps: Vec<Tensor>,
    pub label: usize,
    pub masks: Vec<CellMask>,
}

/// Members of `detections` labeled `label`, in input order.
pub fn select_class_boxes(detections: &[BBox], label: usize) -> Vec<BBox> {
    detections
        .iter()
        .filter(|b| b.label == label)
        .copied()
        .collect()
}

/// Zeroes the cells of `planes` consecutive `H×W` planes where `keep` is false.
pub(crate) fn apply_cell_mask(data: &mut [f32], planes: usize, keep: &[bool]) {
    let plane = keep.len();
    for p in 0..planes {
        for (v, &k) in data[p * plane..(p + 1) * plane].iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

pub(crate) fn attend_backward_raw(grad_out: &[f32], planes: usize, keep: &[bool]) -> Vec<f32> {
    let mut g = grad_out.to_vec();
    apply_cell_mask(&mut g, planes, keep);
    g
}

fn planes_of(t: &Tensor, mask: &CellMask) -> Result<usize> {
    let [n, c, h, w] = t.dims4()?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::shape(
            "attention",
            t.shape(),
            &[mask.height, mask.width],
        ));
    }
    Ok(n * c)
}

/// Class-specific pyramid: a cell keeps its feature vector iff it lies in
/// the union of the rasterized `boxes`; empty `boxes` gives all zeros.
/// Kept values are copied bit-exactly.
pub fn attend(
    pyramid: &FeaturePyramid,
    boxes: &[BBox],
    label: usize,
) -> Result<ClassSpecificPyramid> {
    let mut maps = Vec::with_capacity(pyramid.maps.len());
    let mut masks = Vec::with_capacity(pyramid.maps.len());
    for f in &pyramid.maps {
        let [_, _, h, w] = f.dims4()?;
        let mask = CellMask::for_boxes(boxes, h, w);
        let mut out = f.clone();
        let planes = planes_of(f, &mask)?;
        apply_cell_mask(out.data_mut(), planes, &mask.keep);
        maps.push(out);
        masks.push(mask);
    }
    Ok(ClassSpecificPyramid { maps, label, masks })
}

/// Backward of [`attend`]: gradients pass through kept cells unchanged and
/// are zero elsewhere.
pub fn attend_backward(grad_out: &[Tensor], masks: &[CellMask]) -> Result<Vec<Tensor>> {
    if grad_out.len() != masks.len() {
        return Err(Error::shape(
            "attend_backward",
            &[grad_out.len()],
            &[masks.len()],
        ));
    }
    grad_out
        .iter()
        .zip(masks)
        .map(|(g, m)| {
            let planes = planes_of(g, m)?;
            Tensor::new(
                g.shape().to_vec(),
                attend_backward_raw(g.data(), planes, &m.keep),
            )
        })
        .collect()
}

/// Recorded version of [`attend`] for use inside a training graph.
pub fn attend_vars(g: &mut Graph, pyramid: &[Var], boxes: &[BBox]) -> Result<Vec<Var>> {
    pyramid
        .iter()
        .map(|&f| {
            let [_, _, h, w] = g.value(f).dims4()?;
            g.mask_cells(f, boxes_union_grid(boxes, h, w))
        })
        .collect()
}
