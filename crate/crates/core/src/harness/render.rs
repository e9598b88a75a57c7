//! PPM overlays of semantic label maps and instance predictions.

use std::path::Path;

use crate::data::netpbm::{self, Netpbm};
use crate::error::{Error, Result};
use crate::geometry::{box_to_cells, BBox};

const CLASS_COLORS: [[u8; 3]; 6] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
];

const INSTANCE_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn class_color(class: usize) -> [u8; 3] {
    CLASS_COLORS[(class.max(1) - 1) % CLASS_COLORS.len()]
}

/// A segmented instance to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayInstance {
    pub class: usize,
    pub bbox: BBox,
    pub mask: Vec<bool>,
}

fn blend(a: u8, b: u8) -> u8 {
    (a as u16 + b as u16).div_ceil(2) as u8
}

fn interleave(image: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    let n = w * h;
    if image.len() != 3 * n {
        return Err(Error::shape("render_overlay", &[image.len()], &[3, h, w]));
    }
    Ok((0..3 * n).map(|j| image[(j % 3) * n + j / 3]).collect())
}

fn ppm(w: usize, h: usize, data: Vec<u8>) -> Netpbm {
    Netpbm {
        width: w,
        height: h,
        channels: 3,
        maxval: 255,
        data,
    }
}

/// Blends each labeled pixel of a planar `3×H×W` image with its class color
/// at alpha 0.5; label 0 leaves the pixel unchanged.
pub fn render_semantic(image: &[u8], w: usize, h: usize, labels: &[u8]) -> Result<Netpbm> {
    let mut out = interleave(image, w, h)?;
    if labels.len() != w * h {
        return Err(Error::shape("render_overlay", &[labels.len()], &[h, w]));
    }
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            let c = class_color(l as usize);
            for k in 0..3 {
                out[3 * p + k] = blend(out[3 * p + k], c[k]);
            }
        }
    }
    Ok(ppm(w, h, out))
}

/// Blends each instance mask with a per-instance color at alpha 0.5, then
/// outlines its box in the class color.
pub fn render_instances(
    image: &[u8],
    w: usize,
    h: usize,
    instances: &[OverlayInstance],
) -> Result<Netpbm> {
    let mut out = interleave(image, w, h)?;
    for (i, inst) in instances.iter().enumerate() {
        if inst.mask.len() != w * h {
            return Err(Error::shape("render_overlay", &[inst.mask.len()], &[h, w]));
        }
        let c = INSTANCE_COLORS[i % INSTANCE_COLORS.len()];
        for (p, _) in inst.mask.iter().enumerate().filter(|(_, &m)| m) {
            for k in 0..3 {
                out[3 * p + k] = blend(out[3 * p + k], c[k]);
            }
        }
    }
    for inst in instances {
        let r = box_to_cells(&inst.bbox, h, w);
        let c = class_color(inst.class);
        for y in r.y_lo..=r.y_hi {
            for x in r.x_lo..=r.x_hi {
                if x == r.x_lo || x == r.x_hi || y == r.y_lo || y == r.y_hi {
                    out[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&c);
                }
            }
        }
    }
    Ok(ppm(w, h, out))
}

pub fn write_overlay(img: &Netpbm, path: &Path) -> Result<()> {
    netpbm::write(path, img)
}
