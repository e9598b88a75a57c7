//! Seeded scenes of filled disks, squares and triangles over noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

impl Shape {
    /// Shape drawn for class `c` (1-based); cycles when more classes than
    /// shapes are configured.
    pub fn for_class(c: usize) -> Shape {
        [Shape::Disk, Shape::Square, Shape::Triangle][(c - 1) % 3]
    }

    /// Whether the pixel center `(px, py)` lies inside the shape centered at
    /// `(cx, cy)` with extent `s`.
    fn contains(self, px: f32, py: f32, cx: f32, cy: f32, s: f32) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        let r = s / 2.0;
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            // apex up, base at cy + r; |dx| shrinks linearly to the apex
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub classes: usize,
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shape extent as a fraction of the image side.
    pub min_extent: f32,
    pub max_extent: f32,
    /// Uniform background noise amplitude in 8-bit levels.
    pub noise: u8,
    /// Base RGB color per class.
    pub palette: Vec<[u8; 3]>,
    /// Per-channel color jitter in 8-bit levels.
    pub color_jitter: u8,
    /// Minimum fraction of an earlier instance that must stay visible when
    /// a later one is drawn over it.
    pub min_visible: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            size: 64,
            min_instances: 1,
            max_instances: 4,
            min_extent: 0.2,
            max_extent: 0.45,
            noise: 40,
            palette: vec![
                [220, 60, 50],
                [60, 190, 70],
                [60, 90, 230],
                [220, 200, 40],
                [200, 60, 200],
            ],
            color_jitter: 25,
            min_visible: 0.6,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.classes == 0 || self.classes > self.palette.len() {
            return bad("class count must be in 1..=palette size");
        }
        if self.size < 8 {
            return bad("image size must be at least 8");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("instance range must be non-empty and start at 1 or more");
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent && self.max_extent <= 1.0)
        {
            return bad("extent range must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return bad("min_visible must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One object: class id in `1..=C`, tight box and binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub bbox: BBox,
    pub mask: Vec<bool>,
}

/// An image with its instances. Pixels are 8-bit, planar `3×H×W`; the
/// float view is `v / 255`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub instances: Vec<Instance>,
    pub has_mask_annotation: bool,
}

/// Tight normalized box of a mask, or `None` when the mask is empty.
pub fn tight_box(mask: &[bool], width: usize, height: usize, label: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0 != usize::MAX).then(|| BBox {
        x_min: x0 as f32 / width as f32,
        y_min: y0 as f32 / height as f32,
        x_max: (x1 + 1) as f32 / width as f32,
        y_max: (y1 + 1) as f32 / height as f32,
        label,
        score: None,
    })
}

impl SynthSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// `1×3×H×W` float view.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.image.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(vec![1, 3, self.height, self.width], data).expect("sample image shape")
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn boxes_of(&self, class: usize) -> Vec<BBox> {
        self.instances
            .iter()
            .filter(|i| i.class == class)
            .map(|i| i.bbox)
            .collect()
    }

    /// Sorted distinct classes present.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.instances.iter().map(|i| i.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Union of the masks of class `class`.
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        let mut m = vec![false; self.pixels()];
        for inst in self.instances.iter().filter(|i| i.class == class) {
            for (o, &v) in m.iter_mut().zip(&inst.mask) {
                *o |= v;
            }
        }
        m
    }

    /// Per-pixel class id, 0 for background.
    pub fn label_map(&self) -> Vec<u8> {
        let mut m = vec![0u8; self.pixels()];
        for inst in &self.instances {
            for (o, &v) in m.iter_mut().zip(&inst.mask) {
                if v {
                    *o = inst.class as u8;
                }
            }
        }
        m
    }

    /// Checks shapes, class range, non-overlap and tight boxes.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let n = self.pixels();
        if self.image.len() != 3 * n {
            return Err(Error::shape(
                "sample image",
                &[self.image.len()],
                &[3, self.height, self.width],
            ));
        }
        let mut owner = vec![false; n];
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.class == 0 || inst.class > classes {
                return Err(Error::Dataset(format!(
                    "instance {k}: class {} outside 1..={classes}",
                    inst.class
                )));
            }
            if inst.mask.len() != n {
                return Err(Error::shape(
                    "instance mask",
                    &[inst.mask.len()],
                    &[self.height, self.width],
                ));
            }
            for (o, &m) in owner.iter_mut().zip(&inst.mask) {
                if m && *o {
                    return Err(Error::Dataset(format!(
                        "instance {k}: mask overlaps an earlier instance"
                    )));
                }
                *o |= m;
            }
            let tight = tight_box(&inst.mask, self.width, self.height, inst.class)
                .ok_or_else(|| Error::Dataset(format!("instance {k}: empty mask")))?;
            if tight != inst.bbox {
                return Err(Error::Dataset(format!(
                    "instance {k}: box is not tight around its mask"
                )));
            }
        }
        Ok(())
    }

    /// Recomputes every box from its mask and drops instances whose mask
    /// became empty.
    pub(crate) fn retighten(&mut self) {
        let (w, h) = (self.width, self.height);
        self.instances
            .retain_mut(|inst| match tight_box(&inst.mask, w, h, inst.class) {
                Some(b) => {
                    inst.bbox = b;
                    true
                }
                None => false,
            });
    }
}

/// Per-sample seed for index `i` of a corpus seeded with `base`.
pub fn sample_seed(base: u64, i: usize) -> u64 {
    base ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn rasterize(shape: Shape, cx: f32, cy: f32, s: f32, w: usize, h: usize) -> Vec<bool> {
    let mut m = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            m[y * w + x] = shape.contains(x as f32 + 0.5, y as f32 + 0.5, cx, cy, s);
        }
    }
    m
}

/// Generates one sample; bit-identical for equal `(seed, cfg)`.
///
/// Shapes are drawn in order, later ones covering earlier ones. A placement
/// that would leave an earlier instance with less than `min_visible` of its
/// area is retried, up to 20 times, before the instance is skipped; the
/// first instance always fits, so the count never drops below one.
pub fn generate_sample(seed: u64, cfg: &DatasetConfig) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.size, cfg.size);
    let n = w * h;

    let base: [u8; 3] = [
        rng.gen_range(60..=150),
        rng.gen_range(60..=150),
        rng.gen_range(60..=150),
    ];
    let mut image = vec![0u8; 3 * n];
    for (c, &b) in base.iter().enumerate() {
        for v in &mut image[c * n..(c + 1) * n] {
            let d = rng.gen_range(-(cfg.noise as i32)..=cfg.noise as i32);
            *v = (b as i32 + d).clamp(0, 255) as u8;
        }
    }

    let count = rng.gen_range(cfg.min_instances..=cfg.max_instances);
    let mut instances: Vec<Instance> = Vec::new();
    let mut full_area: Vec<usize> = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(1..=cfg.classes);
        let shape = Shape::for_class(class);
        let color: [u8; 3] = std::array::from_fn(|c| {
            let j = rng.gen_range(-(cfg.color_jitter as i32)..=cfg.color_jitter as i32);
            (cfg.palette[class - 1][c] as i32 + j).clamp(0, 255) as u8
        });
        for _ in 0..20 {
            let s = rng.gen_range(cfg.min_extent..=cfg.max_extent) * w as f32;
            let cx = rng.gen_range(s / 2.0..=w as f32 - s / 2.0);
            let cy = rng.gen_range(s / 2.0..=h as f32 - s / 2.0);
            let mask = rasterize(shape, cx, cy, s, w, h);
            let area = mask.iter().filter(|&&m| m).count();
            if area == 0 {
                continue;
            }
            let fits = instances.iter().zip(&full_area).all(|(prev, &full)| {
                let left = prev
                    .mask
                    .iter()
                    .zip(&mask)
                    .filter(|(&p, &m)| p && !m)
                    .count();
                left as f32 >= cfg.min_visible * full as f32
            });
            if !fits {
                continue;
            }
            for prev in &mut instances {
                for (p, &m) in prev.mask.iter_mut().zip(&mask) {
                    *p &= !m;
                }
            }
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                for c in 0..3 {
                    image[c * n + i] = color[c];
                }
            }
            instances.push(Instance {
                class,
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0, class)?,
                mask,
            });
            full_area.push(area);
            break;
        }
    }
    let mut sample = SynthSample {
        width: w,
        height: h,
        image,
        instances,
        has_mask_annotation: true,
    };
    sample.retighten();
    Ok(sample)
}

/// `n` samples with per-sample seeds derived from `seed`.
pub fn generate_corpus(seed: u64, n: usize, cfg: &DatasetConfig) -> Result<Vec<SynthSample>> {
    (0..n)
        .map(|i| generate_sample(sample_seed(seed, i), cfg))
        .collect()
}
