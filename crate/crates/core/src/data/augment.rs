//! Training-time augmentation: noise, expand, crop and horizontal flip, each
//! applied independently with a configured probability.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::synth::SynthSample;
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub p_flip: f64,
    pub p_expand: f64,
    pub p_crop: f64,
    pub p_noise: f64,
    /// Largest canvas side relative to the image for expand.
    pub max_expand: f32,
    /// Smallest crop side relative to the image.
    pub min_crop: f32,
    pub crop_attempts: usize,
    /// Noise standard deviation in 8-bit levels.
    pub noise_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_expand: 0.5,
            p_crop: 0.5,
            p_noise: 0.5,
            max_expand: 1.6,
            min_crop: 0.6,
            crop_attempts: 20,
            noise_sigma: 8.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_flip: 0.0,
            p_expand: 0.0,
            p_crop: 0.0,
            p_noise: 0.0,
            ..Self::default()
        }
    }
}

/// Mirrors image and masks left to right.
pub fn flip_horizontal(s: &SynthSample) -> SynthSample {
    let (w, h) = (s.width, s.height);
    let mirror = |i: usize| (i / w) * w + (w - 1 - i % w);
    let mut out = s.clone();
    for c in 0..3 {
        for i in 0..w * h {
            out.image[c * w * h + i] = s.image[c * w * h + mirror(i)];
        }
    }
    for (o, inst) in out.instances.iter_mut().zip(&s.instances) {
        for i in 0..w * h {
            o.mask[i] = inst.mask[mirror(i)];
        }
    }
    out.retighten();
    out
}

/// Adds clamped Gaussian noise to the pixels only.
pub fn add_noise(s: &SynthSample, sigma: f32, rng: &mut impl Rng) -> SynthSample {
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    let mut out = s.clone();
    for v in &mut out.image {
        *v = (*v as f32 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Nearest-neighbor resample of the source window `[x0, x0+sw) × [y0, y0+sh)`
/// (which may extend past the source, filled with `fill`) to the full image
/// size.
fn resample(s: &SynthSample, x0: f32, y0: f32, sw: f32, sh: f32, fill: [u8; 3]) -> SynthSample {
    let (w, h) = (s.width, s.height);
    let src = |x: usize, y: usize| -> Option<usize> {
        let sx = (x0 + (x as f32 + 0.5) * sw / w as f32).floor();
        let sy = (y0 + (y as f32 + 0.5) * sh / h as f32).floor();
        (sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h)
            .then(|| sy as usize * w + sx as usize)
    };
    let mut out = s.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let from = src(x, y);
            for c in 0..3 {
                out.image[c * w * h + i] = from.map_or(fill[c], |j| s.image[c * w * h + j]);
            }
            for (o, inst) in out.instances.iter_mut().zip(&s.instances) {
                o.mask[i] = from.is_some_and(|j| inst.mask[j]);
            }
        }
    }
    out.retighten();
    out
}

fn mean_color(s: &SynthSample) -> [u8; 3] {
    let n = s.pixels();
    std::array::from_fn(|c| {
        let sum: u64 = s.image[c * n..(c + 1) * n].iter().map(|&v| v as u64).sum();
        (sum / n as u64) as u8
    })
}

/// Places the image on a larger mean-colored canvas and shrinks it back.
/// Returns the input when every instance would vanish.
pub fn expand(s: &SynthSample, max_ratio: f32, rng: &mut impl Rng) -> SynthSample {
    let ratio = rng.gen_range(1.0..=max_ratio.max(1.0));
    let (cw, ch) = (s.width as f32 * ratio, s.height as f32 * ratio);
    let left = rng.gen_range(0.0..=cw - s.width as f32);
    let top = rng.gen_range(0.0..=ch - s.height as f32);
    let out = resample(s, -left, -top, cw, ch, mean_color(s));
    if out.instances.is_empty() {
        s.clone()
    } else {
        out
    }
}

/// Crops a random window containing at least one instance center and
/// resizes it back. After `attempts` failures returns the input.
pub fn crop(s: &SynthSample, min_side: f32, attempts: usize, rng: &mut impl Rng) -> SynthSample {
    let (w, h) = (s.width as f32, s.height as f32);
    for _ in 0..attempts {
        let cw = rng.gen_range(min_side.min(1.0)..=1.0) * w;
        let ch = rng.gen_range(min_side.min(1.0)..=1.0) * h;
        let x0 = rng.gen_range(0.0..=w - cw);
        let y0 = rng.gen_range(0.0..=h - ch);
        let keeps_center = s.instances.iter().any(|inst| {
            let (cx, cy) = inst.bbox.center();
            let (cx, cy) = (cx * w, cy * h);
            cx >= x0 && cx < x0 + cw && cy >= y0 && cy < y0 + ch
        });
        if !keeps_center {
            continue;
        }
        let out = resample(s, x0, y0, cw, ch, [0, 0, 0]);
        if !out.instances.is_empty() {
            return out;
        }
    }
    s.clone()
}

/// Photometric noise, expand, crop, then flip, each with its probability.
pub fn augment(s: &SynthSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> SynthSample {
    let mut out = s.clone();
    if rng.gen_bool(cfg.p_noise) {
        out = add_noise(&out, cfg.noise_sigma, rng);
    }
    if rng.gen_bool(cfg.p_expand) {
        out = expand(&out, cfg.max_expand, rng);
    }
    if rng.gen_bool(cfg.p_crop) {
        out = crop(&out, cfg.min_crop, cfg.crop_attempts, rng);
    }
    if rng.gen_bool(cfg.p_flip) {
        out = flip_horizontal(&out);
    }
    out
}

/// Sorted indices of a random nonempty subset of `0..n`: the size is
/// uniform in `1..=n`, then the members are uniform. Empty for `n == 0`.
pub fn random_subset_indices(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = rng.gen_range(1..=n);
    let mut idx = sample_indices(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// [`random_subset_indices`] applied to `boxes`, keeping input order.
pub fn random_box_subset(boxes: &[BBox], rng: &mut impl Rng) -> Vec<BBox> {
    random_subset_indices(boxes.len(), rng)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
