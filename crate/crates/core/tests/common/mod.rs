//! Shared oracles and helpers for the integration suites.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use dasnet::BBox;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A valid box with sides in `[min_side, 1]`, coordinates on a 1/64 lattice
/// half of the time so rasterization edge cases show up.
pub fn random_box(rng: &mut impl Rng, min_side: f32, label: usize) -> BBox {
    loop {
        let snap = rng.gen_bool(0.5);
        let mut v = [0f32; 4];
        for x in v.iter_mut() {
            *x = rng.gen_range(0.0..=1.0);
            if snap {
                *x = (*x * 64.0).round() / 64.0;
            }
        }
        let (x0, x1) = (v[0].min(v[1]), v[0].max(v[1]));
        let (y0, y1) = (v[2].min(v[3]), v[2].max(v[3]));
        if x1 - x0 >= min_side && y1 - y0 >= min_side {
            return BBox::new(x0, y0, x1, y1, label).expect("valid by construction");
        }
    }
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}
