//! Which samples carry mask annotations: many boxes, few masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_total: usize,
    pub mask_fraction: f64,
    pub seed: u64,
}

impl SplitConfig {
    /// `ceil(mask_fraction · n_total)`, robust to the product landing a few
    /// ulps above an integer.
    pub fn mask_count(&self) -> Result<usize> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask fraction {} outside (0, 1]",
                self.mask_fraction
            )));
        }
        let x = self.mask_fraction * self.n_total as f64;
        let k = (x - 1e-9 * x.max(1.0)).ceil() as usize;
        if k == 0 {
            return Err(Error::InvalidArgument("split would flag no sample".into()));
        }
        Ok(k.min(self.n_total))
    }
}

/// Flags exactly [`SplitConfig::mask_count`] samples. `classes[i]` lists the
/// classes present in sample `i`. Samples are taken in seeded-shuffle order,
/// except that for each class `1..=num_classes` not yet covered the first
/// shuffled sample containing it is taken first.
pub fn make_split(
    cfg: &SplitConfig,
    classes: &[Vec<usize>],
    num_classes: usize,
) -> Result<Vec<bool>> {
    if classes.len() != cfg.n_total {
        return Err(Error::InvalidArgument(format!(
            "split over {} samples but {} class lists given",
            cfg.n_total,
            classes.len()
        )));
    }
    let k = cfg.mask_count()?;
    let missing: Vec<usize> = (1..=num_classes)
        .filter(|c| !classes.iter().any(|cl| cl.contains(c)))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "classes absent from corpus: {missing:?}"
        )));
    }
    let mut order: Vec<usize> = (0..cfg.n_total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let mut flags = vec![false; cfg.n_total];
    let mut covered = vec![false; num_classes + 1];
    let mut taken = 0;
    for c in 1..=num_classes {
        if covered[c] {
            continue;
        }
        let &i = order
            .iter()
            .find(|&&i| classes[i].contains(&c))
            .expect("class present");
        flags[i] = true;
        taken += 1;
        for &cc in &classes[i] {
            if cc <= num_classes {
                covered[cc] = true;
            }
        }
    }
    if taken > k {
        return Err(Error::Dataset(format!(
            "{k} mask-annotated samples cannot cover all {num_classes} classes"
        )));
    }
    for &i in &order {
        if taken == k {
            break;
        }
        if !flags[i] {
            flags[i] = true;
            taken += 1;
        }
    }
    Ok(flags)
}
