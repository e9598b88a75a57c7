//! Randomized properties of the evaluation metrics.

use dasnet::harness::eval::{eval_map_r, eval_miou, GtMask, ScoredMask};
use proptest::prelude::*;

const PIXELS: usize = 16;
const CLASSES: usize = 2;

fn mask() -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), PIXELS)
}

fn image() -> impl Strategy<Value = (Vec<ScoredMask>, Vec<GtMask>)> {
    let pred = (1..=CLASSES, 0.0f32..1.0, mask()).prop_map(|(class, score, mask)| ScoredMask {
        class,
        score,
        mask,
    });
    let gt = (1..=CLASSES, mask()).prop_map(|(class, mask)| GtMask { class, mask });
    (
        proptest::collection::vec(pred, 0..5),
        proptest::collection::vec(gt, 0..4),
    )
}

proptest! {
    #[test]
    fn map_never_rises_with_threshold(
        images in proptest::collection::vec(image(), 1..4),
        t in 0.05f64..0.95,
        dt in 0.0f64..0.5,
    ) {
        let (preds, gts): (Vec<_>, Vec<_>) = images.into_iter().unzip();
        let r = eval_map_r(&preds, &gts, CLASSES, &[t, (t + dt).min(0.99)]).unwrap();
        prop_assert!(r[1].map <= r[0].map, "{} > {}", r[1].map, r[0].map);
        for (lo, hi) in r[0].per_class.iter().zip(&r[1].per_class) {
            prop_assert_eq!(lo.is_some(), hi.is_some());
            if let (Some(lo), Some(hi)) = (lo, hi) {
                prop_assert!(hi <= lo);
                prop_assert!((0.0..=1.0).contains(lo));
            }
        }
    }

    #[test]
    fn map_ignores_prediction_order_within_image(
        images in proptest::collection::vec(image(), 1..4),
    ) {
        let (preds, gts): (Vec<_>, Vec<_>) = images.into_iter().unzip();
        // Distinct scores make the ranking independent of input order.
        let mut preds = preds;
        let mut k = 0.0f32;
        for p in preds.iter_mut().flatten() {
            k += 1.0;
            p.score = k / 100.0;
        }
        let reversed: Vec<Vec<ScoredMask>> = preds.iter().map(|p| p.iter().rev().cloned().collect()).collect();
        let a = eval_map_r(&preds, &gts, CLASSES, &[0.5]).unwrap();
        let b = eval_map_r(&reversed, &gts, CLASSES, &[0.5]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn miou_bounded_and_perfect_on_identity(
        labels in proptest::collection::vec(proptest::collection::vec(0u8..=CLASSES as u8, PIXELS), 1..4),
        other in proptest::collection::vec(proptest::collection::vec(0u8..=CLASSES as u8, PIXELS), 1..4),
    ) {
        let same = eval_miou(&labels, &labels, CLASSES).unwrap();
        for v in same.per_class.iter().flatten() {
            prop_assert_eq!(*v, 1.0);
        }
        let n = labels.len().min(other.len());
        let r = eval_miou(&other[..n], &labels[..n], CLASSES).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean));
        for v in r.per_class.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
